"""Batch command line front end.

Subcommands: standardize, stratify, simulate, fit, compare, predict, diagnose.
Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .data import PanelError, RawScoreTable, read_panel_csv
from .diagnostics import diagnostics
from .mcmc import SamplerConfig, ml_prior_means, run_chains
from .model import FAMILIES, VARIANTS, ModelSpec
from .sampling import assign_strata, dalenius_hodges_boundaries, describe_strata, retain_panel, stratified_sample
from .selection import comparison_table, format_comparison, predictive_summary, replicate, score_model
from .simulate import SimulationScenario, simulate_panel
from .standardize import standardize_scores

log = logging.getLogger("hdbeta")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_standardize(args) -> None:
    src = _existing(args.scores)
    out = io.prepare_out_dir(args.out, args.force)
    start = time.perf_counter()
    frame = pd.read_csv(src, dtype={"school_id": str}, float_precision="round_trip")
    for col in ("level", "year", args.score_column):
        if col not in frame.columns:
            raise PanelError(f"missing column {col!r} in {src}")
    lev_codes, lev_labels = pd.factorize(frame["level"], sort=True)
    yr_codes, yr_labels = pd.factorize(frame["year"], sort=True)
    raw = RawScoreTable(
        frame[args.score_column].to_numpy(dtype=float), lev_codes, np.zeros(len(frame), dtype=int), yr_codes, args.smax
    )
    y, summary = standardize_scores(raw)
    frame[args.response_column] = y
    io.write_csv(frame, out / "responses.csv")
    groups = []
    for g in summary.groups:
        d = g.to_dict()
        d["level"], d["year"] = lev_labels[g.level], yr_labels[g.year]
        groups.append(d)
    io.write_json(out / "summary.json", {"schema_version": io.SCHEMA_VERSION, "s_max": summary.s_max, "groups": groups})
    io.write_json(out / io.MANIFEST_FILE, io.build_manifest(
        "standardize", inputs={"scores": src}, config={"s_max": args.smax, "score_column": args.score_column},
        seed=None, wall_time=time.perf_counter() - start, outputs=["responses.csv", "summary.json"],
    ))


def cmd_stratify(args) -> None:
    src = _existing(args.population)
    out = io.prepare_out_dir(args.out, args.force)
    start = time.perf_counter()
    pop = pd.read_csv(src, dtype={args.unit_column: str}, float_precision="round_trip")
    needed = [args.unit_column, args.variable] + list(args.group_by)
    if args.certainty_column:
        needed.append(args.certainty_column)
    missing = [c for c in needed if c not in pop.columns]
    if missing:
        raise PanelError(f"missing population column(s) {missing} in {src}")
    cert = pop[args.certainty_column].astype(bool).to_numpy() if args.certainty_column else np.zeros(len(pop), bool)
    values = pop[args.variable].to_numpy(dtype=float)
    boundaries = dalenius_hodges_boundaries(values[~cert], args.strata, bins=args.bins)
    band = assign_strata(values, boundaries)
    labels = ["certainty" if c else "|".join([*(str(pop[g].iloc[k]) for g in args.group_by), f"band{band[k] + 1}"])
              for k, c in enumerate(cert)]
    pop = pop.assign(stratum=labels, certainty=cert)
    chosen = stratified_sample(pop[args.unit_column].tolist(), labels, cert, args.fraction, args.seed)
    if args.participation:
        part = pd.read_csv(_existing(args.participation), dtype={args.unit_column: str})
        years = [int(y) for y in args.years.split(",")] if args.years else sorted(part["year"].unique().tolist())
        table = part.groupby(args.unit_column)["year"].apply(lambda s: set(int(v) for v in s)).to_dict()
        chosen = retain_panel(chosen, table, years)
    sample = pop[pop[args.unit_column].isin(set(chosen))]
    io.write_csv(sample, out / "sample.csv")
    definition = describe_strata(values[~cert], boundaries)
    counts = pop.groupby("stratum").size()
    picked = sample.groupby("stratum").size().reindex(counts.index, fill_value=0)
    report = {
        "schema_version": io.SCHEMA_VERSION,
        "variable": args.variable,
        "dalenius_hodges": definition.to_dict(),
        "strata": [{"stratum": s, "N_h": int(counts[s]), "n_h": int(picked[s])} for s in counts.index],
        "certainty_units": int(cert.sum()),
        "selected": int(len(sample)),
    }
    io.write_json(out / "strata.json", report)
    config = {k: getattr(args, k) for k in ("variable", "strata", "bins", "group_by", "certainty_column", "fraction", "years")}
    inputs = {"population": src}
    if args.participation:
        inputs["participation"] = Path(args.participation)
    io.write_json(out / io.MANIFEST_FILE, io.build_manifest(
        "stratify", inputs=inputs, config=config, seed=args.seed,
        wall_time=time.perf_counter() - start, outputs=["sample.csv", "strata.json"],
    ))


def cmd_simulate(args) -> None:
    out = io.prepare_out_dir(args.out, args.force)
    start = time.perf_counter()
    inputs = {}
    d = {}
    if args.scenario:
        inputs["scenario"] = _existing(args.scenario)
        d = io.read_json(args.scenario)
    if args.seed is not None:
        d["seed"] = args.seed
    scenario = SimulationScenario.from_dict(d)
    table, truth = simulate_panel(scenario)
    io.write_csv(table.to_frame(), out / "panel.csv")
    spec = scenario.model_spec()
    io.write_json(out / "truth.json", {
        "schema_version": io.SCHEMA_VERSION,
        "variant": scenario.variant,
        "parameters": dict(zip(truth.names(spec), truth.flatten().tolist())),
    })
    io.write_json(out / "scenario.json", {"schema_version": io.SCHEMA_VERSION, **scenario.to_dict()})
    io.write_json(out / io.SPEC_FILE, spec.to_dict())
    io.write_json(out / io.MANIFEST_FILE, io.build_manifest(
        "simulate", inputs=inputs, config=scenario.to_dict(), seed=scenario.seed,
        wall_time=time.perf_counter() - start,
        outputs=["panel.csv", "truth.json", "scenario.json", io.SPEC_FILE],
    ))


def cmd_fit(args) -> None:
    data = _existing(args.data)
    spec_path = _existing(args.spec)
    spec = ModelSpec.from_dict(io.read_json(spec_path))
    if args.model:
        spec = spec.with_variant(args.model)
    if args.family:
        spec = ModelSpec.from_dict({**spec.to_dict(), "family": args.family})
    sampler = {}
    inputs = {"data": data, "spec": spec_path}
    if args.sampler:
        inputs["sampler"] = _existing(args.sampler)
        sampler = io.read_json(args.sampler)
    for key in ("iterations", "burn_in", "thin", "chains"):
        if getattr(args, key) is not None:
            sampler[key] = getattr(args, key)
    if args.warm_start:
        sampler["warm_start"] = True
    seed = args.seed if args.seed is not None else sampler.get("seed", spec.seed if spec.seed is not None else 0)
    sampler["seed"] = int(seed)
    config = SamplerConfig.from_dict(sampler)
    table = read_panel_csv(data, spec)
    if args.ml_prior:
        spec = ml_prior_means(table, spec)
    out = io.prepare_out_dir(args.out, args.force)
    start = time.perf_counter()
    outputs = run_chains(table, spec, config, workers=args.workers)
    shutil.copyfile(data, out / io.DATA_FILE)
    io.write_csv(io.chains_frame(outputs), out / io.CHAINS_FILE)
    io.write_json(out / io.SPEC_FILE, {**spec.to_dict(), "seed": config.seed})
    io.write_json(out / io.SAMPLER_FILE, {"schema_version": io.SCHEMA_VERSION, **config.to_dict()})
    meta = io.chain_metadata(outputs)
    io.write_json(out / io.MANIFEST_FILE, io.build_manifest(
        "fit", inputs=inputs, config={"model": spec.to_dict(), "sampler": config.to_dict()}, seed=config.seed,
        wall_time=time.perf_counter() - start,
        outputs=[io.CHAINS_FILE, io.SPEC_FILE, io.SAMPLER_FILE, io.DATA_FILE],
        extra={"label": args.label or spec.variant, **meta},
    ))


def cmd_compare(args) -> None:
    runs = [io.Run(_existing(p)) for p in args.runs]
    start = time.perf_counter()
    reports = []
    for run in runs:
        seed = args.seed if args.seed is not None else run.seed
        reports += score_model(run.chains, run.table, run.spec, label=run.label, reps_per_draw=args.reps, seed=seed)
    df = comparison_table(reports)
    text = format_comparison(df)
    print(text)
    if args.out:
        out = io.prepare_out_dir(args.out, args.force)
        io.write_csv(df, out / "comparison.csv")
        (out / "comparison.txt").write_text(text + "\n", encoding="utf-8")
        io.write_json(out / io.MANIFEST_FILE, io.build_manifest(
            "compare", inputs={f"run{k}": r.path / io.CHAINS_FILE for k, r in enumerate(runs)},
            config={"reps": args.reps, "runs": [str(r.path) for r in runs]}, seed=args.seed,
            wall_time=time.perf_counter() - start, outputs=["comparison.csv", "comparison.txt"],
        ))


def cmd_predict(args) -> None:
    run = io.Run(_existing(args.run))
    out = io.prepare_out_dir(args.out, args.force)
    start = time.perf_counter()
    seed = args.seed if args.seed is not None else run.seed
    store = replicate(run.chains, run.table, run.spec, args.reps, seed)
    summary = predictive_summary(store, run.table.y)
    io.write_csv(summary.to_frame(run.table), out / "predictive.csv")
    io.write_json(out / io.MANIFEST_FILE, io.build_manifest(
        "predict", inputs={"chains": run.path / io.CHAINS_FILE}, config={"reps": args.reps, "run": str(run.path)},
        seed=seed, wall_time=time.perf_counter() - start, outputs=["predictive.csv"],
    ))


def cmd_diagnose(args) -> None:
    run = io.Run(_existing(args.run))
    out = io.prepare_out_dir(args.out, args.force)
    start = time.perf_counter()
    report = diagnostics(run.chains)
    io.write_csv(report, out / "diagnostics.csv")
    io.write_json(out / io.MANIFEST_FILE, io.build_manifest(
        "diagnose", inputs={"chains": run.path / io.CHAINS_FILE}, config={"run": str(run.path)},
        seed=None, wall_time=time.perf_counter() - start, outputs=["diagnostics.csv"],
    ))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hdbeta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory (created if absent)")
        p.add_argument("--force", action="store_true", help="overwrite an existing manifest")

    p = sub.add_parser("standardize", help="map raw scores to (0,1) responses")
    p.add_argument("--scores", required=True)
    p.add_argument("--score-column", default="score")
    p.add_argument("--response-column", default="y")
    p.add_argument("--smax", type=float, default=120.0)
    common(p)
    p.set_defaults(func=cmd_standardize)

    p = sub.add_parser("stratify", help="stratified sample with cum-sqrt(f) boundaries")
    p.add_argument("--population", required=True)
    p.add_argument("--unit-column", default="unit_id")
    p.add_argument("--variable", required=True, help="continuous stratification variable")
    p.add_argument("--strata", type=int, default=5)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--group-by", nargs="*", default=[], help="categorical stratification columns")
    p.add_argument("--certainty-column", default=None)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--participation", default=None, help="CSV of (unit_id, year) participation records")
    p.add_argument("--years", default=None, help="comma-separated years a unit must cover")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_stratify)

    p = sub.add_parser("simulate", help="simulate a panel from the generative model")
    p.add_argument("--scenario", default=None)
    p.add_argument("--seed", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the MCMC sampler")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--sampler", default=None)
    p.add_argument("--model", choices=VARIANTS, default=None)
    p.add_argument("--family", choices=FAMILIES, default=None)
    p.add_argument("--label", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--chains", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--warm-start", action="store_true")
    p.add_argument("--ml-prior", action="store_true", help="set variance prior means from per-cell ML fits")
    p.add_argument("--seed", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="DIC / RPS / LogS table over fitted runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--reps", type=int, default=1, help="replicates per stored draw and stream")
    p.add_argument("--seed", type=int, default=None)
    common(p, out_required=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("predict", help="posterior predictive summary per school and year")
    p.add_argument("run")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose", help="ESS, Geweke and PSRF per parameter")
    p.add_argument("run")
    common(p)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            raise UsageError("hdbeta: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, FileExistsError, PanelError, ValueError, KeyError) as exc:
        print(f"hdbeta {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"hdbeta {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
