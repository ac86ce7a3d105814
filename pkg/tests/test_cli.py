import json

import pandas as pd
import pytest

from hdbeta.cli import main

SCENARIO = {"n_levels": 2, "n_years": 3, "schools_per_level": 15, "seed": 4}
SAMPLER = {"iterations": 300, "burn_in": 100, "thin": 5, "chains": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scenario.json").write_text(json.dumps(SCENARIO))
    (root / "sampler.json").write_text(json.dumps(SAMPLER))
    assert main(["-q", "simulate", "--scenario", str(root / "scenario.json"), "--out", str(root / "sim")]) == 0
    for model in ("M1", "M5"):
        argv = ["-q", "fit", "--model", model, "--data", str(root / "sim" / "panel.csv"),
                "--spec", str(root / "sim" / "model_spec.json"), "--sampler", str(root / "sampler.json"),
                "--out", str(root / "runs" / model)]
        assert main(argv) == 0
    return root


def test_simulate_outputs(workspace):
    sim = workspace / "sim"
    assert {p.name for p in sim.iterdir()} == {"panel.csv", "truth.json", "scenario.json", "model_spec.json", "manifest.json"}
    truth = json.loads((sim / "truth.json").read_text())
    assert truth["variant"] == "M5" and "alpha[t=1,m=0]" in truth["parameters"]
    panel = pd.read_csv(sim / "panel.csv")
    assert len(panel) == 2 * 3 * 15


def test_fit_outputs(workspace):
    run = workspace / "runs" / "M5"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["subcommand"] == "fit" and manifest["label"] == "M5"
    assert set(manifest["inputs"]) == {"data", "spec", "sampler"}
    assert len(manifest["chains"]) == 2
    chains = pd.read_csv(run / "chains.csv")
    assert len(chains) == 2 * 40


def test_compare_table(workspace, capsys):
    out = workspace / "cmp"
    assert main(["-q", "compare", str(workspace / "runs" / "M1"), str(workspace / "runs" / "M5"), "--out", str(out)]) == 0
    table = pd.read_csv(out / "comparison.csv")
    assert table["Model"].tolist() == ["M1", "M5"]
    assert list(table.columns[:7]) == ["Model", "scale", "D_bar", "p_D", "DIC", "RPS", "LogS"]
    assert "Model" in capsys.readouterr().out


def test_predict_and_diagnose(workspace):
    run = str(workspace / "runs" / "M5")
    assert main(["-q", "predict", run, "--out", str(workspace / "pred")]) == 0
    pred = pd.read_csv(workspace / "pred" / "predictive.csv")
    assert {"school_id", "pred_q025", "pred_q975", "outside_95"} <= set(pred.columns)
    assert main(["-q", "diagnose", run, "--out", str(workspace / "diag")]) == 0
    diag = pd.read_csv(workspace / "diag" / "diagnostics.csv")
    assert {"ess", "geweke_z", "psrf"} <= set(diag.columns)


def test_standardize(tmp_path):
    rows = [{"level": lev, "year": yr, "school_id": f"s{j}", "score": float(10 * j + lev)}
            for lev in (1, 2) for yr in (2010, 2011) for j in range(5)]
    pd.DataFrame(rows).to_csv(tmp_path / "raw.csv", index=False)
    assert main(["-q", "standardize", "--scores", str(tmp_path / "raw.csv"), "--out", str(tmp_path / "o")]) == 0
    out = pd.read_csv(tmp_path / "o" / "responses.csv")
    assert (out["y"] - out["score"] / 120).abs().max() < 1e-12
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert [(g["level"], g["year"]) for g in summary["groups"]] == [(1, 2010), (1, 2011), (2, 2010), (2, 2011)]


def test_stratify(tmp_path):
    n = 200
    pop = pd.DataFrame({
        "unit_id": [f"u{k:03d}" for k in range(n)],
        "hdi": [(k * 37 % n) / n for k in range(n)],
        "federal": [int(k % 25 == 0) for k in range(n)],
    })
    pop.to_csv(tmp_path / "pop.csv", index=False)
    argv = ["-q", "stratify", "--population", str(tmp_path / "pop.csv"), "--variable", "hdi", "--certainty-column",
            "federal", "--fraction", "0.2", "--seed", "1", "--out", str(tmp_path / "s")]
    assert main(argv) == 0
    sample = pd.read_csv(tmp_path / "s" / "sample.csv")
    report = json.loads((tmp_path / "s" / "strata.json").read_text())
    assert sample["federal"].sum() == 8
    assert len(report["dalenius_hodges"]["boundaries"]) == 4
    assert sum(s["N_h"] for s in report["strata"]) == n


def test_missing_input_names_path(tmp_path, capsys):
    code = main(["fit", "--data", str(tmp_path / "nope.csv"), "--spec", "x.json", "--out", str(tmp_path / "o")])
    assert code == 1
    assert "nope.csv" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["fit", "--bogus"], ["fit", "--model", "M9"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_refuses_to_overwrite(workspace, capsys):
    argv = ["-q", "simulate", "--scenario", str(workspace / "scenario.json"), "--out", str(workspace / "sim")]
    assert main(argv) == 1
    assert "--force" in capsys.readouterr().err
    assert main(argv + ["--force"]) == 0


def test_runtime_failure_exit_code(tmp_path, monkeypatch):
    import hdbeta.cli as cli

    def boom(*a, **k):
        raise RuntimeError("sampler exploded")

    monkeypatch.setattr(cli, "simulate_panel", boom)
    assert main(["-q", "simulate", "--out", str(tmp_path / "x")]) == 2


def test_invalid_panel_exit_code(tmp_path):
    pd.DataFrame({"level": [1], "school_id": ["a"], "year": [1], "y": [1.5]}).to_csv(tmp_path / "p.csv", index=False)
    (tmp_path / "spec.json").write_text(json.dumps({"variant": "M2"}))
    argv = ["-q", "fit", "--data", str(tmp_path / "p.csv"), "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "o")]
    assert main(argv) == 1
