"""Reading and writing chains, run directories and manifests."""
from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import ObservationTable, read_panel_csv
from .mcmc import ChainOutput, SamplerConfig
from .model import ModelSpec

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"

CHAINS_FILE = "chains.csv"
MANIFEST_FILE = "manifest.json"
SPEC_FILE = "model_spec.json"
SAMPLER_FILE = "sampler.json"
DATA_FILE = "data.csv"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(_plain(obj), sort_keys=True).encode("utf-8")).hexdigest()


def write_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def prepare_out_dir(out, force: bool) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if (out / MANIFEST_FILE).exists() and not force:
        raise FileExistsError(f"{out / MANIFEST_FILE} exists; pass --force to overwrite")
    return out


def build_manifest(subcommand: str, *, inputs: dict, config: dict, seed, wall_time: float, outputs=(), extra=None) -> dict:
    m = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "version": __version__,
        "python": platform.python_version(),
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in inputs.items()},
        "config": config,
        "config_sha256": sha256_json(config),
        "outputs": list(outputs),
        "wall_time_seconds": wall_time,
    }
    if extra:
        m.update(extra)
    return m


# ---------------------------------------------------------------------------
# chains


def chains_frame(outputs: list[ChainOutput]) -> pd.DataFrame:
    frames = []
    for o in outputs:
        df = pd.DataFrame(o.samples, columns=o.names)
        df.insert(0, "deviance", o.deviances)
        df.insert(0, "log_likelihood", o.log_likelihoods)
        df.insert(0, "draw", np.arange(1, len(o) + 1))
        df.insert(0, "chain", o.chain)
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def chain_metadata(outputs: list[ChainOutput]) -> dict:
    return {
        "layout": [[name, list(shape)] for name, shape in outputs[0].layout],
        "chains": [
            {
                "chain": o.chain,
                "stored_draws": len(o),
                "acceptance_rates": {k: v for k, v in o.acceptance_rates.items()},
                "final_scales": {k: v for k, v in o.tuning.items()},
                "wall_time_seconds": o.wall_time,
            }
            for o in outputs
        ],
    }


def read_chains(path, layout, config: SamplerConfig | None = None) -> list[ChainOutput]:
    df = pd.read_csv(path, float_precision="round_trip")
    names = [c for c in df.columns if c not in ("chain", "draw", "log_likelihood", "deviance")]
    layout = [(name, tuple(shape)) for name, shape in layout]
    outs = []
    for c, part in df.groupby("chain", sort=True):
        outs.append(ChainOutput(
            names=names,
            layout=layout,
            samples=part[names].to_numpy(dtype=float),
            log_likelihoods=part["log_likelihood"].to_numpy(dtype=float),
            deviances=part["deviance"].to_numpy(dtype=float),
            acceptance_rates={},
            tuning={},
            chain=int(c),
            config=config,
        ))
    return outs


class Run:
    """A fitted run directory: spec, sampler config, data copy and chains."""

    def __init__(self, path):
        self.path = Path(path)
        if not (self.path / MANIFEST_FILE).exists():
            raise FileNotFoundError(f"no run manifest in {self.path}")
        self.manifest = read_json(self.path / MANIFEST_FILE)
        self.spec = ModelSpec.from_dict(read_json(self.path / SPEC_FILE))
        self.sampler = SamplerConfig.from_dict(read_json(self.path / SAMPLER_FILE))
        self._table = None
        self._chains = None

    @property
    def label(self) -> str:
        lab = self.manifest.get("label") or self.spec.variant
        return lab if self.spec.family == "beta" else f"{lab}-normal"

    @property
    def seed(self) -> int:
        return int(self.manifest.get("seed") or 0)

    @property
    def table(self) -> ObservationTable:
        if self._table is None:
            self._table = read_panel_csv(self.path / DATA_FILE, self.spec)
        return self._table

    @property
    def chains(self) -> list[ChainOutput]:
        if self._chains is None:
            self._chains = read_chains(self.path / CHAINS_FILE, self.manifest["layout"], self.sampler)
        return self._chains
