"""Convergence diagnostics: effective sample size, Geweke z-scores and the
potential scale reduction factor."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import pandas as pd

__all__ = ["autocorrelation", "diagnostics", "effective_sample_size", "geweke", "psrf"]


def autocorrelation(x) -> np.ndarray:
    """Sample autocorrelation at all lags (FFT, biased estimator)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    c = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(c, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    if acov[0] <= 0:
        return np.full(n, np.nan)
    return acov / acov[0]


def _ips_tau(x) -> float:
    """Integrated autocorrelation time, Geyer's initial positive sequence."""
    rho = autocorrelation(x)
    if np.isnan(rho[0]):
        return np.nan
    n = rho.size
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return tau


def effective_sample_size(x) -> float | None:
    """ESS = n / tau; ``None`` for a constant chain (degenerate)."""
    x = np.asarray(x, dtype=float)
    if x.size < 4 or np.ptp(x) == 0:
        return None
    tau = _ips_tau(x)
    if not np.isfinite(tau) or tau <= 0:
        return None
    return float(x.size / tau)


def _mean_variance(x) -> float:
    ess = effective_sample_size(x)
    if ess is None:
        return 0.0
    return float(np.var(x) / ess)


def geweke(x, first: float = 0.1, last: float = 0.5) -> float | None:
    """z-score comparing the means of the first 10% and last 50% of a chain."""
    x = np.asarray(x, dtype=float)
    n = x.size
    a = x[: int(first * n)]
    b = x[n - int(last * n):]
    se2 = _mean_variance(a) + _mean_variance(b)
    if se2 <= 0:
        return None
    return float((a.mean() - b.mean()) / np.sqrt(se2))


def psrf(chains: Sequence) -> float | None:
    """Gelman-Rubin potential scale reduction over equal-length chains."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        return None
    m, n = x.shape
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    if W <= 0:
        return None
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def diagnostics(outputs) -> pd.DataFrame:
    """One row per scalar parameter (plus the deviance).

    Columns: ``ess`` (summed over chains), ``geweke_z`` (first chain),
    ``psrf`` (when at least two chains), ``degenerate`` (constant chain).
    """
    if not isinstance(outputs, (list, tuple)):
        outputs = [outputs]
    if len(outputs[0]) < 10:
        raise ValueError("need at least 10 stored draws for diagnostics")
    names = list(outputs[0].names) + ["deviance"]
    rows = []
    for k, name in enumerate(names):
        series = [o.deviances if name == "deviance" else o.samples[:, k] for o in outputs]
        ess = [effective_sample_size(s) for s in series]
        degenerate = any(e is None for e in ess)
        L = min(len(s) for s in series)
        rows.append({
            "parameter": name,
            "mean": float(np.mean(np.concatenate(series))),
            "sd": float(np.std(np.concatenate(series))),
            "ess": None if degenerate else float(sum(ess)),
            "geweke_z": geweke(series[0]),
            "psrf": psrf([s[:L] for s in series]) if len(series) > 1 else None,
            "degenerate": degenerate,
        })
    return pd.DataFrame(rows)
