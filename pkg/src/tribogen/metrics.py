"""Error metrics for parameter- and law-level evaluation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import contact
from .contact import FrictionLaw
from .params import GmmParams, PhysicalConstants

SMAPE_EPS = 1e-12


def smape(y, y_hat, axis=-1):
    """Symmetric MAPE in percent, range [0, 200]; averages over ``axis``."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("smape of empty input")
    terms = 2.0 * np.abs(y - y_hat) / (np.abs(y) + np.abs(y_hat) + SMAPE_EPS)
    return 100.0 * terms.mean(axis=axis)


def adjusted_r2(Y, Y_hat, p=129, return_notes=False):
    """Uniformly averaged adjusted R^2 over target columns.

    Columns with zero variance are skipped (listed in the notes).
    """
    Y = np.asarray(Y, dtype=float)
    Y_hat = np.asarray(Y_hat, dtype=float)
    if Y.ndim == 1:
        Y, Y_hat = Y[:, None], Y_hat[:, None]
    n = Y.shape[0]
    if n < p + 2:
        raise ValueError(f"adjusted R^2 needs at least p+2={p + 2} samples, got {n}")
    sse = ((Y - Y_hat) ** 2).sum(axis=0)
    sst = ((Y - Y.mean(axis=0)) ** 2).sum(axis=0)
    keep = sst > 0
    notes = [f"target {i} has zero variance; skipped" for i in np.flatnonzero(~keep)]
    if not keep.any():
        raise ValueError("all targets have zero variance")
    r2 = 1.0 - sse[keep] / sst[keep]
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - p - 1)
    score = float(adj.mean())
    return (score, notes) if return_notes else score


def wasserstein_1d(a, b):
    """First Wasserstein distance between two empirical 1-D samples."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs non-empty samples")
    return float(stats.wasserstein_distance(a, b))


def mean_wasserstein(A, B):
    """Average of column-wise 1-D distances (the caller passes scaled space)."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    return float(np.mean([wasserstein_1d(A[:, j], B[:, j]) for j in range(A.shape[1])]))


def bootstrap_ci(values, resamples=1000, level=0.95, seed=0, chunk=256):
    """Percentile bootstrap interval for the mean."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("bootstrap_ci of empty input")
    rng = np.random.default_rng(seed)
    means = np.empty(resamples)
    for s in range(0, resamples, chunk):
        k = min(chunk, resamples - s)
        idx = rng.integers(0, values.size, size=(k, values.size))
        means[s:s + k] = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def functional_smape(target: FrictionLaw, theta_hat: GmmParams, n=None,
                     constants: PhysicalConstants | None = None, seed=0):
    """sMAPE between a target law and the law simulated from ``theta_hat``."""
    n = target.asperity_count if n is None else n
    law = contact.simulate_law(theta_hat, n, constants, seed, grid=target.p_grid)
    return float(smape(target.f_values, law.f_values))


@dataclass
class EvalReport:
    smape_p25: float
    smape_median: float
    smape_mean: float
    smape_p75: float
    smape_p99: float
    adjusted_r2: float
    wasserstein: float
    count: int
    functional_smape_mean: float | None = None
    functional_ci: tuple | None = None
    notes: list = field(default_factory=list)

    COLUMNS = ("smape_p25", "smape_median", "smape_mean", "smape_p75", "smape_p99",
               "adjusted_r2", "wasserstein")

    @classmethod
    def from_predictions(cls, per_sample_smape, Y_scaled, Y_hat_scaled, Y=None, Y_hat=None, p=129):
        s = np.asarray(per_sample_smape, dtype=float)
        p25, med, p75, p99 = np.percentile(s, [25, 50, 75, 99])
        Y = Y_scaled if Y is None else Y
        Y_hat = Y_hat_scaled if Y_hat is None else Y_hat
        try:
            r2, notes = adjusted_r2(Y, Y_hat, p=p, return_notes=True)
        except ValueError as exc:
            r2, notes = math.nan, [str(exc)]
        return cls(float(p25), float(med), float(s.mean()), float(p75), float(p99),
                   r2, mean_wasserstein(Y_scaled, Y_hat_scaled), int(s.size), notes=notes)

    def to_dict(self):
        d = asdict(self)
        if d["functional_ci"] is not None:
            d["functional_ci"] = list(d["functional_ci"])
        return d

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            w.writerow([getattr(self, c) for c in self.COLUMNS])
