"""Desk-scale reproductions of the evaluation analyses."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import contact
from .contact import FrictionLaw
from .dataset import law_to_cond
from .metrics import EvalReport, bootstrap_ci, smape
from .neural.model import infer, reconstruct
from .params import PARAM_NAMES, BoundsTable, GmmParams, PhysicalConstants, mid_bounds_theta, postprocess


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


@dataclass
class SensitivityTable:
    values: np.ndarray  # (23, len(n_list)) functional sMAPE in percent
    n_list: tuple
    perturbation: float
    names: tuple = tuple(PARAM_NAMES)
    errors: dict = field(default_factory=dict)

    def column(self, n):
        return self.values[:, self.n_list.index(n)]

    def to_json(self, path):
        Path(path).write_text(json.dumps({
            "n_list": list(self.n_list), "perturbation": self.perturbation,
            "names": list(self.names), "values": self.values.tolist(), "errors": self.errors}, indent=2))

    def to_csv(self, path):
        _write_csv(path, ["parameter", "n", "functional_smape"],
                   [[name, n, self.values[i, j]] for i, name in enumerate(self.names)
                    for j, n in enumerate(self.n_list)])


def sensitivity(theta0: GmmParams | None = None, n_list=(100, 1500, 10000), perturbation=0.05,
                constants: PhysicalConstants | None = None, seed=0, bounds=None,
                common_random_numbers=True) -> SensitivityTable:
    """One-at-a-time relative perturbation of each parameter.

    Baseline and perturbed laws share one asperity seed unless
    ``common_random_numbers`` is False, in which case each perturbed law
    gets its own seed and the cells include resampling noise.
    """
    theta0 = theta0 or mid_bounds_theta(bounds)
    theta0.check()
    bounds = bounds or BoundsTable()
    v0 = theta0.to_vector()
    out = np.zeros((len(v0), len(n_list)))
    errors = {}
    for j, n in enumerate(n_list):
        sim_seed = contact.derive_seed(seed, n)
        base = contact.simulate_law(theta0, n, constants, sim_seed)
        for i in range(len(v0)):
            v = v0.copy()
            v[i] += perturbation * abs(v[i])
            try:
                s = sim_seed if common_random_numbers else contact.derive_seed(seed, n, i + 1)
                law = contact.simulate_law(postprocess(v, bounds), n, constants, s)
                out[i, j] = smape(base.f_values, law.f_values)
            except (contact.SamplingExhaustedError, contact.DegenerateLawError) as exc:
                out[i, j] = np.nan
                errors[f"{PARAM_NAMES[i]}@{n}"] = str(exc)
    return SensitivityTable(out, tuple(n_list), perturbation, errors=errors)


def averaging_effect(n_list=(100, 1500, 10000), count=50, noise=0.05, seed=0,
                     constants: PhysicalConstants | None = None, bounds=None,
                     common_random_numbers=True):
    """Functional sMAPE under fixed relative parameter noise for random theta.

    Returns the (count, len(n_list)) sMAPE matrix and one-sided sign-test
    p-values for "larger error at the smaller N" between consecutive columns
    and between the first and last column.
    """
    from .dataset import recipes
    bounds = bounds or BoundsTable()
    rng = np.random.default_rng(seed)
    thetas = recipes(1000 + seed * count, count, bounds)
    table = np.zeros((count, len(n_list)))
    for k, v in enumerate(thetas):
        noisy = postprocess(v * (1.0 + noise * rng.standard_normal(v.size)), bounds)
        for j, n in enumerate(n_list):
            s = contact.derive_seed(seed, k, n)
            a = contact.simulate_law(GmmParams.from_vector(v), n, constants, s)
            if not common_random_numbers:
                s = contact.derive_seed(seed, k, n, 1)
            b = contact.simulate_law(noisy, n, constants, s)
            table[k, j] = smape(a.f_values, b.f_values)
    pairs = [(j, j + 1) for j in range(len(n_list) - 1)] + [(0, len(n_list) - 1)]
    pvalues = {}
    for a, b in pairs:
        diff = table[:, a] - table[:, b]
        diff = diff[diff != 0]
        wins = int((diff > 0).sum())
        pvalues[f"{n_list[a]}>{n_list[b]}"] = float(
            stats.binomtest(wins, diff.size, 0.5, alternative="greater").pvalue) if diff.size else 1.0
    return table, pvalues


@dataclass
class RegimeHeatmap:
    n_bins: np.ndarray       # asperity counts (columns)
    f_edges: np.ndarray      # mean-friction bin edges (len = rows + 1)
    mean_smape: np.ndarray   # (rows, columns), NaN where empty
    counts: np.ndarray       # (rows, columns)

    def to_json(self, path):
        Path(path).write_text(json.dumps({
            "n_bins": self.n_bins.tolist(), "f_edges": self.f_edges.tolist(),
            "mean_smape": [[None if np.isnan(x) else x for x in row] for row in self.mean_smape],
            "counts": self.counts.tolist()}, indent=2))

    def to_csv(self, path):
        rows = []
        for i in range(self.counts.shape[0]):
            for j, n in enumerate(self.n_bins):
                rows.append([n, self.f_edges[i], self.f_edges[i + 1], self.counts[i, j],
                             "" if np.isnan(self.mean_smape[i, j]) else self.mean_smape[i, j]])
        _write_csv(path, ["n", "f_lo", "f_hi", "count", "mean_smape"], rows)


def regime_heatmap(records, n_bins=None, f_bins=10) -> RegimeHeatmap:
    """Bin (n, mean F, sMAPE) records by asperity count and mean-friction quantiles."""
    rec = np.asarray(records, dtype=float).reshape(-1, 3)
    if rec.shape[0] == 0:
        raise ValueError("regime_heatmap needs at least one record")
    n, f, s = rec.T
    n_bins = np.unique(n) if n_bins is None else np.asarray(sorted(n_bins), dtype=float)
    col = np.searchsorted(n_bins, n)
    if np.any(col >= n_bins.size) or np.any(n_bins[np.minimum(col, n_bins.size - 1)] != n):
        raise ValueError("record asperity count not in n_bins")
    edges = np.quantile(f, np.linspace(0, 1, f_bins + 1))
    row = np.clip(np.searchsorted(edges, f, side="right") - 1, 0, f_bins - 1)
    counts = np.zeros((f_bins, n_bins.size), dtype=int)
    sums = np.zeros((f_bins, n_bins.size))
    np.add.at(counts, (row, col), 1)
    np.add.at(sums, (row, col), s)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return RegimeHeatmap(n_bins, edges, mean, counts)


def _simulate_many(thetas, n, constants, seed, grid):
    laws = np.empty((len(thetas), len(grid)))
    for k, v in enumerate(thetas):
        laws[k] = contact.simulate_law(GmmParams.from_vector(v), n, constants,
                                       contact.derive_seed(seed, k), grid=grid).f_values
    return laws


def latent_convergence(checkpoint, target: FrictionLaw, scaler, max_m, seed=0, n=None,
                       constants=None, bounds=None):
    """Running mean of functional sMAPE over ``max_m`` latent draws."""
    n = target.asperity_count if n is None else n
    cond = scaler.scale_inputs(law_to_cond(target, n))
    thetas = infer(checkpoint, cond, max_m, seed, scaler, bounds)
    laws = _simulate_many(thetas, n, constants, seed + 1, target.p_grid)
    values = smape(np.broadcast_to(target.f_values, laws.shape), laws, axis=1)
    return np.cumsum(values) / np.arange(1, max_m + 1), values


def uncertainty_envelope(checkpoint, target: FrictionLaw, scaler, m, seed=0, n=None,
                         constants=None, bounds=None):
    """Pointwise mean and standard deviation of ``m`` inferred friction laws."""
    n = target.asperity_count if n is None else n
    cond = scaler.scale_inputs(law_to_cond(target, n))
    thetas = infer(checkpoint, cond, m, seed, scaler, bounds)
    laws = _simulate_many(thetas, n, constants, seed + 1, target.p_grid)
    return laws.mean(axis=0), laws.std(axis=0), laws


def correlation_matrix(X, Y=None):
    """Pearson correlations; NaN marks columns with zero variance.

    With ``Y`` the rectangle corr(X[:, i], Y[:, j]) is returned.
    """
    X = np.asarray(X, dtype=float)
    Y = X if Y is None else np.asarray(Y, dtype=float)
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    sx = np.sqrt((Xc ** 2).sum(axis=0))
    sy = np.sqrt((Yc ** 2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (Xc.T @ Yc) / np.outer(sx, sy)
    r[sx == 0, :] = np.nan
    r[:, sy == 0] = np.nan
    r = np.clip(r, -1.0, 1.0)
    if Y is X:
        ok = sx > 0
        r[ok, ok] = 1.0
    return r


def eval_report(checkpoint, data, scaler, seed=0, functional=False, functional_samples=200,
                constants=None, bounds=None, p=129, csv_path=None):
    """Parameter-level metrics on a scaled split, optional functional pass.

    Parameter predictions are eval-mode reconstructions (z = mu), unscaled
    and post-processed. The functional pass draws one prior sample per law
    from a conditional model and forward-simulates it.
    """
    if len(data) == 0:
        raise ValueError("empty evaluation split")
    bounds = bounds or BoundsTable()
    cond = data.cond if checkpoint.model.spec.conditional else None
    recon = reconstruct(checkpoint, data.x, cond)
    from .params import postprocess_batch
    theta_hat = postprocess_batch(scaler.unscale_targets(recon), bounds)
    per_sample = smape(data.theta.astype(float), theta_hat, axis=1)
    report = EvalReport.from_predictions(per_sample, data.x.astype(float),
                                         scaler.scale_targets(theta_hat), p=p)
    rows = None
    if functional:
        spec = checkpoint.spec
        if not spec.conditional or spec.is_regressor:
            report.notes.append("functional pass skipped: needs a conditional VAE")
        else:
            rng = np.random.default_rng(seed)
            idx = np.sort(rng.choice(len(data), size=min(functional_samples, len(data)), replace=False))
            records, fs = functional_records(checkpoint, data, scaler, idx, seed, constants, bounds)
            report.functional_smape_mean = float(np.mean(fs))
            report.functional_ci = bootstrap_ci(fs, 1000, 0.95, seed)
            rows = records
    if csv_path:
        fmap = {} if rows is None else {int(r[0]): r[3] for r in rows}
        phys_cond = scaler.unscale_inputs(data.cond) if data.cond is not None else None
        _write_csv(csv_path, ["index", "n", "mean_f", "param_smape", "functional_smape"],
                   [[i, "" if phys_cond is None else round(phys_cond[i, -1]),
                     "" if phys_cond is None else phys_cond[i, :-1].mean(),
                     per_sample[i], fmap.get(i, "")] for i in range(len(data))])
    return report, per_sample


def functional_records(checkpoint, data, scaler, idx, seed=0, constants=None, bounds=None):
    """Rows (index, n, mean F, functional sMAPE) for one CVAE draw per selected sample."""
    grid = contact.p_grid()
    phys = scaler.unscale_inputs(data.cond[idx].astype(float))
    rows, fs = [], []
    for k, i in enumerate(idx):
        n = int(round(phys[k, -1]))
        target = data_law(data, scaler, i)
        theta = infer(checkpoint, data.cond[i], 1, contact.derive_seed(seed, i), scaler, bounds)[0]
        law = contact.simulate_law(GmmParams.from_vector(theta), n, constants,
                                   contact.derive_seed(seed, i, 1), grid=grid)
        s = float(smape(target.f_values, law.f_values))
        rows.append((int(i), n, float(target.f_values.mean()), s))
        fs.append(s)
    return rows, np.asarray(fs)


def data_law(data, scaler, i):
    """Physical friction law of sample ``i`` of a scaled split."""
    phys = scaler.unscale_inputs(data.cond[i].astype(float))
    return FrictionLaw(contact.p_grid(), np.maximum(phys[:-1], 0.0), int(round(phys[-1])))
