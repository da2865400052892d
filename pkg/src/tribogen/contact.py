"""Greenwood-Williamson style forward model on a GMM asperity population.

Internally lengths are in um and stresses in MPa, so forces come out in uN
(1 MPa * 1 um^2 = 1 uN). Conversion to newtons happens at the
``FrictionLaw`` boundary and in the public force functions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import integrate

from .params import GmmParams, ParameterError, PhysicalConstants

UN_TO_N = 1e-6
DEFAULT_RETRY_BUDGET = 1_000_000
MIN_ACCEPTANCE = 1e-3


class DegenerateLawError(ValueError):
    """The force sweep has fewer than two distinct normal-force knots."""


class SamplingExhaustedError(RuntimeError):
    """Almost all mixture mass lies outside the absolute asperity bounds."""


class QuadratureError(ArithmeticError):
    """Numerical integration did not reach the requested tolerance."""


def delta_grid(n_points=256, start=0.001, stop=300.0):
    """Indentation knots in um (linear spacing)."""
    return np.linspace(start, stop, n_points)


def p_grid(n_points=128, start=0.01, stop=2.0):
    """Normal-force knots in N (linear spacing)."""
    return np.linspace(start, stop, n_points)


@dataclass(frozen=True)
class AsperityPopulation:
    heights: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        h = np.array(self.heights, dtype=float)
        r = np.array(self.radii, dtype=float)
        if h.ndim != 1 or h.shape != r.shape:
            raise ValueError("heights and radii must be 1-D arrays of equal length")
        h.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "radii", r)

    @property
    def count(self):
        return self.heights.size

    def __len__(self):
        return self.count

    def concat(self, other: AsperityPopulation) -> AsperityPopulation:
        return AsperityPopulation(np.concatenate([self.heights, other.heights]),
                                  np.concatenate([self.radii, other.radii]))


@dataclass(frozen=True)
class FrictionLaw:
    p_grid: np.ndarray
    f_values: np.ndarray
    asperity_count: int
    extrapolated: bool = False

    def __post_init__(self):
        p = np.array(self.p_grid, dtype=float)
        f = np.array(self.f_values, dtype=float)
        if p.shape != f.shape or p.ndim != 1:
            raise ValueError("p_grid and f_values must be 1-D and equally long")
        p.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "p_grid", p)
        object.__setattr__(self, "f_values", f)
        object.__setattr__(self, "asperity_count", int(self.asperity_count))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["P", "F"])
            for p, f in zip(self.p_grid, self.f_values):
                writer.writerow([repr(float(p)), repr(float(f))])

    @classmethod
    def from_csv(cls, path, asperity_count=0, grid=None):
        """Load a ``P,F`` table (newtons). With ``grid`` the law is resampled onto it."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"P", "F"} <= set(rows[0]):
            raise ValueError(f"{path}: expected a header row with P and F columns")
        p = np.array([float(r["P"]) for r in rows])
        f = np.array([float(r["F"]) for r in rows])
        if grid is None:
            return cls(p, f, asperity_count)
        return extract_friction_law(p, f, grid, asperity_count=asperity_count)


def _seeded_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


def derive_seed(*keys) -> int:
    """Mix integer keys into one 64-bit seed (order-independent generation)."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def gmm_pdf(theta: GmmParams, h, R):
    """Mixture density at (h, R) in 1/um^2; broadcasts over h and R."""
    theta.check()
    h = np.asarray(h, dtype=float)
    R = np.asarray(R, dtype=float)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(R))):
        raise ParameterError("gmm_pdf: non-finite evaluation point")
    out = np.zeros(np.broadcast(h, R).shape)
    for wk, mh, mr, sh, sr, rho in zip(theta.weights, theta.mu_h, theta.mu_r,
                                       theta.sigma_h, theta.sigma_r, theta.rho):
        if wk == 0.0:
            continue
        zh = (h - mh) / sh
        zr = (R - mr) / sr
        one_m = 1.0 - rho * rho
        q = (zh * zh - 2.0 * rho * zh * zr + zr * zr) / one_m
        out = out + wk * np.exp(-0.5 * q) / (2.0 * np.pi * sh * sr * np.sqrt(one_m))
    return out


def sample_asperities(theta: GmmParams, n: int, constants: PhysicalConstants | None = None,
                      seed=0, retry_budget=DEFAULT_RETRY_BUDGET) -> AsperityPopulation:
    """Draw ``n`` (h, R) pairs from the mixture truncated to the absolute bounds.

    Out-of-bounds draws are rejected and redrawn (component included), so
    the result follows the mixture restricted to the bounds box.
    """
    constants = constants or PhysicalConstants()
    theta.check()
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _seeded_rng(seed)
    weights = theta.weights
    weights = weights / weights.sum()
    chol_off = theta.rho * theta.sigma_r
    chol_diag = np.sqrt(1.0 - theta.rho ** 2) * theta.sigma_r
    h_lo, h_hi = constants.h_bounds
    r_lo, r_hi = constants.r_bounds

    budget = max(retry_budget, int(n / MIN_ACCEPTANCE))
    hs, rs = [], []
    filled = drawn = 0
    while filled < n:
        if drawn >= budget:
            raise SamplingExhaustedError(
                f"accepted {filled}/{n} asperities after {drawn} draws")
        m = min(budget - drawn, max(16, int(1.1 * (n - filled)) + 8))
        k = rng.choice(4, size=m, p=weights)
        z = rng.standard_normal((m, 2))
        h = theta.mu_h[k] + theta.sigma_h[k] * z[:, 0]
        r = theta.mu_r[k] + chol_off[k] * z[:, 0] + chol_diag[k] * z[:, 1]
        ok = (h >= h_lo) & (h <= h_hi) & (r >= r_lo) & (r <= r_hi)
        drawn += m
        h, r = h[ok], r[ok]
        take = min(h.size, n - filled)
        hs.append(h[:take])
        rs.append(r[:take])
        filled += take
    return AsperityPopulation(np.concatenate(hs), np.concatenate(rs))


def normal_force(pop: AsperityPopulation, delta, e_star=PhysicalConstants.e_star):
    """Total Hertzian normal force in N at indentation ``delta`` (um)."""
    if not np.isfinite(delta) or delta < 0:
        raise ValueError("delta must be finite and non-negative")
    gap = np.maximum(0.0, pop.heights - delta)
    return float(np.sum(4.0 / 3.0 * e_star * np.sqrt(pop.radii) * gap * np.sqrt(gap))) * UN_TO_N


def friction_force(pop: AsperityPopulation, delta, sigma_s=PhysicalConstants.sigma_s,
                   b_ratio=PhysicalConstants.b_ratio):
    """Total friction force in N at indentation ``delta`` (um)."""
    if not np.isfinite(delta) or delta < 0:
        raise ValueError("delta must be finite and non-negative")
    gap = np.maximum(0.0, pop.heights - delta)
    return float(np.sum(sigma_s * b_ratio * np.pi * pop.radii * gap)) * UN_TO_N


@njit(cache=True)
def _sweep_kernel(h_desc, coef_p, coef_f, deltas, out_p, out_f, lo, p_stop):
    # Fills knots from the deepest (largest delta) down to ``lo``; stops after the
    # first knot whose normal force reaches ``p_stop``. Returns the lowest filled index.
    j = deltas.size - 1
    while j >= lo:
        d = deltas[j]
        p = 0.0
        f = 0.0
        for i in range(h_desc.size):
            x = h_desc[i] - d
            if x <= 0.0:
                break
            p += coef_p[i] * x * np.sqrt(x)
            f += coef_f[i] * x
        out_p[j] = p
        out_f[j] = f
        if p >= p_stop:
            return j
        j -= 1
    return lo


def _prepared(pop: AsperityPopulation, constants: PhysicalConstants):
    order = np.argsort(-pop.heights, kind="stable")
    r = pop.radii[order]
    coef_p = (4.0 / 3.0 * constants.e_star * UN_TO_N) * np.sqrt(r)
    coef_f = (constants.sigma_s * constants.b_ratio * np.pi * UN_TO_N) * r
    return np.ascontiguousarray(pop.heights[order]), coef_p, coef_f


def force_sweep(pop: AsperityPopulation, deltas, constants: PhysicalConstants | None = None):
    """P(delta) and F(delta) in N over an increasing indentation grid."""
    constants = constants or PhysicalConstants()
    deltas = np.ascontiguousarray(deltas, dtype=float)
    if deltas.size == 0:
        raise ValueError("empty indentation grid")
    if np.any(np.diff(deltas) <= 0):
        raise ValueError("indentation grid must be strictly increasing")
    if deltas[0] < 0:
        raise ValueError("indentations must be non-negative")
    h, cp, cf = _prepared(pop, constants)
    out_p = np.zeros(deltas.size)
    out_f = np.zeros(deltas.size)
    _sweep_kernel(h, cp, cf, deltas, out_p, out_f, 0, np.inf)
    return out_p, out_f


def extract_friction_law(p_of_delta, f_of_delta, grid, asperity_count=0) -> FrictionLaw:
    """Resample paired (P, F) knots onto a normal-force grid.

    Knots are sorted by P (stable, so the smallest-delta copy of a repeated P
    is kept), interpolated linearly, and extrapolated linearly from the two
    end knots outside the simulated range. The result is clamped at zero.
    """
    p = np.asarray(p_of_delta, dtype=float)
    f = np.asarray(f_of_delta, dtype=float)
    grid = np.asarray(grid, dtype=float)
    order = np.argsort(p, kind="stable")
    p, f = p[order], f[order]
    p, first = np.unique(p, return_index=True)
    f = f[first]
    if p.size < 2:
        raise DegenerateLawError("fewer than two distinct normal-force knots")
    values = np.interp(grid, p, f)
    above = grid > p[-1]
    below = grid < p[0]
    if above.any():
        slope = (f[-1] - f[-2]) / (p[-1] - p[-2])
        values[above] = f[-1] + slope * (grid[above] - p[-1])
    if below.any():
        slope = (f[1] - f[0]) / (p[1] - p[0])
        values[below] = f[0] + slope * (grid[below] - p[0])
    np.maximum(values, 0.0, out=values)
    return FrictionLaw(grid, values, asperity_count, bool(above.any() or below.any()))


def law_from_population(pop: AsperityPopulation, constants: PhysicalConstants | None = None,
                        deltas=None, grid=None) -> FrictionLaw:
    """Same result as ``extract_friction_law(*force_sweep(...))`` but only
    evaluates the indentation knots that the grid can reach."""
    constants = constants or PhysicalConstants()
    deltas = delta_grid() if deltas is None else np.ascontiguousarray(deltas, dtype=float)
    grid = p_grid() if grid is None else np.asarray(grid, dtype=float)
    h, cp, cf = _prepared(pop, constants)
    out_p = np.zeros(deltas.size)
    out_f = np.zeros(deltas.size)
    lo = _sweep_kernel(h, cp, cf, deltas, out_p, out_f, 0, float(grid.max()))
    return extract_friction_law(out_p[lo:], out_f[lo:], grid, asperity_count=pop.count)


def simulate_law(theta: GmmParams, n: int, constants: PhysicalConstants | None = None,
                 seed=0, deltas=None, grid=None) -> FrictionLaw:
    """Sample a population of ``n`` asperities and return its friction law."""
    constants = constants or PhysicalConstants()
    pop = sample_asperities(theta, n, constants, seed)
    return law_from_population(pop, constants, deltas, grid)


def theoretical_forces(theta: GmmParams, n, delta, constants: PhysicalConstants | None = None,
                       epsrel=1e-7):
    """Expected (P, F) in N for ``n`` asperities from the truncated mixture.

    The integrals run over the absolute bounds box with h > delta and are
    normalised by the mixture mass inside the box, which is the density the
    rejection sampler draws from.
    """
    constants = constants or PhysicalConstants()
    theta.check()
    h_lo, h_hi = constants.h_bounds
    r_lo, r_hi = constants.r_bounds
    if delta >= h_hi:
        return 0.0, 0.0

    def pdf(R, h):
        return gmm_pdf(theta, h, R)

    def integrate2(func, a):
        total = err = 0.0
        # split at component means so quadrature sees each bump
        for lo, hi in _h_pieces(theta, a, h_hi):
            val, e = integrate.dblquad(func, lo, hi, r_lo, r_hi, epsabs=0.0, epsrel=epsrel)
            total += val
            err += e
        return total, err

    mass, mass_err = integrate2(pdf, h_lo)
    gap_lo = max(delta, h_lo)
    ip, ip_err = integrate2(
        lambda R, h: np.sqrt(R) * (h - delta) ** 1.5 * pdf(R, h), gap_lo)
    jf, jf_err = integrate2(lambda R, h: R * (h - delta) * pdf(R, h), gap_lo)
    for val, e in ((mass, mass_err), (ip, ip_err), (jf, jf_err)):
        if val > 0 and e > 1e3 * epsrel * abs(val):
            raise QuadratureError(f"quadrature error {e:.3g} too large for value {val:.3g}")
    if mass <= 0:
        raise QuadratureError("no mixture mass inside the asperity bounds")
    p = n * 4.0 / 3.0 * constants.e_star * ip / mass * UN_TO_N
    f = n * constants.sigma_s * constants.b_ratio * np.pi * jf / mass * UN_TO_N
    return float(p), float(f)


def _h_pieces(theta, a, b):
    cuts = sorted({float(np.clip(m, a, b)) for m in theta.mu_h} | {a, b})
    return [(lo, hi) for lo, hi in zip(cuts[:-1], cuts[1:]) if hi > lo]
