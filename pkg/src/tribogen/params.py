"""GMM topography parameters, physical constants and parameter-space bounds.

The 23-vector layout follows the dataset tables::

    [w1, w2, w3,
     mu_h1, mu_R1, ..., mu_h4, mu_R4,
     sigma_h1, sigma_R1, ..., sigma_h4, sigma_R4,
     rho1, ..., rho4]
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_COMPONENTS = 4
N_PARAMS = 23

PARAM_NAMES = (
    ["w1", "w2", "w3"]
    + [f"mu_{q}{k}" for k in range(1, 5) for q in ("h", "R")]
    + [f"sigma_{q}{k}" for k in range(1, 5) for q in ("h", "R")]
    + [f"rho{k}" for k in range(1, 5)]
)

WEIGHT_SLICE = slice(0, 3)
MU_H_IDX = np.arange(3, 11, 2)
MU_R_IDX = np.arange(4, 11, 2)
SIGMA_H_IDX = np.arange(11, 19, 2)
SIGMA_R_IDX = np.arange(12, 19, 2)
RHO_IDX = np.arange(19, 23)


class ParameterError(ValueError):
    """Invalid topography parameters or bounds."""


@dataclass(frozen=True)
class PhysicalConstants:
    """Material constants (MPa) and absolute asperity bounds (um)."""

    e_star: float = 1.36
    sigma_s: float = 0.40
    b_ratio: float = 0.85
    h_bounds: tuple = (0.0, 300.0)
    r_bounds: tuple = (10.0, 600.0)

    def __post_init__(self):
        if not self.e_star > 0 or not self.sigma_s > 0:
            raise ParameterError("e_star and sigma_s must be positive")
        if not 0 < self.b_ratio <= 1:
            raise ParameterError("b_ratio must lie in (0, 1]")
        for lo, hi in (self.h_bounds, self.r_bounds):
            if not 0 <= lo < hi:
                raise ParameterError(f"invalid interval ({lo}, {hi})")
        object.__setattr__(self, "h_bounds", tuple(float(v) for v in self.h_bounds))
        object.__setattr__(self, "r_bounds", tuple(float(v) for v in self.r_bounds))

    def to_dict(self):
        return {"e_star": self.e_star, "sigma_s": self.sigma_s, "b_ratio": self.b_ratio,
                "h_bounds": list(self.h_bounds), "r_bounds": list(self.r_bounds)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _default_lower_upper():
    lower = np.empty(N_PARAMS)
    upper = np.empty(N_PARAMS)
    lower[WEIGHT_SLICE], upper[WEIGHT_SLICE] = 0.0, 1.0
    lower[MU_H_IDX], upper[MU_H_IDX] = 50.0, 250.0
    lower[MU_R_IDX], upper[MU_R_IDX] = 50.0, 500.0
    lower[SIGMA_H_IDX], upper[SIGMA_H_IDX] = 10.0, 80.0
    lower[SIGMA_R_IDX], upper[SIGMA_R_IDX] = 10.0, 100.0
    lower[RHO_IDX], upper[RHO_IDX] = -0.9, 0.9
    return lower, upper


@dataclass(frozen=True)
class BoundsTable:
    """Per-parameter sampling box for the 23 GMM parameters."""

    lower: np.ndarray = field(default_factory=lambda: _default_lower_upper()[0])
    upper: np.ndarray = field(default_factory=lambda: _default_lower_upper()[1])

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).copy()
        upper = np.asarray(self.upper, dtype=float).copy()
        if lower.shape != (N_PARAMS,) or upper.shape != (N_PARAMS,):
            raise ParameterError("bounds must have 23 entries")
        if not np.all(lower < upper):
            bad = [PARAM_NAMES[i] for i in np.flatnonzero(~(lower < upper))]
            raise ParameterError(f"lower >= upper for {bad}")
        if np.any(lower[WEIGHT_SLICE] < 0) or np.any(upper[WEIGHT_SLICE] > 1):
            raise ParameterError("weight bounds must lie in [0, 1]")
        if np.any(lower[SIGMA_H_IDX] <= 0) or np.any(lower[SIGMA_R_IDX] <= 0):
            raise ParameterError("standard deviation bounds must be positive")
        if np.any(np.abs(lower[RHO_IDX]) >= 1) or np.any(np.abs(upper[RHO_IDX]) >= 1):
            raise ParameterError("correlation bounds must lie strictly inside (-1, 1)")
        lower.flags.writeable = False
        upper.flags.writeable = False
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def mid(self):
        return 0.5 * (self.lower + self.upper)

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["lower"], float), np.asarray(d["upper"], float))


@dataclass(frozen=True)
class GmmParams:
    """Four-component bivariate Gaussian mixture over (height, radius).

    Only three weights are free; ``weights`` appends ``w4 = 1 - sum(w)``.
    """

    w: np.ndarray
    mu_h: np.ndarray
    mu_r: np.ndarray
    sigma_h: np.ndarray
    sigma_r: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for name, size in (("w", 3), ("mu_h", 4), ("mu_r", 4),
                           ("sigma_h", 4), ("sigma_r", 4), ("rho", 4)):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (size,):
                raise ParameterError(f"{name} must have shape ({size},)")
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"{name} contains non-finite values")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def weights(self):
        w = np.empty(4)
        w[:3] = self.w
        w[3] = max(0.0, 1.0 - float(self.w.sum()))
        return w

    def to_vector(self):
        v = np.empty(N_PARAMS)
        v[WEIGHT_SLICE] = self.w
        v[MU_H_IDX] = self.mu_h
        v[MU_R_IDX] = self.mu_r
        v[SIGMA_H_IDX] = self.sigma_h
        v[SIGMA_R_IDX] = self.sigma_r
        v[RHO_IDX] = self.rho
        return v

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (N_PARAMS,):
            raise ParameterError(f"expected a 23-vector, got shape {v.shape}")
        return cls(v[WEIGHT_SLICE], v[MU_H_IDX], v[MU_R_IDX],
                   v[SIGMA_H_IDX], v[SIGMA_R_IDX], v[RHO_IDX])

    def covariances(self):
        """Per-component 2x2 covariance matrices, shape (4, 2, 2)."""
        cov = np.empty((4, 2, 2))
        cov[:, 0, 0] = self.sigma_h ** 2
        cov[:, 1, 1] = self.sigma_r ** 2
        cov[:, 0, 1] = cov[:, 1, 0] = self.rho * self.sigma_h * self.sigma_r
        return cov

    def check(self, bounds: BoundsTable | None = None, atol=1e-9):
        """Raise ParameterError unless the parameters form a valid mixture."""
        if np.any(self.w < -atol) or self.w.sum() > 1 + atol:
            raise ParameterError(f"invalid mixture weights {self.w}")
        if np.any(self.sigma_h <= 0) or np.any(self.sigma_r <= 0):
            raise ParameterError("standard deviations must be positive")
        if np.any(np.abs(self.rho) >= 1):
            raise ParameterError("degenerate covariance: |rho| must be < 1")
        if bounds is not None:
            v = self.to_vector()
            bad = (v < bounds.lower - atol) | (v > bounds.upper + atol)
            if bad.any():
                names = [PARAM_NAMES[i] for i in np.flatnonzero(bad)]
                raise ParameterError(f"parameters out of bounds: {names}")
        return self

    def is_valid(self, bounds: BoundsTable | None = None):
        try:
            self.check(bounds)
        except ParameterError:
            return False
        return True


def _renormalize_weights(v):
    s = v[WEIGHT_SLICE].sum()
    if s > 1.0:
        v[WEIGHT_SLICE] /= s
    return v


def enforce_weight_constraint(raw) -> GmmParams:
    """Map a raw in-bounds 23-vector onto the weight simplex.

    If the three free weights sum above one they are divided by their sum,
    which leaves ``w4 = 0``.
    """
    v = _renormalize_weights(np.array(raw, dtype=float))
    return GmmParams.from_vector(v)


def postprocess(theta_raw, bounds: BoundsTable | None = None) -> GmmParams:
    """Clamp an unscaled model output to the bounds, then fix the weights.

    Total on finite input; the result always satisfies ``GmmParams.check``.
    NaN entries are replaced by the bound midpoint before clamping.
    """
    bounds = bounds or BoundsTable()
    v = np.array(theta_raw, dtype=float)
    if v.shape != (N_PARAMS,):
        raise ParameterError(f"expected a 23-vector, got shape {v.shape}")
    v = np.where(np.isnan(v), bounds.mid, v)
    v = np.clip(v, bounds.lower, bounds.upper)
    return GmmParams.from_vector(_renormalize_weights(v))


def postprocess_batch(theta_raw, bounds: BoundsTable | None = None):
    """Vectorized ``postprocess`` over rows; returns an (M, 23) array."""
    bounds = bounds or BoundsTable()
    v = np.array(theta_raw, dtype=float)
    v = np.where(np.isnan(v), bounds.mid, v)
    v = np.clip(v, bounds.lower, bounds.upper)
    s = v[:, WEIGHT_SLICE].sum(axis=1, keepdims=True)
    v[:, WEIGHT_SLICE] = np.where(s > 1.0, v[:, WEIGHT_SLICE] / np.where(s > 1.0, s, 1.0),
                                  v[:, WEIGHT_SLICE])
    return v


def mid_bounds_theta(bounds: BoundsTable | None = None, equal_weights=True) -> GmmParams:
    """Mid-box parameters; weights 0.25 each when ``equal_weights``."""
    v = (bounds or BoundsTable()).mid.copy()
    if equal_weights:
        v[WEIGHT_SLICE] = 0.25
    return enforce_weight_constraint(v)
