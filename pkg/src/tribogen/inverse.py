"""CMA-ES and inversion of friction laws (latent-space and direct search)."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import contact
from .contact import FrictionLaw
from .metrics import smape
from .params import BoundsTable, GmmParams, PhysicalConstants, postprocess, postprocess_batch


@dataclass
class CmaesState:
    """Complete (mu/mu_w, lambda)-CMA-ES state; mutated in place by ``cmaes_tell``."""

    n: int
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    B: np.ndarray
    D: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    lam: int
    weights: np.ndarray
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float
    rng: np.random.Generator
    generation: int = 0
    evaluations: int = 0
    best_x: np.ndarray | None = None
    best_f: float = math.inf

    @property
    def mu(self):
        return self.weights.size


def default_popsize(n):
    return 4 + int(math.floor(3 * math.log(n)))


def cmaes_init(n, x0, sigma0, lam=None, seed=0) -> CmaesState:
    """Standard strategy constants; C = I and zero evolution paths."""
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")
    x0 = np.asarray(x0, dtype=float).copy()
    if x0.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")
    lam = default_popsize(n) if lam is None else int(lam)
    if lam < 2:
        raise ValueError("population size must be >= 2")
    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mu_eff = 1.0 / np.sum(w ** 2)
    c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
    d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
    c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
    c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
    return CmaesState(n, x0, float(sigma0), np.eye(n), np.eye(n), np.ones(n),
                      np.zeros(n), np.zeros(n), lam, w, mu_eff, c_sigma, d_sigma,
                      c_c, c_1, c_mu, chi_n, np.random.default_rng(seed))


def _decompose(state: CmaesState):
    C = 0.5 * (state.C + state.C.T)
    vals, vecs = np.linalg.eigh(C)
    if not np.all(np.isfinite(vals)) or vals.max() <= 0:
        raise np.linalg.LinAlgError("covariance matrix is not repairable")
    vals = np.maximum(vals, 1e-14 * vals.max())
    state.C = (vecs * vals) @ vecs.T
    state.B, state.D = vecs, np.sqrt(vals)


def cmaes_ask(state: CmaesState):
    """Return a (lambda, n) array of candidates m + sigma * B D z."""
    z = state.rng.standard_normal((state.lam, state.n))
    return state.mean + state.sigma * (z * state.D) @ state.B.T


def cmaes_tell(state: CmaesState, candidates, fitnesses):
    """Rank-mu / rank-one update and cumulative step-size adaptation."""
    X = np.asarray(candidates, dtype=float)
    f = np.asarray(fitnesses, dtype=float)
    f = np.where(np.isfinite(f), f, np.inf)
    order = np.argsort(f, kind="stable")
    state.evaluations += len(f)
    if f[order[0]] < state.best_f:
        state.best_f = float(f[order[0]])
        state.best_x = X[order[0]].copy()
    n, s = state.n, state
    old = s.mean.copy()
    Y = (X[order[:s.mu]] - old) / s.sigma
    y_w = s.weights @ Y
    s.mean = old + s.sigma * y_w
    inv_sqrt_C_y = s.B @ ((s.B.T @ y_w) / s.D)
    s.p_sigma = (1 - s.c_sigma) * s.p_sigma + math.sqrt(s.c_sigma * (2 - s.c_sigma) * s.mu_eff) * inv_sqrt_C_y
    norm_ps = np.linalg.norm(s.p_sigma)
    s.generation += 1
    h_sig = (norm_ps / math.sqrt(1 - (1 - s.c_sigma) ** (2 * s.generation)) / s.chi_n
             < 1.4 + 2 / (n + 1))
    s.p_c = (1 - s.c_c) * s.p_c + h_sig * math.sqrt(s.c_c * (2 - s.c_c) * s.mu_eff) * y_w
    rank_mu = (Y.T * s.weights) @ Y
    decay = 1 - s.c_1 - s.c_mu + (1 - h_sig) * s.c_1 * s.c_c * (2 - s.c_c)
    s.C = decay * s.C + s.c_1 * np.outer(s.p_c, s.p_c) + s.c_mu * rank_mu
    s.sigma *= math.exp(min(1.0, (s.c_sigma / s.d_sigma) * (norm_ps / s.chi_n - 1)))
    _decompose(s)
    return s


def cmaes_minimize(fun, x0, sigma0, max_evals=None, max_iter=None, lam=None, seed=0,
                   batch_fun=None, callback=None):
    """Minimise ``fun``; returns the final state (best in ``state.best_x``).

    ``batch_fun`` evaluates a whole population at once when given.
    """
    state = cmaes_init(len(x0), x0, sigma0, lam, seed)
    while True:
        if max_iter is not None and state.generation >= max_iter:
            break
        if max_evals is not None and state.evaluations + state.lam > max_evals:
            break
        X = cmaes_ask(state)
        fx = batch_fun(X) if batch_fun else [fun(x) for x in X]
        cmaes_tell(state, X, fx)
        if callback:
            callback(state, X, fx)
    return state


# -- inversion -----------------------------------------------------------


BOX_PENALTY = 1.0


class InversionError(RuntimeError):
    pass


@dataclass
class InversionConfig:
    iterations: int = 500
    sigma0: float | None = None
    popsize: int | None = None
    seed: int = 0
    sim_seed: int = 12345
    final_seeds: int = 5
    x0: list | None = None
    n_grid: tuple | None = None

    def to_dict(self):
        return asdict(self)


@dataclass
class InversionResult:
    theta: np.ndarray
    best_value: float
    trace: list
    functional_smape: float
    wall_time: float
    n: int
    seed: int
    latent: np.ndarray | None = None
    functional_smape_run_seed: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["theta"] = np.asarray(self.theta).tolist()
        d["latent"] = None if self.latent is None else np.asarray(self.latent).tolist()
        return d

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def trace_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["iteration", "best_mse", "functional_smape"])
            w.writeheader()
            w.writerows(self.trace)


def _law_scaler(target: FrictionLaw, scaler):
    if scaler is not None:
        lo, hi = scaler.input_min[:-1], scaler.input_max[:-1]
        return lambda f: 2.0 * (np.asarray(f) - lo) / (hi - lo) - 1.0
    ref = max(float(np.max(target.f_values)), 1e-12)
    return lambda f: np.asarray(f) / ref


class _LawObjective:
    """MSE between scaled laws under one fixed asperity seed."""

    def __init__(self, target, n, constants, sim_seed, scaler):
        self.target = target
        self.n = n
        self.constants = constants or PhysicalConstants()
        self.sim_seed = sim_seed
        self.to_scaled = _law_scaler(target, scaler)
        self.target_scaled = self.to_scaled(target.f_values)

    def law(self, theta_vec, seed=None):
        return contact.simulate_law(GmmParams.from_vector(theta_vec), self.n, self.constants,
                                    self.sim_seed if seed is None else seed,
                                    grid=self.target.p_grid)

    def __call__(self, theta_vec):
        try:
            law = self.law(theta_vec)
        except (contact.SamplingExhaustedError, contact.DegenerateLawError):
            return math.inf, None
        return float(np.mean((self.to_scaled(law.f_values) - self.target_scaled) ** 2)), law


def _run(target, n, thetas_of, x0, sigma0, config, constants, scaler, penalty_of=None):
    obj = _LawObjective(target, n, constants, config.sim_seed, scaler)
    best = {"f": math.inf, "theta": None, "x": None, "law": None}
    trace = []

    def batch(X):
        thetas = thetas_of(X)
        pen = np.zeros(len(X)) if penalty_of is None else penalty_of(X)
        out = []
        for x, th, extra in zip(X, thetas, pen):
            f, law = obj(th)
            out.append(f + extra)
            if f < best["f"]:
                best.update(f=f, theta=th, x=x.copy(), law=law)
        if not np.any(np.isfinite(out)):
            raise InversionError("every candidate in the generation failed to simulate")
        return out

    def record(state, X, fx):
        fs = float(smape(target.f_values, best["law"].f_values)) if best["law"] is not None else math.nan
        trace.append({"iteration": state.generation, "best_mse": best["f"], "functional_smape": fs})

    t0 = time.time()
    cmaes_minimize(None, x0, sigma0, max_iter=config.iterations, lam=config.popsize,
                   seed=config.seed, batch_fun=batch, callback=record)
    fresh = [contact.derive_seed(config.sim_seed, 7919, k) for k in range(config.final_seeds)]
    fsm = [float(smape(target.f_values, obj.law(best["theta"], s).f_values)) for s in fresh]
    return best, trace, float(np.mean(fsm)), time.time() - t0, fsm


def _sweep_n(run_one, n, config):
    if n is not None:
        return run_one(int(n))
    grid = config.n_grid or (30, 50, 100, 150, 250, 400, 600, 1000, 1500, 2500,
                             4000, 6000, 8000, 10000, 11000, 12000)
    results = [run_one(int(k)) for k in grid]
    return min(results, key=lambda r: r.best_value)


def invert_direct(target: FrictionLaw, n=None, bounds: BoundsTable | None = None,
                  config: InversionConfig | None = None, constants=None, scaler=None):
    """CMA-ES over the 23 parameters scaled to [-1, 1] by ``bounds``.

    Candidates are clamped and weight-normalised by ``postprocess`` before
    simulation, and the fitness adds a quadratic penalty on the distance
    outside the box (the reported MSE excludes it). ``config.x0`` (scaled)
    gives a warm start; default is the box centre. Default step size is
    0.3 of the box width cold and 0.05 of it warm.
    """
    bounds = bounds or BoundsTable()
    config = config or InversionConfig(iterations=75)
    if config.sigma0 is not None:
        sigma0 = config.sigma0
    else:
        sigma0 = (0.3 if config.x0 is None else 0.05) * 2.0
    x0 = np.zeros(23) if config.x0 is None else np.asarray(config.x0, dtype=float)

    def thetas_of(X):
        raw = bounds.lower + (np.asarray(X) + 1.0) * 0.5 * bounds.width
        return postprocess_batch(raw, bounds)

    def penalty_of(X):
        # outside the box the clamped objective is flat; pull the mean back in
        X = np.asarray(X)
        return BOX_PENALTY * np.sum((X - np.clip(X, -1.0, 1.0)) ** 2, axis=1)

    def run_one(k):
        best, trace, fs, wall, fsm = _run(target, k, thetas_of, x0, sigma0, config, constants, scaler,
                                          penalty_of)
        if best["theta"] is None:
            raise InversionError("no candidate could be simulated")
        return InversionResult(postprocess(best["theta"], bounds).to_vector(), best["f"], trace, fs,
                               wall, k, config.seed,
                               functional_smape_run_seed=trace[-1]["functional_smape"],
                               extra={"final_seed_smape": fsm, "config": config.to_dict()})

    return _sweep_n(run_one, n, config)


def decode_thetas(checkpoint, Z, scaler, bounds=None):
    """Decode latent vectors to post-processed physical parameter vectors."""
    scaled = checkpoint.model.sample(None, noise=np.asarray(Z)).astype(float)
    return postprocess_batch(scaler.unscale_targets(scaled), bounds)


def invert_latent(checkpoint, target: FrictionLaw, n=None, config: InversionConfig | None = None,
                  scaler=None, constants=None, bounds=None):
    """CMA-ES over the latent space of an unconditional decoder."""
    spec = checkpoint.spec
    if spec.conditional or spec.is_regressor:
        raise ValueError("latent inversion needs an unconditional VAE decoder")
    if scaler is None:
        raise ValueError("latent inversion needs the training scaler")
    config = config or InversionConfig()
    sigma0 = config.sigma0 if config.sigma0 is not None else 0.3
    d = spec.latent_dim
    x0 = np.zeros(d) if config.x0 is None else np.asarray(config.x0, dtype=float)
    if x0.shape != (d,):
        raise ValueError(f"latent start must have {d} entries")

    def run_one(k):
        best, trace, fs, wall, fsm = _run(target, k, lambda Z: decode_thetas(checkpoint, Z, scaler, bounds),
                                          x0, sigma0, config, constants, scaler)
        if best["theta"] is None:
            raise InversionError("no candidate could be simulated")
        return InversionResult(best["theta"], best["f"], trace, fs, wall, k, config.seed,
                               latent=best["x"], functional_smape_run_seed=trace[-1]["functional_smape"],
                               extra={"final_seed_smape": fsm, "config": config.to_dict()})

    return _sweep_n(run_one, n, config)


def multi_start(invert, seeds, **kwargs):
    """Run ``invert`` once per seed; returns (all results, best by functional sMAPE)."""
    results = []
    base = kwargs.pop("config", None) or InversionConfig()
    for s in seeds:
        cfg = InversionConfig(**{**base.to_dict(), "seed": int(s)})
        results.append(invert(config=cfg, **kwargs))
    return results, min(results, key=lambda r: r.functional_smape)
