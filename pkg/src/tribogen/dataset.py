"""Sobol recipes, asperity-count sweep and the sharded on-disk dataset.

Shard layout (little endian)::

    b"TRIBOGEN-SHARD1\\0"   16-byte magic
    uint64                 record count
    float32[count, 152]    [theta_1..theta_23, N, F_1..F_128], physical units
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import contact
from .contact import FrictionLaw
from .params import N_PARAMS, BoundsTable, GmmParams, PhysicalConstants

log = logging.getLogger(__name__)

SHARD_MAGIC = b"TRIBOGEN-SHARD1\0"
RECORD_FLOATS = 152
RECORD_BYTES = RECORD_FLOATS * 4
N_LAW = 128
N_INPUTS = N_LAW + 1
SCHEMA_VERSION = 1
DEFAULT_N_GRID = (30, 50, 100, 150, 250, 400, 600, 1000, 1500, 2500,
                  4000, 6000, 8000, 10000, 11000, 12000)
SPLITS = ("train", "val", "test")


class UnsupportedDimensionError(ValueError):
    pass


class ShardFormatError(ValueError):
    pass


def sobol_points(dim, count, skip=1):
    """Unscrambled Sobol points in [0, 1)^dim, dropping the first ``skip``."""
    if dim < 1 or dim > qmc.Sobol.MAXDIM:
        raise UnsupportedDimensionError(f"Sobol dimension {dim} not in [1, {qmc.Sobol.MAXDIM}]")
    if count < 1:
        raise ValueError("count must be >= 1")
    engine = qmc.Sobol(dim, scramble=False)
    if skip:
        engine.fast_forward(skip)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # balance-property warning
        return engine.random(count)


def map_to_bounds(points, bounds: BoundsTable | None = None):
    bounds = bounds or BoundsTable()
    return bounds.lower + np.asarray(points, dtype=float) * bounds.width


def recipes(start, count, bounds: BoundsTable | None = None, skip=1):
    """Post-constraint theta vectors for Sobol recipes ``start .. start+count-1``."""
    raw = map_to_bounds(sobol_points(N_PARAMS, count, skip + start), bounds)
    s = raw[:, :3].sum(axis=1, keepdims=True)
    raw[:, :3] = np.where(s > 1, raw[:, :3] / np.maximum(s, 1), raw[:, :3])
    return raw


@dataclass
class GenerationConfig:
    recipe_count: int = 1000
    n_grid: tuple = DEFAULT_N_GRID
    delta_points: int = 256
    delta_range: tuple = (0.001, 300.0)
    p_points: int = N_LAW
    p_range: tuple = (0.01, 2.0)
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    bounds: BoundsTable = field(default_factory=BoundsTable)
    base_seed: int = 0
    shard_size: int = 4096
    sobol_skip: int = 1

    def __post_init__(self):
        self.n_grid = tuple(int(n) for n in self.n_grid)
        self.delta_range = tuple(self.delta_range)
        self.p_range = tuple(self.p_range)
        if isinstance(self.constants, dict):
            self.constants = PhysicalConstants.from_dict(self.constants)
        if isinstance(self.bounds, dict):
            self.bounds = BoundsTable.from_dict(self.bounds)
        if self.recipe_count < 1:
            raise ValueError("recipe_count must be >= 1")
        if not self.n_grid or list(self.n_grid) != sorted(set(self.n_grid)):
            raise ValueError("n_grid must be non-empty and strictly ascending")
        if self.n_grid[0] < 30 or self.n_grid[-1] > 12000:
            raise ValueError("n_grid values must lie in [30, 12000]")
        if self.p_points != N_LAW:
            raise ValueError("the record format stores exactly 128 law values")
        if self.shard_size < 1:
            raise ValueError("shard_size must be >= 1")

    @property
    def total_samples(self):
        return self.recipe_count * len(self.n_grid)

    @property
    def shard_count(self):
        return math.ceil(self.total_samples / self.shard_size)

    def deltas(self):
        return contact.delta_grid(self.delta_points, *self.delta_range)

    def grid(self):
        return contact.p_grid(self.p_points, *self.p_range)

    def to_dict(self):
        d = asdict(self)
        d["constants"] = self.constants.to_dict()
        d["bounds"] = self.bounds.to_dict()
        d["n_grid"] = list(self.n_grid)
        d["delta_range"] = list(self.delta_range)
        d["p_range"] = list(self.p_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Sample:
    theta: GmmParams
    n: int
    law: FrictionLaw

    def record(self):
        rec = np.empty(RECORD_FLOATS, dtype="<f4")
        rec[:N_PARAMS] = self.theta.to_vector()
        rec[N_PARAMS] = self.n
        rec[N_PARAMS + 1:] = self.law.f_values
        return rec


def generate_sample(theta: GmmParams, n, constants: PhysicalConstants | None = None, seed=0,
                    deltas=None, grid=None) -> Sample:
    law = contact.simulate_law(theta, n, constants, seed, deltas, grid)
    return Sample(theta, int(n), law)


def sample_seed(base_seed, recipe_index, n_index):
    return contact.derive_seed(base_seed, recipe_index, n_index)


def _generate_shard(config: GenerationConfig, shard_index):
    start = shard_index * config.shard_size
    stop = min(start + config.shard_size, config.total_samples)
    n_per = len(config.n_grid)
    r0, r1 = start // n_per, (stop - 1) // n_per + 1
    thetas = recipes(r0, r1 - r0, config.bounds, config.sobol_skip)
    deltas, grid = config.deltas(), config.grid()
    rows, failures = [], []
    for idx in range(start, stop):
        r, j = divmod(idx, n_per)
        theta = GmmParams.from_vector(thetas[r - r0])
        try:
            s = generate_sample(theta, config.n_grid[j], config.constants,
                                sample_seed(config.base_seed, r, j), deltas, grid)
        except (contact.SamplingExhaustedError, contact.DegenerateLawError) as exc:
            failures.append({"sample": idx, "recipe": r, "n_index": j, "error": str(exc)})
            continue
        rows.append(s.record())
    records = np.stack(rows) if rows else np.empty((0, RECORD_FLOATS), dtype="<f4")
    return shard_index, records, failures


def write_shard(path, records):
    records = np.ascontiguousarray(records, dtype="<f4")
    if records.ndim != 2 or records.shape[1] != RECORD_FLOATS:
        raise ShardFormatError(f"records must have shape (n, {RECORD_FLOATS})")
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(np.uint64(records.shape[0]).astype("<u8").tobytes())
        fh.write(records.tobytes())


def read_shard(path, mmap=False):
    with open(path, "rb") as fh:
        if fh.read(16) != SHARD_MAGIC:
            raise ShardFormatError(f"{path}: bad shard magic")
        count = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
    expected = 24 + count * RECORD_BYTES
    if os.path.getsize(path) != expected:
        raise ShardFormatError(f"{path}: size does not match record count {count}")
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=24, shape=(count, RECORD_FLOATS))
    return np.fromfile(path, dtype="<f4", offset=24).reshape(count, RECORD_FLOATS)


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Manifest:
    root: str
    config: dict
    config_digest: str
    shards: list
    failures: list = field(default_factory=list)
    split_seed: int | None = None
    scaler: str | None = None
    schema_version: int = SCHEMA_VERSION

    def shard_paths(self, split=None):
        return [Path(self.root) / s["path"] for s in self.shards
                if split is None or s.get("split") == split]

    def sample_count(self, split=None):
        return sum(s["count"] for s in self.shards if split is None or s.get("split") == split)

    def to_json(self):
        d = asdict(self)
        d.pop("root")
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path=None):
        path = Path(path or Path(self.root) / "manifest.json")
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported manifest schema {d.get('schema_version')}")
        return cls(root=str(path.parent), **d)


def generate_dataset(config: GenerationConfig, out_dir, workers=1, progress=None) -> Manifest:
    """Write all shards for ``config`` under ``out_dir`` and return the manifest.

    Shards are computed independently (per-sample seeds) and committed in
    index order by this process, so the bytes do not depend on ``workers``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(str(out), config.to_dict(), config.digest(), [])
    width = max(5, len(str(config.shard_count)))

    def commit(result):
        idx, records, failures = result
        name = f"shard-{idx:0{width}d}.bin"
        write_shard(out / name, records)
        manifest.shards.append({"path": name, "count": int(records.shape[0]),
                                "sha256": file_digest(out / name), "split": None})
        for f in failures:
            log.warning("sample skipped", extra={"detail": f})
        manifest.failures.extend(failures)
        if progress:
            progress(idx, config.shard_count)

    try:
        if workers <= 1:
            for i in range(config.shard_count):
                commit(_generate_shard(config, i))
        else:
            with ProcessPoolExecutor(workers) as pool:
                for result in pool.map(_generate_shard, [config] * config.shard_count,
                                       range(config.shard_count)):
                    commit(result)
    except OSError:
        manifest.save(out / "manifest.partial.json")
        raise
    manifest.save()
    return manifest


def current_manifest(out_dir, config: GenerationConfig, verify=True) -> Manifest | None:
    """Return the finished manifest under ``out_dir`` if it matches ``config``.

    Finished means split, scaled, and (with ``verify``) every shard digest intact.
    """
    try:
        m = Manifest.load(Path(out_dir) / "manifest.json")
    except (OSError, ValueError):
        return None
    if m.config_digest != config.digest() or not m.scaler:
        return None
    if any(s.get("split") is None for s in m.shards):
        return None
    for s in m.shards:
        p = Path(m.root) / s["path"]
        if not p.exists() or (verify and file_digest(p) != s["sha256"]):
            return None
    return m


def prepare_dataset(config: GenerationConfig, out_dir, workers=1, fractions=(0.70, 0.15, 0.15),
                    split_seed=42, progress=None):
    """Generate, split and fit the scaler, unless an identical dataset already exists.

    Returns (manifest, reused).
    """
    m = current_manifest(out_dir, config)
    if m is not None:
        return m, True
    m = generate_dataset(config, out_dir, workers, progress)
    split_shards(m, fractions, split_seed)
    fit_scaler(m, "train").save(Path(out_dir) / "scaler.json")
    m.scaler = "scaler.json"
    m.save()
    return m, False


def split_shards(manifest: Manifest, fractions=(0.70, 0.15, 0.15), seed=42) -> Manifest:
    """Assign every shard to train/val/test by a seeded permutation."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(manifest.shards)
    if n < 3:
        raise ValueError("need at least 3 shards to split")
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training shards")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[perm[:n_train]] = "train"
    labels[perm[n_train:n_train + n_val]] = "val"
    labels[perm[n_train + n_val:]] = "test"
    for shard, label in zip(manifest.shards, labels):
        shard["split"] = str(label)
    manifest.split_seed = int(seed)
    return manifest


def load_records(manifest: Manifest, split=None):
    paths = manifest.shard_paths(split)
    if not paths:
        return np.empty((0, RECORD_FLOATS), dtype=np.float32)
    return np.concatenate([read_shard(p) for p in paths])


def records_to_arrays(records):
    """Split records into (theta (M,23), cond (M,129)); cond is [F_1..F_128, N]."""
    records = np.asarray(records)
    theta = records[:, :N_PARAMS]
    cond = np.concatenate([records[:, N_PARAMS + 1:], records[:, N_PARAMS:N_PARAMS + 1]], axis=1)
    return theta, cond


def law_to_cond(law: FrictionLaw, n=None):
    return np.append(np.asarray(law.f_values, dtype=float), law.asperity_count if n is None else n)


@dataclass
class ScalerParams:
    """Min-max scaler to [-1, 1] for the 129 inputs and 23 targets."""

    input_min: np.ndarray
    input_max: np.ndarray
    target_min: np.ndarray
    target_max: np.ndarray
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("input_min", "input_max", "target_min", "target_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def save(self, path):
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        Path(path).write_text(json.dumps(d, indent=2))
        return Path(path)

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported scaler schema")
        return cls(**d)

    def scale_inputs(self, x):
        return scale(x, self.input_min, self.input_max)

    def unscale_inputs(self, x):
        return unscale(x, self.input_min, self.input_max)

    def scale_targets(self, y):
        return scale(y, self.target_min, self.target_max)

    def unscale_targets(self, y):
        return unscale(y, self.target_min, self.target_max)


def _widen(lo, hi):
    lo, hi = lo.astype(float), hi.astype(float)
    flat = hi <= lo
    pad = np.where(lo != 0, 1e-9 * np.abs(lo), 1e-9)
    return np.where(flat, lo - pad, lo), np.where(flat, hi + pad, hi)


def fit_scaler(manifest: Manifest, split="train") -> ScalerParams:
    """Feature-wise extrema over one split (training data only by default)."""
    paths = manifest.shard_paths(split)
    lo = hi = None
    for p in paths:
        rec = read_shard(p, mmap=True)
        if rec.shape[0] == 0:
            continue
        theta, cond = records_to_arrays(rec)
        block = np.concatenate([cond, theta], axis=1).astype(float)
        bmin, bmax = block.min(axis=0), block.max(axis=0)
        lo = bmin if lo is None else np.minimum(lo, bmin)
        hi = bmax if hi is None else np.maximum(hi, bmax)
    if lo is None:
        raise ValueError(f"split {split!r} holds no samples")
    lo, hi = _widen(lo, hi)
    return ScalerParams(lo[:N_INPUTS], hi[:N_INPUTS], lo[N_INPUTS:], hi[N_INPUTS:])


def scale(values, lo, hi):
    values = np.asarray(values, dtype=float)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if values.shape[-1] != lo.shape[-1]:
        raise ValueError(f"expected {lo.shape[-1]} features, got {values.shape[-1]}")
    return 2.0 * (values - lo) / (hi - lo) - 1.0


def unscale(scaled, lo, hi):
    scaled = np.asarray(scaled, dtype=float)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if scaled.shape[-1] != lo.shape[-1]:
        raise ValueError(f"expected {lo.shape[-1]} features, got {scaled.shape[-1]}")
    return lo + (scaled + 1.0) * 0.5 * (hi - lo)
