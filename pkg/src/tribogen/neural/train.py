"""Mini-batch training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from ..dataset import N_PARAMS, Manifest, ScalerParams, read_shard, records_to_arrays
from ..metrics import smape
from ..params import BoundsTable, postprocess_batch
from .model import Checkpoint, NetworkSpec, NumericError, backward, init_network, reconstruct, vae_loss
from .optim import TrainConfig, adamw_step, kl_beta, onecycle_lr

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class ScaledData:
    """Scaled float32 arrays plus the physical targets for metric reporting."""

    x: np.ndarray
    cond: np.ndarray | None
    theta: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        return ScaledData(self.x[idx], None if self.cond is None else self.cond[idx], self.theta[idx])


def load_scaled(manifest: Manifest, split, scaler: ScalerParams, with_cond=True) -> ScaledData:
    paths = manifest.shard_paths(split)
    total = sum(s["count"] for s in manifest.shards if s.get("split") == split)
    x = np.empty((total, N_PARAMS), np.float32)
    theta = np.empty((total, N_PARAMS), np.float32)
    cond = np.empty((total, scaler.input_min.size), np.float32) if with_cond else None
    i = 0
    for p in paths:
        rec = read_shard(p, mmap=True)
        t, c = records_to_arrays(rec)
        k = rec.shape[0]
        theta[i:i + k] = t
        x[i:i + k] = scaler.scale_targets(t)
        if with_cond:
            cond[i:i + k] = scaler.scale_inputs(c)
        i += k
    return ScaledData(x, cond, theta)


def parameter_smape(checkpoint: Checkpoint, data: ScaledData, scaler: ScalerParams,
                    bounds: BoundsTable | None = None):
    """Per-sample sMAPE of post-processed reconstructions in physical units."""
    cond = data.cond if checkpoint.model.spec.conditional else None
    recon = reconstruct(checkpoint, data.x, cond)
    theta_hat = postprocess_batch(scaler.unscale_targets(recon), bounds)
    return smape(data.theta.astype(float), theta_hat, axis=1), recon


def validation_loss(checkpoint: Checkpoint, data: ScaledData, beta, batch=16384):
    model = checkpoint.model
    total = 0.0
    for s in range(0, len(data), batch):
        xb = data.x[s:s + batch]
        cb = None if data.cond is None else data.cond[s:s + batch]
        x_hat, mu, logvar = model.forward(xb, cb, False)
        total += vae_loss(xb, x_hat, mu, logvar, beta)[0] * xb.shape[0]
    return total / len(data)


def train(spec: NetworkSpec, config: TrainConfig, train_data: ScaledData,
          val_data: ScaledData | None = None, scaler: ScalerParams | None = None,
          checkpoint: Checkpoint | None = None, trace_path=None, bounds=None):
    """Train and return (best checkpoint, trace rows).

    The best checkpoint is the one with the lowest validation loss (or the
    final one when there is no validation data). Deterministic for a fixed
    ``config.seed``.
    """
    ckpt = checkpoint or init_network(spec, config.seed)
    ckpt.seed = config.seed
    use_cond = spec.conditional
    if use_cond and train_data.cond is None:
        raise ValueError("conditional spec needs condition inputs")
    n = len(train_data)
    bs = min(config.batch_size, n)
    if bs < 2:
        raise ValueError("need at least 2 training samples")
    val = None
    if val_data is not None and len(val_data):
        k = min(config.val_samples, len(val_data))
        val = val_data.subset(np.random.default_rng(config.seed).permutation(len(val_data))[:k])
    steps_per_epoch = max(1, n // bs)
    best, best_val = ckpt.copy(), np.inf
    trace = []
    t0 = time.time()
    perm, epoch = None, -1
    for step in range(ckpt.step, config.total_steps):
        e, b = divmod(step, steps_per_epoch)
        if e != epoch:
            epoch = e
            perm = np.random.default_rng([config.seed, e]).permutation(n)
        idx = np.sort(perm[b * bs:(b + 1) * bs])
        lr = onecycle_lr(step, config.total_steps, config.max_lr, config.pct_start,
                         config.div_factor, config.final_div_factor)
        beta = kl_beta(step, config.warmup_steps, config.beta_final)
        try:
            grads, (total, _, _) = backward(ckpt, train_data.x[idx],
                                            train_data.cond[idx] if use_cond else None, beta)
        except NumericError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", best) from exc
        adamw_step(ckpt, grads, lr, config.weight_decay, config.betas, config.adam_eps)
        row = {"step": step, "lr": lr, "beta": beta, "train_loss": total, "val_loss": ""}
        last = step + 1 == config.total_steps
        if (step + 1) % config.eval_every == 0 or last:
            if val is not None:
                vloss = validation_loss(ckpt, val, beta)
                row["val_loss"] = vloss
                extra = ""
                if scaler is not None:
                    s, _ = parameter_smape(ckpt, val, scaler, bounds)
                    extra = f" val_median_smape={np.median(s):.3f}%"
                    row["val_smape"] = float(np.median(s))
                if not np.isfinite(vloss):
                    raise TrainingDiverged(f"step {step}: non-finite validation loss", best)
                if vloss < best_val:
                    best_val, best = vloss, ckpt.copy()
                log.info(f"step {step + 1} loss={total:.5f} val={vloss:.5f}{extra} "
                         f"({time.time() - t0:.0f}s)")
            else:
                best = ckpt.copy()
        trace.append(row)
    if val is None:
        best = ckpt.copy()
    best.meta.update({"train_config": config.to_dict(), "best_val_loss": float(best_val)})
    if trace_path:
        write_trace(trace, trace_path)
    return best, trace


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["step", "lr", "beta", "train_loss", "val_loss"], extrasaction="ignore")
        w.writeheader()
        w.writerows(trace)
