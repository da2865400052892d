"""AdamW and the learning-rate / KL-weight schedules."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class TrainConfig:
    batch_size: int = 8192
    max_lr: float = 1.98e-4
    weight_decay: float = 1.10e-6
    beta_final: float = 1.06e-5
    warmup_steps: int = 20000
    total_steps: int = 40000
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    eval_every: int = 500
    val_samples: int = 16384
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("batch_size", "max_lr", "total_steps", "eval_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.beta_final < 0 or self.warmup_steps < 0:
            raise ValueError("weight_decay, beta_final and warmup_steps must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def onecycle_lr(step, total_steps, max_lr, pct_start=0.3, div_factor=25.0, final_div_factor=1e4):
    """Cosine one-cycle schedule: max_lr/div_factor -> max_lr -> initial/final_div_factor."""
    initial = max_lr / div_factor
    final = initial / final_div_factor
    step = min(max(step, 0), total_steps)
    peak = pct_start * total_steps
    if step <= peak:
        start, end, frac = initial, max_lr, (step / peak if peak > 0 else 1.0)
    else:
        start, end, frac = max_lr, final, (step - peak) / (total_steps - peak)
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def kl_beta(step, warmup_steps, beta_final):
    if warmup_steps <= 0 or step >= warmup_steps:
        return beta_final
    return beta_final * max(step, 0) / warmup_steps


def adamw_step(checkpoint, grads, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
    """Decoupled weight decay followed by a bias-corrected Adam update (in place)."""
    b1, b2 = betas
    checkpoint.step += 1
    t = checkpoint.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    params = checkpoint.model.params
    for name, p in params.items():
        g = grads[name]
        m = checkpoint.adam_m[name]
        v = checkpoint.adam_v[name]
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return checkpoint
