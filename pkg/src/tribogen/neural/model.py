"""VAE / CVAE / MLP networks over the 23 topography parameters."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..params import BoundsTable, postprocess_batch
from .layers import Linear, Sequential, Tanh, mlp

X_DIM = 23
COND_DIM = 129


class NumericError(ArithmeticError):
    """Non-finite values in a loss or its intermediates."""


@dataclass
class NetworkSpec:
    encoder_widths: tuple = (1915, 1723, 767)
    encoder_dropout: tuple = (0.163, 0.080, 0.090)
    decoder_widths: tuple = (347, 308, 328)
    decoder_dropout: tuple = (0.024, 0.073, 0.123)
    latent_dim: int = 56
    conditional: bool = True
    x_dim: int = X_DIM
    cond_dim: int = COND_DIM
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    prelu_init: float = 0.25

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.encoder_dropout = tuple(float(p) for p in self.encoder_dropout)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.decoder_dropout = tuple(float(p) for p in self.decoder_dropout)
        if len(self.encoder_widths) != len(self.encoder_dropout):
            raise ValueError("encoder widths and dropout rates differ in length")
        if len(self.decoder_widths) != len(self.decoder_dropout):
            raise ValueError("decoder widths and dropout rates differ in length")
        if any(w < 1 for w in self.encoder_widths + self.decoder_widths):
            raise ValueError("layer widths must be >= 1")
        if any(not 0 <= p < 1 for p in self.encoder_dropout + self.decoder_dropout):
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be >= 0")
        if self.latent_dim == 0 and not self.conditional:
            raise ValueError("a plain regressor (latent_dim=0) must be conditional")

    @property
    def is_regressor(self):
        return self.latent_dim == 0

    @property
    def encoder_in(self):
        return self.x_dim + (self.cond_dim if self.conditional else 0)

    @property
    def decoder_in(self):
        return self.latent_dim + (self.cond_dim if self.conditional else 0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    @classmethod
    def cvae(cls, **kw):
        return cls(**kw)

    @classmethod
    def vae(cls, **kw):
        return cls(conditional=False, **kw)

    @classmethod
    def regressor(cls, **kw):
        """Decoder-shaped MLP mapping the 129 inputs straight to theta."""
        kw.setdefault("encoder_widths", ())
        kw.setdefault("encoder_dropout", ())
        return cls(latent_dim=0, conditional=True, **kw)


class VAE:
    """Encoder -> (mu, logvar) -> reparameterised z -> decoder -> tanh."""

    def __init__(self, spec: NetworkSpec, seed=0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        s = spec
        if not s.is_regressor:
            self.encoder, h = mlp(s.encoder_in, s.encoder_widths, s.encoder_dropout, rng, dtype)
            self.mu_head = Linear(h, s.latent_dim, rng, dtype)
            self.logvar_head = Linear(h, s.latent_dim, rng, dtype)
        body, h = mlp(s.decoder_in, s.decoder_widths, s.decoder_dropout, rng, dtype)
        self.decoder = Sequential([body, Linear(h, s.x_dim, rng, dtype), Tanh()])
        for seq in self._modules().values():
            for layer in _leaves(seq):
                if hasattr(layer, "eps"):
                    layer.eps, layer.momentum = s.bn_eps, s.bn_momentum
                if "a" in layer.params:
                    layer.params["a"][:] = s.prelu_init

    def _modules(self):
        mods = {"decoder": self.decoder}
        if not self.spec.is_regressor:
            mods = {"encoder": self.encoder, "mu_head": Sequential([self.mu_head]),
                    "logvar_head": Sequential([self.logvar_head]), **mods}
        return mods

    def _collect(self, attr):
        out = {}
        for name, mod in self._modules().items():
            for k, v in mod.named(attr).items():
                out[f"{name}.{k}"] = v
        return out

    def _assign(self, attr, values):
        for name, mod in self._modules().items():
            prefix = name + "."
            mod.assign(attr, {k[len(prefix):]: v for k, v in values.items()
                              if k.startswith(prefix)})

    @property
    def params(self):
        return self._collect("params")

    @property
    def buffers(self):
        return self._collect("buffers")

    def grads(self):
        return self._collect("grads")

    def set_params(self, values):
        self._assign("params", {k: np.asarray(v, self.dtype) for k, v in values.items()})

    def set_buffers(self, values):
        self._assign("buffers", {k: np.asarray(v, self.dtype) for k, v in values.items()})

    def astype(self, dtype):
        clone = copy.deepcopy(self)
        clone.dtype = np.dtype(dtype)
        clone.set_params(self.params)
        clone.set_buffers(self.buffers)
        return clone

    # -- forward / backward ----------------------------------------------

    def _check_shapes(self, x, cond, train):
        s = self.spec
        if s.conditional and cond is None:
            raise ValueError("conditional network needs cond")
        if not s.conditional and cond is not None:
            raise ValueError("unconditional network takes no cond")
        n = (x if x is not None else cond).shape[0]
        if x is not None and x.shape != (n, s.x_dim):
            raise ValueError(f"x must have shape (batch, {s.x_dim})")
        if cond is not None and cond.shape != (n, s.cond_dim):
            raise ValueError(f"cond must have shape (batch, {s.cond_dim})")
        if train and n < 2:
            raise ValueError("train mode needs batch size >= 2 (batch norm)")
        return n

    def encode(self, x, cond=None, train=False, rng=None):
        inp = x if cond is None else np.concatenate([cond, x], axis=1)
        h = self.encoder.forward(inp.astype(self.dtype, copy=False), train, rng)
        return self.mu_head.forward(h), self.logvar_head.forward(h)

    def decode(self, z, cond=None, train=False, rng=None):
        parts = [p for p in (cond, z) if p is not None]
        inp = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        return self.decoder.forward(inp.astype(self.dtype, copy=False), train, rng)

    def forward(self, x, cond=None, train=False, rng=None, noise=None):
        """Return (x_hat, mu, logvar); mu/logvar are None for a regressor.

        ``noise`` fixes epsilon; otherwise it is drawn from ``rng`` in train
        mode and set to zero in eval mode.
        """
        n = self._check_shapes(x, cond, train)
        if self.spec.is_regressor:
            self._cache = (None, None)
            return self.decode(None, cond, train, rng), None, None
        mu, logvar = self.encode(x, cond, train, rng)
        if noise is None:
            noise = (rng.standard_normal((n, self.spec.latent_dim)) if train
                     else np.zeros((n, self.spec.latent_dim)))
        noise = np.asarray(noise, dtype=self.dtype)
        std = np.exp(0.5 * logvar)
        z = mu + std * noise
        self._cache = (noise, std)
        return self.decode(z, cond, train, rng), mu, logvar

    def backward(self, d_xhat, d_mu=None, d_logvar=None):
        """Backpropagate loss gradients; returns the parameter-gradient dict."""
        g = self.decoder.backward(d_xhat)
        if not self.spec.is_regressor:
            noise, std = self._cache
            dz = g[:, self.spec.cond_dim:] if self.spec.conditional else g
            d_mu = dz + (0 if d_mu is None else d_mu)
            d_logvar = 0.5 * dz * noise * std + (0 if d_logvar is None else d_logvar)
            gh = self.mu_head.backward(d_mu) + self.logvar_head.backward(d_logvar)
            self.encoder.backward(gh)
        return self.grads()

    def sample(self, cond=None, m=1, rng=None, noise=None):
        """Decode prior draws (eval mode); returns scaled outputs (m, 23)."""
        if noise is None:
            noise = rng.standard_normal((m, self.spec.latent_dim))
        noise = np.asarray(noise, dtype=self.dtype)
        if cond is not None:
            cond = np.broadcast_to(np.asarray(cond, self.dtype), (noise.shape[0], self.spec.cond_dim))
        return self.decode(noise, cond, train=False)


def _leaves(seq):
    for layer in seq.layers:
        if isinstance(layer, Sequential):
            yield from _leaves(layer)
        else:
            yield layer


def smooth_l1(r, beta=1.0):
    a = np.abs(r)
    return np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta)


def vae_loss(x, x_hat, mu, logvar, beta, huber_beta=1.0):
    """(total, recon, kl); recon averages over elements, kl sums latents and averages the batch."""
    r = x_hat - x
    recon = float(smooth_l1(r, huber_beta).mean())
    if mu is None:
        kl = 0.0
    else:
        kl_terms = -0.5 * (1.0 + logvar - mu * mu - np.exp(logvar))
        kl = float(kl_terms.sum(axis=1).mean())
    total = recon + beta * kl
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss: recon={recon}, kl={kl}, "
                           f"max|mu|={np.abs(mu).max() if mu is not None else 0}, "
                           f"max logvar={logvar.max() if logvar is not None else 0}")
    return total, recon, kl


def vae_loss_grads(x, x_hat, mu, logvar, beta, huber_beta=1.0):
    r = x_hat - x
    d_xhat = (np.clip(r / huber_beta, -1.0, 1.0) / r.size).astype(x_hat.dtype)
    if mu is None:
        return d_xhat, None, None
    n = mu.shape[0]
    d_mu = (beta * mu / n).astype(mu.dtype)
    d_logvar = (beta * -0.5 * (1.0 - np.exp(logvar)) / n).astype(mu.dtype)
    return d_xhat, d_mu, d_logvar


@dataclass
class Checkpoint:
    """Network, AdamW moments and bookkeeping for one training run."""

    model: VAE
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def spec(self):
        return self.model.spec

    def copy(self):
        return copy.deepcopy(self)


def init_network(spec: NetworkSpec, seed=0, dtype=np.float32) -> Checkpoint:
    """Fresh network: Kaiming-normal linear weights, zero biases, BN identity."""
    model = VAE(spec, seed, dtype)
    zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
    return Checkpoint(model, 0, zeros, copy.deepcopy(zeros), seed)


def step_rng(seed, step):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step)]))


def forward(checkpoint: Checkpoint, x, cond=None, mode="eval", noise=None, rng=None):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    train = mode == "train"
    if train and rng is None:
        rng = step_rng(checkpoint.seed, checkpoint.step)
    return checkpoint.model.forward(x, cond, train, rng, noise)


def loss(x, x_hat, mu, logvar, beta):
    return vae_loss(x, x_hat, mu, logvar, beta)


def backward(checkpoint: Checkpoint, x, cond, beta, seed=None):
    """Train-mode loss and exact parameter gradients.

    Dropout masks and epsilon come from ``seed`` (default: the checkpoint's
    seed and step), so repeated calls return identical gradients.
    """
    rng = step_rng(checkpoint.seed if seed is None else seed, checkpoint.step)
    model = checkpoint.model
    x = np.asarray(x, dtype=model.dtype)
    cond = None if cond is None else np.asarray(cond, dtype=model.dtype)
    x_hat, mu, logvar = model.forward(x, cond, True, rng)
    total, recon, kl = vae_loss(x, x_hat, mu, logvar, beta)
    grads = model.backward(*vae_loss_grads(x, x_hat, mu, logvar, beta))
    return grads, (total, recon, kl)


def reconstruct(checkpoint: Checkpoint, x, cond=None, batch=16384, noise_rng=None):
    """Eval-mode reconstruction in scaled space (z = mu unless ``noise_rng``)."""
    model = checkpoint.model
    outs = []
    for s in range(0, x.shape[0], batch):
        xb = x[s:s + batch]
        cb = None if cond is None else cond[s:s + batch]
        noise = None
        if noise_rng is not None and not model.spec.is_regressor:
            noise = noise_rng.standard_normal((xb.shape[0], model.spec.latent_dim))
        outs.append(model.forward(xb, cb, False, None, noise)[0])
    return np.concatenate(outs).astype(float)


def infer(checkpoint: Checkpoint, cond_scaled, m, seed, scaler, bounds: BoundsTable | None = None):
    """Draw ``m`` latent samples for one scaled condition vector.

    Returns an (m, 23) array of post-processed physical parameter vectors.
    """
    spec = checkpoint.spec
    if not spec.conditional or spec.is_regressor:
        raise ValueError("infer needs a conditional VAE checkpoint")
    rng = np.random.default_rng(seed)
    out = []
    for s in range(0, m, 16384):
        k = min(16384, m - s)
        scaled = checkpoint.model.sample(np.asarray(cond_scaled).reshape(1, -1), k, rng)
        out.append(postprocess_batch(scaler.unscale_targets(scaled.astype(float)), bounds))
    return np.concatenate(out)
