"""Conditional invertible network over the 5-d pose vector.

Each block applies a fixed permutation and then an affine coupling: the
first two (passive) coordinates pass through unchanged and parametrize, with
the condition vector, a soft-clamped log-scale and a shift for the remaining
three (active) coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, TrainingError
from .geometry import canonicalize_vectors
from .nn import AdamState, adam_step, lr_schedule, mlp

log = logging.getLogger(__name__)

DIM = 5
N_PASSIVE = 2
LOG_2PI = math.log(2.0 * math.pi)


def soft_clamp(s, alpha=1.9):
    return (2.0 * alpha / math.pi) * np.arctan(np.asarray(s) / alpha)


def soft_clamp_grad(s, alpha=1.9):
    r = np.asarray(s) / alpha
    return (2.0 / math.pi) / (1.0 + r * r)


@dataclass(frozen=True)
class FlowConfig:
    depth: int = 8
    hidden: int = 64
    clamp_alpha: float = 1.9
    seed: int = 0


class CouplingBlock:
    def __init__(self, perm, cond_dim, hidden, alpha, rng):
        self.perm = np.asarray(perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(DIM)):
            raise ParameterError(f"not a permutation of {DIM}: {perm}")
        self.inv_perm = np.argsort(self.perm)
        self.alpha = alpha
        sizes = [N_PASSIVE + cond_dim, hidden, hidden, DIM - N_PASSIVE]
        self.subnet_s = mlp(sizes, rng, zero_last=True)
        self.subnet_t = mlp(sizes, rng, zero_last=True)

    def _st(self, passive, cond):
        h = np.concatenate([passive, cond], axis=1)
        return self.subnet_s.forward(h), self.subnet_t.forward(h)

    def forward(self, x, cond):
        xp = x[:, self.perm]
        passive, active = xp[:, :N_PASSIVE], xp[:, N_PASSIVE:]
        s, t = self._st(passive, cond)
        cs = soft_clamp(s, self.alpha)
        scale = np.exp(cs)
        out = np.concatenate([passive, active * scale + t], axis=1)
        self._cache = (active, s, scale)
        return out, cs.sum(axis=1)

    def inverse(self, y, cond):
        passive, active_out = y[:, :N_PASSIVE], y[:, N_PASSIVE:]
        s, t = self._st(passive, cond)
        active = (active_out - t) * np.exp(-soft_clamp(s, self.alpha))
        xp = np.concatenate([passive, active], axis=1)
        return xp[:, self.inv_perm]

    def backward(self, gy, gld):
        """Gradients w.r.t. the block input and the condition vector.

        ``gy`` is dL/d(output), ``gld`` is dL/d(logdet) per sample.
        """
        active, s, scale = self._cache
        g_act = gy[:, N_PASSIVE:]
        g_cs = g_act * active * scale + gld[:, None]
        g_s = g_cs * soft_clamp_grad(s, self.alpha)
        gh = self.subnet_s.backward(g_s) + self.subnet_t.backward(g_act)
        g_passive = gy[:, :N_PASSIVE] + gh[:, :N_PASSIVE]
        g_cond = gh[:, N_PASSIVE:]
        gxp = np.concatenate([g_passive, g_act * scale], axis=1)
        return gxp[:, self.inv_perm], g_cond

    def named_params(self, prefix):
        yield from self.subnet_s.named_params(prefix + "s.")
        yield from self.subnet_t.named_params(prefix + "t.")

    def named_grads(self, prefix):
        yield from self.subnet_s.named_grads(prefix + "s.")
        yield from self.subnet_t.named_grads(prefix + "t.")


class FlowModel:
    """Stack of coupling blocks mapping pose vectors x to latents z."""

    def __init__(self, cond_dim, cfg: FlowConfig = FlowConfig(), perms=None):
        self.cfg = cfg
        self.cond_dim = cond_dim
        rng = np.random.default_rng([cfg.seed, 7])
        if perms is None:
            perms = [rng.permutation(DIM) for _ in range(cfg.depth)]
        if len(perms) != cfg.depth:
            raise ParameterError("one permutation per block is required")
        self.blocks = [CouplingBlock(p, cond_dim, cfg.hidden, cfg.clamp_alpha, rng) for p in perms]

    @property
    def perms(self):
        return [b.perm.tolist() for b in self.blocks]

    def _check(self, x, cond):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        if x.shape[1] != DIM or cond.shape[1] != self.cond_dim:
            raise ParameterError(f"expected x (n, {DIM}) and cond (n, {self.cond_dim})")
        if len(cond) == 1 and len(x) > 1:
            cond = np.broadcast_to(cond, (len(x), self.cond_dim))
        if len(cond) != len(x):
            raise ParameterError("x and cond batch sizes differ")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(cond))):
            raise NumericError("non-finite flow input")
        return x, cond

    def forward(self, x, cond):
        """Return ``(z, logdet)`` with logdet = log|det dz/dx| per sample."""
        x, cond = self._check(x, cond)
        self._cond = cond
        logdet = np.zeros(len(x))
        for b in self.blocks:
            x, ld = b.forward(x, cond)
            logdet += ld
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(logdet))):
            raise NumericError("non-finite value in flow forward pass")
        return x, logdet

    def inverse(self, z, cond):
        z, cond = self._check(z, cond)
        for b in reversed(self.blocks):
            z = b.inverse(z, cond)
        return z

    def nll(self, x, cond):
        """Mean negative log-density; caches for :meth:`backward`."""
        z, logdet = self.forward(x, cond)
        self._z = z
        per = 0.5 * np.sum(z * z, axis=1) - logdet + 0.5 * DIM * LOG_2PI
        loss = float(per.mean())
        if not math.isfinite(loss):
            raise NumericError("non-finite NLL")
        return loss

    def log_density(self, x, cond):
        z, logdet = self.forward(x, cond)
        return -0.5 * np.sum(z * z, axis=1) + logdet - 0.5 * DIM * LOG_2PI

    def backward(self):
        """Backprop the last :meth:`nll`; returns dL/dcond (n, cond_dim)."""
        n = len(self._z)
        gy = self._z / n
        gld = np.full(n, -1.0 / n)
        gcond = np.zeros_like(self._cond, dtype=np.float64)
        for b in reversed(self.blocks):
            gy, gc = b.backward(gy, gld)
            gcond += gc
        return gcond

    def named_params(self):
        for i, b in enumerate(self.blocks):
            yield from b.named_params(f"flow.block{i}.")

    def named_grads(self):
        for i, b in enumerate(self.blocks):
            yield from b.named_grads(f"flow.block{i}.")


class CINN:
    """Conditioning network plus flow, trained jointly in stage 2."""

    def __init__(self, condnet, flow: FlowModel):
        if flow.cond_dim != condnet.cfg.cond_dim:
            raise ParameterError("flow cond_dim must match the conditioning network")
        self.condnet = condnet
        self.flow = flow

    def named_params(self):
        yield from self.condnet.named_params()
        yield from self.flow.named_params()

    def named_grads(self):
        yield from self.condnet.named_grads()
        yield from self.flow.named_grads()

    def condition(self, volume, image):
        return self.condnet.embed(volume, image, train=False)


def nll_loss(model: FlowModel, x, cond) -> float:
    return model.nll(x, cond)


def _divergence_guard(history, initial, patience=3, factor=10.0):
    recent = [h["train_nll"] for h in history[-patience:]]
    return (
        initial is not None
        and initial > 0
        and len(recent) == patience
        and all(r > factor * initial for r in recent)
    )


def train_stage2(model: CINN, data, epochs, batch_size=32, lr=0.01, weight_decay=1e-5,
                 decay_every=100, decay_factor=0.1, seed=0, augment=True,
                 state: AdamState | None = None, start_epoch=0, history=None,
                 on_epoch=None, on_diverge=None, half_turn=False):
    """Stage 2: joint maximum-likelihood training of flow and condnet trunk.

    Returns ``(history, state)``; history rows hold epoch, lr and train_nll.
    """
    state = state or AdamState(lr=lr, weight_decay=weight_decay)
    history = list(history or [])
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, 2, epoch])
        model.condnet.set_rng(rng)
        state.lr = lr_schedule(epoch, lr, decay_every, decay_factor)
        losses = []
        for idx in data.batches(batch_size, rng):
            vols, remap, imgs, tgt = data.augmented_batch(idx, rng, augment, half_turn)
            cond = model.condnet.forward(vols, remap, imgs, train=True)
            loss = model.flow.nll(tgt, cond)
            model.condnet.backward(model.flow.backward())
            adam_step(state, dict(model.named_params()), dict(model.named_grads()))
            losses.append(loss)
        history.append({"epoch": epoch, "lr": state.lr, "train_nll": float(np.mean(losses))})
        log.info("stage2 epoch %d nll %.4f", epoch, history[-1]["train_nll"])
        if on_epoch is not None:
            on_epoch(epoch, history, state)
        if _divergence_guard(history, history[0]["train_nll"]):
            path = on_diverge(epoch, history, state) if on_diverge else None
            raise TrainingError(f"stage-2 training diverged at epoch {epoch}", checkpoint=path)
    return history, state


def train_flow(flow: FlowModel, sampler, steps, batch_size=32, lr=0.01, weight_decay=1e-5,
               decay_every=None, decay_factor=0.1, seed=0):
    """Train a bare flow on ``(x, cond) = sampler(rng, batch_size)`` draws.

    Used for image-free tasks; ``decay_every`` counts steps here.
    Returns the per-step loss history.
    """
    state = AdamState(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 3])
    history = []
    for step in range(steps):
        if decay_every:
            state.lr = lr_schedule(step, lr, decay_every, decay_factor)
        x, cond = sampler(rng, batch_size)
        history.append(flow.nll(x, cond))
        flow.backward()
        adam_step(state, dict(flow.named_params()), dict(flow.named_grads()))
    return history


def sample_latent(flow: FlowModel, cond, n_samples=4096, seed=0):
    """Pose-vector samples ``flow.inverse(z, cond)`` for z ~ N(0, I)."""
    rng = np.random.default_rng([seed, 4])
    z = rng.standard_normal((n_samples, DIM))
    return flow.inverse(z, np.asarray(cond, dtype=np.float64).reshape(1, -1))


def sample_posterior(model: CINN, volume, image, n_samples=4096, seed=0) -> np.ndarray:
    """Canonicalized (n_samples, 5) pose-vector posterior samples."""
    cond = model.condition(volume, image)
    return canonicalize_vectors(sample_latent(model.flow, cond, n_samples, seed))
