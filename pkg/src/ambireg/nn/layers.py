"""Layers with hand-written backward passes.

Activations are channels-last: ``(N, *spatial, C)``.  Every layer caches what
its backward pass needs during ``forward`` and writes parameter gradients
into ``self.grads`` (overwriting, not accumulating) during ``backward``.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..errors import NumericError, ParameterError


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train)

    def named_params(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v

    def named_grads(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, self.grads.setdefault(k, np.zeros_like(v))

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activation in {where}")


class Dense(Layer):
    """``y = x @ W + b`` on the last axis."""

    def __init__(self, n_in, n_out, rng=None, zero=False):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.params = {"W": w, "b": np.zeros(n_out)}
        self.zero_grad()

    def forward(self, x, train=False):
        if x.shape[-1] != self.n_in:
            raise ParameterError(f"Dense expects {self.n_in} features, got {x.shape[-1]}")
        self._x = x
        out = x @ self.params["W"] + self.params["b"]
        _check_finite(out, "Dense")
        return out

    def backward(self, dout):
        x = self._x.reshape(-1, self.n_in)
        d = dout.reshape(-1, self.n_out)
        self.grads["W"] = x.T @ d
        self.grads["b"] = d.sum(axis=0)
        return dout @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Dropout(Layer):
    """Inverted dropout; identity in eval mode.

    The mask generator is taken from ``self.rng``, which the owner must set
    (see :meth:`Sequential.set_rng`) before any training-mode forward.
    """

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ParameterError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng = None

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class BatchNorm(Layer):
    """Per-channel normalization over batch and spatial axes."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self.zero_grad()

    def forward(self, x, train=False):
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // x.shape[-1]
            unbiased = var * m / max(m - 1, 1)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1.0 - self.momentum
            rm += self.momentum * mu
            rv *= 1.0 - self.momentum
            rv += self.momentum * unbiased
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv, train, axes)
        return xhat * gamma + beta

    def backward(self, dout):
        xhat, inv, train, axes = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        dxhat = dout * gamma
        if not train:
            return dxhat * inv
        return inv * (
            dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes)
        )


class Conv(Layer):
    """N-d convolution (2-d or 3-d), zero padding, square kernel and stride.

    Forward is one im2col matmul; the input gradient is scattered back one
    kernel offset at a time.
    """

    def __init__(self, ndim, c_in, c_out, kernel=3, stride=2, padding=1, rng=None):
        super().__init__()
        self.ndim, self.c_in, self.c_out = ndim, c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = c_in * kernel**ndim
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(kernel,) * ndim + (c_in, c_out))
        self.params = {"W": w, "b": np.zeros(c_out)}
        self.zero_grad()

    def out_shape(self, spatial):
        return tuple((s + 2 * self.padding - self.kernel) // self.stride + 1 for s in spatial)

    def _slices(self, osz):
        for off in itertools.product(range(self.kernel), repeat=self.ndim):
            sl = tuple(slice(o, o + self.stride * (n - 1) + 1, self.stride) for o, n in zip(off, osz))
            yield off, (slice(None),) + sl + (slice(None),)

    def _patches(self, xp, osz):
        # (N, *osz, *kernel, C) view of the padded input, copied into rows
        st = xp.strides
        shape = (xp.shape[0],) + osz + (self.kernel,) * self.ndim + (self.c_in,)
        strides = (st[0],) + tuple(s * self.stride for s in st[1:-1]) + st[1:-1] + (st[-1],)
        view = np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)
        return view.reshape(-1, self.kernel**self.ndim * self.c_in)

    def forward(self, x, train=False):
        if x.ndim != self.ndim + 2 or x.shape[-1] != self.c_in:
            raise ParameterError(
                f"Conv{self.ndim}d expects (N, *{self.ndim} spatial, {self.c_in}), got {x.shape}"
            )
        p = self.padding
        xp = np.pad(x, [(0, 0)] + [(p, p)] * self.ndim + [(0, 0)])
        osz = self.out_shape(x.shape[1:-1])
        if min(osz) < 1:
            raise ParameterError(f"input {x.shape} too small for Conv{self.ndim}d")
        cols = self._patches(xp, osz)
        out = cols @ self.params["W"].reshape(-1, self.c_out) + self.params["b"]
        out = out.reshape((x.shape[0],) + osz + (self.c_out,))
        self._cache = (xp.shape, cols, osz)
        _check_finite(out, f"Conv{self.ndim}d")
        return out

    def backward(self, dout):
        shape, cols, osz = self._cache
        w = self.params["W"]
        d2 = dout.reshape(-1, self.c_out)
        self.grads["W"] = (cols.T @ d2).reshape(w.shape)
        self.grads["b"] = d2.sum(axis=0)
        dcols = (d2 @ w.reshape(-1, self.c_out).T).reshape(
            (shape[0],) + osz + (self.kernel,) * self.ndim + (self.c_in,)
        )
        dxp = np.zeros(shape)
        lead = (slice(None),) * (1 + self.ndim)
        for off, sl in self._slices(osz):
            dxp[sl] += dcols[lead + off]
        p = self.padding
        inner = (slice(None),) + (slice(p, -p if p else None),) * self.ndim + (slice(None),)
        return dxp[inner]


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=tuple(range(1, x.ndim - 1)))

    def backward(self, dout):
        shape = self._shape
        n = int(np.prod(shape[1:-1]))
        expand = dout.reshape((shape[0],) + (1,) * (len(shape) - 2) + (shape[-1],))
        return np.broadcast_to(expand / n, shape).copy()


class Flatten(Layer):
    """(N, *spatial, C) -> (N, prod(spatial) * C); keeps where features sit."""

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(len(x), -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Sequential(Layer):
    def __init__(self, layers, names=None):
        super().__init__()
        self.layers = list(layers)
        self.names = list(names) if names else [str(i) for i in range(len(self.layers))]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self, prefix=""):
        for name, layer in zip(self.names, self.layers):
            yield from layer.named_params(f"{prefix}{name}.")

    def named_grads(self, prefix=""):
        for name, layer in zip(self.names, self.layers):
            yield from layer.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, layer in zip(self.names, self.layers):
            yield from layer.named_buffers(f"{prefix}{name}.")

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def set_rng(self, rng):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng
            elif isinstance(layer, Sequential):
                layer.set_rng(rng)


def mlp(sizes, rng, zero_last=False):
    """Dense/ReLU stack; the last layer has no activation."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(Dense(a, b, rng, zero=zero_last and last))
        if not last:
            layers.append(ReLU())
    return Sequential(layers)
