"""Central finite-difference gradient checking helpers."""

import numpy as np

H = 1e-4


def rel_error(analytic, numeric):
    """Largest elementwise |a - n| / max(|a|, |n|, floor).

    The floor (1e-5 of the largest numeric entry, at least 1e-6) keeps
    entries that are zero up to rounding from dominating, e.g. conv biases
    feeding a batchnorm, whose true gradient is exactly zero.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    floor = max(1e-5 * np.max(np.abs(n), initial=0.0), 1e-6)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


def numeric_grad(f, x, h=H, max_entries=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (modified in place).

    With ``max_entries`` only a random subset of entries is probed; the
    returned mask marks them.
    """
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    mask = np.zeros(flat.size, dtype=bool)
    mask[idx] = True
    return out.reshape(x.shape), mask.reshape(x.shape)


def check_layer(layer, x, train=True, reset=None, max_entries=None):
    """Worst relative error over the input and every parameter gradient."""
    rng = np.random.default_rng(42)
    g = rng.normal(size=_forward(layer, x, train, reset).shape)

    def loss():
        return float(np.sum(_forward(layer, x, train, reset) * g))

    _forward(layer, x, train, reset)
    dx = layer.backward(g)
    grads = {k: v.copy() for k, v in layer.named_grads()}
    worst = {}
    num, mask = numeric_grad(loss, x, max_entries=max_entries)
    worst["input"] = rel_error(dx[mask], num[mask])
    for name, p in layer.named_params():
        num, mask = numeric_grad(loss, p, max_entries=max_entries)
        worst[name] = rel_error(grads[name][mask], num[mask])
    return worst


def _forward(layer, x, train, reset):
    if reset is not None:
        reset()
    return layer.forward(x, train)
