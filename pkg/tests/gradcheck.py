"""Central finite differences against analytic gradients."""

import numpy as np

H = 1e-5
# gradients that vanish identically (the key bias under softmax shift invariance)
# are compared on this absolute scale instead of against round-off
FLOOR = 1e-6


def rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f, x, h=H, entries=None):
    """d f / d x at the given flat ``entries`` (all when None); ``x`` is perturbed in place."""
    flat = x.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def sample_entries(rng, size, k):
    return rng.choice(size, size=min(k, size), replace=False)


def check_array(f, x, analytic, rng=None, k=None, h=H) -> float:
    """Relative error between ``analytic`` and central differences of ``f`` in ``x``."""
    entries = None if rng is None or k is None else sample_entries(rng, x.size, k)
    num = numeric_grad(f, x, h, entries)
    if entries is None:
        return rel_error(analytic, num)
    return rel_error(np.asarray(analytic).reshape(-1)[entries], num.reshape(-1)[entries])


def check_params(f, backward, params, rng, k=8, names=None):
    """Worst relative error over parameter tensors; ``backward`` fills ``params.grads``."""
    params.zero_grad()
    backward()
    analytic = {n: params.grads[n].copy() for n in params.names()}
    worst = {}
    for name in names or params.names():
        worst[name] = check_array(f, params[name], analytic[name], rng, k)
    return worst
