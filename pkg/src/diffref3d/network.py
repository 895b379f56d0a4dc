"""Refinement network with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache, adds parameter gradients into the
:class:`ParamStore` and returns the gradient with respect to its input.
Tensors carry a leading batch dimension throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import N_CELLS
from .boxes import ConfigError

RESIDUAL_DIM = 7


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class HamConfig:
    d: int = 32
    heads: int = 8
    g_hidden: int | None = None
    s_hidden: int | None = None
    det_hidden: int = 128
    tokens: int = N_CELLS
    raw_features: int = 7

    def __post_init__(self):
        if self.g_hidden is None:
            object.__setattr__(self, "g_hidden", self.d)
        if self.s_hidden is None:
            object.__setattr__(self, "s_hidden", 4 * self.d)
        for name in ("d", "heads", "g_hidden", "s_hidden", "det_hidden", "tokens", "raw_features"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ham.{name} must be positive")
        if self.d % self.heads:
            raise ConfigError(f"ham.d={self.d} not divisible by ham.heads={self.heads}")


class ParamStore:
    """Named parameters with gradient slots, iterated in insertion order."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.values.items():
            out.add(k, v.copy())
        return out


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(store: ParamStore, rng, prefix: str, n_in: int, n_out: int) -> None:
    store.add(f"{prefix}.w", _uniform(rng, n_in, (n_in, n_out)))
    store.add(f"{prefix}.b", np.zeros(n_out))


def add_mlp(store: ParamStore, rng, prefix: str, n_in: int, n_hidden: int, n_out: int) -> None:
    add_linear(store, rng, f"{prefix}.fc1", n_in, n_hidden)
    add_linear(store, rng, f"{prefix}.fc2", n_hidden, n_out)


# ---------------------------------------------------------------------------
# two-layer MLP
# ---------------------------------------------------------------------------


def mlp_forward(params: ParamStore, x: np.ndarray, prefix: str):
    w1, b1 = params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]
    w2, b2 = params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"]
    if x.shape[-1] != w1.shape[0]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != expected {w1.shape[0]}")
    pre = x @ w1 + b1
    hid = np.maximum(pre, 0.0)
    out = hid @ w2 + b2
    return out, (x, pre, hid)


def mlp_backward(params: ParamStore, dout: np.ndarray, cache, prefix: str) -> np.ndarray:
    x, pre, hid = cache
    w1, w2 = params[f"{prefix}.fc1.w"], params[f"{prefix}.fc2.w"]
    x2 = x.reshape(-1, x.shape[-1])
    h2 = hid.reshape(-1, hid.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    params.accumulate(f"{prefix}.fc2.w", h2.T @ d2)
    params.accumulate(f"{prefix}.fc2.b", d2.sum(axis=0))
    dh = (d2 @ w2.T) * (pre.reshape(h2.shape) > 0)
    params.accumulate(f"{prefix}.fc1.w", x2.T @ dh)
    params.accumulate(f"{prefix}.fc1.b", dh.sum(axis=0))
    return (dh @ w1.T).reshape(x.shape)


# ---------------------------------------------------------------------------
# RoI token embedding (per-cell affine map of raw grid features)
# ---------------------------------------------------------------------------


def token_embed_forward(params: ParamStore, raw: np.ndarray, prefix: str = "roi"):
    w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
    if raw.shape[-2:] != w.shape[:2]:
        raise ShapeError(f"{prefix}: raw feature shape {raw.shape[-2:]} != {w.shape[:2]}")
    return np.einsum("bcf,cfd->bcd", raw, w) + b, raw


def token_embed_backward(params: ParamStore, dtok: np.ndarray, raw, prefix: str = "roi") -> None:
    params.accumulate(f"{prefix}.w", np.einsum("bcf,bcd->cfd", raw, dtok))
    params.accumulate(f"{prefix}.b", dtok.sum(axis=0))


# ---------------------------------------------------------------------------
# residual embedding and time features
# ---------------------------------------------------------------------------


def embed_residual(params: ParamStore, x_t: np.ndarray):
    return mlp_forward(params, np.asarray(x_t, dtype=np.float64), "g")


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps: sin half followed by cos half."""
    t = np.asarray(t, dtype=np.float64)
    half = width // 2
    freq = 10000.0 ** (2.0 * np.arange(half) / width)
    arg = t[..., None] / freq
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


# ---------------------------------------------------------------------------
# multi-head self-attention
# ---------------------------------------------------------------------------


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _split(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def self_attention_forward(params: ParamStore, f_h: np.ndarray, q_bias: np.ndarray, heads: int, prefix: str = "attn"):
    """Multi-head attention with query ``f_h + q_bias`` and key = value = ``f_h``."""
    d = params[f"{prefix}.wq"].shape[0]
    if f_h.ndim != 3 or f_h.shape[-1] != d or q_bias.shape[-1] != d:
        raise ShapeError(f"{prefix}: expected (B, N, {d}) tokens and (B, {d}) query bias")
    if d % heads:
        raise ShapeError(f"{prefix}: width {d} not divisible by {heads} heads")
    xq = f_h + q_bias[:, None, :]
    q = xq @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    k = f_h @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    v = f_h @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    qh, kh, vh = _split(q, heads), _split(k, heads), _split(v, heads)
    scale = 1.0 / np.sqrt(d // heads)
    attn = softmax(qh @ kh.transpose(0, 1, 3, 2) * scale)
    o = _merge(attn @ vh)
    y = o @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    return y, (f_h, xq, qh, kh, vh, attn, o, scale, heads)


def self_attention_backward(params: ParamStore, dy: np.ndarray, cache, prefix: str = "attn"):
    """Returns (d_f_h, d_q_bias)."""
    f_h, xq, qh, kh, vh, attn, o, scale, heads = cache
    params.accumulate(f"{prefix}.wo", _flat(o).T @ _flat(dy))
    params.accumulate(f"{prefix}.bo", _flat(dy).sum(axis=0))
    do = _split(dy @ params[f"{prefix}.wo"].T, heads)
    dattn = do @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ do
    ds = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dq, dk, dv = _merge(dqh), _merge(dkh), _merge(dvh)
    for name, grad, inp in (("q", dq, xq), ("k", dk, f_h), ("v", dv, f_h)):
        params.accumulate(f"{prefix}.w{name}", _flat(inp).T @ _flat(grad))
        params.accumulate(f"{prefix}.b{name}", _flat(grad).sum(axis=0))
    dxq = dq @ params[f"{prefix}.wq"].T
    df_h = dxq + dk @ params[f"{prefix}.wk"].T + dv @ params[f"{prefix}.wv"].T
    return df_h, dxq.sum(axis=1)


# ---------------------------------------------------------------------------
# temporal transformation
# ---------------------------------------------------------------------------


def temporal_factors(params: ParamStore, t, prefix: str = "s"):
    """Scale and shift vectors for timesteps ``t``; returns (W_t, b_t, cache)."""
    width = params[f"{prefix}.fc1.w"].shape[0]
    emb = time_embedding(np.atleast_1d(t), width)
    out, cache = mlp_forward(params, emb, prefix)
    d = out.shape[-1] // 2
    return out[:, :d], out[:, d:], cache


def temporal_transform(params: ParamStore, a_h: np.ndarray, t, prefix: str = "s"):
    """h_t = W_t * a_h + b_t (elementwise); also returns ||W_t|| per row."""
    w_t, b_t, mlp_cache = temporal_factors(params, t, prefix)
    h = w_t * a_h + b_t
    norms = np.linalg.norm(w_t, axis=-1)
    return h, norms, (a_h, w_t, mlp_cache)


def temporal_transform_backward(params: ParamStore, dh: np.ndarray, cache, prefix: str = "s") -> np.ndarray:
    a_h, w_t, mlp_cache = cache
    dout = np.concatenate([dh * a_h, dh], axis=-1)
    mlp_backward(params, dout, mlp_cache, prefix)
    return dh * w_t


# ---------------------------------------------------------------------------
# hypothesis attention module and detection head
# ---------------------------------------------------------------------------


def ham_forward(params: ParamStore, hyp_tokens: np.ndarray, x_t: np.ndarray, t, heads: int, enable_tt: bool = True):
    q_bias, g_cache = embed_residual(params, x_t)
    attn_out, attn_cache = self_attention_forward(params, hyp_tokens, q_bias, heads)
    pooled = attn_out.mean(axis=1)
    if enable_tt:
        h, norms, tt_cache = temporal_transform(params, pooled, t)
    else:
        h, norms, tt_cache = pooled, None, None
    return h, (g_cache, attn_cache, tt_cache, attn_out.shape[1], norms)


def ham_backward(params: ParamStore, dh: np.ndarray, cache) -> np.ndarray:
    """Gradient with respect to the hypothesis tokens."""
    g_cache, attn_cache, tt_cache, n_tok, _ = cache
    dpooled = temporal_transform_backward(params, dh, tt_cache) if tt_cache is not None else dh
    dattn = np.repeat(dpooled[:, None, :] / n_tok, n_tok, axis=1)
    dtok, dq_bias = self_attention_backward(params, dattn, attn_cache)
    mlp_backward(params, dq_bias, g_cache, "g")
    return dtok


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def detection_head(params: ParamStore, f_p: np.ndarray, h_t: np.ndarray | None):
    """Returns (x0_hat, logit, c_hat, cache)."""
    z = f_p if h_t is None else f_p + h_t
    x0_hat, reg_cache = mlp_forward(params, z, "det.reg")
    logit, cls_cache = mlp_forward(params, z, "det.cls")
    logit = logit[:, 0]
    return x0_hat, logit, sigmoid(logit), (reg_cache, cls_cache)


def detection_head_backward(params: ParamStore, dx0: np.ndarray, dlogit: np.ndarray, cache) -> np.ndarray:
    reg_cache, cls_cache = cache
    dz = mlp_backward(params, dx0, reg_cache, "det.reg")
    dz = dz + mlp_backward(params, dlogit[:, None], cls_cache, "det.cls")
    return dz


class RefinementNet:
    """Proposal branch plus optional hypothesis attention module."""

    def __init__(self, cfg: HamConfig, seed: int = 0, enable_ham: bool = True, enable_tt: bool = True):
        self.cfg = cfg
        self.enable_ham = enable_ham
        self.enable_tt = enable_tt
        rng = np.random.default_rng(seed)
        d = cfg.d
        p = ParamStore()
        p.add("roi.w", _uniform(rng, cfg.raw_features, (cfg.tokens, cfg.raw_features, d)))
        p.add("roi.b", np.zeros((cfg.tokens, d)))
        add_mlp(p, rng, "g", RESIDUAL_DIM, cfg.g_hidden, d)
        for name in ("q", "k", "v", "o"):
            add_linear_named(p, rng, "attn", name, d)
        add_mlp(p, rng, "s", d, cfg.s_hidden, 2 * d)
        add_mlp(p, rng, "det.reg", d, cfg.det_hidden, RESIDUAL_DIM)
        add_mlp(p, rng, "det.cls", d, cfg.det_hidden, 1)
        self.params = p

    def forward(self, raw_p: np.ndarray, raw_h: np.ndarray | None, x_t: np.ndarray, t):
        """Returns (x0_hat (B, 7), logit (B,), cache)."""
        tok_p, p_cache = token_embed_forward(self.params, raw_p)
        f_p = tok_p.mean(axis=1)
        h_t, ham_cache, h_cache = None, None, None
        if self.enable_ham:
            tok_h, h_cache = token_embed_forward(self.params, raw_h)
            t_arr = np.broadcast_to(np.asarray(t), (raw_p.shape[0],))
            h_t, ham_cache = ham_forward(self.params, tok_h, x_t, t_arr, self.cfg.heads, self.enable_tt)
        x0_hat, logit, _, det_cache = detection_head(self.params, f_p, h_t)
        return x0_hat, logit, (p_cache, h_cache, ham_cache, det_cache, tok_p.shape[1])

    def backward(self, dx0: np.ndarray, dlogit: np.ndarray, cache) -> None:
        p_cache, h_cache, ham_cache, det_cache, n_tok = cache
        dz = detection_head_backward(self.params, dx0, dlogit, det_cache)
        dtok_p = np.repeat(dz[:, None, :] / n_tok, n_tok, axis=1)
        token_embed_backward(self.params, dtok_p, p_cache)
        if ham_cache is not None:
            dtok_h = ham_backward(self.params, dz, ham_cache)
            token_embed_backward(self.params, dtok_h, h_cache)

    def scale_norms(self, timesteps) -> np.ndarray:
        w_t, _, _ = temporal_factors(self.params, np.asarray(timesteps))
        return np.linalg.norm(w_t, axis=-1)


def add_linear_named(store: ParamStore, rng, prefix: str, name: str, d: int) -> None:
    store.add(f"{prefix}.w{name}", _uniform(rng, d, (d, d)))
    store.add(f"{prefix}.b{name}", np.zeros(d))


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamStore) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, value in params.values.items():
            g = params.grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
