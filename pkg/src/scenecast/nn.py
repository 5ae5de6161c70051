"""Minimal differentiable kernel: layers with hand-written backward passes.

Everything is double precision numpy. Each operation is a forward function
returning (output, cache) and a matching backward function that maps the
upstream gradient to exact input/parameter gradients. There is no graph
engine; the model zoo is small and fixed, so composition is explicit.
"""

from __future__ import annotations

import copy
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np


class ParamSet:
    """Named parameter tensors with matching gradient accumulators.

    Insertion order is the canonical iteration order; training code relies
    on it for bit-reproducible gradient accumulation.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def grad(self, name: str) -> np.ndarray:
        return self.grads[name]

    def names(self):
        return list(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def scale_grads(self, factor: float) -> None:
        for g in self.grads.values():
            g *= factor

    def copy(self) -> "ParamSet":
        ps = ParamSet()
        for name, value in self.params.items():
            ps.add(name, value.copy())
        return ps

    def load_values(self, other: "ParamSet") -> None:
        for name, value in other.params.items():
            self.params[name][...] = value

    def n_scalars(self) -> int:
        return sum(v.size for v in self.params.values())


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform in +-sqrt(1/fan_in); the standard small-net choice here."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsumexp_axis0(x: np.ndarray) -> np.ndarray:
    """logsumexp over axis 0, tolerating -inf columns."""
    m = np.max(x, axis=0)
    finite = np.isfinite(m)
    out = np.full(m.shape, -np.inf)
    if np.any(finite):
        shifted = x[:, finite] - m[finite]
        out[finite] = m[finite] + np.log(np.sum(np.exp(shifted), axis=0))
    return out


# ---------------------------------------------------------------------------
# dense


def dense_forward(x, W, b):
    """y = W @ x + b for a single input vector."""
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ValueError(f"dense shape mismatch: W{W.shape} x{x.shape} b{b.shape}")
    return W @ x + b


def dense_backward(upstream, x, W):
    """Gradients (dx, dW, db) for dense_forward."""
    dx = W.T @ upstream
    dW = np.outer(upstream, x)
    return dx, dW, upstream.copy()


# ---------------------------------------------------------------------------
# 3x3 same-padding convolution (cross-correlation), stride 1


def _windows3(padded: np.ndarray) -> np.ndarray:
    # padded: C x (R+2) x (C+2) -> windows: C x R x Cc x 3 x 3
    return np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))


def conv3x3_forward(x, K, b):
    """Cross-correlation with zero padding 1; output C_out x R x C.

    Returns (y, cache); pass cache to conv3x3_backward.
    """
    c_in, rows, cols = x.shape
    c_out, kc_in, kh, kw = K.shape
    if kc_in != c_in or (kh, kw) != (3, 3) or b.shape != (c_out,):
        raise ValueError(f"conv shape mismatch: x{x.shape} K{K.shape} b{b.shape}")
    padded = np.zeros((c_in, rows + 2, cols + 2))
    padded[:, 1:-1, 1:-1] = x
    win = _windows3(padded)
    y = np.einsum("oijk,ircjk->orc", K, win, optimize=True) + b[:, None, None]
    return y, (win, K, x.shape)


def conv3x3_backward(upstream, cache):
    """Gradients (dx, dK, db) for conv3x3_forward."""
    win, K, x_shape = cache
    c_in, rows, cols = x_shape
    dK = np.einsum("orc,ircjk->oijk", upstream, win, optimize=True)
    db = upstream.sum(axis=(1, 2))
    up_padded = np.zeros((K.shape[0], rows + 2, cols + 2))
    up_padded[:, 1:-1, 1:-1] = upstream
    up_win = _windows3(up_padded)
    K_rot = K[:, :, ::-1, ::-1]
    dx = np.einsum("orcjk,oijk->irc", up_win, K_rot, optimize=True)
    return dx, dK, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(upstream, mask):
    return upstream * mask


# ---------------------------------------------------------------------------
# GRU cell


GRU_PARAM_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_n", "U_n", "b_n")


def init_gru_params(rng, n_x: int, n_h: int) -> dict[str, np.ndarray]:
    p = {}
    for gate in ("z", "r", "n"):
        p[f"W_{gate}"] = uniform_init(rng, (n_h, n_x), n_x)
        p[f"U_{gate}"] = uniform_init(rng, (n_h, n_h), n_h)
        p[f"b_{gate}"] = np.zeros(n_h)
    return p


def gru_step(x, h, p):
    """Standard GRU update; returns (h_new, cache).

    z = sig(W_z x + U_z h + b_z), r = sig(W_r x + U_r h + b_r),
    n = tanh(W_n x + U_n (r*h) + b_n), h' = (1 - z)*n + z*h.
    """
    if p["W_z"].shape[1] != x.shape[0] or p["U_z"].shape[1] != h.shape[0]:
        raise ValueError("gru shape mismatch")
    z = sigmoid(p["W_z"] @ x + p["U_z"] @ h + p["b_z"])
    r = sigmoid(p["W_r"] @ x + p["U_r"] @ h + p["b_r"])
    rh = r * h
    n = np.tanh(p["W_n"] @ x + p["U_n"] @ rh + p["b_n"])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, z, r, rh, n)


def gru_step_backward(upstream, cache, p):
    """Gradients for gru_step: (dx, dh, dparams dict)."""
    x, h, z, r, rh, n = cache
    dz = upstream * (h - n)
    dn = upstream * (1.0 - z)
    dh = upstream * z

    dan = dn * (1.0 - n * n)
    drh = p["U_n"].T @ dan
    dr = drh * h
    dh = dh + drh * r

    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    dh = dh + p["U_z"].T @ daz + p["U_r"].T @ dar
    dx = p["W_z"].T @ daz + p["W_r"].T @ dar + p["W_n"].T @ dan

    grads = {
        "W_z": np.outer(daz, x), "U_z": np.outer(daz, h), "b_z": daz,
        "W_r": np.outer(dar, x), "U_r": np.outer(dar, h), "b_r": dar,
        "W_n": np.outer(dan, x), "U_n": np.outer(dan, rh), "b_n": dan,
    }
    return dx, dh, grads


# ---------------------------------------------------------------------------
# softmax cross-entropy


def softmax_xent(logits, target_index: int):
    """Stable softmax + cross-entropy; returns (loss, probs)."""
    n = logits.shape[0]
    if not 0 <= target_index < n:
        raise ValueError(f"target {target_index} out of range for {n} logits")
    m = np.max(logits)
    ex = np.exp(logits - m)
    total = ex.sum()
    probs = ex / total
    loss = float(np.log(total) + m - logits[target_index])
    return loss, probs


def softmax_xent_backward(probs, target_index: int, upstream: float = 1.0):
    g = probs.copy()
    g[target_index] -= 1.0
    return g * upstream


# ---------------------------------------------------------------------------
# additive attention


def init_attention_params(rng, n_q: int, n_k: int, n_att: int) -> dict[str, np.ndarray]:
    return {
        "W_q": uniform_init(rng, (n_att, n_q), n_q),
        "W_k": uniform_init(rng, (n_att, n_k), n_k),
        "b": np.zeros(n_att),
        "v": uniform_init(rng, (n_att,), n_att),
    }


def additive_attention(query, keys, p):
    """score_i = v . tanh(W_q q + W_k k_i + b); returns (context, weights, cache)."""
    keys = np.asarray(keys)
    if keys.ndim != 2 or keys.shape[0] < 1:
        raise ValueError("attention needs at least one key")
    pre = keys @ p["W_k"].T + (p["W_q"] @ query + p["b"])[None, :]
    E = np.tanh(pre)
    scores = E @ p["v"]
    m = scores.max()
    ex = np.exp(scores - m)
    weights = ex / ex.sum()
    context = weights @ keys
    return context, weights, (query, keys, E, weights)


def additive_attention_backward(dcontext, dweights, cache, p):
    """Gradients (dquery, dkeys, dparams) for additive_attention.

    dweights may be None when only the context is consumed downstream.
    """
    query, keys, E, weights = cache
    dw = keys @ dcontext
    if dweights is not None:
        dw = dw + dweights
    dkeys = np.outer(weights, dcontext)
    ds = weights * (dw - float(weights @ dw))
    dE = np.outer(ds, p["v"])
    dv = E.T @ ds
    dpre = dE * (1.0 - E * E)
    dkeys = dkeys + dpre @ p["W_k"]
    dpre_sum = dpre.sum(axis=0)
    grads = {
        "W_q": np.outer(dpre_sum, query),
        "W_k": dpre.T @ keys,
        "b": dpre_sum,
        "v": dv,
    }
    dquery = p["W_q"].T @ dpre_sum
    return dquery, dkeys, grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(ps: ParamSet, opt: OptimizerState) -> None:
    """One Adam step with bias correction; zeroes gradients afterwards."""
    opt.step += 1
    t = opt.step
    for name in ps.params:
        g = ps.grads[name]
        if name not in opt.m:
            opt.m[name] = np.zeros_like(g)
            opt.v[name] = np.zeros_like(g)
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / (1.0 - opt.beta1**t)
        v_hat = opt.v[name] / (1.0 - opt.beta2**t)
        ps.params[name] -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    ps.zero_grads()


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def finite_diff_check(f, ps: ParamSet, step: float = 1e-5, coords=None,
                      atol: float = 0.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(want_grads)`` must return the scalar loss computed from the current
    ``ps.params``; when ``want_grads`` is true it must also populate
    ``ps.grads``. ``coords`` optionally restricts the check to
    {param_name: [flat indices]}; by default every coordinate is checked.
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    Coordinates where both sides are below ``atol`` count as agreeing:
    central differences of an O(1) loss at step 1e-5 carry ~1e-11 roundoff
    noise, so gradients that small are below the method's resolution.
    """
    if step == 0:
        raise ValueError("finite-difference step must be nonzero")
    ps.zero_grads()
    f(True)
    analytic = {name: g.copy() for name, g in ps.grads.items()}
    max_err = 0.0
    for name, value in ps.params.items():
        flat = value.reshape(-1)
        idxs = coords.get(name, []) if coords is not None else range(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            lp = f(False)
            flat[i] = orig - step
            lm = f(False)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            if abs(numeric) < atol and abs(a) < atol:
                continue
            err = abs(numeric - a) / max(abs(numeric), abs(a), 1e-8)
            max_err = max(max_err, err)
    return max_err


def sample_coords(ps: ParamSet, per_tensor: int, rng: np.random.Generator):
    """Random coordinate subset covering every parameter tensor."""
    out = {}
    for name, value in ps.params.items():
        k = min(per_tensor, value.size)
        out[name] = sorted(rng.choice(value.size, size=k, replace=False).tolist())
    return out


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, component: str, ps: ParamSet, config: dict) -> None:
    """One JSON document per model; floats round-trip exactly via repr."""
    doc = {
        "format_version": 1,
        "component": component,
        "params": {
            name: {"shape": list(value.shape), "data": value.reshape(-1).tolist()}
            for name, value in ps.params.items()
        },
        "config": config,
    }
    payload = json.dumps(doc).encode()
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Returns (component, ParamSet, config)."""
    with open(path, "rb") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format: {doc.get('format_version')}")
    ps = ParamSet()
    for name, entry in doc["params"].items():
        ps.add(name, np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]))
    return doc["component"], ps, doc["config"]


def deepcopy_params(ps: ParamSet) -> dict[str, np.ndarray]:
    return copy.deepcopy(ps.params)
