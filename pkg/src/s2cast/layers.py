"""Differentiable layers with explicit forward and backward passes.

Every ``*_forward`` function returns its output together with a
:class:`Cache`; the matching ``*_backward`` function consumes that cache
exactly once and returns the gradient w.r.t. the layer input plus a dict of
parameter gradients keyed like the parameter fields.

Shapes: ``B`` batch, ``T`` time steps, ``F`` input features, ``H`` hidden
units. LSTM gates are stacked in the fixed order (input, forget, candidate,
output) along the first axis of ``W``, ``U`` and ``b``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DataError, ShapeError, UsageError


@dataclass
class LstmParams:
    W: np.ndarray  # (4H, F)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden(self):
        return self.U.shape[1]

    @property
    def features(self):
        return self.W.shape[1]

    def check(self):
        H = self.U.shape[1]
        if self.U.shape != (4 * H, H) or self.W.shape[0] != 4 * H or self.b.shape != (4 * H,):
            raise ShapeError(
                f"inconsistent LSTM shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}"
            )


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-3


@dataclass
class AttentionParams:
    w: np.ndarray  # (H',)
    b: np.ndarray  # (1,)


@dataclass
class DenseParams:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)


@dataclass
class Cache:
    layer: str
    values: dict = field(default_factory=dict)
    used: bool = False

    def take(self, layer):
        if self.layer != layer:
            raise UsageError(f"cache from {self.layer!r} passed to {layer!r} backward")
        if self.used:
            raise UsageError(f"stale {layer!r} cache: backward already consumed it")
        self.used = True
        return self.values


def _take(cache, layer):
    if cache is None:
        raise UsageError(f"missing cache for {layer!r} backward")
    return cache.take(layer)


# ---------------------------------------------------------------------------
# LSTM


def lstm_cell_forward(x_t, h_prev, c_prev, p):
    p.check()
    if x_t.ndim != 2 or x_t.shape[1] != p.features:
        raise ShapeError(f"x_t shape {x_t.shape} does not match W {p.W.shape}")
    H = p.hidden
    if h_prev.shape != (x_t.shape[0], H) or c_prev.shape != h_prev.shape:
        raise ShapeError(f"state shapes {h_prev.shape}/{c_prev.shape} expected ({x_t.shape[0]}, {H})")
    z = tn.matmul(x_t, p.W.T) + tn.matmul(h_prev, p.U.T) + p.b
    i = tn.sigmoid(z[:, :H])
    f = tn.sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = tn.sigmoid(z[:, 3 * H:])
    c_t = f * c_prev + i * g
    tc = np.tanh(c_t)
    h_t = o * tc
    cache = Cache("lstm_cell", dict(x=x_t, h_prev=h_prev, c_prev=c_prev,
                                    i=i, f=f, g=g, o=o, tc=tc, p=p))
    return h_t, c_t, cache


def lstm_cell_backward(dh, dc, cache):
    """Backward through one step; ``dc`` is the cell-state gradient from t+1."""
    v = _take(cache, "lstm_cell")
    i, f, g, o, tc, p = v["i"], v["f"], v["g"], v["o"], v["tc"], v["p"]
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * v["c_prev"] * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ],
        axis=1,
    )
    grads = {"W": dz.T @ v["x"], "U": dz.T @ v["h_prev"], "b": dz.sum(axis=0)}
    dx = dz @ p.W
    dh_prev = dz @ p.U
    dc_prev = dc * f
    return dx, dh_prev, dc_prev, grads


def lstm_layer_forward(x, p, return_sequences=True):
    """Unroll the cell over ``x`` of shape (B, T, F) from zero initial state."""
    if x.ndim != 3:
        raise ShapeError(f"expected (B, T, F) input, got {x.shape}")
    B, T, _ = x.shape
    if T == 0:
        raise ShapeError("sequence has no time steps")
    H = p.hidden
    h = tn.zeros(B, H)
    c = tn.zeros(B, H)
    out = np.empty((B, T, H))
    steps = []
    for t in range(T):
        h, c, step = lstm_cell_forward(x[:, t, :], h, c, p)
        out[:, t, :] = h
        steps.append(step)
    cache = Cache("lstm", dict(steps=steps, p=p, return_sequences=return_sequences, shape=x.shape))
    return (out if return_sequences else out[:, -1, :]), cache


def lstm_layer_backward(dout, cache):
    v = _take(cache, "lstm")
    B, T, F = v["shape"]
    p = v["p"]
    H = p.hidden
    if v["return_sequences"]:
        if dout.shape != (B, T, H):
            raise ShapeError(f"upstream gradient {dout.shape}, expected {(B, T, H)}")
        dseq = dout
    else:
        if dout.shape != (B, H):
            raise ShapeError(f"upstream gradient {dout.shape}, expected {(B, H)}")
        dseq = np.zeros((B, T, H))
        dseq[:, -1, :] = dout
    dx = np.empty((B, T, F))
    grads = {"W": np.zeros_like(p.W), "U": np.zeros_like(p.U), "b": np.zeros_like(p.b)}
    dh_next = tn.zeros(B, H)
    dc_next = tn.zeros(B, H)
    for t in reversed(range(T)):
        dx_t, dh_next, dc_next, g = lstm_cell_backward(dseq[:, t, :] + dh_next, dc_next, v["steps"][t])
        dx[:, t, :] = dx_t
        for k in grads:
            grads[k] += g[k]
    return dx, grads


def bilstm_forward(x, p_fwd, p_bwd):
    """Forward and time-reversed LSTM outputs concatenated to (B, T, 2H)."""
    if p_fwd.hidden != p_bwd.hidden:
        raise ConfigError(f"direction hidden sizes differ: {p_fwd.hidden} vs {p_bwd.hidden}")
    out_f, cache_f = lstm_layer_forward(x, p_fwd)
    out_b, cache_b = lstm_layer_forward(x[:, ::-1, :], p_bwd)
    out = np.concatenate([out_f, out_b[:, ::-1, :]], axis=2)
    return out, Cache("bilstm", dict(fwd=cache_f, bwd=cache_b, H=p_fwd.hidden))


def bilstm_backward(dout, cache):
    v = _take(cache, "bilstm")
    H = v["H"]
    if dout.ndim != 3 or dout.shape[2] != 2 * H:
        raise ShapeError(f"upstream gradient {dout.shape} does not end in {2 * H}")
    dx_f, g_f = lstm_layer_backward(np.ascontiguousarray(dout[:, :, :H]), v["fwd"])
    dx_b, g_b = lstm_layer_backward(np.ascontiguousarray(dout[:, ::-1, H:]), v["bwd"])
    dx = dx_f + dx_b[:, ::-1, :]
    return dx, {"fwd": g_f, "bwd": g_b}


# ---------------------------------------------------------------------------
# Batch normalization


def batchnorm_forward(x, p, mode="train"):
    """Normalize each channel over the batch and time axes.

    In ``train`` mode the running statistics are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[-1]
    if p.gamma.shape != (C,):
        raise ShapeError(f"batch norm over {C} channels, gamma has shape {p.gamma.shape}")
    flat = x.reshape(-1, C)
    if mode == "train":
        n = flat.shape[0]
        if n < 2:
            raise DataError("train-mode batch norm needs at least 2 rows of statistics")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        p.running_mean *= p.momentum
        p.running_mean += (1.0 - p.momentum) * mean
        p.running_var *= p.momentum
        p.running_var += (1.0 - p.momentum) * var
    elif mode == "infer":
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (flat - mean) * inv
    y = xhat * p.gamma + p.beta
    cache = Cache("batchnorm", dict(xhat=xhat, inv=inv, gamma=p.gamma, mode=mode, shape=x.shape))
    return y.reshape(x.shape), cache


def batchnorm_backward(dout, cache):
    v = _take(cache, "batchnorm")
    if dout.shape != v["shape"]:
        raise ShapeError(f"upstream gradient {dout.shape}, expected {v['shape']}")
    C = v["shape"][-1]
    dy = dout.reshape(-1, C)
    xhat, inv, gamma = v["xhat"], v["inv"], v["gamma"]
    grads = {"gamma": (dy * xhat).sum(axis=0), "beta": dy.sum(axis=0)}
    dxhat = dy * gamma
    if v["mode"] == "train":
        n = dy.shape[0]
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dxhat * inv
    return dx.reshape(v["shape"]), grads


# ---------------------------------------------------------------------------
# Activations, attention, pooling, dense


def relu_forward(x):
    mask = x > 0
    return x * mask, Cache("relu", dict(mask=mask))


def relu_backward(dout, cache):
    v = _take(cache, "relu")
    return dout * v["mask"], {}


def attention_forward(hseq, p):
    """Score each time step, softmax over time, reweight the sequence.

    Returns ``(weighted, alpha, cache)`` with ``alpha`` of shape (B, T).
    """
    if hseq.ndim != 3 or hseq.shape[1] == 0:
        raise ShapeError(f"attention expects (B, T>=1, H), got {hseq.shape}")
    if p.w.shape != (hseq.shape[2],) or p.b.shape != (1,):
        raise ShapeError(f"attention weights {p.w.shape} do not match features {hseq.shape[2]}")
    scores = hseq @ p.w + p.b[0]
    alpha = tn.softmax(scores, axis=1)
    weighted = hseq * alpha[:, :, None]
    return weighted, alpha, Cache("attention", dict(hseq=hseq, alpha=alpha, w=p.w))


def attention_backward(dout, cache):
    v = _take(cache, "attention")
    hseq, alpha, w = v["hseq"], v["alpha"], v["w"]
    if dout.shape != hseq.shape:
        raise ShapeError(f"upstream gradient {dout.shape}, expected {hseq.shape}")
    dalpha = (dout * hseq).sum(axis=2)
    dscore = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    dh = dout * alpha[:, :, None] + dscore[:, :, None] * w
    grads = {"w": np.einsum("bt,btk->k", dscore, hseq), "b": np.array([dscore.sum()])}
    return dh, grads


def gap_forward(x):
    if x.ndim != 3 or x.shape[1] == 0:
        raise ShapeError(f"pooling expects (B, T>=1, C), got {x.shape}")
    return tn.reduce("mean", x, axis=1), Cache("gap", dict(shape=x.shape))


def gap_backward(dout, cache):
    B, T, C = _take(cache, "gap")["shape"]
    if dout.shape != (B, C):
        raise ShapeError(f"upstream gradient {dout.shape}, expected {(B, C)}")
    return np.repeat(dout[:, None, :] / T, T, axis=1), {}


def dense_forward(x, p, activation="linear"):
    if x.ndim != 2 or p.W.shape[1] != x.shape[1] or p.b.shape != (p.W.shape[0],):
        raise ShapeError(f"dense input {x.shape} vs W {p.W.shape}, b {p.b.shape}")
    z = tn.matmul(x, p.W.T) + p.b
    if activation == "linear":
        y = z
    elif activation == "relu":
        y = tn.relu(z)
    elif activation == "softmax":
        y = tn.softmax(z, axis=1)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return y, Cache("dense", dict(x=x, z=z, y=y, W=p.W, activation=activation))


def dense_backward(dout, cache):
    v = _take(cache, "dense")
    act = v["activation"]
    if dout.shape != v["y"].shape:
        raise ShapeError(f"upstream gradient {dout.shape}, expected {v['y'].shape}")
    if act == "linear":
        dz = dout
    elif act == "relu":
        dz = dout * (v["z"] > 0)
    else:
        y = v["y"]
        dz = y * (dout - (dout * y).sum(axis=1, keepdims=True))
    grads = {"W": dz.T @ v["x"], "b": dz.sum(axis=0)}
    return dz @ v["W"], grads


_BACKWARD = {
    "lstm_cell": None,
    "lstm": lstm_layer_backward,
    "bilstm": bilstm_backward,
    "batchnorm": batchnorm_backward,
    "relu": relu_backward,
    "attention": attention_backward,
    "gap": gap_backward,
    "dense": dense_backward,
}


def backward(layer, upstream, cache):
    """Dispatch to the backward pass of ``layer``.

    For ``lstm_cell`` the upstream gradient is the pair ``(dh, dc)`` and the
    result is ``((dx, dh_prev, dc_prev), grads)``.
    """
    if layer not in _BACKWARD:
        raise ValueError(f"unknown layer {layer!r}")
    if layer == "lstm_cell":
        dh, dc = upstream
        dx, dh_prev, dc_prev, grads = lstm_cell_backward(dh, dc, cache)
        return (dx, dh_prev, dc_prev), grads
    return _BACKWARD[layer](upstream, cache)
