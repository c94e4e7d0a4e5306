"""Small sequence predictors with flat parameter vectors and hand-rolled gradients.

Three architectures share one interface:

* ``lstm``   — single LSTM layer over the (L, 4) window, scalar readout from
  the last hidden state. Gates are packed [input, forget, cell, output]; each
  gate has input weights, recurrent weights, and two bias vectors.
* ``nnpg``   — one tanh hidden layer over the flattened window, linear output.
* ``linear`` — affine map of the flattened window.

The model output lives in normalized target space; a predictor carries the
(mean, std) scale that maps it back to mg/dL. Predictors are immutable:
training returns a new one. Parameters travel as a flat float64 vector whose
canonical byte serialization (arch tag, dims, little-endian doubles) defines
the SHA-256 digest used for content addressing.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import WindowConfig, WindowedSample, stack_samples

ARCHS = ("lstm", "nnpg", "linear")

DEFAULT_LSTM_HIDDEN = 16
DEFAULT_NNPG_HIDDEN = 10
NUM_CHANNELS = 4


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray  # flat float64
    arch: str
    dims: tuple[int, ...]  # lstm: (L, C, H); nnpg: (L, C, H); linear: (L, C)

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        if not np.all(np.isfinite(vals)):
            raise ValueError("ParamVector values must be finite")
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        expected = param_count(self.arch, self.dims)
        if vals.shape[0] != expected:
            raise ValueError(
                f"{self.arch}{self.dims} expects {expected} parameters, got {vals.shape[0]}"
            )
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def arch_tag(self) -> str:
        return f"{self.arch}:" + "x".join(str(d) for d in self.dims)


def param_count(arch: str, dims: tuple[int, ...]) -> int:
    if arch == "linear":
        L, C = dims
        return L * C + 1
    if arch == "nnpg":
        L, C, H = dims
        return (L * C) * H + H + H + 1
    if arch == "lstm":
        _, C, H = dims
        return 4 * (H * C + H * H + 2 * H) + H + 1
    raise ValueError(f"unknown arch {arch!r}")


def serialize(pv: ParamVector) -> bytes:
    tag = pv.arch.encode("ascii")
    head = struct.pack("<B", len(tag)) + tag
    head += struct.pack("<B", len(pv.dims)) + b"".join(struct.pack("<I", d) for d in pv.dims)
    head += struct.pack("<Q", len(pv))
    return head + pv.values.astype("<f8").tobytes()


def deserialize(blob: bytes) -> ParamVector:
    off = 0
    (tag_len,) = struct.unpack_from("<B", blob, off)
    off += 1
    arch = blob[off : off + tag_len].decode("ascii")
    off += tag_len
    (ndims,) = struct.unpack_from("<B", blob, off)
    off += 1
    dims = struct.unpack_from(f"<{ndims}I", blob, off)
    off += 4 * ndims
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    values = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
    return ParamVector(values=values, arch=arch, dims=tuple(dims))


def digest(pv: ParamVector) -> str:
    return hashlib.sha256(serialize(pv)).hexdigest()


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 1e-6
    weight_decay: float = 4e-4
    epochs: int = 5000
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # None trains on every minibatch per epoch; an int caps the (seeded,
    # reshuffled) minibatches per epoch so small machines can keep E intact.
    max_batches_per_epoch: int | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True, eq=False)
class Predictor:
    params: ParamVector
    target_mean: float = 0.0
    target_std: float = 1.0

    @property
    def arch(self) -> str:
        return self.params.arch

    @property
    def dims(self) -> tuple[int, ...]:
        return self.params.dims


def init_model(
    arch: str,
    cfg: WindowConfig,
    init_seed: int,
    lstm_hidden: int = DEFAULT_LSTM_HIDDEN,
    nnpg_hidden: int = DEFAULT_NNPG_HIDDEN,
) -> Predictor:
    """Glorot-uniform weights (per weight matrix), zero biases; pure in its seed."""
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    L, C = cfg.history_len, NUM_CHANNELS
    rng = np.random.default_rng(init_seed)

    def glorot(fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    if arch == "linear":
        dims = (L, C)
        w = glorot(L * C, 1, (L * C,))
        values = np.concatenate([w, np.zeros(1)])
    elif arch == "nnpg":
        H = nnpg_hidden
        dims = (L, C, H)
        w1 = glorot(L * C, H, (H, L * C))
        w2 = glorot(H, 1, (H,))
        values = np.concatenate([w1.ravel(), np.zeros(H), w2, np.zeros(1)])
    else:  # lstm
        H = lstm_hidden
        dims = (L, C, H)
        wx = glorot(C, H, (4 * H, C))
        wh = glorot(H, H, (4 * H, H))
        w_out = glorot(H, 1, (H,))
        values = np.concatenate([wx.ravel(), wh.ravel(), np.zeros(8 * H), w_out, np.zeros(1)])
    return Predictor(params=ParamVector(values, arch, dims))


def get_params(p: Predictor) -> ParamVector:
    return p.params


def set_params(p: Predictor, v: ParamVector) -> Predictor:
    if v.arch != p.arch or v.dims != p.dims:
        raise ValueError(f"parameter vector {v.arch}{v.dims} does not fit {p.arch}{p.dims}")
    return replace(p, params=v)


def with_target_scale(p: Predictor, mean: float, std: float) -> Predictor:
    if std <= 0:
        raise ValueError("target std must be positive")
    return replace(p, target_mean=float(mean), target_std=float(std))


def _unpack_lstm(values: np.ndarray, dims: tuple[int, ...]):
    _, C, H = dims
    o = 0
    wx = values[o : o + 4 * H * C].reshape(4 * H, C); o += 4 * H * C
    wh = values[o : o + 4 * H * H].reshape(4 * H, H); o += 4 * H * H
    b_ih = values[o : o + 4 * H]; o += 4 * H
    b_hh = values[o : o + 4 * H]; o += 4 * H
    w_out = values[o : o + H]; o += H
    b_out = values[o]
    return wx, wh, b_ih, b_hh, w_out, b_out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form saturates safely for huge |z|, no overflow guard needed
    return 0.5 * np.tanh(0.5 * z) + 0.5


# The recurrence works in a gate-major (4, B, H) layout with gate order
# [input, forget, output, cell]: the three sigmoid gates form one contiguous
# block, so every transcendental and elementwise op stays on numpy's
# contiguous SIMD path. The flat parameter layout keeps the packed [i f g o]
# row order; _GATE_ROWS maps gate-major index -> packed row block.
_GATE_ROWS = (0, 1, 3, 2)  # i, f, o, g -> offsets 0H, 1H, 3H, 2H


def _gates_inplace(z: np.ndarray) -> None:
    """(4, B, H) raw pre-activations [i f o g] -> gate values, in place."""
    zs = z[:3]
    zs *= 0.5
    np.tanh(zs, out=zs)
    zs *= 0.5
    zs += 0.5
    np.tanh(z[3], out=z[3])


def _forward(arch: str, dims: tuple[int, ...], values: np.ndarray, X: np.ndarray, want_cache: bool):
    """Batch forward pass. X has shape (B, L, C); returns (outputs, cache)."""
    B = X.shape[0]
    if arch == "linear":
        L, C = dims
        Xf = X.reshape(B, L * C)
        w, b = values[:-1], values[-1]
        return Xf @ w + b, (Xf,)
    if arch == "nnpg":
        L, C, H = dims
        Xf = X.reshape(B, L * C)
        o = 0
        w1 = values[o : o + H * L * C].reshape(H, L * C); o += H * L * C
        b1 = values[o : o + H]; o += H
        w2 = values[o : o + H]; o += H
        b2 = values[o]
        a = np.tanh(Xf @ w1.T + b1)
        return a @ w2 + b2, (Xf, a, w1, w2)
    # lstm
    _, C, H = dims
    L = X.shape[1]
    wx, wh, b_ih, b_hh, w_out, b_out = _unpack_lstm(values, dims)
    bias = b_ih + b_hh
    # project every timestep's input up front, gate-major and time-major
    X2 = np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(L * B, C)  # (L*B, C)
    xproj = np.empty((4, L, B, H))
    wh_mt = np.empty((4, H, H))
    for gi, row in enumerate(_GATE_ROWS):
        rows = slice(row * H, (row + 1) * H)
        np.matmul(X2, wx[rows].T, out=xproj[gi].reshape(L * B, H))
        xproj[gi] += bias[rows]
        wh_mt[gi] = wh[rows].T
    if not want_cache:
        z = np.empty((4, B, H))
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        scratch = np.empty((B, H))
        for t in range(L):
            for gi in range(4):
                np.matmul(h, wh_mt[gi], out=z[gi])
                z[gi] += xproj[gi, t]
            _gates_inplace(z)
            c *= z[1]
            np.multiply(z[0], z[3], out=scratch)
            c += scratch
            np.tanh(c, out=h)
            h *= z[2]
        return h @ w_out + b_out, None
    hs = np.zeros((L + 1, B, H))
    cs = np.zeros((L + 1, B, H))
    gates = np.empty((L, 4, B, H))
    tcs = np.empty((L, B, H))
    for t in range(L):
        z = gates[t]
        for gi in range(4):
            np.matmul(hs[t], wh_mt[gi], out=z[gi])
            z[gi] += xproj[gi, t]
        _gates_inplace(z)
        np.multiply(z[1], cs[t], out=cs[t + 1])
        np.multiply(z[0], z[3], out=tcs[t])
        cs[t + 1] += tcs[t]
        np.tanh(cs[t + 1], out=tcs[t])
        np.multiply(z[2], tcs[t], out=hs[t + 1])
    y = hs[L] @ w_out + b_out
    return y, (hs, cs, gates, tcs, X2, (wx, wh, w_out))


def _backward(arch: str, dims: tuple[int, ...], values: np.ndarray, X: np.ndarray, dy: np.ndarray, cache) -> np.ndarray:
    """Gradient of sum(dy * output) w.r.t. the flat parameter vector."""
    B = X.shape[0]
    if arch == "linear":
        (Xf,) = cache
        grad = np.empty_like(values)
        grad[:-1] = Xf.T @ dy
        grad[-1] = dy.sum()
        return grad
    if arch == "nnpg":
        Xf, a, w1, w2 = cache
        H = dims[2]
        da = dy[:, None] * w2  # (B, H)
        dz = da * (1.0 - a * a)
        grad = np.empty_like(values)
        o = 0
        grad[o : o + w1.size] = (dz.T @ Xf).ravel(); o += w1.size
        grad[o : o + H] = dz.sum(axis=0); o += H
        grad[o : o + H] = a.T @ dy; o += H
        grad[o] = dy.sum()
        return grad
    # lstm
    _, C, H = dims
    L = X.shape[1]
    hs, cs, gates, tcs, X2, (wx, wh, w_out) = cache
    d_wout = hs[L].T @ dy
    d_bout = dy.sum()
    dh = dy[:, None] * w_out
    dct = np.empty((B, H))
    dc = np.zeros((B, H))
    s1 = np.empty((B, H))
    tmp = np.empty((B, H))
    dz_all = np.empty((4, L, B, H))
    wh_g = [wh[row * H : (row + 1) * H] for row in _GATE_ROWS]
    for t in range(L - 1, -1, -1):
        i, f, o_, g = gates[t]
        tc = tcs[t]
        # dct = dh * o * (1 - tc^2) + carried dc
        np.multiply(tc, tc, out=dct)
        np.subtract(1.0, dct, out=dct)
        dct *= o_
        dct *= dh
        dct += dc
        # output gate (reads dh, so before dh is overwritten below)
        np.subtract(1.0, o_, out=s1)
        s1 *= o_
        s1 *= tc
        np.multiply(s1, dh, out=dz_all[2, t])
        # input gate
        np.subtract(1.0, i, out=s1)
        s1 *= i
        s1 *= g
        np.multiply(s1, dct, out=dz_all[0, t])
        # forget gate
        np.subtract(1.0, f, out=s1)
        s1 *= f
        s1 *= cs[t]
        np.multiply(s1, dct, out=dz_all[1, t])
        # cell candidate
        np.multiply(g, g, out=s1)
        np.subtract(1.0, s1, out=s1)
        s1 *= i
        np.multiply(s1, dct, out=dz_all[3, t])
        np.multiply(dct, f, out=dc)
        np.matmul(dz_all[0, t], wh_g[0], out=dh)
        for gi in range(1, 4):
            np.matmul(dz_all[gi, t], wh_g[gi], out=tmp)
            dh += tmp
    # weight gradients batched over (time x batch), one gate block at a time
    d_wx = np.empty_like(wx)
    d_wh = np.empty_like(wh)
    d_b = np.empty(4 * H)
    hs_flat = hs[:L].reshape(L * B, H)
    for gi, row in enumerate(_GATE_ROWS):
        dz_flat = dz_all[gi].reshape(L * B, H)
        rows = slice(row * H, (row + 1) * H)
        d_wx[rows] = dz_flat.T @ X2
        d_wh[rows] = dz_flat.T @ hs_flat
        d_b[rows] = dz_flat.sum(axis=0)
    return np.concatenate([d_wx.ravel(), d_wh.ravel(), d_b, d_b, d_wout, [d_bout]])


def predict(p: Predictor, x: np.ndarray) -> float:
    """Point prediction in mg/dL for one (L, 4) input window."""
    x = np.asarray(x, dtype=np.float64)
    L = p.dims[0]
    if x.shape != (L, NUM_CHANNELS):
        raise ValueError(f"expected input of shape ({L}, {NUM_CHANNELS}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input window contains non-finite values")
    out, _ = _forward(p.arch, p.dims, p.params.values, x[None], want_cache=False)
    return float(p.target_mean + p.target_std * out[0])


def predict_batch(p: Predictor, X: np.ndarray) -> np.ndarray:
    """Vectorized predict over X of shape (n, L, 4), in mg/dL."""
    X = np.asarray(X, dtype=np.float64)
    out, _ = _forward(p.arch, p.dims, p.params.values, X, want_cache=False)
    return p.target_mean + p.target_std * out


def _loss_grad_flat(
    arch: str, dims: tuple[int, ...], values: np.ndarray, X: np.ndarray, t_norm: np.ndarray
) -> tuple[float, np.ndarray]:
    out, cache = _forward(arch, dims, values, X, want_cache=True)
    r = out - t_norm
    loss = float(np.mean(r * r))
    dy = (2.0 / X.shape[0]) * r
    return loss, _backward(arch, dims, values, X, dy, cache)


def loss_and_grad(p: Predictor, batch: Sequence[WindowedSample]) -> tuple[float, ParamVector]:
    """Mean squared error over the batch, in normalized target space, plus its gradient."""
    if not batch:
        raise ValueError("batch must be non-empty")
    X, y = stack_samples(batch)
    t_norm = (y - p.target_mean) / p.target_std
    loss, grad = _loss_grad_flat(p.arch, p.dims, p.params.values, X, t_norm)
    return loss, ParamVector(grad, p.arch, p.dims)


def val_loss(p: Predictor, samples: Sequence[WindowedSample]) -> float:
    """Normalized-space MSE without gradients; used for checkpointing and voting."""
    if not samples:
        raise ValueError("samples must be non-empty")
    X, y = stack_samples(samples)
    out, _ = _forward(p.arch, p.dims, p.params.values, X, want_cache=False)
    r = out - (y - p.target_mean) / p.target_std
    return float(np.mean(r * r))


def train_local(
    p: Predictor,
    train: Sequence[WindowedSample],
    val: Sequence[WindowedSample],
    h: Hyperparams,
    train_seed: int,
    target_scale: tuple[float, float] | None = None,
) -> Predictor:
    """Minibatch Adam with decoupled weight decay; returns the best-validation model.

    The target scale defaults to the mean/std of the raw training targets.
    Validation loss is checked after every epoch and the best parameters seen
    win; with no validation samples the final epoch's parameters are returned.
    Deterministic for fixed inputs and seed.
    """
    if not train:
        raise ValueError("train set must be non-empty")
    X, y = stack_samples(train)
    if target_scale is None:
        mean = float(y.mean())
        std = float(y.std())
        if std < 1e-12:
            std = 1.0
    else:
        mean, std = float(target_scale[0]), float(target_scale[1])
    p = with_target_scale(p, mean, std)
    t_norm = (y - mean) / std

    Xv = yv_norm = None
    if val:
        Xv, yv = stack_samples(val)
        yv_norm = (yv - mean) / std

    arch, dims = p.arch, p.dims
    theta = p.params.values.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = h.adam_beta1, h.adam_beta2, h.adam_eps
    step = 0
    rng = np.random.default_rng(train_seed)
    n = X.shape[0]
    best_loss = np.inf
    best_theta = None

    for _ in range(h.epochs):
        perm = rng.permutation(n)
        starts = range(0, n, h.batch_size)
        if h.max_batches_per_epoch is not None:
            starts = list(starts)[: h.max_batches_per_epoch]
        for s in starts:
            idx = perm[s : s + h.batch_size]
            step += 1
            _, grad = _loss_grad_flat(arch, dims, theta, X[idx], t_norm[idx])
            m = b1 * m + (1.0 - b1) * grad
            v = b2 * v + (1.0 - b2) * grad * grad
            m_hat = m / (1.0 - b1**step)
            v_hat = v / (1.0 - b2**step)
            theta = theta - h.learning_rate * (m_hat / (np.sqrt(v_hat) + eps)) - (
                h.learning_rate * h.weight_decay
            ) * theta
        if Xv is not None:
            out, _ = _forward(arch, dims, theta, Xv, want_cache=False)
            vl = float(np.mean((out - yv_norm) ** 2))
            if vl < best_loss:
                best_loss = vl
                best_theta = theta.copy()

    final = best_theta if best_theta is not None else theta
    return Predictor(ParamVector(final, arch, dims), target_mean=mean, target_std=std)
