"""Minimal reverse-mode differentiation over numpy arrays.

Operations record a backward closure on the active :class:`Tape` whenever one
of their inputs requires a gradient.  ``tape.backward(loss)`` replays those
closures in reverse order; each closure accumulates directly into the
``grad`` slot of its inputs.

All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data.copy()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class _Record:
    outputs: tuple
    backward: Callable[[], None]


@dataclass
class Tape:
    """Ordered log of differentiable operations."""

    records: list = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, outputs, backward):
        self.records.append(_Record(tuple(outputs), backward))

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss {float(loss.data)}")
        loss.accumulate(np.ones_like(loss.data))
        for rec in reversed(self.records):
            if any(o.grad is not None for o in rec.outputs):
                rec.backward()

    def clear(self):
        self.records.clear()


_TAPES: list[Tape] = []


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracking(*inputs):
    return bool(_TAPES) and any(t.requires_grad for t in inputs)


def _emit(out_data, inputs, make_backward):
    """Wrap ``out_data`` and, when tracking, record ``make_backward(out)``."""
    track = _tracking(*inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        _TAPES[-1].record((out,), make_backward(out))
    return out


def _out_grad(t):
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _send(t, g):
    if t.requires_grad:
        t.accumulate(_unbroadcast(g, t.shape))


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def make(out):
        def backward():
            _send(a, out.grad)
            _send(b, out.grad)
        return backward

    return _emit(a.data + b.data, (a, b), make)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def make(out):
        def backward():
            _send(a, out.grad)
            _send(b, -out.grad)
        return backward

    return _emit(a.data - b.data, (a, b), make)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def make(out):
        def backward():
            _send(a, out.grad * b.data)
            _send(b, out.grad * a.data)
        return backward

    return _emit(a.data * b.data, (a, b), make)


def matmul(a, b):
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of shape (k, n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def make(out):
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                k, n = b.shape
                b.accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
        return backward

    return _emit(a.data @ b.data, (a, b), make)


def sum_all(a):
    a = _as_tensor(a)

    def make(out):
        def backward():
            _send(a, np.broadcast_to(out.grad, a.shape))
        return backward

    return _emit(a.data.sum(), (a,), make)


def reshape(a, shape):
    a = _as_tensor(a)

    def make(out):
        def backward():
            _send(a, out.grad.reshape(a.shape))
        return backward

    return _emit(a.data.reshape(shape), (a,), make)


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def make(out):
        def backward():
            parts = np.split(out.grad, bounds[1:-1], axis=axis)
            for t, g in zip(tensors, parts):
                _send(t, g)
        return backward

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, make)


def take_rows(a, index):
    """Gather ``a[index]`` along the first axis; repeated indices accumulate."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def make(out):
        def backward():
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                np.add.at(a.grad, index, out.grad)
        return backward

    return _emit(a.data[index], (a,), make)


# -------------------------------------------------------------- activations


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def make(out):
        def backward():
            _send(x, out.grad * (1.0 - y * y))
        return backward

    return _emit(y, (x,), make)


def sigmoid(x):
    x = _as_tensor(x)
    y = _sigmoid(x.data)

    def make(out):
        def backward():
            _send(x, out.grad * y * (1.0 - y))
        return backward

    return _emit(y, (x,), make)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def make(out):
        def backward():
            _send(x, out.grad * mask)
        return backward

    return _emit(np.where(mask, x.data, 0.0), (x,), make)


def prelu(x, slope):
    """``x`` where ``x >= 0`` else ``slope * x``; ``slope`` is a learned scalar."""
    x, slope = _as_tensor(x), _as_tensor(slope)
    pos = x.data >= 0

    def make(out):
        def backward():
            g = out.grad
            _send(x, np.where(pos, g, g * slope.data))
            if slope.requires_grad:
                slope.accumulate(np.sum(np.where(pos, 0.0, g * x.data)).reshape(slope.shape))
        return backward

    return _emit(np.where(pos, x.data, slope.data * x.data), (x, slope), make)


def activation(x, kind, slope=None):
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a slope")
        return prelu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x, rate, rng, train=True):
    """Inverted dropout: surviving units are scaled by 1/(1-rate) at train time."""
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ------------------------------------------------------ similarity & softmax


def row_cosine(M, v):
    """Cosine between each row of ``M`` and ``v``.

    ``M`` has shape (..., N, k) and ``v`` shape (..., k); leading dimensions
    broadcast, the result has shape (..., N).  A zero-norm operand gives 0.
    """
    M, v = _as_tensor(M), _as_tensor(v)
    if M.shape[-1] != v.shape[-1]:
        raise ShapeError(f"row_cosine dimension mismatch: {M.shape} vs {v.shape}")
    vv = v.data[..., None, :]
    nm = np.linalg.norm(M.data, axis=-1)
    nv = np.linalg.norm(vv, axis=-1)
    ok = (nm > 0) & (nv > 0)
    denom = np.where(ok, nm * nv, 1.0)
    dots = np.sum(M.data * vv, axis=-1)
    cos = np.where(ok, dots / denom, 0.0)

    def make(out):
        def backward():
            g = np.where(ok, out.grad, 0.0)
            if M.requires_grad:
                safe_nm = np.where(nm > 0, nm, 1.0)
                dM = (g / denom)[..., None] * vv - (g * cos / safe_nm ** 2)[..., None] * M.data
                _send(M, dM)
            if v.requires_grad:
                safe_nv = np.where(nv > 0, nv, 1.0)
                dv = (g / denom)[..., None] * M.data - (g * cos / safe_nv ** 2)[..., None] * vv
                _send(v, dv.sum(axis=-2))
        return backward

    return _emit(cos, (M, v), make)


def row_dot(M, v):
    """Dot product of each row of ``M`` with ``v`` (same broadcasting as row_cosine)."""
    M, v = _as_tensor(M), _as_tensor(v)
    if M.shape[-1] != v.shape[-1]:
        raise ShapeError(f"row_dot dimension mismatch: {M.shape} vs {v.shape}")
    vv = v.data[..., None, :]

    def make(out):
        def backward():
            g = out.grad[..., None]
            _send(M, g * vv)
            if v.requires_grad:
                _send(v, (g * M.data).sum(axis=-2))
        return backward

    return _emit(np.sum(M.data * vv, axis=-1), (M, v), make)


def softmax(g):
    g = _as_tensor(g)
    p = _softmax(g.data)

    def make(out):
        def backward():
            go = out.grad
            _send(g, p * (go - np.sum(go * p, axis=-1, keepdims=True)))
        return backward

    return _emit(p, (g,), make)


def log_softmax(g):
    g = _as_tensor(g)
    shifted = g.data - g.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def make(out):
        def backward():
            go = out.grad
            _send(g, go - np.exp(logp) * go.sum(axis=-1, keepdims=True))
        return backward

    return _emit(logp, (g,), make)


def l2_normalize_rows(M):
    """Scale each row (last axis) to unit L2 norm; zero rows pass through."""
    M = _as_tensor(M)
    n = np.linalg.norm(M.data, axis=-1, keepdims=True)
    nz = n > 0
    safe = np.where(nz, n, 1.0)
    y = M.data / safe

    def make(out):
        def backward():
            g = out.grad
            proj = np.sum(g * y, axis=-1, keepdims=True)
            _send(M, np.where(nz, (g - y * proj) / safe, g))
        return backward

    return _emit(y, (M,), make)


def nll(logp, gold, weights=None):
    """Mean over rows of ``-weights[i] * logp[i, gold[i]]``."""
    logp = _as_tensor(logp)
    gold = np.asarray(gold, dtype=np.intp)
    m = logp.shape[0]
    if m == 0:
        raise ShapeError("nll over zero rows")
    if gold.min() < 0 or gold.max() >= logp.shape[-1]:
        raise IndexError(f"gold id out of range [0, {logp.shape[-1]})")
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.arange(m)

    def make(out):
        def backward():
            if logp.requires_grad:
                g = np.zeros_like(logp.data)
                g[rows, gold] = -w * out.grad / m
                logp.accumulate(g)
        return backward

    return _emit(-np.sum(w * logp.data[rows, gold]) / m, (logp,), make)


# --------------------------------------------------------------------- LSTM


def _sigmoid(z):
    return expit(z)


def _softmax(g):
    e = np.exp(g - g.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _cell_forward(x, h, c, W, b):
    # gate order along the 4H axis: input, forget, output, candidate
    H = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W.T + b
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    o = _sigmoid(z[..., 2 * H:3 * H])
    u = np.tanh(z[..., 3 * H:])
    c_new = f * c + i * u
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, o, u, tc)


def _cell_backward(cache, dh, dc, W):
    """Gradients w.r.t. (x, h_prev, c_prev, W, b) given dL/dh_new and dL/dc_new."""
    x, h, c, i, f, o, u, tc = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * u * i * (1.0 - i),
        dc * c * f * (1.0 - f),
        dh * tc * o * (1.0 - o),
        dc * i * (1.0 - u * u),
    ], axis=-1)
    xh = np.concatenate([x, h], axis=-1)
    dxh = dz @ W
    d = x.shape[-1]
    dW = dz.reshape(-1, dz.shape[-1]).T @ xh.reshape(-1, xh.shape[-1])
    db = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
    return dxh[..., :d], dxh[..., d:], dc * f, dW, db


def _check_lstm_shapes(d, H, W, b):
    if W.shape != (4 * H, d + H) or b.shape != (4 * H,):
        raise ShapeError(
            f"lstm parameter shapes W{W.shape}, b{b.shape} do not fit input {d}, hidden {H}"
        )


def lstm_cell(x, h_prev, c_prev, W, b):
    """One standard (non-peephole) LSTM step; returns ``(h, c)``.

    ``W`` has shape (4H, d+H) acting on ``[x, h_prev]``; ``b`` has shape (4H,).
    Leading batch dimensions on ``x``/``h_prev``/``c_prev`` are allowed.
    """
    x, h_prev, c_prev, W, b = map(_as_tensor, (x, h_prev, c_prev, W, b))
    _check_lstm_shapes(x.shape[-1], h_prev.shape[-1], W.data, b.data)
    h, c, cache = _cell_forward(x.data, h_prev.data, c_prev.data, W.data, b.data)
    track = _tracking(x, h_prev, c_prev, W, b)
    h_out = Tensor(h, requires_grad=track)
    c_out = Tensor(c, requires_grad=track)
    if track:
        def backward():
            dx, dh, dc, dW, db = _cell_backward(cache, _out_grad(h_out), _out_grad(c_out), W.data)
            _send(x, dx)
            _send(h_prev, dh)
            _send(c_prev, dc)
            _send(W, dW)
            _send(b, db)
        _TAPES[-1].record((h_out, c_out), backward)
    return h_out, c_out


def lstm_sequence(X, W, b):
    """Run an LSTM from a zero state over ``X`` of shape (T, B, d).

    Returns the hidden states, shape (T, B, H).  Backpropagation through time
    is done inside a single tape record; input projections and weight
    gradients are batched over all time steps.
    """
    X, W, b = map(_as_tensor, (X, W, b))
    T, B, d = X.shape
    H = W.shape[0] // 4
    _check_lstm_shapes(d, H, W.data, b.data)
    Wx, Wh = W.data[:, :d], W.data[:, d:]
    Zx = X.data @ Wx.T + b.data
    hs = np.zeros((T + 1, B, H))  # hs[t + 1] is the state after step t
    cs = np.zeros((T + 1, B, H))
    gates = np.empty((T, B, 4 * H))
    tcs = np.empty((T, B, H))
    for t in range(T):
        z = Zx[t] + hs[t] @ Wh.T
        g = gates[t]
        g[:, :3 * H] = _sigmoid(z[:, :3 * H])
        g[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        cs[t + 1] = g[:, H:2 * H] * cs[t] + g[:, :H] * g[:, 3 * H:]
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = g[:, 2 * H:3 * H] * tcs[t]

    def make(out):
        def backward():
            G = out.grad
            dZ = np.empty((T, B, 4 * H))
            dh = np.zeros((B, H))
            dc = np.zeros((B, H))
            for t in range(T - 1, -1, -1):
                g = gates[t]
                i, f, o, u = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
                dh = G[t] + dh
                dc = dc + dh * o * (1.0 - tcs[t] * tcs[t])
                dz = dZ[t]
                dz[:, :H] = dc * u * i * (1.0 - i)
                dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
                dz[:, 2 * H:3 * H] = dh * tcs[t] * o * (1.0 - o)
                dz[:, 3 * H:] = dc * i * (1.0 - u * u)
                dh = dz @ Wh
                dc = dc * f
            flat = dZ.reshape(T * B, 4 * H)
            dW = np.concatenate([flat.T @ X.data.reshape(T * B, d),
                                 flat.T @ hs[:T].reshape(T * B, H)], axis=1)
            _send(X, dZ @ Wx)
            _send(W, dW)
            _send(b, flat.sum(axis=0))
        return backward

    return _emit(hs[1:].copy(), (X, W, b), make)


def _cos_fwd(M, v):
    """Row cosines of M (..., N, k) against v (..., k) plus backward cache."""
    vv = v[..., None, :]
    nm = np.linalg.norm(M, axis=-1)
    nv = np.linalg.norm(vv, axis=-1)
    ok = (nm > 0) & (nv > 0)
    denom = np.where(ok, nm * nv, 1.0)
    cos = np.where(ok, np.sum(M * vv, axis=-1) / denom, 0.0)
    return cos, (M, vv, nm, nv, ok, denom, cos)


def _cos_bwd(cache, g):
    M, vv, nm, nv, ok, denom, cos = cache
    g = np.where(ok, g, 0.0)
    dM = (g / denom)[..., None] * vv - (g * cos / np.where(nm > 0, nm, 1.0) ** 2)[..., None] * M
    dv = (g / denom)[..., None] * M - (g * cos / np.where(nv > 0, nv, 1.0) ** 2)[..., None] * vv
    return dM, dv.sum(axis=-2)


def entity_memory_sequence(Qs, K, KQ, R, S, slope, similarity="cosine", update=True):
    """Run a gated entity memory over query sequences.

    ``Qs`` has shape (T, B, k): one query per step for B independent memories.
    Every memory starts at the keys ``K`` (N, k).  At each step the gate is
    ``relu(sim(K, q) + sim(V, q))`` and, when ``update`` is set, the values move
    to ``normalize(V + gate * prelu(KQ + V @ R + q @ S))``.

    Returns ``(gates, values)``: gates of shape (T, B, N) as a tensor and the
    value trajectory (T + 1, B, N, k) as a plain array.  Backpropagation
    through time happens inside a single tape record.
    """
    Qs, K, KQ, R, S, slope = map(_as_tensor, (Qs, K, KQ, R, S, slope))
    T, B, k = Qs.shape
    N = K.shape[0]
    if K.shape[1] != k or KQ.shape != K.shape or R.shape != (k, k) or S.shape != (k, k):
        raise ShapeError(f"entity memory shapes do not fit: queries {Qs.shape}, keys {K.shape}, "
                         f"KQ {KQ.shape}, R {R.shape}, S {S.shape}")
    if similarity not in ("cosine", "dot"):
        raise ValueError(f"unknown similarity {similarity!r}")
    a_s = float(slope.data)
    Vs = np.empty((T + 1, B, N, k))
    Vs[0] = K.data
    gates = np.empty((T, B, N))
    caches = []
    for t in range(T):
        q, V = Qs.data[t], Vs[t]
        if similarity == "cosine":
            ck, kc = _cos_fwd(K.data, q)
            cv, vc = _cos_fwd(V, q)
        else:
            ck, kc = q @ K.data.T, None
            cv, vc = np.einsum("bnk,bk->bn", V, q), None
        pre = ck + cv
        g = np.maximum(pre, 0.0)
        gates[t] = g
        if not update:
            Vs[t + 1] = V
            caches.append((pre, kc, vc, None))
            continue
        c_in = KQ.data + V @ R.data + (q @ S.data)[:, None, :]
        cand = np.where(c_in >= 0, c_in, a_s * c_in)
        m = V + g[..., None] * cand
        n = np.linalg.norm(m, axis=-1, keepdims=True)
        nz = n > 0
        safe = np.where(nz, n, 1.0)
        Vs[t + 1] = m / safe
        caches.append((pre, kc, vc, (c_in, cand, nz, safe)))

    def make(out):
        def backward():
            G = out.grad
            dQ = np.zeros_like(Qs.data)
            dK = np.zeros_like(K.data)
            dKQ = np.zeros_like(KQ.data)
            dR = np.zeros_like(R.data)
            dS = np.zeros_like(S.data)
            dslope = 0.0
            dV = np.zeros((B, N, k))
            for t in range(T - 1, -1, -1):
                q, V = Qs.data[t], Vs[t]
                pre, kc, vc, upd = caches[t]
                dg = G[t]
                if upd is not None:
                    c_in, cand, nz, safe = upd
                    y = Vs[t + 1]
                    proj = np.sum(dV * y, axis=-1, keepdims=True)
                    dm = np.where(nz, (dV - y * proj) / safe, dV)
                    g = np.maximum(pre, 0.0)
                    dg = dg + np.sum(dm * cand, axis=-1)
                    dcand = dm * g[..., None]
                    dc_in = np.where(c_in >= 0, dcand, a_s * dcand)
                    dslope += float(np.sum(np.where(c_in >= 0, 0.0, dcand * c_in)))
                    dKQ += dc_in.sum(axis=0)
                    dR += np.einsum("bnk,bnj->kj", V, dc_in)
                    dqs = dc_in.sum(axis=1)
                    dS += q.T @ dqs
                    dQ[t] += dqs @ S.data.T
                    dV = dm + dc_in @ R.data.T
                da = dg * (pre > 0)
                if similarity == "cosine":
                    dKk, dq1 = _cos_bwd(kc, da)
                    dVv, dq2 = _cos_bwd(vc, da)
                    dK += dKk.sum(axis=0)
                else:
                    dK += da.T @ q
                    dq1 = da @ K.data
                    dVv = da[..., None] * q[:, None, :]
                    dq2 = np.einsum("bn,bnk->bk", da, V)
                dQ[t] += dq1 + dq2
                dV = dV + dVv
            dK += dV.sum(axis=0)
            _send(Qs, dQ)
            _send(K, dK)
            _send(KQ, dKQ)
            _send(R, dR)
            _send(S, dS)
            if slope.requires_grad:
                slope.accumulate(np.array(dslope).reshape(slope.shape))
        return backward

    return _emit(gates, (Qs, K, KQ, R, S, slope), make), Vs


# ------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple  # (parameter name, flat index)
    n_checked: int
    per_param: dict

    def passed(self, tol):
        return self.max_rel_error < tol


def finite_diff_check(f, params, eps=1e-6, tol=1e-4, floor=1e-10, max_coords=None, seed=0):
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``params`` maps names to Tensors that ``f`` reads.  The relative error per
    coordinate is ``|a - n| / max(|a|, |n|)``; coordinates where both are below
    ``floor`` are counted as exact.  ``max_coords`` subsamples coordinates per
    parameter.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-4]")
    params = dict(params)
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    for p in params.values():
        p.zero_grad()

    def value():
        out = f()
        v = float(np.asarray(out.data if isinstance(out, Tensor) else out))
        if not np.isfinite(v):
            raise NonFiniteError(f"non-finite loss {v} during finite differences")
        return v

    rng = np.random.default_rng(seed)
    worst_err, worst, n = 0.0, None, 0
    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[name].reshape(-1)
        p_err = 0.0
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            up = value()
            flat[j] = orig - eps
            down = value()
            flat[j] = orig
            num = (up - down) / (2 * eps)
            a = a_flat[j]
            scale = max(abs(a), abs(num))
            err = 0.0 if scale < floor else abs(a - num) / scale
            n += 1
            p_err = max(p_err, err)
            if worst is None or err > worst_err:
                worst_err, worst = err, (name, int(j))
        per_param[name] = p_err
    return GradCheckReport(worst_err, worst, n, per_param)
