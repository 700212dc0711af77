"""Primitive kernels, each paired with its backward rule.

Only the shapes the tagger needs are supported; there is no general
broadcasting. Every kernel raises ShapeError naming itself and the offending
shapes when operands do not line up.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, record


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def constant(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape("add", a, b)
    return record("add", (a, b), a.value + b.value, lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(x, c: float) -> Tensor:
    x = _t(x)
    return record("scale", (x,), x.value * c, lambda g: (g * c,))


def add_bias(x, b) -> Tensor:
    """x[..., n] + b[n]."""
    x, b = _t(x), _t(b)
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    axes = tuple(range(x.value.ndim - 1))
    return record("add_bias", (x, b), x.value + b.value,
                  lambda g: (g, g.sum(axis=axes)))


def sigmoid(x) -> Tensor:
    x = _t(x)
    y = _sigmoid(x.value)
    return record("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def _sigmoid(v):
    # tanh form never overflows and is cheaper than scipy's expit here
    return 0.5 * (1 + np.tanh(0.5 * v))


def tanh(x) -> Tensor:
    x = _t(x)
    y = np.tanh(x.value)
    return record("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def relu(x) -> Tensor:
    x = _t(x)
    on = x.value > 0
    return record("relu", (x,), np.where(on, x.value, 0).astype(x.dtype), lambda g: (g * on,))


def stop_gradient(x) -> Tensor:
    """Same values, no path back: the result is never recorded."""
    x = _t(x)
    return Tensor(x.value.copy(), requires_grad=False)


def dropout(x, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    x = _t(x)
    if not training or rate == 0:
        return x
    if not 0 <= rate < 1:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return record("dropout", (x,), x.value * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """a[..., k] @ b[k, n]."""
    a, b = _t(a), _t(b)
    if b.value.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record("matmul", (a, b), av @ bv, back)


# ---------------------------------------------------------------- structural

def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_t(x) for x in xs]
    nd = xs[0].value.ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.value.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape}")
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return record("concat", xs, np.concatenate([x.value for x in xs], axis=ax),
                  lambda g: np.split(g, cuts, axis=ax))


def slice_last(x, start: int, stop: int) -> Tensor:
    x = _t(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for {x.shape}")

    def back(g):
        full = np.zeros_like(x.value)
        full[..., start:stop] = g
        return (full,)

    return record("slice_last", (x,), x.value[..., start:stop], back)


def reshape(x, shape) -> Tensor:
    x = _t(x)
    old = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return record("reshape", (x,), y, lambda g: (g.reshape(old),))


def gather(table, ids) -> Tensor:
    """Row lookup: table[V, d] indexed by an integer array of any shape."""
    table = _t(table)
    ids = np.asarray(ids)
    if table.value.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather: id out of range for table with {table.shape[0]} rows")

    def back(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return record("gather", (table,), table.value[ids], back)


def shift_time(x, offset: int) -> Tensor:
    """y[:, t] = x[:, t - offset], zero where t - offset falls outside [0, T)."""
    x = _t(x)
    T = x.shape[1]
    y = np.zeros_like(x.value)
    if offset > 0:
        y[:, offset:] = x.value[:, :T - offset]
    elif offset < 0:
        y[:, :T + offset] = x.value[:, -offset:]
    else:
        y[...] = x.value

    def back(g):
        gx = np.zeros_like(g)
        if offset > 0:
            gx[:, :T - offset] = g[:, offset:]
        elif offset < 0:
            gx[:, -offset:] = g[:, :T + offset]
        else:
            gx[...] = g
        return (gx,)

    return record("shift_time", (x,), y, back)


def apply_mask(x, mask) -> Tensor:
    """Zero the padded rows of x[B, T, ...] given mask[B, T]."""
    x = _t(x)
    m = np.asarray(mask)
    if m.shape != x.shape[:2]:
        raise ShapeError(f"apply_mask: shape mismatch {x.shape} vs {m.shape}")
    m = m.reshape(m.shape + (1,) * (x.value.ndim - 2)).astype(x.dtype)
    return record("apply_mask", (x,), x.value * m, lambda g: (g * m,))


# ---------------------------------------------------------------- char CNN

def conv1d(x, w, b) -> Tensor:
    """Valid 1-D convolution: x[N, C, E] with w[k, E, F] and b[F] -> [N, C-k+1, F]."""
    x, w, b = _t(x), _t(w), _t(b)
    N, C, E = x.shape
    k, E2, F = w.shape
    if E != E2 or b.shape != (F,) or C < k:
        raise ShapeError(f"conv1d: shape mismatch {x.shape} vs {w.shape}")
    L = C - k + 1
    xv, wv = x.value, w.value
    y = np.broadcast_to(b.value, (N, L, F)).copy()
    for j in range(k):
        y += xv[:, j:j + L] @ wv[j]

    def back(g):
        g2 = g.reshape(-1, F)
        gw = np.stack([xv[:, j:j + L].reshape(-1, E).T @ g2 for j in range(k)])
        gb = g2.sum(axis=0)
        gx = np.zeros_like(xv)
        for j in range(k):
            gx[:, j:j + L] += g @ wv[j].T
        return gx, gw, gb

    return record("conv1d", (x, w, b), y, back)


def max_over_time(x, valid) -> Tensor:
    """Max over axis 1 of x[N, L, F], ignoring positions where valid[N, L] is false."""
    x = _t(x)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != x.shape[:2]:
        raise ShapeError(f"max_over_time: shape mismatch {x.shape} vs {valid.shape}")
    if not valid.any(axis=1).all():
        raise ValueError("max_over_time: every row needs at least one valid position")
    masked = np.where(valid[:, :, None], x.value, -np.inf)
    arg = masked.argmax(axis=1)  # [N, F]
    y = np.take_along_axis(x.value, arg[:, None, :], axis=1)[:, 0, :]

    def back(g):
        gx = np.zeros_like(x.value)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return record("max_over_time", (x,), y, back)


# ---------------------------------------------------------------- distributions

def softmax(x) -> Tensor:
    x = _t(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), y, back)


def log_softmax(x) -> Tensor:
    x = _t(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", (x,), y, back)


def pick(x, ids) -> Tensor:
    """y[b, t] = x[b, t, ids[b, t]]."""
    x = _t(x)
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"pick: shape mismatch {x.shape} vs {ids.shape}")
    y = np.take_along_axis(x.value, ids[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.value)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        return (gx,)

    return record("pick", (x,), y, back)


# ---------------------------------------------------------------- reductions

def sum_last(x) -> Tensor:
    x = _t(x)
    n = x.shape[-1]
    return record("sum_last", (x,), x.value.sum(axis=-1),
                  lambda g: (np.repeat(g[..., None], n, axis=-1),))


def total(x) -> Tensor:
    x = _t(x)
    shape = x.shape
    return record("total", (x,), x.value.sum(), lambda g: (np.broadcast_to(g, shape).copy(),))


def masked_sum(x, mask) -> Tensor:
    """Sum of x[B, T] over cells where mask is 1."""
    x = _t(x)
    m = np.asarray(mask).astype(x.dtype)
    if m.shape != x.shape:
        raise ShapeError(f"masked_sum: shape mismatch {x.shape} vs {m.shape}")
    return record("masked_sum", (x,), (x.value * m).sum(), lambda g: (g * m,))


def masked_mean(x, mask) -> Tensor:
    n = float(np.asarray(mask).sum())
    if n == 0:
        raise ValueError("masked_mean: mask selects nothing")
    return scale(masked_sum(x, mask), 1.0 / n)


# ---------------------------------------------------------------- recurrent

def _scan(x: Tensor, mask, cells: Sequence[tuple], reverse: Sequence[bool], name: str):
    """LSTM recurrences over a shared input, one per entry of ``cells``.

    The directions are stacked on a leading axis so each time step costs one
    batched matmul for all of them. Reversed directions run on a time-flipped
    copy of their inputs and are flipped back on output.
    Returns the forward value [K, B, T, P], the Tensors to record as inputs,
    and the backward rule mapping d(out) to gradients for those inputs.
    """
    B, T, D = x.shape
    ws = [_t(c[0]) for c in cells]
    bs = [_t(c[1]) for c in cells]
    ps = [None if c[2] is None else _t(c[2]) for c in cells]
    H = bs[0].shape[0] // 4
    has_proj = ps[0] is not None
    P = ps[0].shape[1] if has_proj else H
    for w, b, pr in zip(ws, bs, ps):
        if w.shape != (D + P, 4 * H) or b.shape != (4 * H,) or (pr is None) == has_proj \
                or (has_proj and pr.shape != (H, P)):
            raise ShapeError(f"{name}: shape mismatch x{x.shape} w{w.shape} b{b.shape}"
                             + (f" proj{pr.shape}" if pr is not None else ""))
    m_all = np.asarray(mask).astype(x.dtype)
    if m_all.shape != (B, T):
        raise ShapeError(f"{name}: shape mismatch {x.shape} vs mask {m_all.shape}")

    K = len(cells)
    flip = np.array(reverse, dtype=bool)
    W = np.stack([w.value for w in ws])
    Wx, Wh = W[:, :D], W[:, D:]
    Pv = np.stack([p.value for p in ps]) if has_proj else None

    def to_steps(a):
        # [K, B, T, ...] in time order -> step order (reversed directions flipped)
        a = a.copy()
        a[flip] = a[flip][:, :, ::-1]
        return a

    xw = to_steps(x.value[None] @ Wx[:, None] + np.stack([b.value for b in bs])[:, None, None, :])
    mk = to_steps(np.broadcast_to(m_all, (K, B, T)))[..., None]

    h = np.zeros((K, B, P), dtype=x.dtype)
    c = np.zeros((K, B, H), dtype=x.dtype)
    out = np.empty((K, B, T, P), dtype=x.dtype)
    cache = [None] * T
    for t in range(T):
        z = h @ Wh
        z += xw[:, :, t]
        gates = _sigmoid(z[..., :3 * H])
        g = np.tanh(z[..., 3 * H:])
        i, f, o = gates[..., :H], gates[..., H:2 * H], gates[..., 2 * H:]
        c_raw = f * c
        c_raw += i * g
        tc = np.tanh(c_raw)
        r = o * tc
        m = mk[:, :, t]
        cache[t] = (gates, g, c, h, tc, r)
        c = c_raw * m
        h = (r @ Pv if has_proj else r) * m
        out[:, :, t] = h
    out = to_steps(out)

    def back(dout):
        dout = to_steps(dout)
        dh_next = np.zeros((K, B, P), dtype=dout.dtype)
        dc_next = np.zeros((K, B, H), dtype=dout.dtype)
        dWh = np.zeros_like(Wh)
        dP = np.zeros_like(Pv) if has_proj else None
        dz_all = np.empty((K, B, T, 4 * H), dtype=dout.dtype)
        WhT = Wh.transpose(0, 2, 1)
        PvT = Pv.transpose(0, 2, 1) if has_proj else None
        for t in range(T - 1, -1, -1):
            gates, g, c_prev, h_prev, tc, r = cache[t]
            i, f, o = gates[..., :H], gates[..., H:2 * H], gates[..., 2 * H:]
            m = mk[:, :, t]
            dh = (dout[:, :, t] + dh_next) * m
            if has_proj:
                dP += r.transpose(0, 2, 1) @ dh
                dr = dh @ PvT
            else:
                dr = dh
            dc = dc_next * m + dr * o * (1 - tc * tc)
            dz = dz_all[:, :, t]
            dz[..., :H] = dc * g * i * (1 - i)
            dz[..., H:2 * H] = dc * c_prev * f * (1 - f)
            dz[..., 2 * H:3 * H] = dr * tc * o * (1 - o)
            dz[..., 3 * H:] = dc * i * (1 - g * g)
            dc_next = dc * f
            dWh += h_prev.transpose(0, 2, 1) @ dz
            dh_next = dz @ WhT
        dz_all = to_steps(dz_all)
        flat = dz_all.reshape(K, B * T, 4 * H)
        dWx = x.value.reshape(1, B * T, D).transpose(0, 2, 1) @ flat
        dx = (dz_all @ Wx.transpose(0, 2, 1)[:, None]).sum(axis=0)
        dW = np.concatenate([dWx, dWh], axis=1)
        db = flat.sum(axis=1)
        grads = [dx]
        for k in range(K):
            grads += [dW[k], db[k]] + ([dP[k]] if has_proj else [])
        return grads

    inputs = [x]
    for w, b, pr in zip(ws, bs, ps):
        inputs += [w, b] + ([pr] if has_proj else [])
    return out, inputs, back


def lstm_scan(x, mask, w, b, proj=None, reverse: bool = False) -> Tensor:
    """Run an LSTM over x[B, T, D] and return hidden states [B, T, P].

    ``w`` is [(D + P), 4H] with gate blocks ordered input, forget, output,
    candidate. With ``proj`` [H, P] the emitted hidden state is projected,
    otherwise P = H. Cells where mask is 0 emit zeros and reset the
    recurrent state, so sentences padded on the right are handled in either
    direction.
    """
    x = _t(x)
    out, inputs, back = _scan(x, mask, [(w, b, proj)], [reverse], "lstm_scan")
    return record("lstm_scan", inputs, out[0], lambda g: back(g[None]))


def bilstm_scan(x, mask, fwd: tuple, bwd: tuple) -> Tensor:
    """Forward and backward LSTMs over the same input, concatenated: [B, T, 2P].

    ``fwd`` and ``bwd`` are ``(w, b, proj)`` triples as for :func:`lstm_scan`.
    Equivalent to concatenating two ``lstm_scan`` calls, but both directions
    share each time step's kernel calls.
    """
    x = _t(x)
    out, inputs, back = _scan(x, mask, [fwd, bwd], [False, True], "bilstm_scan")
    P = out.shape[-1]

    def split(g):
        return back(np.stack([g[..., :P], g[..., P:]]))

    return record("bilstm_scan", inputs, np.concatenate([out[0], out[1]], axis=-1), split)
