"""float64 tensors with a reverse-mode tape.

Everything is dense, row-major and 64-bit. The op set is exactly what the
agent networks and the PPO losses need; most ops accept an optional leading
batch axis. Recording happens only while a ``Tape`` is active, so rollout-time
forward passes pay nothing beyond a flag check per op.

Typical use::

    with Tape() as tape:
        out = dense(x, w, b)
        loss = mean_all(mul(out, out))
    backward(loss)          # populates w.grad, b.grad

A tape can be consumed by ``backward`` exactly once. Gradients accumulate
additively into ``.grad`` of every ``requires_grad`` leaf, so callers zero
grads between steps (``p.grad = None``).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TapeError(RuntimeError):
    """Backward called on an unrecorded loss or an already-consumed tape."""


class ShapeError(ValueError):
    """An operation was called with incompatible shapes."""


class Tensor:
    """Dense float64 array, optionally participating in gradient recording.

    ``requires_grad`` marks leaves (parameters). Outputs of ops never require
    grad themselves; they carry a reference to the tape that recorded them.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class _Node:
    __slots__ = ("outputs", "inputs", "fn", "need")

    def __init__(self, outputs, inputs, fn, need):
        self.outputs = outputs
        self.inputs = inputs
        self.fn = fn
        self.need = need


class Tape:
    """Ordered record of executed ops; replayed in reverse by ``backward``."""

    __slots__ = ("_nodes", "consumed")

    def __init__(self):
        self._nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)


_ACTIVE: Tape | None = None


def _record(outputs, inputs, fn) -> None:
    tape = _ACTIVE
    if tape is None:
        return
    need = tuple(
        isinstance(t, Tensor) and (t.requires_grad or t.tape is tape)
        for t in inputs
    )
    if not any(need):
        return
    for o in outputs:
        o.tape = tape
    tape._nodes.append(_Node(outputs, inputs, fn, need))


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    The loss must be a scalar recorded on a tape; the tape is consumed and a
    second call raises ``TapeError``. Adjoints of interior tensors live only
    for the duration of the sweep; leaf grads accumulate additively.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss was not recorded on an active tape")
    if tape.consumed:
        raise TapeError("backward called twice on a consumed tape")
    tape.consumed = True

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        gouts = [adjoint.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [
            np.zeros_like(o.data) if g is None else g
            for g, o in zip(gouts, node.outputs)
        ]
        gins = node.fn(gouts, node.need)
        for t, g, needed in zip(node.inputs, gins, node.need):
            if not needed or g is None:
                continue
            if t.tape is tape:
                acc = adjoint.get(id(t))
                if acc is None:
                    adjoint[id(t)] = g.copy()
                else:
                    acc += g
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g


def _astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _astensor(a), _astensor(b)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def fn(gouts, need):
        (g,) = gouts
        return (g, g)

    _record((out,), (a, b), fn)
    return out


def sub(a, b) -> Tensor:
    a, b = _astensor(a), _astensor(b)
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def fn(gouts, need):
        (g,) = gouts
        return (g, -g)

    _record((out,), (a, b), fn)
    return out


def mul(a, b) -> Tensor:
    a, b = _astensor(a), _astensor(b)
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def fn(gouts, need):
        (g,) = gouts
        return (g * bd if need[0] else None, g * ad if need[1] else None)

    _record((out,), (a, b), fn)
    return out


def scale(a, s: float) -> Tensor:
    a = _astensor(a)
    s = float(s)
    out = Tensor(a.data * s)

    def fn(gouts, need):
        (g,) = gouts
        return (g * s,)

    _record((out,), (a,), fn)
    return out


def exp(a) -> Tensor:
    a = _astensor(a)
    out = Tensor(np.exp(a.data))
    od = out.data

    def fn(gouts, need):
        (g,) = gouts
        return (g * od,)

    _record((out,), (a,), fn)
    return out


def relu(a) -> Tensor:
    a = _astensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0

    def fn(gouts, need):
        (g,) = gouts
        return (g * mask,)

    _record((out,), (a,), fn)
    return out


def sigmoid(a) -> Tensor:
    a = _astensor(a)
    out = Tensor(_sigmoid(a.data))
    od = out.data

    def fn(gouts, need):
        (g,) = gouts
        return (g * od * (1.0 - od),)

    _record((out,), (a,), fn)
    return out


def tanh(a) -> Tensor:
    a = _astensor(a)
    out = Tensor(np.tanh(a.data))
    od = out.data

    def fn(gouts, need):
        (g,) = gouts
        return (g * (1.0 - od * od),)

    _record((out,), (a,), fn)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    a = _astensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)

    def fn(gouts, need):
        (g,) = gouts
        return (g * mask,)

    _record((out,), (a,), fn)
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient routes to the smaller input (ties to `a`)."""
    a, b = _astensor(a), _astensor(b)
    _same_shape(a, b, "minimum")
    out = Tensor(np.minimum(a.data, b.data))
    take_a = a.data <= b.data

    def fn(gouts, need):
        (g,) = gouts
        ga = g * take_a if need[0] else None
        gb = g * (~take_a) if need[1] else None
        return (ga, gb)

    _record((out,), (a, b), fn)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape) -> Tensor:
    a = _astensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None
    src_shape = a.data.shape

    def fn(gouts, need):
        (g,) = gouts
        return (g.reshape(src_shape),)

    _record((out,), (a,), fn)
    return out


def concat_last(a, b) -> Tensor:
    a, b = _astensor(a), _astensor(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(
            f"concat_last: leading shapes differ {a.data.shape} vs {b.data.shape}"
        )
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    na = a.data.shape[-1]

    def fn(gouts, need):
        (g,) = gouts
        return (g[..., :na], g[..., na:])

    _record((out,), (a, b), fn)
    return out


def gather_last(a, index) -> Tensor:
    """Pick one entry along the last axis per leading row: out[b] = a[b, index[b]]."""
    a = _astensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_last expects a 2-d tensor, got {a.data.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (a.data.shape[0],):
        raise ShapeError(f"gather_last: index shape {idx.shape} vs batch {a.data.shape[0]}")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])
    src_shape = a.data.shape

    def fn(gouts, need):
        (g,) = gouts
        ga = np.zeros(src_shape)
        ga[rows, idx] = g
        return (ga,)

    _record((out,), (a,), fn)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = _astensor(a)
    out = Tensor(a.data.sum())
    src_shape = a.data.shape

    def fn(gouts, need):
        (g,) = gouts
        return (np.broadcast_to(g, src_shape).copy(),)

    _record((out,), (a,), fn)
    return out


def mean_all(a) -> Tensor:
    a = _astensor(a)
    out = Tensor(a.data.mean())
    src_shape = a.data.shape
    n = a.data.size

    def fn(gouts, need):
        (g,) = gouts
        return (np.broadcast_to(g / n, src_shape).copy(),)

    _record((out,), (a,), fn)
    return out


def sum_last(a) -> Tensor:
    a = _astensor(a)
    out = Tensor(a.data.sum(axis=-1))
    n = a.data.shape[-1]

    def fn(gouts, need):
        (g,) = gouts
        return (np.repeat(g[..., None], n, axis=-1),)

    _record((out,), (a,), fn)
    return out


def spatial_mean(a) -> Tensor:
    """Mean over the two spatial axes of a (batch, h, w, c) tensor."""
    a = _astensor(a)
    if a.data.ndim != 4:
        raise ShapeError(f"spatial_mean expects (batch, h, w, c), got {a.data.shape}")
    _, h, w, _ = a.data.shape
    out = Tensor(a.data.mean(axis=(1, 2)))

    def fn(gouts, need):
        (g,) = gouts
        ga = np.broadcast_to(g[:, None, None, :] / (h * w), a.data.shape).copy()
        return (ga,)

    _record((out,), (a,), fn)
    return out


# ---------------------------------------------------------------------------
# softmax family


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    a = _astensor(a)
    if a.data.size == 0 or a.data.shape[-1] == 0:
        raise ShapeError("softmax on an empty input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))
    s = out.data

    def fn(gouts, need):
        (g,) = gouts
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    _record((out,), (a,), fn)
    return out


def log_softmax(a) -> Tensor:
    a = _astensor(a)
    if a.data.size == 0 or a.data.shape[-1] == 0:
        raise ShapeError("log_softmax on an empty input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    p = np.exp(out.data)

    def fn(gouts, need):
        (g,) = gouts
        return (g - p * g.sum(axis=-1, keepdims=True),)

    _record((out,), (a,), fn)
    return out


# ---------------------------------------------------------------------------
# affine / conv / recurrent


def dense(x, weights, bias) -> Tensor:
    """Affine map ``x @ weights + bias``; x is (n,) or (batch, n)."""
    x, weights, bias = _astensor(x), _astensor(weights), _astensor(bias)
    if weights.data.ndim != 2:
        raise ShapeError(f"dense: weights must be 2-d, got {weights.data.shape}")
    n, m = weights.data.shape
    if bias.data.shape != (m,):
        raise ShapeError(f"dense: bias shape {bias.data.shape}, expected ({m},)")
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != n:
        raise ShapeError(f"dense: input shape {x.data.shape} vs weights {weights.data.shape}")
    xd, wd = x.data, weights.data
    out = Tensor(xd @ wd + bias.data)
    batched = xd.ndim == 2

    def fn(gouts, need):
        (g,) = gouts
        gx = g @ wd.T if need[0] else None
        if need[1]:
            gw = xd.T @ g if batched else np.outer(xd, g)
        else:
            gw = None
        gb = (g.sum(axis=0) if batched else g) if need[2] else None
        return (gx, gw, gb)

    _record((out,), (x, weights, bias), fn)
    return out


def conv2d(x, kernels, bias) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (output keeps the spatial size).

    x is (h, w, c_in) or (batch, h, w, c_in); kernels (3, 3, c_in, c_out).
    """
    x, kernels, bias = _astensor(x), _astensor(kernels), _astensor(bias)
    kd = kernels.data
    if kd.ndim != 4 or kd.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d: kernels must be (3, 3, c_in, c_out), got {kd.shape}")
    _, _, c_in, c_out = kd.shape
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape}, expected ({c_out},)")
    xd = x.data
    batched = xd.ndim == 4
    if not batched:
        if xd.ndim != 3:
            raise ShapeError(f"conv2d: input must be (h, w, c_in) or (batch, h, w, c_in), got {xd.shape}")
        xd = xd[None]
    if xd.shape[3] != c_in:
        raise ShapeError(f"conv2d: input channels {xd.shape[3]} vs kernel c_in {c_in}")
    if xd.shape[1] < 1 or xd.shape[2] < 1:
        raise ShapeError("conv2d: spatial extents must be >= 1")
    b, h, w, _ = xd.shape

    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))      # (b, h, w, c_in, 3, 3)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c_in)
    kflat = kd.reshape(9 * c_in, c_out)
    od = (cols @ kflat + bias.data).reshape(b, h, w, c_out)
    out = Tensor(od if batched else od[0])

    def fn(gouts, need):
        (g,) = gouts
        gf = g.reshape(b * h * w, c_out)
        gw = (cols.T @ gf).reshape(3, 3, c_in, c_out) if need[1] else None
        gb = gf.sum(axis=0) if need[2] else None
        if need[0]:
            dcols = (gf @ kflat.T).reshape(b, h, w, 3, 3, c_in)
            gpad = np.zeros((b, h + 2, w + 2, c_in))
            for kh in range(3):
                for kw in range(3):
                    gpad[:, kh:kh + h, kw:kw + w, :] += dcols[:, :, :, kh, kw, :]
            gx = gpad[:, 1:h + 1, 1:w + 1, :]
            if not batched:
                gx = gx[0]
        else:
            gx = None
        return (gx, gw, gb)

    _record((out,), (x, kernels, bias), fn)
    return out


def lstm_step(x, h_prev, c_prev, weights, bias) -> tuple:
    """One LSTM cell step; returns (h, c).

    Gate order along the weight columns is input, forget, candidate, output:
    c = f*c_prev + i*g and h = o*tanh(c), with sigmoid gates and tanh
    candidate. weights is (n_in + cell, 4*cell); x and the states are (n_in,)
    and (cell,) or batched with a shared leading axis.
    """
    x, h_prev, c_prev = _astensor(x), _astensor(h_prev), _astensor(c_prev)
    weights, bias = _astensor(weights), _astensor(bias)
    xd, hd, cd = x.data, h_prev.data, c_prev.data
    batched = xd.ndim == 2
    if xd.ndim != hd.ndim or xd.ndim != cd.ndim or xd.ndim not in (1, 2):
        raise ShapeError(
            f"lstm_step: inconsistent ranks x{xd.shape} h{hd.shape} c{cd.shape}"
        )
    if not batched:
        xd, hd, cd = xd[None], hd[None], cd[None]
    n_in = xd.shape[1]
    cell = hd.shape[1]
    if cd.shape[1] != cell:
        raise ShapeError(f"lstm_step: h cell {cell} vs c cell {cd.shape[1]}")
    if weights.data.shape != (n_in + cell, 4 * cell):
        raise ShapeError(
            f"lstm_step: weights {weights.data.shape}, expected {(n_in + cell, 4 * cell)}"
        )
    if bias.data.shape != (4 * cell,):
        raise ShapeError(f"lstm_step: bias {bias.data.shape}, expected ({4 * cell},)")

    xh = np.concatenate([xd, hd], axis=1)
    z = xh @ weights.data + bias.data
    i = _sigmoid(z[:, :cell])
    f = _sigmoid(z[:, cell:2 * cell])
    g = np.tanh(z[:, 2 * cell:3 * cell])
    o = _sigmoid(z[:, 3 * cell:])
    c_new = f * cd + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    h_out = Tensor(h_new if batched else h_new[0])
    c_out = Tensor(c_new if batched else c_new[0])
    wd = weights.data

    def fn(gouts, need):
        gh, gc = gouts
        if not batched:
            gh, gc = gh[None], gc[None]
        dc = gc + gh * o * (1.0 - tc * tc)
        do = gh * tc
        di = dc * g
        df = dc * cd
        dg = dc * i
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dxh = dz @ wd.T if (need[0] or need[1]) else None
        gx = dxh[:, :n_in] if need[0] else None
        gh_prev = dxh[:, n_in:] if need[1] else None
        gc_prev = dc * f if need[2] else None
        gw = xh.T @ dz if need[3] else None
        gb = dz.sum(axis=0) if need[4] else None
        if not batched:
            gx = gx[0] if gx is not None else None
            gh_prev = gh_prev[0] if gh_prev is not None else None
            gc_prev = gc_prev[0] if gc_prev is not None else None
        return (gx, gh_prev, gc_prev, gw, gb)

    _record((h_out, c_out), (x, h_prev, c_prev, weights, bias), fn)
    return h_out, c_out


# ---------------------------------------------------------------------------
# attention contractions


def attention_scores(keys, queries) -> Tensor:
    """Per-head inner products: (batch, pos, heads, depth) x (batch, heads, depth)
    -> logits (batch, heads, pos)."""
    keys, queries = _astensor(keys), _astensor(queries)
    kd, qd = keys.data, queries.data
    if kd.ndim != 4 or qd.ndim != 3:
        raise ShapeError(f"attention_scores: keys {kd.shape}, queries {qd.shape}")
    if kd.shape[0] != qd.shape[0] or kd.shape[2:] != qd.shape[1:]:
        raise ShapeError(f"attention_scores: keys {kd.shape} vs queries {qd.shape}")
    out = Tensor(np.einsum("bpmc,bmc->bmp", kd, qd))

    def fn(gouts, need):
        (g,) = gouts
        gk = np.einsum("bmp,bmc->bpmc", g, qd) if need[0] else None
        gq = np.einsum("bmp,bpmc->bmc", g, kd) if need[1] else None
        return (gk, gq)

    _record((out,), (keys, queries), fn)
    return out


def attention_apply(weights, values) -> Tensor:
    """Contract attention weights against values: (batch, heads, pos) x
    (batch, pos, heads, depth) -> (batch, heads, depth)."""
    weights, values = _astensor(weights), _astensor(values)
    ad, vd = weights.data, values.data
    if ad.ndim != 3 or vd.ndim != 4:
        raise ShapeError(f"attention_apply: weights {ad.shape}, values {vd.shape}")
    if ad.shape[0] != vd.shape[0] or ad.shape[1] != vd.shape[2] or ad.shape[2] != vd.shape[1]:
        raise ShapeError(f"attention_apply: weights {ad.shape} vs values {vd.shape}")
    out = Tensor(np.einsum("bmp,bpmc->bmc", ad, vd))

    def fn(gouts, need):
        (g,) = gouts
        ga = np.einsum("bmc,bpmc->bmp", g, vd) if need[0] else None
        gv = np.einsum("bmp,bmc->bpmc", ad, g) if need[1] else None
        return (ga, gv)

    _record((out,), (weights, values), fn)
    return out
