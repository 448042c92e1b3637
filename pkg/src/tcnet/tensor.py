"""Dense float64 tensors with a reverse-mode tape.

Every op checks shapes explicitly; there is no implicit broadcasting. Ops
that accept leading batch dimensions require them to be identical on all
operands.

Usage::

    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tsum(mul(x, x))
    tape.backward(loss)
    x.grad  # -> [2., 2., 2.]
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "make_op",
    "active_tape",
    "no_grad",
    "detach",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "sat_sigmoid",
    "relu",
    "tanh",
    "exp",
    "log",
    "elementwise",
    "matmul",
    "linear",
    "conv2d",
    "masked_softmax",
    "log_softmax",
    "reshape",
    "transpose",
    "concat",
    "take",
    "gather_rows",
    "slice_axis",
    "tsum",
    "mean",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class DomainError(ValueError):
    """Input lies outside an op's mathematical domain."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_state = threading.local()


def _stack() -> list:
    s = getattr(_state, "tapes", None)
    if s is None:
        s = _state.tapes = []
    return s


def active_tape() -> Optional["Tape"]:
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered record of executed ops.

    Ops record themselves on the innermost active tape when at least one
    input requires a gradient. Nodes are appended in execution order, which
    is a topological order of the graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        s = _stack()
        if s and s[-1] is self:
            s.pop()
        else:  # pragma: no cover - misuse of nested contexts
            s.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self._release()
        self._spent = False

    def _release(self) -> None:
        # nodes and their outputs reference each other; unlink them so a
        # finished graph is freed by reference counting alone
        for node in self.nodes:
            node.output._node = None
        self.nodes = []

    def backward(self, loss: Tensor, retain_grads: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf tensor that
        requires a gradient. Intermediate results keep their gradient only
        with ``retain_grads``. The graph is released afterwards."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._spent:
            raise RuntimeError("tape already consumed by backward; reset and re-run forward")
        if not self.nodes or loss._node is None or loss._node not in self._index():
            raise RuntimeError("loss was not produced on this tape (run forward first)")
        self._spent = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            if retain_grads:
                node.output.grad = g
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(
                        f"backward produced gradient {gi.shape} for input {t.data.shape}"
                    )
                key = id(t)
                if t._node is None:
                    leaves[key] = t
                grads[key] = grads[key] + gi if key in grads else gi
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g
        self._release()

    def _index(self) -> set:
        return set(self.nodes)


class no_grad:
    """Suspend recording: ops inside run eagerly without a tape."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)


def make_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap a forward result and register its backward rule.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(tuple(inputs), out, backward)
        out._node = node
        tape.nodes.append(node)
    return out


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_op(a.data * s, (a,), lambda g: (g * s,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def sat_sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.clip(1.2 * _sigmoid(x) - 0.1, 0.0, 1.0)


def sat_sigmoid_grad_np(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    raw = 1.2 * s - 0.1
    return np.where((raw > 0.0) & (raw < 1.0), 1.2 * s * (1.0 - s), 0.0)


def sat_sigmoid(a: Tensor) -> Tensor:
    """max(0, min(1, 1.2*sigmoid(x) - 0.1))."""
    x = a.data
    return make_op(sat_sigmoid_np(x), (a,), lambda g: (g * sat_sigmoid_grad_np(x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return make_op(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return make_op(np.log(x), (a,), lambda g: (g / x,))


_UNARY = {
    "sigmoid": sigmoid,
    "sat_sigmoid": sat_sigmoid,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(a: Tensor, b=None, kind: str = "add") -> Tensor:
    """Dispatch one of the pointwise kinds; ``scale`` takes a float ``b``."""
    if kind in _BINARY:
        if not isinstance(b, Tensor):
            raise TypeError(f"{kind} needs a second tensor")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[..., m, k] @ [..., k, n] with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: incompatible ranks {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_op(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-token affine map: x[..., k] @ w[k, n] (+ b[n])."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    wd = w.data
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, w.shape[1])
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(out, inputs, backward)


# below this many (c_in * c_out) pairs a stride-1 convolution folds its kernel
# offsets into one matmul (im2col or its transpose) instead of one per offset
_PLANAR_LIMIT = 16


def _shift_sum(z, k, ho, wo):
    """sum_{i,j} z[:, i:i+ho, j:j+wo, i*k+j] for z of shape [nb, hp, wp, k*k, c]."""
    out = z[:, 0:ho, 0:wo, 0].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                out += z[:, i : i + ho, j : j + wo, i * k + j]
    return out


def _conv2d_planar(x, kernel, bias, xb, ho, wo, lead):
    k, _, cin, cout = kernel.shape
    kd = kernel.data
    nb, hp, wp, _ = xb.shape
    # kernel as [cin, k*k*cout]: one matmul spreads every input value to all offsets
    spread = kd.transpose(2, 0, 1, 3).reshape(cin, k * k * cout)
    if cin < cout:
        cols = np.stack([xb[:, i : i + ho, j : j + wo, :] for i in range(k) for j in range(k)], axis=3)
        out = cols.reshape(-1, k * k * cin) @ kd.reshape(k * k * cin, cout)
    else:
        z = (xb.reshape(-1, cin) @ spread).reshape(nb, hp, wp, k * k, cout)
        out = _shift_sum(z, k, ho, wo)
    if bias is not None:
        out = out + bias.data
    result = out.reshape(*lead, ho, wo, cout)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = np.empty_like(kd)
        for i in range(k):
            for j in range(k):
                gk[i, j] = xb[:, i : i + ho, j : j + wo, :].reshape(-1, cin).T @ g2
        gx = None
        if x.requires_grad:
            h, w = x.shape[-3], x.shape[-2]
            pad = (hp - h) // 2
            if cout < cin:
                # gather: correlate the (k-1)-padded gradient with the flipped kernel
                q = k - 1
                gq = np.pad(g.reshape(nb, ho, wo, cout), ((0, 0), (q, q), (q, q), (0, 0)))
                offs = [(pad + a, pad + b) for a in range(k) for b in range(k)]
                cols = np.stack([gq[:, i : i + h, j : j + w, :] for i, j in offs], axis=3)
                flipped = kd[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
                gx = (cols.reshape(-1, k * k * cout) @ flipped).reshape(x.shape)
            else:
                # scatter: each output gradient lands on the k*k input positions it read
                d = (g2 @ kd.transpose(3, 0, 1, 2).reshape(cout, k * k * cin)).reshape(nb, ho, wo, k * k, cin)
                dxp = np.zeros_like(xb)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i : i + ho, j : j + wo, :] += d[:, :, :, i * k + j]
                gx = dxp[:, pad : hp - pad, pad : wp - pad, :].reshape(x.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return make_op(result, inputs, backward)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    padding: int = 0,
    stride: int = 1,
) -> Tensor:
    """Cross-correlation of [..., h, w, c_in] with a [k, k, c_in, c_out] kernel.

    Output spatial extent is floor((in + 2*padding - k) / stride) + 1.
    """
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: kernel must be [k, k, c_in, c_out], got {kernel.shape}")
    if x.ndim < 3 or x.shape[-1] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    k, _, cin, cout = kernel.shape
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match c_out={cout}")
    lead = x.shape[:-3]
    h, w = x.shape[-3], x.shape[-2]
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    xb = x.data.reshape(-1, h, w, cin)
    nb = xb.shape[0]
    if padding:
        xb = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    kd = kernel.data
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1

    if stride == 1 and cin * cout <= _PLANAR_LIMIT:
        return _conv2d_planar(x, kernel, bias, xb, ho, wo, lead)

    def window(i, j):
        return xb[:, i : i + hs : stride, j : j + ws : stride, :].reshape(-1, cin)

    # accumulate one matmul per kernel offset; avoids a k*k*c_in im2col buffer
    out = np.zeros((nb * ho * wo, cout))
    for i in range(k):
        for j in range(k):
            out += window(i, j) @ kd[i, j]
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, ho, wo, cout)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = np.empty_like(kd)
        for i in range(k):
            for j in range(k):
                gk[i, j] = window(i, j).T @ g2
        gx = None
        if x.requires_grad:
            dxp = np.zeros((nb, hp, wp, cin))
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + hs : stride, j : j + ws : stride, :] += (g2 @ kd[i, j].T).reshape(
                        nb, ho, wo, cin
                    )
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding, :]
            gx = dxp.reshape(x.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return make_op(out, inputs, backward)


# -- normalisation -----------------------------------------------------------


def masked_softmax(logits: Tensor, mask: np.ndarray, scale: float = 1.0):
    """Softmax over the last axis restricted to entries where ``mask`` is set.

    Returns ``(probs, degenerate)``. Masked entries are exactly zero. Rows
    with an all-zero mask come back as all-zero rows and are flagged in the
    boolean ``degenerate`` array (shape = logits.shape[:-1]).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs logits {logits.shape}")
    z = logits.data * scale
    zm = np.where(mask, z, -np.inf)
    degenerate = ~mask.any(axis=-1)
    m = zm.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, z - m, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def backward(g):
        dz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return (dz * scale,)

    return make_op(p, (logits,), backward), degenerate


def log_softmax(x: Tensor) -> Tensor:
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(d - m).sum(axis=-1, keepdims=True))
    y = d - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make_op(y, (x,), backward)


# -- structural --------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),)
    )


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != xs[0].shape[:ax] + xs[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return make_op(np.concatenate([t.data for t in xs], axis=ax), xs, backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return make_op(x.data[idx], (x,), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """out[i] = x[index[i]] for a 2-D ``x``; backward scatter-adds on collisions."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {x.shape}")
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError("gather_rows: index out of range")

    def backward(g):
        m = index.size
        scatter = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))
        return (np.asarray(scatter @ g),)

    return make_op(x.data[index], (x,), backward)


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along one axis (like np.take). A multi-dimensional index is
    only accepted on axis 0; backward scatter-adds on repeated indices."""
    index = np.asarray(index, dtype=np.int64)
    ax = axis % x.ndim
    if index.ndim != 1 and ax != 0:
        raise ShapeError("take: multi-dimensional index only supported on axis 0")
    moved = np.moveaxis(x.data, ax, 0)
    n = moved.shape[0]
    flat = moved.reshape(n, -1)
    out = flat[index.reshape(-1)].reshape(*index.shape, *moved.shape[1:])
    if index.ndim == 1:
        out = np.moveaxis(out, 0, ax)
    src_shape = x.shape

    def backward(g):
        gm = np.moveaxis(g, ax, 0) if index.ndim == 1 else g
        g2 = gm.reshape(index.size, -1)
        scatter = sp.csr_matrix(
            (np.ones(index.size), (index.reshape(-1), np.arange(index.size))),
            shape=(n, index.size),
        )
        gf = np.asarray(scatter @ g2).reshape(moved.shape)
        return (np.moveaxis(gf, 0, ax).reshape(src_shape),)

    return make_op(np.ascontiguousarray(out), (x,), backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    if axis is None:
        return make_op(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % x.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), src).copy(),)

    return make_op(x.data.sum(axis=ax), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)
