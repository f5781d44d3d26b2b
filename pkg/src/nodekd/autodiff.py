"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every primitive applied to tensors that live on it.
Tensors created without a tape are constants: operations on constants only
compute forward values and record nothing, which keeps inference cheap.

    tape = Tape()
    w = tape.watch(np.ones(3))
    loss = ad.sum(w * w)
    grads = tape.backward(loss)      # {node_id: ndarray}
    grads[w.node_id]                 # -> [2., 2., 2.]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NumericFault", "ShapeError", "FiniteDiffResult",
    "as_tensor", "add", "sub", "scale", "mul", "matmul", "conv2d", "relu", "tanh",
    "group_norm", "log", "exp", "sum", "mean", "reshape", "concat", "slice",
    "max_pool2d", "finite_diff_check",
]


class ShapeError(ValueError):
    """Input shapes violate a primitive's shape rule."""


class NumericFault(FloatingPointError):
    """A forward pass produced NaN or Inf."""

    def __init__(self, primitive: str, t: float | None = None, h: float | None = None):
        self.primitive = primitive
        self.t = t
        self.h = h
        msg = f"non-finite output from primitive '{primitive}'"
        if t is not None:
            msg += f" (t={t!r}, h={h!r})"
        super().__init__(msg)


class _Node(NamedTuple):
    op: str
    inputs: tuple[int | None, ...]
    shape: tuple[int, ...]
    vjp: Callable | None


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, shape, vjp) -> int:
        self.nodes.append(_Node(op, tuple(inputs), tuple(shape), vjp))
        return len(self.nodes) - 1

    def watch(self, value) -> "Tensor":
        """Register ``value`` as a differentiable leaf on this tape."""
        data = np.array(value, dtype=np.float64)
        _check_finite("watch", data)
        node_id = self._append("leaf", (), data.shape, None)
        return Tensor(data, self, node_id)

    def watch_all(self, values: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {name: self.watch(v) for name, v in values.items()}

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Gradient of scalar ``loss`` w.r.t. every node on the tape.

        Nodes that do not feed the loss get zero gradients.
        """
        if loss.tape is not self:
            raise ShapeError("loss does not live on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        slots: list[np.ndarray | None] = [None] * len(self.nodes)
        slots[loss.node_id] = np.ones_like(loss.data)
        for i in range(loss.node_id, -1, -1):
            g = slots[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            needs = tuple(j is not None for j in node.inputs)
            for j, gj in zip(node.inputs, node.vjp(g, needs)):
                if j is None or gj is None:
                    continue
                slots[j] = gj if slots[j] is None else slots[j] + gj
        return {
            i: (g if g is not None else np.zeros(self.nodes[i].shape))
            for i, g in enumerate(slots)
        }

    def gradient(self, loss: "Tensor", wrt):
        """Gradients for a tensor, a sequence of tensors, or a dict of tensors."""
        grads = self.backward(loss)
        if isinstance(wrt, Tensor):
            return grads[wrt.node_id]
        if isinstance(wrt, Mapping):
            return {k: grads[t.node_id] for k, t in wrt.items()}
        return [grads[t.node_id] for t in wrt]


class Tensor:
    """A float64 array, optionally bound to a tape node."""

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_constant(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = "const" if self.is_constant else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray):
    if not np.isfinite(out).all():
        raise NumericFault(op)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    _check_finite(op, out)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ShapeError(f"{op}: inputs live on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    node_id = tape._append(op, [t.node_id for t in inputs], out.shape, vjp)
    return Tensor(out, tape, node_id)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                -_unbroadcast(g, sb) if needs[1] else None)

    return _record("sub", a.data - b.data, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a constant Python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g, needs: (g * c,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _record("mul", ad * bd, (a, b), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g, needs: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g, needs: (g * (1.0 - out * out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _record("log", out, (a,), lambda g, needs: (g / ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g, needs: (g * out,))


# linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _record("matmul", ad @ bd, (a, b), vjp)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), w: (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes x={x.shape} w={w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::s, ::s][:, :, :ho, :wo]  # (N, C, ho, wo, kh, kw)
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    wdata = w.data

    def vjp(g, needs):
        gx = gw = None
        if needs[1]:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if needs[0]:
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, wdata[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw

    return _record("conv2d", np.ascontiguousarray(out), (x, w), vjp)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (N, C, ...) over channel groups, then apply per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c = x.shape[:2]
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"group_norm: x={x.shape}, gamma={gamma.shape}, beta={beta.shape}, groups={groups}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    gam = gamma.data.reshape(bshape)
    out = xhat * gam + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def vjp(g, needs):
        gx = None
        if needs[0]:
            dxhat = (g * gam).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return (gx,
                (g * xhat).sum(axis=red) if needs[1] else None,
                g.sum(axis=red) if needs[2] else None)

    return _record("group_norm", out, (x, gamma, beta), vjp)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that don't fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: window {size} larger than input {x.shape}")
    blocks = (x.data[:, :, :ho * size, :wo * size]
              .reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, ho, wo, size * size))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    mask = np.zeros(blocks.shape)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)

    def vjp(g, needs):
        gb = (mask * g[..., None]).reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros(x.shape)
        gx[:, :, :ho * size, :wo * size] = gb.reshape(n, c, ho * size, wo * size)
        return (gx,)

    return _record("max_pool2d", out, (x,), vjp)


# reductions and shape ops -------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def vjp(g, needs):
        return (np.broadcast_to(np.reshape(g, kept), shape),)

    return _record("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def vjp(g, needs):
        return (np.broadcast_to(np.reshape(g, kept) / count, shape),)

    return _record("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _record("reshape", out, (a,), lambda g, needs: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g, needs):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if needs[i] else None
            for i in range(len(ts)))

    return _record("concat", out, ts, vjp)


def slice(a, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g, needs):
        gx = np.zeros(shape)
        gx[index] = g
        return (gx,)

    return _record("slice", np.array(a.data[index]), (a,), vjp)


# gradient checking --------------------------------------------------------

@dataclass
class FiniteDiffResult:
    passed: bool
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self):
        return self.passed


def _flatten(x):
    if isinstance(x, Mapping):
        names = list(x)
        arrays = [np.asarray(x[k], dtype=np.float64) for k in names]
        flat = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)

        def unflatten(vec, wrap):
            out, i = {}, 0
            for k, a in zip(names, arrays):
                out[k] = wrap(vec[i:i + a.size].reshape(a.shape))
                i += a.size
            return out
        return flat, unflatten
    arr = np.asarray(x, dtype=np.float64)
    return arr.ravel().copy(), lambda vec, wrap: wrap(vec.reshape(arr.shape))


def finite_diff_check(f, x, rel_tol: float = 1e-5, h: float = 1e-5,
                      floor: float = 1e-6) -> FiniteDiffResult:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    ``x`` is an array or a dict of arrays; ``f`` receives the same structure
    with Tensors in place of arrays. The relative error of each component is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    flat, unflatten = _flatten(x)

    tape = Tape()
    leaves: list[Tensor] = []

    def watch(a):
        leaves.append(tape.watch(a))
        return leaves[-1]

    loss = as_tensor(f(unflatten(flat, watch)))
    if loss.tape is None or not flat.size:
        analytic = np.zeros_like(flat)
    else:
        grads = tape.backward(loss)
        analytic = np.concatenate([grads[t.node_id].ravel() for t in leaves])

    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = as_tensor(f(unflatten(flat, Tensor))).item()
        flat[i] = orig - h
        fm = as_tensor(f(unflatten(flat, Tensor))).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    max_err = float(err.max()) if err.size else 0.0
    return FiniteDiffResult(max_err <= rel_tol, max_err, analytic, numeric)
