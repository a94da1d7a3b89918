"""Dense float64 tensors with reverse-mode differentiation.

Only the primitives needed by the model zoo are provided. Every tensor
produced from an operand with ``requires_grad`` remembers its parents and
a closure mapping the output gradient to operand gradients; ``backward``
walks that graph once in reverse topological order.

Shape rules (leading batch axes are allowed where noted):

* add, sub, mul: identical shapes, or one operand a scalar / trailing
  broadcast of shape ``(K,)`` against ``(..., K)`` (bias add).
* matmul: ``(N, K) @ (K, M) -> (N, M)``.
* conv2d: input ``(N, C, H, W)``, weight ``(F, C, kh, kw)``, optional bias
  ``(F,)``; integer stride and zero padding.
* relu, softplus, log: elementwise.
* bilinear_resize: ``(..., H, W) -> (..., h, w)``, half-pixel centres.
* pad: zero padding on the last two axes, ``(top, bottom, left, right)``.
* mean: over the given axes (all axes when omitted).
* softmax, log_softmax: over the last axis.
* reshape: any shape with the same element count.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ComputationRecord",
    "tensor",
    "forward_op",
    "backward",
    "grad",
    "finite_difference_gradient",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "softplus",
    "bilinear_resize",
    "pad",
    "mean",
    "sum_all",
    "log",
    "softmax",
    "log_softmax",
    "reshape",
    "bilinear_matrix",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation's shape rule."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a.data, b.data)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a.data, b.data)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a.data, b.data)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), fn, "mul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), fn, "matmul")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def fn(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), fn, "relu")


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    out = np.logaddexp(0.0, x.data)

    def fn(g):
        # d/dx log(1 + e^x) = sigmoid(x)
        return (g * np.exp(x.data - out),)

    return _make(out, (x,), fn, "softplus")


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive operand")

    def fn(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), fn, "log")


# ---------------------------------------------------------------------------
# reductions and normalisation


def mean(x, axis: int | Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        axes = tuple(range(x.data.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.data.ndim for a in axes)
        if len(set(axes)) != len(axes):
            raise ShapeError(f"mean: repeated axes {axis} for shape {x.shape}")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes) if axes else x.data.copy()

    def fn(g):
        g = np.asarray(g)
        expanded = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(expanded, x.shape) / count,)

    return _make(np.asarray(out, dtype=np.float64), (x,), fn, "mean")


def sum_all(x) -> Tensor:
    x = _as_tensor(x)

    def fn(g):
        return (np.broadcast_to(np.asarray(g), x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), fn, "sum")


def softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), fn, "softmax")


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def fn(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), fn, "log_softmax")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc

    def fn(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), fn, "reshape")


# ---------------------------------------------------------------------------
# spatial operations


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape[2:]} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {f} filters")
        out = out + bias.data
        parents = (x, weight, bias)
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(np.ascontiguousarray(out), parents, fn, "conv2d")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix ``(n_out, n_in)`` with half-pixel centres."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def bilinear_resize(x, size: tuple[int, int]) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim < 2 or min(size) < 1:
        raise ShapeError(f"bilinear_resize: cannot resize {x.shape} to {size}")
    h, w = x.shape[-2:]
    rh = bilinear_matrix(h, size[0])
    rw = bilinear_matrix(w, size[1])
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def fn(g):
        return (np.matmul(np.matmul(rh.T, g), rw),)

    return _make(out, (x,), fn, "bilinear_resize")


def pad(x, widths: tuple[int, int, int, int]) -> Tensor:
    x = _as_tensor(x)
    top, bottom, left, right = widths
    if min(widths) < 0 or x.data.ndim < 2:
        raise ShapeError(f"pad: invalid widths {widths} for shape {x.shape}")
    spec = [(0, 0)] * (x.data.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(x.data, spec)
    h, w = x.shape[-2:]

    def fn(g):
        return (g[..., top : top + h, left : left + w],)

    return _make(out, (x,), fn, "pad")


# ---------------------------------------------------------------------------
# dispatch and differentiation

_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "softplus": softplus,
    "bilinear_resize": bilinear_resize,
    "pad": pad,
    "mean": mean,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "reshape": reshape,
}


def forward_op(kind: str, *operands, **kwargs) -> Tensor:
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; expected one of {sorted(_OPS)}") from None
    return op(*operands, **kwargs)


class ComputationRecord:
    """Topologically ordered view of the graph reachable from ``output``."""

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(output: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to graph leaves.

    Reachable leaves that require grad are always reported; any extra
    ``leaves`` that are unreachable receive zeros. Leaf ``.grad`` fields
    are set as a side effect (overwritten, never accumulated).
    """
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    record = ComputationRecord(output)
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
        if g is None or node.is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64, copy=True)
    result: dict[Tensor, np.ndarray] = {}
    for leaf in record.leaves():
        g = grads.get(id(leaf), np.zeros_like(leaf.data))
        leaf.grad = g.reshape(leaf.shape)
        result[leaf] = leaf.grad
    for leaf in leaves or ():
        if leaf not in result:
            leaf.grad = np.zeros_like(leaf.data)
            result[leaf] = leaf.grad
    return result


def grad(output: Tensor, wrt: Tensor) -> np.ndarray:
    return backward(output, [wrt])[wrt]


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out
