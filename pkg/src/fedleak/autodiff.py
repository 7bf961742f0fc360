"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive records its inputs on the output tensor. Vector-Jacobian
products are themselves written with primitives, so a gradient computed with
``differentiable=True`` is an ordinary graph node and can be differentiated
again (reverse-over-reverse).

The graph is implicit: each tensor points at the op that produced it and at
its parents. :func:`topo_order` linearises that DAG into the ordered op list
that :func:`backward` walks.
"""
from __future__ import annotations

import itertools
import warnings
from typing import Callable, Mapping, Sequence, Union

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class UnreachableGradientWarning(UserWarning):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "op", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, parents=(), op=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = parents
        self.op = op
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)


TensorLike = Union[Tensor, float, np.ndarray]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Op:
    """A primitive: a name plus a vjp rule.

    ``vjp(g, inputs, attrs, needs)`` receives the upstream gradient, the input
    tensors and a per-input flag saying whether that gradient is wanted; it
    returns one gradient tensor (or None) per input.
    """

    __slots__ = ("name", "vjp", "attrs")

    def __init__(self, name: str, vjp: Callable, attrs=None):
        self.name = name
        self.vjp = vjp
        self.attrs = attrs


def _make(name: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, attrs=None) -> Tensor:
    if not np.all(np.isfinite(value)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{name}: non-finite result from finite inputs")
    if any(t.requires_grad for t in inputs):
        return Tensor(value, True, tuple(inputs), Op(name, vjp, attrs))
    return Tensor(value)


def _check_same(name: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# broadcasting support (bias add, scalar-times-map)


def _broadcast_shape(name, sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{name}: shapes {sa} and {sb} do not conform") from None


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.data.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    value = x.data.sum(axis=axes, keepdims=True).reshape(shape)
    return _make("sum_to", value, (x,), _sum_to_vjp, x.shape)


def _sum_to_vjp(g, inputs, src_shape, needs):
    return (broadcast_to(g, src_shape),)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    value = np.broadcast_to(x.data, shape).copy()
    return _make("broadcast_to", value, (x,), _broadcast_vjp, x.shape)


def _broadcast_vjp(g, inputs, src_shape, needs):
    return (sum_to(g, src_shape),)


# ---------------------------------------------------------------------------
# elementwise


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("add", a.shape, b.shape)
    return _make("add", a.data + b.data, (a, b), _add_vjp)


def _add_vjp(g, inputs, attrs, needs):
    a, b = inputs
    return (sum_to(g, a.shape) if needs[0] else None), (sum_to(g, b.shape) if needs[1] else None)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("sub", a.shape, b.shape)
    return _make("sub", a.data - b.data, (a, b), _sub_vjp)


def _sub_vjp(g, inputs, attrs, needs):
    a, b = inputs
    ga = sum_to(g, a.shape) if needs[0] else None
    gb = sum_to(scale(g, -1.0), b.shape) if needs[1] else None
    return ga, gb


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _make("scale", a.data * c, (a,), _scale_vjp, c)


def _scale_vjp(g, inputs, c, needs):
    return (scale(g, c),)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("mul", a.shape, b.shape)
    return _make("mul", a.data * b.data, (a, b), _mul_vjp)


def _mul_vjp(g, inputs, attrs, needs):
    a, b = inputs
    ga = sum_to(mul(g, b), a.shape) if needs[0] else None
    gb = sum_to(mul(g, a), b.shape) if needs[1] else None
    return ga, gb


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value = a.data**p
    return _make("power", value, (a,), _power_vjp, p)


def _power_vjp(g, inputs, p, needs):
    (a,) = inputs
    if p == 1.0:
        return (g,)
    return (mul(g, scale(power(a, p - 1.0), p)),)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def relu(a: Tensor) -> Tensor:
    return _make("relu", np.maximum(a.data, 0.0), (a,), _relu_vjp)


def _relu_vjp(g, inputs, attrs, needs):
    (a,) = inputs
    # subgradient 0 at the kink; the mask is a constant so d2(relu) = 0
    return (mul(g, Tensor((a.data > 0).astype(np.float64))),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    return _make("sigmoid", _sigmoid(a.data), (a,), _sigmoid_vjp)


def _sigmoid_vjp(g, inputs, attrs, needs):
    (a,) = inputs
    s = sigmoid(a)
    return (mul(g, mul(s, sub(1.0, s))),)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make("sum", np.asarray(a.data.sum()), (a,), _sum_vjp)


def _sum_vjp(g, inputs, attrs, needs):
    (a,) = inputs
    return (broadcast_to(g, a.shape),)


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.size)


def mse(a: Tensor, b: TensorLike) -> Tensor:
    """Mean of squared differences, reduced to a scalar."""
    b = as_tensor(b)
    _check_same("mse", a, b)
    d = a.data - b.data
    return _make("mse", np.asarray(np.mean(d * d)), (a, b), _mse_vjp)


def _mse_vjp(g, inputs, attrs, needs):
    a, b = inputs
    d = scale(sub(a, b), 2.0 / a.size)
    gd = mul(broadcast_to(g, a.shape), d)
    return (gd if needs[0] else None), (scale(gd, -1.0) if needs[1] else None)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    value = a.data.reshape(shape)
    if value.size != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return _make("reshape", value, (a,), _reshape_vjp, a.shape)


def _reshape_vjp(g, inputs, src_shape, needs):
    return (reshape(g, src_shape),)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.size,))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), _transpose_vjp)


def _transpose_vjp(g, inputs, attrs, needs):
    return (transpose(g),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make("matmul", a.data @ b.data, (a, b), _matmul_vjp)


def _matmul_vjp(g, inputs, attrs, needs):
    a, b = inputs
    ga = matmul(g, transpose(b)) if needs[0] else None
    gb = matmul(transpose(a), g) if needs[1] else None
    return ga, gb


def take(a: Tensor, key) -> Tensor:
    """Basic (slice) indexing."""
    value = np.array(a.data[key], dtype=np.float64)
    return _make("take", value, (a,), _take_vjp, (key, a.shape))


def _take_vjp(g, inputs, attrs, needs):
    key, shape = attrs
    return (place(g, key, shape),)


def place(a: Tensor, key, shape) -> Tensor:
    """Zeros of ``shape`` with ``a`` written at ``key``; adjoint of take."""
    value = np.zeros(shape)
    value[key] = a.data
    return _make("place", value, (a,), _place_vjp, key)


def _place_vjp(g, inputs, key, needs):
    return (take(g, key),)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not conform on axis {axis}")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    return _make("concat", value, tuple(tensors), _concat_vjp, (axis, bounds))


def _concat_vjp(g, inputs, attrs, needs):
    axis, bounds = attrs
    out = []
    for need, lo, hi in zip(needs, bounds[:-1], bounds[1:]):
        if not need:
            out.append(None)
            continue
        key = [slice(None)] * g.data.ndim
        key[axis] = slice(int(lo), int(hi))
        out.append(take(g, tuple(key)))
    return tuple(out)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW maps along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: expected NCHW, got {a.shape} and {b.shape}")
    return concat([a, b], axis=1)


# ---------------------------------------------------------------------------
# pooling


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = _nchw("avg_pool2", x)
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial size {h}x{w} is not even")
    value = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return _make("avg_pool2", value, (x,), _avg_pool_vjp)


def _avg_pool_vjp(g, inputs, attrs, needs):
    return (scale(upsample2(g), 0.25),)


def upsample2(x: Tensor) -> Tensor:
    _nchw("upsample2", x)
    value = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _make("upsample2", value, (x,), _upsample_vjp)


def _upsample_vjp(g, inputs, attrs, needs):
    return (scale(avg_pool2(g), 4.0),)


# ---------------------------------------------------------------------------
# 2-D convolution, stride 1, zero "same" padding, odd square kernels.
#
# Three mutually-adjoint primitives close the system under differentiation:
#   conv2d(x, w)        forward correlation
#   conv2d_tr(g, w)     its adjoint in x
#   conv2d_wgrad(x, g)  its adjoint in w


def _nchw(name, x):
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected NCHW input, got {x.shape}")
    return x.shape


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) patches of the zero-padded input."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p : p + h, p : p + w] = x
    cols = np.empty((n, c, k, k, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(n, c * k * k, h * w)


def _corr(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if k == 1:
        return (w[:, :, 0, 0] @ x.reshape(n, c, h * wd)).reshape(n, o, h, wd)
    return (w.reshape(o, c * k * k) @ _im2col(x, k)).reshape(n, o, h, wd)


def _corr_tr(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _corr(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))


def _corr_wgrad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o = g.shape[1]
    gm = g.reshape(n, o, h * wd)
    if k == 1:
        cols = x.reshape(n, c, h * wd)
    else:
        cols = _im2col(x, k)
    out = (gm @ cols.transpose(0, 2, 1)).sum(axis=0)
    return out.reshape(o, c, k, k)


def _check_conv(name, x, w, x_channels_axis=1):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"{name}: expected NCHW input and OIkk kernel, got {x.shape} and {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 == 0:
        raise ShapeError(f"{name}: kernel must be odd and square, got {w.shape}")
    if x.shape[1] != w.shape[x_channels_axis]:
        raise ShapeError(f"{name}: input {x.shape} does not match kernel {w.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 correlation of an NCHW map with an OIkk kernel."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv("conv2d", x, w)
    out = _make("conv2d", _corr(x.data, w.data), (x, w), _conv_vjp)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
        out = add(out, reshape(b, (1, w.shape[0], 1, 1)))
    return out


def _conv_vjp(g, inputs, attrs, needs):
    x, w = inputs
    gx = conv2d_tr(g, w) if needs[0] else None
    gw = conv2d_wgrad(x, g, w.shape[2]) if needs[1] else None
    return gx, gw


def conv2d_tr(g: Tensor, w: Tensor) -> Tensor:
    _check_conv("conv2d_tr", g, w, x_channels_axis=0)
    return _make("conv2d_tr", _corr_tr(g.data, w.data), (g, w), _conv_tr_vjp)


def _conv_tr_vjp(G, inputs, attrs, needs):
    g, w = inputs
    gg = conv2d(G, w) if needs[0] else None
    gw = conv2d_wgrad(G, g, w.shape[2]) if needs[1] else None
    return gg, gw


def conv2d_wgrad(x: Tensor, g: Tensor, k: int) -> Tensor:
    if x.data.ndim != 4 or g.data.ndim != 4 or x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise ShapeError(f"conv2d_wgrad: shapes {x.shape} and {g.shape} do not conform")
    return _make("conv2d_wgrad", _corr_wgrad(x.data, g.data, k), (x, g), _conv_wgrad_vjp)


def _conv_wgrad_vjp(G, inputs, attrs, needs):
    x, g = inputs
    gx = conv2d_tr(g, G) if needs[0] else None
    gg = conv2d(x, G) if needs[1] else None
    return gx, gg


# ---------------------------------------------------------------------------
# backward


def topo_order(output: Tensor) -> list[Tensor]:
    """Grad-requiring nodes reachable from ``output``, inputs before consumers."""
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen or not node.requires_grad:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


class GradientMap(dict):
    """Gradients keyed like the ``wrt`` argument of :func:`backward`.

    ``unreachable`` lists the keys whose tensor does not influence the output;
    their entry is an all-zero tensor.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.unreachable: list = []


def backward(
    output: Tensor,
    wrt: Union[Sequence[Tensor], Mapping[str, Tensor]],
    differentiable: bool = False,
) -> GradientMap:
    """d(output)/d(wrt) for a scalar ``output``.

    With ``differentiable=True`` the returned tensors carry their own graph so
    they can be fed into another loss and differentiated again.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    items = list(wrt.items()) if isinstance(wrt, Mapping) else list(enumerate(wrt))

    order = topo_order(output)
    targets = {t.node_id for _, t in items}
    # keep only nodes lying on some path from a target up to the output
    relevant = set()
    for node in order:
        if node.node_id in targets or any(p.node_id in relevant for p in node.parents):
            relevant.add(node.node_id)

    grads: dict[int, Tensor] = {}
    if output.node_id in relevant:
        grads[output.node_id] = Tensor(np.ones_like(output.data))
    for node in reversed(order):
        g = grads.get(node.node_id)
        if g is None or node.op is None:
            continue
        if not any(p.node_id in relevant for p in node.parents):
            continue
        parents = node.parents
        if not differentiable:
            g = g.detach() if g.requires_grad else g
            parents = tuple(_frozen(p) for p in parents)
        needs = tuple(p.node_id in relevant for p in node.parents)
        for orig, pg in zip(node.parents, node.op.vjp(g, parents, node.op.attrs, needs)):
            if pg is None or orig.node_id not in relevant:
                continue
            prev = grads.get(orig.node_id)
            grads[orig.node_id] = pg if prev is None else add(prev, pg)

    result = GradientMap()
    for key, t in items:
        g = grads.get(t.node_id)
        if g is None:
            result.unreachable.append(key)
            g = Tensor(np.zeros_like(t.data))
        elif not differentiable and g.requires_grad:
            g = g.detach()
        result[key] = g
    if result.unreachable:
        warnings.warn(
            f"backward: {len(result.unreachable)} input(s) do not influence the output",
            UnreachableGradientWarning,
            stacklevel=2,
        )
    return result


class _FrozenView(Tensor):
    """Shares data with a node but drops its history (requires_grad False)."""

    __slots__ = ()

    def __init__(self, src: Tensor):
        self.data = src.data
        self.requires_grad = False
        self.parents = ()
        self.op = None
        self.node_id = src.node_id


def _frozen(t: Tensor) -> Tensor:
    return t if not t.requires_grad else _FrozenView(t)


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if h <= 0:
        raise ValueError("finite_diff: step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
