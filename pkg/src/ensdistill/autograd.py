"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

The computation graph is recorded dynamically: every differentiable operation
attaches a ``GraphNode`` to its output tensor, holding the input tensors and a
backward-rule closure. ``backward()`` on a scalar root walks the recorded
graph once in reverse topological order and accumulates gradients into every
reachable tensor that requires them.

Training runs in float32 for speed; gradient checking is only reliable in
float64, so the active dtype can be switched with ``set_default_dtype`` or,
temporarily, with the ``precision()`` context manager.

Broadcasting is deliberately restricted to scalars and trailing dimensions
(e.g. ``[N, C] + [C]``). That covers everything the layers and losses need
and keeps every backward rule simple enough to verify by hand.
"""

from __future__ import annotations

import contextlib
from collections import defaultdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GraphNode",
    "ShapeMismatch",
    "add",
    "sub",
    "mul",
    "square",
    "absolute",
    "exp",
    "matmul",
    "relu",
    "log_softmax",
    "conv2d",
    "max_pool2d",
    "global_avg_pool2d",
    "gather_rows",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "stop_gradient",
    "backward",
    "no_grad",
    "grad_enabled",
    "precision",
    "set_default_dtype",
    "default_dtype",
    "op_counts",
    "reset_op_counts",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}

_default_dtype = np.float32
_grad_enabled = True

# Global per-op invocation counter, mainly for tests that pin execution
# counts (e.g. the shared base block must run once per batch).
_op_counts: dict[str, int] = defaultdict(int)


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def set_default_dtype(name: str) -> None:
    """Set the dtype used for newly created tensors ('float32'/'float64')."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default dtype, e.g. ``with precision('float64')``."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, finite-difference probes)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def op_counts() -> dict[str, int]:
    return dict(_op_counts)


def reset_op_counts() -> None:
    _op_counts.clear()


class GraphNode:
    """One recorded operation in the computation graph.

    ``op`` is the operation tag, ``inputs`` the ordered predecessor tensors,
    and ``rule`` maps the gradient at the output to a tuple of per-input
    gradients (``None`` for inputs that do not need one). Values the rule
    needs from the forward pass live in its closure.
    """

    __slots__ = ("op", "inputs", "rule")

    def __init__(self, op, inputs, rule):
        self.op = op
        self.inputs = inputs
        self.rule = rule


class Tensor:
    """A dense array with optional gradient and graph linkage.

    Tensors are immutable after creation except for gradient accumulation;
    ``grad`` always has the same shape as ``data`` when present.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: GraphNode | None = None):
        if isinstance(data, Tensor):
            raise TypeError("cannot wrap a Tensor in a Tensor; use .detach() or the data attribute")
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node = node

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no graph linkage, no gradient flow. Shares the buffer."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def square(self):
        return square(self)

    def abs(self):
        return absolute(self)

    def exp(self):
        return exp(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _record(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    _op_counts[op] += 1
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, node=GraphNode(op, inputs, rule))
    return Tensor(data)


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small == () or (len(small) <= len(big) and big[len(big) - len(small):] == small):
        return
    raise ShapeMismatch(
        f"{op}: shapes {sa} and {sb} are not broadcast-compatible "
        "(only scalar and trailing-dimension broadcast are supported)"
    )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a.shape, b.shape)
    out = a.data + b.data

    def rule(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("add", out, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a.shape, b.shape)
    out = a.data - b.data

    def rule(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("sub", out, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a.shape, b.shape)
    out = a.data * b.data

    def rule(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", out, (a, b), rule)


def square(a) -> Tensor:
    a = _lift(a)
    out = a.data * a.data

    def rule(g):
        return (g * (2.0 * a.data),) if a.requires_grad else (None,)

    return _record("square", out, (a,), rule)


def absolute(a) -> Tensor:
    a = _lift(a)
    out = np.abs(a.data)

    def rule(g):
        # subgradient 0 at exactly 0
        return (g * np.sign(a.data),) if a.requires_grad else (None,)

    return _record("abs", out, (a,), rule)


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)

    def rule(g):
        return (g * out,) if a.requires_grad else (None,)

    return _record("exp", out, (a,), rule)


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.data, 0.0)

    def rule(g):
        return (g * (a.data > 0),) if a.requires_grad else (None,)

    return _record("relu", out, (a,), rule)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def rule(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), rule)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = a.data.reshape(shape)

    def rule(g):
        return (g.reshape(a.data.shape),) if a.requires_grad else (None,)

    return _record("reshape", out, (a,), rule)


def tensor_sum(a) -> Tensor:
    """Full reduction to a scalar."""
    a = _lift(a)
    out = np.asarray(a.data.sum())

    def rule(g):
        return (g * np.ones_like(a.data),) if a.requires_grad else (None,)

    return _record("sum", out, (a,), rule)


def tensor_mean(a) -> Tensor:
    """Full-reduction mean to a scalar."""
    a = _lift(a)
    n = a.data.size
    out = np.asarray(a.data.sum() / n)

    def rule(g):
        return (g / n * np.ones_like(a.data),) if a.requires_grad else (None,)

    return _record("mean", out, (a,), rule)


def gather_rows(a, index) -> Tensor:
    """Select ``a[i, index[i]]`` for each row i of a 2-D tensor."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"gather_rows: expected 2-D tensor, got shape {a.shape}")
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or index.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"gather_rows: index of shape {index.shape} does not match rows of {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise ValueError(f"gather_rows: index out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def rule(g):
        if not a.requires_grad:
            return (None,)
        ga = np.zeros_like(a.data)
        ga[rows, index] = g
        return (ga,)

    return _record("gather_rows", out, (a,), rule)


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax of a [N, C] tensor, overflow-safe via max subtraction."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"log_softmax: expected [N, C], got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def rule(g):
        if not a.requires_grad:
            return (None,)
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _record("log_softmax", out, (a,), rule)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw] plus bias.

    Output spatial extents are ``floor((H + 2*padding - kh) / stride) + 1``
    (same for W) with zero padding. Backward produces gradients for the
    input, the kernel and the bias.
    """
    x, kernel, bias = _lift(x), _lift(kernel), _lift(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin != cin_k:
        raise ShapeMismatch(f"conv2d: input channels {cin} do not match kernel channels {cin_k}")
    if bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    h2 = (hp - kh) // stride + 1
    w2 = (wp - kw) // stride + 1
    if kh > hp or kw > wp or h2 <= 0 or w2 <= 0:
        raise ValueError(
            f"conv2d: degenerate output extent for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    if padding:
        xp = np.zeros((n, cin, hp, wp), dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data

    if kh == 1 and kw == 1:
        # pointwise fast path: the contraction is a batched channel GEMM,
        # no im2col buffer needed (adaptation layers, residual projections)
        xs = np.ascontiguousarray(xp[:, :, ::stride, ::stride]) if stride > 1 else xp
        kmat = kernel.data.reshape(cout, cin)
        flat = xs.reshape(n, cin, h2 * w2)
        out = np.matmul(kmat[None], flat) + bias.data.reshape(1, cout, 1)

        def rule(g):
            gflat = g.reshape(n, cout, h2 * w2)
            gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
            gk = None
            if kernel.requires_grad:
                gk = np.matmul(gflat, flat.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
            gx = None
            if x.requires_grad:
                gxs = np.matmul(kmat.T[None], gflat).reshape(n, cin, h2, w2)
                if stride == 1 and not padding:
                    gx = gxs
                else:
                    gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
                    gxp[:, :, :stride * h2:stride, :stride * w2:stride] = gxs
                    gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            return gx, gk, gb

        return _record("conv2d", out.reshape(n, cout, h2, w2), (x, kernel, bias), rule)

    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col: [N*H2*W2, Cin*kh*kw] so the contraction is a single GEMM
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h2 * w2, cin * kh * kw)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (cols @ kmat.T + bias.data).reshape(n, h2, w2, cout).transpose(0, 3, 1, 2)

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h2 * w2, cout)
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(n, h2, w2, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * h2:stride, j:j + stride * w2:stride] += gcols[:, :, :, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk, gb

    return _record("conv2d", np.ascontiguousarray(out), (x, kernel, bias), rule)


def max_pool2d(x, window: int, stride: int | None = None) -> Tensor:
    """Max pooling; gradient is routed to the first maximum in row-major order."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"max_pool2d: expected [N,C,H,W], got shape {x.shape}")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"max_pool2d: window {window} exceeds spatial extents {h}x{w}")
    if stride < 1:
        raise ValueError(f"max_pool2d: stride must be >= 1, got {stride}")
    h2 = (h - window) // stride + 1
    w2 = (w - window) // stride + 1
    windows = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, h2, w2, window * window)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def rule(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        hh = (np.arange(h2) * stride).reshape(1, 1, h2, 1) + argmax // window
        ww = (np.arange(w2) * stride).reshape(1, 1, 1, w2) + argmax % window
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        np.add.at(gx, (nn, cc, hh, ww), g)
        return (gx,)

    return _record("max_pool2d", np.ascontiguousarray(out), (x,), rule)


def global_avg_pool2d(x) -> Tensor:
    """Spatial mean of [N,C,H,W] down to [N,C,1,1]; uniform gradient 1/(H*W)."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool2d: expected [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def rule(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(g / (h * w), x.data.shape).copy(),)

    return _record("global_avg_pool2d", out, (x,), rule)


# ---------------------------------------------------------------------------
# gradient flow control and the backward pass


def stop_gradient(t: Tensor) -> Tensor:
    """Forward-identical view of ``t`` that propagates zero gradient upstream."""
    return t.detach()


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-postorder DFS over recorded op outputs reachable from root.

    Branches that do not require grad are pruned: nothing behind them can
    receive a gradient.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None or not t.requires_grad:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for parent in t.node.inputs:
            stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor
    with ``requires_grad``. Repeated calls accumulate additively unless the
    gradients are cleared in between.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar-shaped, got shape {root.shape}")
    if not root.requires_grad:
        return

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        t.grad = g.copy() if t.grad is None else t.grad + g

    flows: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    accumulate(root, flows[id(root)])
    for t in reversed(_topo_order(root)):
        g = flows.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in flows:
                flows[id(parent)] = flows[id(parent)] + pg
            else:
                flows[id(parent)] = pg
            accumulate(parent, pg)
