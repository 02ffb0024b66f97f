"""Small define-by-run autodiff core on top of numpy.

Tensors hold float32 data by default (float64 is allowed for reference
computations in tests). The operation graph is rebuilt on every forward
pass: each op output keeps references to its parents and a closure that
routes the output gradient to them. Calling ``backward`` on a scalar
walks the graph once in reverse topological order and accumulates
gradients additively, so fan-out just works.

Reductions and matmul accumulate in 64-bit and round the result to the
tensor dtype once. conv2d is the exception: it runs its inner GEMM in
float32 for speed, which is plenty for 1e-3 gradient tolerances.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shapes or ranks that the op contract does not allow."""


class DomainError(ValueError):
    """Input values outside an op's mathematical domain (e.g. log of <= 0)."""


class DegenerateInputError(ValueError):
    """Structurally valid input that the op cannot meaningfully process."""


class NumericError(ArithmeticError):
    """NaN or Inf showed up where only finite values are allowed."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction inside the block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional array plus optional gradient and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d to 1-d, so only call it when
        # the layout actually needs fixing; 0-d is always contiguous.
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data with no graph history and no grad flag."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor through the recorded graph.

        Without an explicit seed gradient the tensor must be scalar-sized.
        Every reachable node is visited exactly once.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        order = _topo_order(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------

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


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _new(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast_scalar(g: np.ndarray, target_shape: tuple[int, ...], dtype) -> np.ndarray:
    """Collapse a full-shape gradient back to a scalar-shaped operand."""
    return np.sum(g, dtype=np.float64).astype(dtype).reshape(target_shape)


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"elementwise op needs equal shapes or a scalar operand, got {a.shape} and {b.shape}")


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    _binary_shapes(a, b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g if a.shape == data.shape else _unbroadcast_scalar(g, a.shape, a.dtype))
        if b.requires_grad:
            b._accumulate(g if b.shape == data.shape else _unbroadcast_scalar(g, b.shape, b.dtype))

    return _new(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    _binary_shapes(a, b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g if a.shape == data.shape else _unbroadcast_scalar(g, a.shape, a.dtype))
        if b.requires_grad:
            b._accumulate(-g if b.shape == data.shape else _unbroadcast_scalar(-g, b.shape, b.dtype))

    return _new(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    _binary_shapes(a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            ga = g * b.data
            a._accumulate(ga if a.shape == data.shape else _unbroadcast_scalar(ga, a.shape, a.dtype))
        if b.requires_grad:
            gb = g * a.data
            b._accumulate(gb if b.shape == data.shape else _unbroadcast_scalar(gb, b.shape, b.dtype))

    return _new(data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _new(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log needs strictly positive inputs")
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _new(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _new(data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    data = np.where(a.data > 0, a.data, a.data * a.dtype.type(slope))

    def backward(g):
        a._accumulate(g * np.where(a.data > 0, a.dtype.type(1), a.dtype.type(slope)))

    return _new(data, (a,), backward)


# -- shape -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if hasattr(shape, "__iter__") else (shape,)))
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _new(data, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {a.shape}")
    data = np.ascontiguousarray(a.data.T)

    def backward(g):
        a._accumulate(g.T)

    return _new(data, (a,), backward)


# -- matmul ------------------------------------------------------------


def _gemm(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    # 64-bit accumulation, one rounding at the end.
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)).astype(dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul takes two tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    data = _gemm(a.data, b.data, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_gemm(g, b.data.T, a.dtype))
        if b.requires_grad:
            b._accumulate(_gemm(a.data.T, g, b.dtype))

    return _new(data, (a, b), backward)


# -- reductions --------------------------------------------------------


def _check_axis(a: Tensor, axis) -> None:
    if axis is not None and not (0 <= axis < a.ndim):
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(a, axis)
    data = np.asarray(np.sum(a.data, axis=axis, dtype=np.float64)).astype(a.dtype)

    def backward(g):
        if axis is None:
            a._accumulate(np.full_like(a.data, g.reshape(())))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _new(data, (a,), backward)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(a, axis)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise DegenerateInputError("mean over an empty extent")
    data = np.asarray(np.mean(a.data, axis=axis, dtype=np.float64)).astype(a.dtype)
    inv = 1.0 / count

    def backward(g):
        scaled = (g * inv).astype(a.dtype)
        if axis is None:
            a._accumulate(np.full_like(a.data, scaled.reshape(())))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(scaled, axis), a.shape).copy())

    return _new(data, (a,), backward)


def reduce_max(a: Tensor, axis: int | None = None) -> Tensor:
    """Max reduction. Ties route the gradient to the lowest flat index."""
    _check_axis(a, axis)
    if a.size == 0:
        raise DegenerateInputError("max over an empty tensor")
    if axis is None:
        data = np.max(a.data)
        flat_idx = int(np.argmax(a.data))

        def backward(g):
            buf = np.zeros_like(a.data)
            buf.reshape(-1)[flat_idx] = g.reshape(())
            a._accumulate(buf)

        return _new(np.asarray(data, dtype=a.dtype), (a,), backward)

    data = np.max(a.data, axis=axis)
    arg = np.argmax(a.data, axis=axis)  # first occurrence, i.e. lowest index

    def backward(g):
        buf = np.zeros_like(a.data)
        idx = list(np.indices(data.shape))
        idx.insert(axis, arg)
        buf[tuple(idx)] = g
        a._accumulate(buf)

    return _new(data, (a,), backward)


# -- row normalization -------------------------------------------------


def l2_normalize_rows(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale every row of a 2-d tensor to unit L2 norm.

    Rows whose norm falls below ``eps`` have no usable direction, so they
    raise instead of silently exploding.
    """
    if a.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a 2-d tensor, got {a.shape}")
    sq = np.sum(np.square(a.data, dtype=np.float64), axis=1)
    norms = np.sqrt(sq)
    if np.any(norms < eps):
        raise DegenerateInputError(f"row norm below {eps}; cannot normalize")
    inv = (1.0 / norms)[:, None]
    data = (a.data * inv).astype(a.dtype)

    def backward(g):
        # d/dx (x / |x|) = (g - y * <g, y>) / |x| per row, y = normalized row
        dots = np.sum(g.astype(np.float64) * data.astype(np.float64), axis=1)[:, None]
        a._accumulate(((g - data * dots.astype(a.dtype)) * inv).astype(a.dtype))

    return _new(data, (a,), backward)


# -- convolution -------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise DimensionError(f"expected an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, :, :]  # [n, c, oh, ow, kh, kw]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(col)


def _col2im(dcol: np.ndarray, x_shape, kh, kw, sh, sw, ph, pw, oh, ow) -> np.ndarray:
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcol.dtype)
    dwin = dcol.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dwin[:, :, i, j]
    if ph or pw:
        dxp = dxp[:, :, ph : ph + h, pw : pw + w]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-d cross-correlation of [n,c,h,w] input with [oc,c,kh,kw] filters.

    Output spatial size is floor((in + 2*pad - kernel) / stride) + 1.
    The inner GEMM runs in the tensor dtype (float32 in practice); this is
    the one op that trades accumulation width for throughput.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    oc, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, weight expects {wc}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise DimensionError("conv2d stride must be >= 1")
    if ph < 0 or pw < 0:
        raise DimensionError("conv2d padding must be >= 0")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"kernel ({kh}x{kw}) larger than padded input ({h + 2 * ph}x{w + 2 * pw})")
    if bias is not None and bias.shape != (oc,):
        raise DimensionError(f"conv2d bias must have shape ({oc},), got {bias.shape}")

    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    col = _im2col(xp, kh, kw, sh, sw, oh, ow)  # [n*oh*ow, c*kh*kw]
    wmat = weight.data.reshape(oc, c * kh * kw)
    out = col @ wmat.T  # [n*oh*ow, oc]
    if bias is not None:
        out = out + bias.data
    data = np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ col).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(np.sum(gmat, axis=0, dtype=np.float64).astype(bias.dtype))
        if x.requires_grad:
            dcol = gmat @ wmat  # [n*oh*ow, c*kh*kw]
            x._accumulate(_col2im(dcol, x.shape, kh, kw, sh, sw, ph, pw, oh, ow))

    return _new(data, parents, backward)


# -- guards ------------------------------------------------------------


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"{what} contains NaN or Inf")
    return t
