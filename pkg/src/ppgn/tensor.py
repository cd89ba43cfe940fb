"""Dense float tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array and remembers the operation that produced
it. ``backward()`` on a scalar replays the recorded graph in reverse
execution order, accumulating gradients into every tensor that requested
them. The default element type is float32; gradient-check tests switch to
float64 via ``using_dtype``.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DegenerateInputError, InvalidInputError, ShapeError

_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the element type of newly created tensors."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; useful for evaluation and inference."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidInputError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Populate ``grad`` on every tensor this scalar depends on.

        Repeated calls accumulate additively. Gradients are routed through a
        transient per-call buffer so a second pass never double-counts
        through interior nodes.
        """
        if self.data.size != 1:
            raise InvalidInputError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _binary_data(a: Tensor, b: Tensor, op_name: str, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"{op_name}: incompatible shapes {a.data.shape} and {b.data.shape}"
        ) from exc


# -- elementwise ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data(a, b, "add", np.add)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data(a, b, "mul", np.multiply)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(data, (a, b), backward)


def hadamard(a, b) -> Tensor:
    """Elementwise product (alias of ``mul`` under its domain name)."""
    return mul(a, b)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data(a, b, "div", np.divide)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node(data, (a, b), backward)


def pow_const(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    if isinstance(exponent, Tensor):
        raise InvalidInputError("only constant exponents are supported")
    data = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _node(data, (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        return (g * data,)

    return _node(data, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _node(data, (x,), backward)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / data,)

    return _node(data, (x,), backward)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    data = np.abs(x.data)

    def backward(g):
        return (g * np.sign(x.data),)

    return _node(data, (x,), backward)


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); gradient passes wherever x is not clamped."""
    x = as_tensor(x)
    data = np.maximum(x.data, floor)

    def backward(g):
        return (g * (x.data >= floor),)

    return _node(data, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _node(data, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - data * data),)

    return _node(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    t = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0, 1.0, t) / (1.0 + t)

    def backward(g):
        return (g * data * (1.0 - data),)

    return _node(data, (x,), backward)


# -- reductions and reshaping ---------------------------------------------


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _node(np.asarray(data), (x,), backward)


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in axes:
            count *= x.data.shape[a]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_pool(x, axis) -> Tensor:
    """Average over the given axis or axes."""
    return tensor_mean(x, axis=axis)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.data.shape} to {shape}") from exc

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _node(data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _node(data, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = _binary_data_list(tensors, axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), backward)


def _binary_data_list(tensors, axis):
    try:
        return np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat: incompatible shapes {[t.data.shape for t in tensors]}"
        ) from exc


def take(x, idx) -> Tensor:
    """Basic (slice/ellipsis/int) indexing; duplicate indices unsupported."""
    x = as_tensor(x)
    data = x.data[idx]

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[idx] += g
        return (buf,)

    return _node(np.ascontiguousarray(data), (x,), backward)


# -- linear algebra and convolution ----------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), backward)


def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w] = x
    return xp


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    b, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1:
        return xp.reshape(b * ho * wo, c), ho, wo
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, :, di, dj] = xp[
                :, di : di + ho * stride : stride, dj : dj + wo * stride : stride
            ]
    return cols.reshape(b * ho * wo, kh * kw * c), ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    b = x.shape[0]
    kh, kw, _, co = w.shape
    xp = _zero_pad(x, pad)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = (cols @ w.reshape(-1, co)).reshape(b, ho, wo, co)
    return out, cols


def _col2im(gcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    b, hp, wp, c = xp_shape
    if kh == 1 and kw == 1 and stride == 1:
        return gcols.reshape(xp_shape)
    g6 = gcols.reshape(b, ho, wo, kh, kw, c)
    dxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for di in range(kh):
        for dj in range(kw):
            dxp[
                :, di : di + ho * stride : stride, dj : dj + wo * stride : stride
            ] += g6[:, :, :, di, dj]
    return dxp


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution over NHWC input with an HWIO kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[3] != w.data.shape[2]:
        raise ShapeError(
            f"conv2d: incompatible shapes {x.data.shape} and {w.data.shape}"
        )
    kh, kw, _, co = w.data.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    if x.data.shape[1] + 2 * pad < kh or x.data.shape[2] + 2 * pad < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {x.data.shape}"
        )
    data, cols = _conv_forward(x.data, w.data, stride, pad)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (co,):
            raise ShapeError(
                f"conv2d: bias shape {bias.data.shape} does not match "
                f"{co} output channels"
            )
        data = data + bias.data
        parents.append(bias)

    def backward(g):
        b, ho, wo, _ = g.shape
        g2d = g.reshape(b * ho * wo, co)
        dw = (cols.T @ g2d).reshape(w.data.shape)

        if x.requires_grad:
            h, wd, ci = x.data.shape[1], x.data.shape[2], x.data.shape[3]
            gcols = g2d @ w.data.reshape(-1, co).T
            dxp = _col2im(
                gcols, (b, h + 2 * pad, wd + 2 * pad, ci), kh, kw, stride, ho, wo
            )
            dx = dxp[:, pad : pad + h, pad : pad + wd] if pad else dxp
            dx = np.ascontiguousarray(dx)
        else:
            dx = None
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _node(data, tuple(parents), backward)


# -- normalization ---------------------------------------------------------


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) map over its spatial extent."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects NHWC input, got {x.data.shape}")
    if x.data.shape[1] * x.data.shape[2] < 1:
        raise ShapeError("instance_norm needs at least one spatial element")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        g_mean = g.mean(axis=(1, 2), keepdims=True)
        gx_mean = (g * xhat).mean(axis=(1, 2), keepdims=True)
        return ((g - g_mean - xhat * gx_mean) * inv,)

    return _node(xhat, (x,), backward)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channel-wise batch normalization with running statistics for eval.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place; in eval mode the frozen buffers make this a
    deterministic affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects NHWC input, got {x.data.shape}")
    if x.data.shape[0] < 1:
        raise ShapeError("batch_norm needs at least one batch element")
    c = x.data.shape[3]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batch_norm: affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {c} channels"
        )
    if training:
        mu = x.data.mean(axis=(0, 1, 2))
        centered = x.data - mu
        var = (centered * centered).mean(axis=(0, 1, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 1, 2))
            dbeta = g.sum(axis=(0, 1, 2))
            dxhat = g * gamma.data
            dx = (
                dxhat
                - dxhat.mean(axis=(0, 1, 2))
                - xhat * (dxhat * xhat).mean(axis=(0, 1, 2))
            ) * inv
            return dx, dgamma, dbeta

        return _node(xhat * gamma.data + beta.data, (x, gamma, beta), backward)

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv

    def backward_eval(g):
        return g * (gamma.data * inv), (g * xhat).sum(axis=(0, 1, 2)), g.sum(
            axis=(0, 1, 2)
        )

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), backward_eval)


def l1_normalize(x, axis: int = -1) -> Tensor:
    """Scale along ``axis`` so absolute values sum to one."""
    x = as_tensor(x)
    norms = np.abs(x.data).sum(axis=axis, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("l1_normalize: input sums to zero along axis")
    return x / tensor_sum(absolute(x), axis=axis, keepdims=True)


# -- embedding -------------------------------------------------------------


def embedding_bag(table, ids_per_sample) -> Tensor:
    """Mean of embedding rows per sample: (vocab, dim) x ids -> (batch, dim)."""
    table = as_tensor(table)
    vocab = table.data.shape[0]
    for ids in ids_per_sample:
        if len(ids) == 0:
            raise InvalidInputError("cannot embed an empty token list")
        for i in ids:
            if not 0 <= i < vocab:
                raise InvalidInputError(f"token id {i} outside vocabulary of {vocab}")
    data = np.stack([table.data[list(ids)].mean(axis=0) for ids in ids_per_sample])

    def backward(g):
        buf = np.zeros_like(table.data)
        for row, ids in enumerate(ids_per_sample):
            np.add.at(buf, list(ids), g[row] / len(ids))
        return (buf,)

    return _node(data, (table,), backward)
