import collections
import contextlib
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import transpillars


logger = logging.getLogger(__name__)


###############################################################################
# Precision policy
###############################################################################


# Training runs in 32-bit; gradient oracles switch to 64-bit
_dtype = np.float32


def get_precision() -> type:
    """Retrieve the floating-point type used for new tensors"""
    return _dtype


def set_precision(dtype) -> None:
    """Set the floating-point type used for new tensors

    Arguments
        dtype
            np.float32 or np.float64
    """
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise transpillars.errors.ConfigurationError(
            f'Unsupported precision {dtype}')
    _dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the floating-point type of new tensors"""
    previous = _dtype
    set_precision(dtype)
    try:
        yield
    finally:
        set_precision(previous)


###############################################################################
# Operation counters
###############################################################################


# Incremented by individual ops; used to audit attention cost
counters = collections.Counter()


def reset_counters() -> None:
    """Zero all operation counters"""
    counters.clear()


###############################################################################
# Gradient tape
###############################################################################


class Node:
    """One recorded operation on the gradient tape"""

    __slots__ = ('index', 'op', 'inputs', 'output', 'backward')

    def __init__(self, index, op, inputs, output, backward):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of differentiable operations

    Nodes are appended in creation order, which is a topological order of the
    computation graph, so backward replays them in reverse.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.enabled = True

    def __len__(self) -> int:
        """Retrieve the number of recorded operations"""
        return len(self.nodes)

    def clear(self) -> None:
        """Release all recorded operations and their saved intermediates"""
        for node in self.nodes:
            node.output.tape_node = None
        self.nodes = []

    def record(
        self,
        op: str,
        inputs: Tuple['Tensor', ...],
        output: 'Tensor',
        backward: Callable) -> Node:
        """Append an operation to the tape

        Arguments
            op
                The operation name
            inputs
                The input tensors
            output
                The output tensor
            backward
                Maps the output gradient to a tuple of input gradients

        Returns
            The recorded node
        """
        node = Node(len(self.nodes), op, inputs, output, backward)
        self.nodes.append(node)
        return node


_tape = GradTape()


def tape() -> GradTape:
    """Retrieve the active gradient tape"""
    return _tape


def clear_tape() -> None:
    """Release the active gradient tape"""
    _tape.clear()


@contextlib.contextmanager
def no_grad():
    """Disable recording of operations"""
    previous = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = previous


###############################################################################
# Tensor
###############################################################################


class Tensor:
    """Dense float array with reverse-mode gradient support"""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        name: str = '') -> None:
        """Create tensor

        Arguments
            data
                Array-like values
            requires_grad
                Whether backward populates a gradient for this tensor
            dtype
                Floating-point type; defaults to the active precision
            name
                Optional name used in diagnostics
        """
        self.data = np.asarray(data, dtype=_dtype if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[Node] = None
        self.name = name

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        grad = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={self.shape}, dtype={self.dtype.__name__}{grad})'

    @property
    def dtype(self) -> type:
        return self.data.dtype.type

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def backward(self) -> None:
        """Backpropagate from this scalar tensor"""
        backward(self)

    def detach(self) -> 'Tensor':
        """Retrieve a copy of this tensor that is not connected to the tape"""
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def exp(self):
        return exp(self)

    def item(self) -> float:
        """Retrieve the value of a single-element tensor"""
        return float(self.data.reshape(-1)[0])

    def log(self):
        return log(self)

    def max(self, axis: int):
        return max_reduce(self, axis)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def numpy(self) -> np.ndarray:
        """Retrieve the underlying array"""
        return self.data

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def zero_grad(self) -> None:
        """Discard the accumulated gradient"""
        self.grad = None


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap a constant as a tensor (tensors pass through)"""
    if isinstance(value, Tensor):
        return value
    if isinstance(value, np.ndarray) and value.dtype.kind == 'f':
        return Tensor(value, dtype=value.dtype)
    return Tensor(value)


###############################################################################
# Backward pass
###############################################################################


def backward(loss: Tensor) -> None:
    """Populate gradients of every tensor that the scalar loss depends on

    Gradients of leaf tensors accumulate additively across calls until they
    are reset with zero_grad.

    Arguments
        loss
            The scalar loss
    """
    if loss.size != 1:
        raise transpillars.errors.ContractError(
            f'backward requires a scalar loss, got shape {loss.shape}')
    if not loss.requires_grad:
        raise transpillars.errors.ContractError(
            'backward called on a tensor that is not connected to the tape')

    seed = np.ones_like(loss.data)
    if loss.tape_node is None:
        _accumulate(loss, seed)
        return

    pending = {id(loss): seed}
    for node in reversed(_tape.nodes[:loss.tape_node.index + 1]):
        grad = pending.pop(id(node.output), None)
        if grad is None:
            continue
        node.output.grad = grad
        for tensor, input_grad in zip(node.inputs, node.backward(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            input_grad = np.reshape(input_grad, tensor.shape)
            if tensor.tape_node is None:
                _accumulate(tensor, input_grad)
            elif id(tensor) in pending:
                pending[id(tensor)] = pending[id(tensor)] + input_grad
            else:
                pending[id(tensor)] = input_grad


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    """Add a gradient into a leaf tensor"""
    grad = np.array(grad, dtype=tensor.data.dtype)
    if tensor.grad is None:
        tensor.grad = grad
    else:
        tensor.grad = tensor.grad + grad


###############################################################################
# Elementwise arithmetic
###############################################################################


def add(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise sum with broadcasting"""
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        'add',
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise difference with broadcasting"""
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        'sub',
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise product with broadcasting"""
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        'mul',
        a.data * b.data,
        (a, b),
        lambda g: (
            unbroadcast(g * b.data, a.shape),
            unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise quotient with broadcasting"""
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        'div',
        a.data / b.data,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    """Elementwise negation"""
    return _record('neg', -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent"""
    return _record(
        'pow',
        a.data ** exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    """Elementwise exponential"""
    out = np.exp(a.data)
    return _record('exp', out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Elementwise natural logarithm"""
    return _record('log', np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    """Rectified linear unit"""
    return _record(
        'relu', np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic sigmoid"""
    out = _sigmoid(a.data)
    return _record('sigmoid', out, (a,), lambda g: (g * out * (1 - out),))


###############################################################################
# Reductions and normalization
###############################################################################


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over one or more axes"""

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, _normalize_axes(axis, a.ndim))
        return (np.broadcast_to(g, a.shape),)

    return _record(
        'sum', np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over one or more axes"""
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[i] for i in _normalize_axes(axis, a.ndim)]))
    return sum(a, axis, keepdims) / float(count)


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Maximum over an axis; gradient flows to the first maximal element"""
    axis = axis % a.ndim
    indices = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, indices, axis=axis).squeeze(axis)

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, indices, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _record('max', out, (a,), _backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along an axis, stabilized by max subtraction"""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _record(
        'softmax',
        out,
        (a,),
        lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Logarithm of the softmax along an axis"""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return _record(
        'log_softmax',
        out,
        (a,),
        lambda g: (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(
    a: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis

    Arguments
        a
            Input of shape [..., d]
        gamma
            Scale of shape [d]
        beta
            Shift of shape [d]
        eps
            Variance floor

    Returns
        The normalized tensor
    """
    if a.shape[-1] != gamma.shape[-1] or a.shape[-1] != beta.shape[-1]:
        raise transpillars.errors.DimensionError(
            f'layer_norm: input {a.shape} and parameters {gamma.shape}')
    centered = a.data - a.data.mean(axis=-1, keepdims=True)
    inv_std = 1. / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std
    width = a.shape[-1]

    def _backward(g):
        g_norm = g * gamma.data
        g_input = inv_std / width * (
            width * g_norm -
            g_norm.sum(axis=-1, keepdims=True) -
            normalized * (g_norm * normalized).sum(axis=-1, keepdims=True))
        leading = tuple(range(a.ndim - 1))
        return (
            g_input,
            (g * normalized).sum(axis=leading),
            g.sum(axis=leading))

    return _record(
        'layer_norm',
        normalized * gamma.data + beta.data,
        (a, gamma, beta),
        _backward)


###############################################################################
# Shape manipulation
###############################################################################


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape without copying values"""
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise transpillars.errors.DimensionError(
            f'reshape: cannot reshape {a.shape} to {tuple(shape)}')
    return _record('reshape', out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes (reverse order when axes is None)"""
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(
        'transpose',
        a.data.transpose(axes),
        (a,),
        lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    """Index or slice a tensor; gradients scatter back additively"""

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _record('getitem', np.array(a.data[index]), (a,), _backward)


def scatter(base: Tensor, index: np.ndarray, values: Tensor) -> Tensor:
    """Copy of base with rows at index (axis 0) replaced by values

    Arguments
        base
            Tensor of shape [N, ...]
        index
            Unique row indices of shape [M]
        values
            Tensor of shape [M, ...]

    Returns
        The updated copy
    """
    index = np.asarray(index, dtype=np.int64)
    if values.shape != (len(index),) + base.shape[1:]:
        raise transpillars.errors.DimensionError(
            f'scatter: values {values.shape} do not fit base {base.shape} '
            f'at {len(index)} rows')
    out = base.data.copy()
    out[index] = values.data

    def _backward(g):
        g_base = np.array(g)
        g_base[index] = 0
        return g_base, g[index]

    return _record('scatter', out, (base, values), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis"""
    tensors = tuple(as_tensor(t) for t in tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if (t.ndim != tensors[0].ndim or
                t.shape[:axis] + t.shape[axis + 1:] !=
                tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]):
            raise transpillars.errors.DimensionError(
                f'concat: incompatible shapes {tensors[0].shape} and {t.shape} '
                f'along axis {axis}')
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        'concat',
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack tensors along a new axis"""
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise transpillars.errors.DimensionError(
            f'stack: shapes differ {sorted(shapes)}')
    axis = axis % (tensors[0].ndim + 1)
    return _record(
        'stack',
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(
            np.take(g, i, axis=axis) for i in range(len(tensors))))


###############################################################################
# Linear algebra and convolution
###############################################################################


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise transpillars.errors.DimensionError(
            f'matmul: shapes {a.shape} and {b.shape} do not align')
    return _record(
        'matmul',
        np.matmul(a.data, b.data),
        (a, b),
        lambda g: (
            unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
            unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)))


def conv2d(
    input: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0) -> Tensor:
    """2D cross-correlation

    Arguments
        input
            Feature map of shape [C_in, H, W]
        kernel
            Weights of shape [C_out, C_in, kh, kw]
        bias
            Optional bias of shape [C_out]
        stride
            Step between output samples
        padding
            Zero padding on every spatial border

    Returns
        Feature map of shape [C_out, H', W']
    """
    if input.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != input.shape[0]:
        raise transpillars.errors.DimensionError(
            f'conv2d: input {input.shape} and kernel {kernel.shape}')
    channels, height, width = input.shape
    out_channels, _, kh, kw = kernel.shape
    out_height = (height + 2 * padding - kh) // stride + 1
    out_width = (width + 2 * padding - kw) // stride + 1
    if out_height <= 0 or out_width <= 0:
        raise transpillars.errors.DimensionError(
            f'conv2d: kernel {kernel.shape} does not fit input {input.shape} '
            f'with padding {padding}')
    counters['conv2d'] += 1

    padded = np.pad(input.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :out_height, :out_width]

    # [H' * W', C_in * kh * kw]
    columns = windows.transpose(1, 2, 0, 3, 4).reshape(out_height * out_width, -1)
    weights = kernel.data.reshape(out_channels, -1)
    out = (columns @ weights.T).T.reshape(out_channels, out_height, out_width)

    def _backward(g):
        g = g.reshape(out_channels, -1)
        g_kernel = (g @ columns).reshape(kernel.shape)
        g_columns = (g.T @ weights).reshape(
            out_height, out_width, channels, kh, kw)
        g_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                g_padded[
                    :,
                    i:i + stride * (out_height - 1) + 1:stride,
                    j:j + stride * (out_width - 1) + 1:stride
                ] += g_columns[:, :, :, i, j].transpose(2, 0, 1)
        g_input = g_padded[
            :, padding:padding + height, padding:padding + width]
        return g_input, g_kernel

    out = _record('conv2d', out, (input, kernel), _backward)
    if bias is not None:
        out = out + reshape(bias, (-1, 1, 1))
    return out


def transpose_conv2d(
    input: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1) -> Tensor:
    """2D transposed convolution producing exactly stride-times larger maps

    The kernel follows the [C_in, C_out, kh, kw] layout, which makes this the
    adjoint of conv2d with the same array, stride and no padding whenever the
    kernel size equals the stride. Larger kernels are centre-cropped.

    Arguments
        input
            Feature map of shape [C_in, H, W]
        kernel
            Weights of shape [C_in, C_out, kh, kw] with kh, kw >= stride
        bias
            Optional bias of shape [C_out]
        stride
            Upsampling factor

    Returns
        Feature map of shape [C_out, H * stride, W * stride]
    """
    if stride < 1:
        raise transpillars.errors.DimensionError(
            f'transpose_conv2d: stride must be positive, got {stride}')
    if input.ndim != 3 or kernel.ndim != 4 or kernel.shape[0] != input.shape[0]:
        raise transpillars.errors.DimensionError(
            f'transpose_conv2d: input {input.shape} and kernel {kernel.shape}')
    channels, height, width = input.shape
    _, out_channels, kh, kw = kernel.shape
    if kh < stride or kw < stride:
        raise transpillars.errors.DimensionError(
            f'transpose_conv2d: kernel {kernel.shape} smaller than stride {stride}')
    counters['transpose_conv2d'] += 1

    full_height = (height - 1) * stride + kh
    full_width = (width - 1) * stride + kw
    top, left = (kh - stride) // 2, (kw - stride) // 2
    weights = kernel.data.reshape(channels, -1)

    # [C_out, kh, kw, H, W]
    columns = (weights.T @ input.data.reshape(channels, -1)).reshape(
        out_channels, kh, kw, height, width)
    full = np.zeros((out_channels, full_height, full_width), dtype=columns.dtype)
    for i in range(kh):
        for j in range(kw):
            full[
                :,
                i:i + stride * (height - 1) + 1:stride,
                j:j + stride * (width - 1) + 1:stride
            ] += columns[:, i, j]
    out = full[
        :, top:top + height * stride, left:left + width * stride].copy()

    def _backward(g):
        g_full = np.zeros_like(full)
        g_full[:, top:top + height * stride, left:left + width * stride] = g
        g_columns = np.empty_like(columns)
        for i in range(kh):
            for j in range(kw):
                g_columns[:, i, j] = g_full[
                    :,
                    i:i + stride * (height - 1) + 1:stride,
                    j:j + stride * (width - 1) + 1:stride]
        g_columns = g_columns.reshape(out_channels * kh * kw, -1)
        g_input = (weights @ g_columns).reshape(input.shape)
        g_kernel = (input.data.reshape(channels, -1) @ g_columns.T).reshape(
            kernel.shape)
        return g_input, g_kernel

    out = _record('transpose_conv2d', out, (input, kernel), _backward)
    if bias is not None:
        out = out + reshape(bias, (-1, 1, 1))
    return out


def bilinear_sample(featmap: Tensor, locations: Tensor) -> Tensor:
    """Bilinear interpolation of a feature map at continuous grid locations

    Locations are (x, y) in cell units, with integer values at cell centers.
    Out-of-range locations are clamped to the border, where the gradient
    with respect to the clamped coordinate is zero.

    Arguments
        featmap
            Feature map of shape [C, H, W]
        locations
            Sampling locations of shape [P, 2]

    Returns
        Sampled features of shape [P, C]
    """
    locations = as_tensor(locations)
    if featmap.ndim != 3 or locations.ndim != 2 or locations.shape[1] != 2:
        raise transpillars.errors.DimensionError(
            f'bilinear_sample: featmap {featmap.shape} and locations '
            f'{locations.shape}')
    channels, height, width = featmap.shape
    counters['bilinear_samples'] += locations.shape[0]

    x = np.clip(locations.data[:, 0], 0, width - 1)
    y = np.clip(locations.data[:, 1], 0, height - 1)
    x0 = np.minimum(np.floor(x), max(width - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = (x - x0).astype(featmap.data.dtype)
    wy = (y - y0).astype(featmap.data.dtype)

    flat = featmap.data.reshape(channels, -1)
    f00, f01 = flat[:, y0 * width + x0], flat[:, y0 * width + x1]
    f10, f11 = flat[:, y1 * width + x0], flat[:, y1 * width + x1]
    top = (1 - wx) * f00 + wx * f01
    bottom = (1 - wx) * f10 + wx * f11
    out = ((1 - wy) * top + wy * bottom).T

    # Clamped coordinates receive no location gradient
    inside_x = (locations.data[:, 0] >= 0) & (locations.data[:, 0] <= width - 1)
    inside_y = (locations.data[:, 1] >= 0) & (locations.data[:, 1] <= height - 1)

    def _backward(g):
        g = g.T
        g_map = np.zeros_like(flat)
        np.add.at(g_map, (slice(None), y0 * width + x0), g * (1 - wy) * (1 - wx))
        np.add.at(g_map, (slice(None), y0 * width + x1), g * (1 - wy) * wx)
        np.add.at(g_map, (slice(None), y1 * width + x0), g * wy * (1 - wx))
        np.add.at(g_map, (slice(None), y1 * width + x1), g * wy * wx)
        d_x = (1 - wy) * (f01 - f00) + wy * (f11 - f10)
        d_y = bottom - top
        g_locations = np.stack([
            (g * d_x).sum(axis=0) * inside_x,
            (g * d_y).sum(axis=0) * inside_y], axis=1)
        return g_map.reshape(featmap.shape), g_locations

    return _record('bilinear_sample', out, (featmap, locations), _backward)


###############################################################################
# Losses
###############################################################################


def smooth_l1(prediction: Tensor, target: TensorLike, beta: float = 1. / 9.):
    """Elementwise smooth-L1 (Huber) loss

    Arguments
        prediction
            Predicted values
        target
            Target values of the same shape
        beta
            Transition point between the quadratic and linear regimes

    Returns
        Elementwise losses
    """
    target = as_tensor(target)
    if prediction.shape != target.shape:
        raise transpillars.errors.DimensionError(
            f'smooth_l1: prediction {prediction.shape} and target {target.shape}')
    diff = prediction.data - target.data
    small = np.abs(diff) < beta
    out = np.where(small, .5 * diff ** 2 / beta, np.abs(diff) - .5 * beta)

    def _backward(g):
        grad = g * np.where(small, diff / beta, np.sign(diff))
        return grad, -grad

    return _record('smooth_l1', out, (prediction, target), _backward)


def binary_cross_entropy_with_logits(
    logits: Tensor,
    targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy computed from logits"""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    return _record(
        'bce_with_logits',
        out,
        (logits,),
        lambda g: (g * (_sigmoid(x) - targets),))


def sigmoid_focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    alpha: float = .25,
    gamma: float = 2.) -> Tensor:
    """Elementwise sigmoid focal loss

    Arguments
        logits
            Classification logits
        targets
            Binary targets of the same shape
        alpha
            Positive-class weight
        gamma
            Focusing exponent

    Returns
        Elementwise losses
    """
    targets = np.asarray(targets, dtype=logits.data.dtype)
    probability = sigmoid(logits)
    p_t = probability * targets + (1. - probability) * (1. - targets)
    alpha_t = alpha * targets + (1. - alpha) * (1. - targets)
    modulation = power(1. - p_t, gamma)
    return binary_cross_entropy_with_logits(logits, targets) * modulation * alpha_t


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row softmax cross-entropy

    Arguments
        logits
            Logits of shape [N, C]
        targets
            Integer class indices of shape [N]

    Returns
        Losses of shape [N]
    """
    targets = np.asarray(targets, dtype=np.int64)
    log_probs = log_softmax(logits, axis=-1)
    return -log_probs[np.arange(len(targets)), targets]


###############################################################################
# Utilities
###############################################################################


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    """Convert an axis or axes to a tuple of non-negative axes"""
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _record(
    op: str,
    data: np.ndarray,
    inputs: Tuple[Tensor, ...],
    backward: Callable) -> Tensor:
    """Wrap an op result and record it when any input requires gradients"""
    out = Tensor(data, dtype=data.dtype)
    if _tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_node = _tape.record(op, inputs, out, backward)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on arrays"""
    return np.exp(-np.logaddexp(0, -x))
