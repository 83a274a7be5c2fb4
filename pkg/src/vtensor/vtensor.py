import math
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TensorError(Exception):
    pass


class DimensionError(TensorError):
    pass


class GeometryError(TensorError):
    pass


class NumericError(TensorError):
    pass


class DType(Enum):
    F32 = "f32"
    I8 = "i8"
    I32 = "i32"

    @property
    def numpy_dtype(self):
        return _numpy_dtypes[self]

    @property
    def itemsize(self):
        return np.dtype(self.numpy_dtype).itemsize

    @property
    def code(self):
        return _codes[self]

    @property
    def limits(self):
        if self is DType.F32:
            return None
        info = np.iinfo(self.numpy_dtype)
        return int(info.min), int(info.max)

    @classmethod
    def from_code(cls, code):
        for dtype, dtype_code in _codes.items():
            if dtype_code == code:
                return dtype
        raise ValueError("Unknown dtype code {}".format(code))

    @classmethod
    def from_numpy(cls, numpy_dtype):
        numpy_dtype = np.dtype(numpy_dtype)
        if numpy_dtype.kind == "f":
            return cls.F32
        for dtype, candidate in _numpy_dtypes.items():
            if np.dtype(candidate) == numpy_dtype:
                return dtype
        raise TypeError(
            "Cannot infer a tensor dtype from numpy dtype {}; specify it".format(
                numpy_dtype
            )
        )


_numpy_dtypes = {DType.F32: np.float32, DType.I8: np.int8, DType.I32: np.int32}
_codes = {DType.F32: 0, DType.I8: 1, DType.I32: 2}


class Tensor:
    """Immutable dense row-major n-dimensional array.

    ``data`` is anything numpy can turn into an array. If ``dtype`` is not
    specified, floating point data become f32 and int8/int32 arrays keep their
    type; other integer data need an explicit dtype. Integer tensors are range
    checked, never wrapped.
    """

    def __init__(self, data, dtype=None):
        array = np.asarray(data)
        if isinstance(dtype, str):
            dtype = DType(dtype)
        if dtype is None:
            dtype = DType.from_numpy(array.dtype)
        if dtype is not DType.F32:
            _check_integer_values(array, dtype)
        array = np.array(array, dtype=dtype.numpy_dtype, order="C")
        self._set(array, dtype)

    @classmethod
    def wrap(cls, array, dtype=None):
        """Wrap a freshly computed array without copying it.

        The array is made read-only; the caller must not keep a writable
        reference to it.
        """
        array = np.ascontiguousarray(array)
        if dtype is None:
            dtype = DType.from_numpy(array.dtype)
        if array.dtype != np.dtype(dtype.numpy_dtype):
            array = array.astype(dtype.numpy_dtype)
        result = cls.__new__(cls)
        result._set(array, dtype)
        return result

    @classmethod
    def zeros(cls, shape, dtype=DType.F32):
        return cls.wrap(np.zeros(shape, dtype=dtype.numpy_dtype), dtype)

    def _set(self, array, dtype):
        if array.ndim == 0:
            raise DimensionError("A tensor must have at least one dimension")
        if any(d < 1 for d in array.shape):
            raise DimensionError(
                "Every tensor dimension must be at least 1; got shape {}".format(
                    array.shape
                )
            )
        array.flags.writeable = False
        self._array = array
        self.dtype = dtype

    @property
    def shape(self):
        return self._array.shape

    @property
    def ndim(self):
        return self._array.ndim

    @property
    def size(self):
        return self._array.size

    @property
    def array(self):
        """Read-only numpy view of the tensor."""
        return self._array

    @property
    def data(self):
        """Read-only flat row-major view of the elements."""
        return self._array.reshape(-1)

    def numpy(self):
        """Writable copy of the tensor as a numpy array."""
        return self._array.copy()

    def tobytes(self):
        return self._array.astype(self._array.dtype.newbyteorder("<")).tobytes()

    def bitwise_equal(self, other):
        return (
            self.dtype is other.dtype
            and self.shape == other.shape
            and self.tobytes() == other.tobytes()
        )

    def __repr__(self):
        return "Tensor(shape={}, dtype={})".format(self.shape, self.dtype.value)


def _check_integer_values(array, dtype):
    if array.size == 0:
        return
    if array.dtype.kind == "f" and not np.all(np.isfinite(array)):
        raise NumericError("Integer tensors cannot hold non-finite values")
    if array.dtype.kind == "f" and not np.all(array == np.trunc(array)):
        raise NumericError("Integer tensors cannot hold fractional values")
    low, high = dtype.limits
    if array.min() < low or array.max() > high:
        raise NumericError(
            "Values outside [{}, {}] cannot be stored in a {} tensor".format(
                low, high, dtype.value
            )
        )


def _require_dtype(dtype, **tensors):
    for name, tensor in tensors.items():
        if tensor.dtype is not dtype:
            raise TypeError(
                "{} must be a {} tensor, not {}".format(
                    name, dtype.value, tensor.dtype.value
                )
            )


def conv_output_size(size, kernel, stride):
    if kernel > size:
        raise DimensionError(
            "Kernel size {} is larger than input size {}".format(kernel, size)
        )
    if (size - kernel) % stride:
        raise GeometryError(
            "Input size {} is not tiled exactly by kernel {} with stride {} "
            "(padding is always 0)".format(size, kernel, stride)
        )
    return (size - kernel) // stride + 1


def im2col(array, kh, kw, stride):
    """Return the (B, H', W', Cin*kh*kw) patch matrix of a B×Cin×H×W array.

    The last axis is ordered (Cin, kh, kw), which is the order of a weight
    tensor reshaped to (Cout, Cin*kh*kw).
    """
    windows = sliding_window_view(array, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    b, cin, ho, wo = windows.shape[:4]
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, ho, wo, cin * kh * kw
    )


def check_conv_geometry(x_shape, w_shape, stride):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(
            "conv2d needs 4D input and weight; got {} and {}".format(
                x_shape, w_shape
            )
        )
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise GeometryError("Stride must be a positive integer, not {}".format(stride))
    b, cin, h, w = x_shape
    cout, wcin, kh, kw = w_shape
    if cin != wcin:
        raise DimensionError(
            "conv2d: x axis 1 (input channels) is {} but w axis 1 is {}".format(
                cin, wcin
            )
        )
    return b, cout, conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)


def contract(subscripts, a, b):
    """Contract two f32 arrays with numpy.einsum, accumulating in float64.

    einsum runs its own loops rather than BLAS, so the summation order is
    fixed by the subscripts and results repeat bit for bit; the result is
    rounded to f32 once.
    """
    result = np.einsum(
        subscripts, np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    )
    return result.astype(np.float32)


def conv2d(x, w, bias=None, stride=1):
    _require_dtype(DType.F32, x=x, w=w)
    b, cout, ho, wo = check_conv_geometry(x.shape, w.shape, stride)
    if bias is not None:
        _require_dtype(DType.F32, bias=bias)
        if bias.shape != (cout,):
            raise DimensionError(
                "conv2d: bias shape {} does not match w axis 0 ({})".format(
                    bias.shape, cout
                )
            )
    kh, kw = w.shape[2:]
    cols = im2col(x.array, kh, kw, stride)
    result = contract("bhwk,ok->bhwo", cols, w.array.reshape(cout, -1))
    if bias is not None:
        result = result + bias.array
    return Tensor.wrap(result.transpose(0, 3, 1, 2), DType.F32)


def conv_macs(x_shape, w_shape, stride=1):
    b, cout, ho, wo = check_conv_geometry(x_shape, w_shape, stride)
    return b * cout * ho * wo * int(np.prod(w_shape[1:]))


def matmul_batched(a, b):
    _require_dtype(DType.F32, a=a, b=b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul_batched needs operands of at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            "matmul_batched: a axis -1 ({}) does not match b axis -2 ({})".format(
                a.shape[-1], b.shape[-2]
            )
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            "matmul_batched: batch dimensions {} and {} differ".format(
                a.shape[:-2], b.shape[:-2]
            )
        )
    return Tensor.wrap(contract("...ij,...jk->...ik", a.array, b.array), DType.F32)


def softmax_lastdim(x):
    _require_dtype(DType.F32, x=x)
    if not np.all(np.isfinite(x.array)):
        raise NumericError("softmax input contains non-finite values")
    values = x.array.astype(np.float64)
    exponents = np.exp(values - values.max(axis=-1, keepdims=True))
    return Tensor.wrap(exponents / exponents.sum(axis=-1, keepdims=True), DType.F32)


_erf = np.vectorize(math.erf, otypes=[np.float64])


def gelu(x):
    _require_dtype(DType.F32, x=x)
    values = x.array.astype(np.float64)
    return Tensor.wrap(0.5 * values * (1.0 + _erf(values / math.sqrt(2.0))), DType.F32)


def layernorm_ref(x, gamma, beta, eps):
    _require_dtype(DType.F32, x=x, gamma=gamma, beta=beta)
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise DimensionError(
            "layernorm: last axis of x is {} but gamma/beta shapes are {}/{}".format(
                h, gamma.shape, beta.shape
            )
        )
    if not eps > 0:
        raise NumericError("layernorm eps must be positive, not {}".format(eps))
    # A constant slice centres to exactly zero in float64, giving beta
    values = x.array.astype(np.float64)
    centered = values - values.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    normalized = centered / np.sqrt(variance + float(np.float32(eps)))
    result = normalized * gamma.array.astype(np.float64) + beta.array
    return Tensor.wrap(result, DType.F32)


def linear(x, w, bias=None, axis=-1):
    """Apply y = W·x + b along ``axis`` (the channel axis) of x."""
    _require_dtype(DType.F32, x=x, w=w)
    axis = axis % x.ndim
    out_features, in_features = w.shape
    if x.shape[axis] != in_features:
        raise DimensionError(
            "linear: x axis {} is {} but w expects {} input features".format(
                axis, x.shape[axis], in_features
            )
        )
    values = contract("...k,ok->...o", np.moveaxis(x.array, axis, -1), w.array)
    if bias is not None:
        if bias.shape != (out_features,):
            raise DimensionError(
                "linear: bias shape {} does not match {} output features".format(
                    bias.shape, out_features
                )
            )
        values = values + bias.array
    return Tensor.wrap(np.moveaxis(values, -1, axis), DType.F32)


def permute(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(
            "{} is not a permutation of the {} axes of {}".format(
                axes, x.ndim, x.shape
            )
        )
    return Tensor.wrap(x.array.transpose(axes), x.dtype)


def inverse_permutation(axes):
    return tuple(int(a) for a in np.argsort(axes))


def reshape(x, shape):
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape) or int(np.prod(shape)) != x.size:
        raise DimensionError("Cannot reshape {} to {}".format(x.shape, shape))
    return Tensor.wrap(x.array.reshape(shape), x.dtype)


def to_nchw(x):
    if x.ndim != 3:
        raise DimensionError("to-nchw needs a (B, N, C) tensor, not {}".format(x.shape))
    b, n, c = x.shape
    return reshape(permute(x, (0, 2, 1)), (b, c, 1, n))


def from_nchw(x):
    if x.ndim != 4 or x.shape[2] != 1:
        raise DimensionError(
            "from-nchw needs a (B, C, 1, N) tensor, not {}".format(x.shape)
        )
    b, c, _, n = x.shape
    return permute(reshape(x, (b, c, n)), (0, 2, 1))


layout_plans = {"to-nchw": to_nchw, "from-nchw": from_nchw}


def permute_reshape(x, plan=None, axes=None, shape=None):
    """Apply a named layout plan, an axes permutation or a reshape."""
    if sum(arg is not None for arg in (plan, axes, shape)) != 1:
        raise TypeError("Specify exactly one of plan, axes or shape")
    if plan is not None:
        try:
            return layout_plans[plan](x)
        except KeyError:
            raise DimensionError("Unknown layout plan {!r}".format(plan))
    if axes is not None:
        return permute(x, axes)
    return reshape(x, shape)


def slice_axis(x, axis, start, stop):
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(
            "Cannot slice [{}:{}] from axis {} of {}".format(start, stop, axis, x.shape)
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return Tensor.wrap(x.array[tuple(index)], x.dtype)


def concat(tensors, axis):
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if (
            t.ndim != first.ndim
            or t.shape[:axis] != first.shape[:axis]
            or t.shape[axis + 1 :] != first.shape[axis + 1 :]
        ):
            raise DimensionError(
                "Cannot concatenate {} and {} on axis {}".format(
                    first.shape, t.shape, axis
                )
            )
    return Tensor.wrap(
        np.concatenate([t.array for t in tensors], axis=axis), first.dtype
    )


def _check_broadcast(a, b):
    if a.shape == b.shape:
        return
    channel_broadcast = (
        a.ndim == 4 and b.ndim == 4 and b.shape == (1, a.shape[1], 1, 1)
    )
    if not channel_broadcast:
        raise DimensionError(
            "Shapes {} and {} are neither identical nor channel-broadcastable".format(
                a.shape, b.shape
            )
        )


def add(a, b):
    _require_dtype(DType.F32, a=a, b=b)
    _check_broadcast(a, b)
    return Tensor.wrap(a.array + b.array, DType.F32)


def sub(a, b):
    _require_dtype(DType.F32, a=a, b=b)
    _check_broadcast(a, b)
    return Tensor.wrap(a.array - b.array, DType.F32)


def mul(a, b):
    _require_dtype(DType.F32, a=a, b=b)
    _check_broadcast(a, b)
    return Tensor.wrap(a.array * b.array, DType.F32)


def mul_scalar(a, scalar):
    _require_dtype(DType.F32, a=a)
    return Tensor.wrap(a.array * np.float32(scalar), DType.F32)


def square(a):
    _require_dtype(DType.F32, a=a)
    return Tensor.wrap(a.array * a.array, DType.F32)


def rsqrt_eps(v, eps):
    _require_dtype(DType.F32, v=v)
    if eps < 0:
        raise NumericError("rsqrt eps must not be negative, not {}".format(eps))
    if np.any(v.array < 0):
        raise NumericError("rsqrt of a negative variance")
    shifted = v.array + np.float32(eps)
    if np.any(shifted == 0):
        raise NumericError("rsqrt of zero; use a positive eps")
    return Tensor.wrap(np.float32(1) / np.sqrt(shifted), DType.F32)


elementwise_ops = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "mul_scalar": mul_scalar,
    "square": square,
    "rsqrt_eps": rsqrt_eps,
}


def elementwise(op, *operands):
    """Dispatch an elementwise operation by name.

    ``mul_scalar`` takes (tensor, scalar) and ``rsqrt_eps`` takes
    (tensor, eps).
    """
    try:
        function = elementwise_ops[op]
    except KeyError:
        raise ValueError("Unknown elementwise operation {!r}".format(op))
    return function(*operands)
