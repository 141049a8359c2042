"""Dense tensors and the raw numeric kernels everything else is built on.

Layout is row-major throughout and image batches are NCHW. Kernels are pure
functions: they validate shapes, compute with numpy, and raise on non-finite
results instead of letting NaN/Inf propagate silently. Reductions use numpy's
fixed sequential/pairwise order, so repeated runs in the same mode are
bit-identical.

Convolution uses the cross-correlation convention (no kernel flip). "same"
padding places the extra pixel on the bottom/right when the total padding is
odd.
"""
from __future__ import annotations

import math

import numpy as np

from .precision import active_dtype


class TensorError(ValueError):
    pass


class NonFiniteError(TensorError):
    """A kernel produced NaN or Inf."""


def _require_finite(arr: np.ndarray, where: str) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values out of {where}")


class Tensor:
    """A dense n-dimensional array of the active precision.

    Treated as immutable once built; the trainer mutates parameter storage
    only between forward/backward cycles.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None, validate: bool = True):
        arr = np.asarray(data, dtype=dtype if dtype is not None else active_dtype())
        if validate:
            _require_finite(arr, "tensor constructor")
        self.data = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an ndarray without casting or validation (internal fast path)."""
        t = cls.__new__(cls)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
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
        return self.data.item()

    def copy(self) -> "Tensor":
        return Tensor.wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=active_dtype())


# ---------------------------------------------------------------------------
# convolution geometry

def conv_output_size(extent: int, k: int, stride: int, padding: str) -> int:
    if padding == "valid":
        return (extent - k) // stride + 1
    if padding == "same":
        return -(-extent // stride)  # ceil division
    raise TensorError(f"unknown padding {padding!r}")


def same_pads(h: int, w: int, k: int, stride: int) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding; odd remainder goes bottom/right."""
    oh = -(-h // stride)
    ow = -(-w // stride)
    ph = max((oh - 1) * stride + k - h, 0)
    pw = max((ow - 1) * stride + k - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def pad2d_array(x: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    pt, pb, pl, pr = pads
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def crop2d_array(x: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    pt, pb, pl, pr = pads
    h, w = x.shape[2], x.shape[3]
    return x[:, :, pt : h - pb, pl : w - pr]


def im2col_array(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Extract k*k patches as rows: [N*OH*OW, C*k*k] plus (OH, OW).

    Row (n, oh, ow) holds the receptive field of output pixel (oh, ow) of
    example n, flattened channel-major then row-major -- the layout a
    [F, C*k*k] filter matrix multiplies directly.
    """
    n, c, h, w = x.shape
    if h < k or w < k:
        raise TensorError(f"input {h}x{w} smaller than kernel {k}")
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # [N, C, OH, OW, k, k]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols), oh, ow


def col2im_array(cols: np.ndarray, xshape: tuple, k: int, stride: int) -> np.ndarray:
    """Adjoint of im2col_array: scatter-add patch rows back onto the image."""
    n, c, h, w = xshape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    g = np.zeros(xshape, dtype=cols.dtype)
    win = cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            g[:, :, i : i + stride * (oh - 1) + 1 : stride,
                 j : j + stride * (ow - 1) + 1 : stride] += win[:, :, :, :, i, j]
    return g


# ---------------------------------------------------------------------------
# kernels

def conv2d(input, kernel, bias, stride: int = 1, padding: str = "valid") -> Tensor:
    """Batched 2-D cross-correlation: [N,C,H,W] * [F,C,k,k] + [F] -> [N,F,OH,OW]."""
    x = as_array(input)
    w = as_array(kernel)
    b = as_array(bias)
    if x.ndim != 4 or w.ndim != 4:
        raise TensorError(f"conv2d wants 4-d input/kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if kh != kw:
        raise TensorError("conv2d kernels must be square")
    if kh < 1:
        raise TensorError("kernel size must be >= 1")
    if not isinstance(stride, int) or stride < 1:
        raise TensorError(f"stride must be a positive int, got {stride!r}")
    if ck != c:
        raise TensorError(f"kernel expects {ck} channels, input has {c}")
    if b.shape != (f,):
        raise TensorError(f"bias shape {b.shape} != ({f},)")
    if padding == "same":
        x = pad2d_array(x, same_pads(h, wd, kh, stride))
    elif padding == "valid":
        if h < kh or wd < kh:
            raise TensorError(f"valid conv needs input >= kernel, got {h}x{wd} vs k={kh}")
    else:
        raise TensorError(f"unknown padding {padding!r}")
    cols, oh, ow = im2col_array(x, kh, stride)
    out = cols @ w.reshape(f, c * kh * kw).T + b
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    _require_finite(out, "conv2d")
    return Tensor.wrap(out)


def dense(input, weight, bias) -> Tensor:
    """Affine map: [N,p] @ [p,q] + [q], bias broadcast over rows."""
    x = as_array(input)
    w = as_array(weight)
    b = as_array(bias)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise TensorError(f"dense shape mismatch: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise TensorError(f"bias shape {b.shape} != ({w.shape[1]},)")
    out = x @ w + b
    _require_finite(out, "dense")
    return Tensor.wrap(out)


def relu(input) -> Tensor:
    x = as_array(input)
    out = np.maximum(x, 0)
    _require_finite(out, "relu")
    return Tensor.wrap(out)


REDUCE_KINDS = ("sum", "max", "argmax")


def reduce(input, kind: str, axis: int | None = None) -> Tensor:
    """Reduction along one axis (or all axes when axis is None).

    argmax breaks ties toward the lowest index.
    """
    x = as_array(input)
    if kind not in REDUCE_KINDS:
        raise TensorError(f"unknown reduction {kind!r}")
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise TensorError(f"axis {axis} out of range for rank {x.ndim}")
        if x.shape[axis] == 0 and kind != "sum":
            raise TensorError(f"{kind} over empty axis")
    elif x.size == 0 and kind != "sum":
        raise TensorError(f"{kind} of empty tensor")
    if kind == "sum":
        out = np.sum(x, axis=axis)
    elif kind == "max":
        out = np.max(x, axis=axis)
    else:
        out = np.argmax(x, axis=axis).astype(np.int64)
    out = np.asarray(out)
    _require_finite(out, kind)
    return Tensor.wrap(out)


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
