"""Dense numeric core: a small value-semantic tensor type on top of numpy.

Images use NCHW (or CHW for a single image) row-major layout. Half precision is
a storage semantic: values are rounded to the nearest binary16 number (ties to
even) and kept in float32 buffers, so arithmetic happens in full precision and
is rounded back afterwards.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError

HALF_MAX = float(np.finfo(np.float16).max)


class Precision(str, enum.Enum):
    FULL32 = "full32"
    HALF16 = "half16"


@dataclass(frozen=True)
class Shape2D:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ShapeError(f"image extents must be >= 1, got {self.height}x{self.width}")

    @classmethod
    def parse(cls, text: str) -> "Shape2D":
        """Parse ``"HxW"`` or a single ``"S"`` meaning ``SxS``."""
        parts = text.lower().split("x")
        try:
            if len(parts) == 1:
                return cls(int(parts[0]), int(parts[0]))
            if len(parts) == 2:
                return cls(int(parts[0]), int(parts[1]))
        except ValueError:
            pass
        raise ValueError(f"bad image size {text!r}, expected HxW")

    def __str__(self):
        return f"{self.height}x{self.width}"

    def __le__(self, other: "Shape2D"):
        return self.height <= other.height and self.width <= other.width


def round_half(a: np.ndarray) -> np.ndarray:
    """Round float data to the nearest binary16 value, returned as float32.

    Magnitudes beyond the half range saturate to +-inf.
    """
    with np.errstate(over="ignore"):
        return np.asarray(a, dtype=np.float32).astype(np.float16).astype(np.float32)


class Tensor:
    """N-dimensional array with a precision tag.

    Tensors are treated as values: operations return new tensors and never
    mutate their operands.
    """

    __slots__ = ("data", "precision")

    def __init__(self, data, precision: Precision = Precision.FULL32):
        arr = np.array(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be >= 1, got {list(arr.shape)}")
        precision = Precision(precision)
        if precision is Precision.HALF16:
            arr = round_half(arr)
        arr.flags.writeable = False
        self.data = arr
        self.precision = precision

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def tolist(self):
        return self.data.tolist()

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.precision == other.precision
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, precision={self.precision.value})"

    def __add__(self, other):
        return elementwise(self, other, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise(self, other, "mul")
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def create(shape: Sequence[int], fill=0.0, precision: Precision = Precision.FULL32) -> Tensor:
    """Build a tensor of ``shape`` from a scalar fill or a flat sequence of values."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"shape must be nonempty with extents >= 1, got {list(shape)}")
    if np.isscalar(fill):
        return Tensor(np.full(shape, fill, dtype=np.float32), precision)
    values = np.asarray(fill, dtype=np.float32).ravel()
    expected = int(np.prod(shape))
    if values.size != expected:
        raise ShapeError(f"{values.size} values given for shape {list(shape)} ({expected} needed)")
    return Tensor(values.reshape(shape), precision)


def _result_precision(a: Tensor, b: Tensor) -> Precision:
    if a.precision is Precision.HALF16 and b.precision is Precision.HALF16:
        return Precision.HALF16
    return Precision.FULL32


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op} needs equal shapes, got {list(a.shape)} and {list(b.shape)}")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return Tensor(fn(a.data, b.data), _result_precision(a, b))


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor(a.data * np.float32(s), a.precision)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError("matmul needs rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {list(a.shape)} x {list(b.shape)}")
    # double accumulation, single rounding: error stays within half a float32 ulp
    return Tensor(a.data.astype(np.float64) @ b.data.astype(np.float64), _result_precision(a, b))


def cast(a: Tensor, target: Precision) -> Tensor:
    """Convert to ``target`` precision. Half16 -> Full32 is exact; the reverse rounds."""
    return Tensor(a.data, Precision(target))


def _bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def taps(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (src - lo).astype(img.dtype)
        return lo, hi, frac

    y0, y1, fy = taps(h, height)
    x0, x1, fx = taps(w, width)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def bilinear_resize(img, out: Shape2D):
    """Resize a CHW image with half-pixel-centre bilinear sampling.

    Accepts a :class:`Tensor` or a raw ndarray and returns the same kind.
    """
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim != 3:
        raise ShapeError(f"bilinear_resize expects a CHW image, got rank {arr.ndim}")
    res = _bilinear(arr, out.height, out.width)
    if isinstance(img, Tensor):
        return Tensor(res, img.precision)
    return res
