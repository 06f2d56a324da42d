"""Dense tensors, diagonal scaling and the FP8 x FP8 -> FP32 matmul."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import Fp8Format, OverflowPolicy, RoundingMode, NEAREST, decode, encode, get_format

__all__ = [
    "FP8Tensor",
    "ACC_BLOCK",
    "scale_rows",
    "scale_cols",
    "check_scales",
    "matmul_mixed",
    "matmul_reference",
    "to_bf16",
]

# Width of the k-blocks in matmul_mixed's reduction schedule.
ACC_BLOCK = 64


@dataclass(frozen=True, eq=False)
class FP8Tensor:
    """Row-major FP8 code array tagged with its format."""

    codes: np.ndarray
    fmt: Fp8Format

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "fmt", get_format(self.fmt))

    @classmethod
    def from_real(cls, values, fmt, rnd: RoundingMode = NEAREST,
                  ovf=OverflowPolicy.SATURATE) -> "FP8Tensor":
        fmt = get_format(fmt)
        return cls(encode(np.asarray(values, dtype=np.float64), fmt, rnd, ovf), fmt)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    @property
    def T(self) -> "FP8Tensor":
        return FP8Tensor(self.codes.T, self.fmt)

    def dequantize(self) -> np.ndarray:
        return decode(self.codes, self.fmt)

    def tobytes(self) -> bytes:
        return self.codes.tobytes(order="C")

    @classmethod
    def frombytes(cls, data: bytes, shape, fmt) -> "FP8Tensor":
        codes = np.frombuffer(data, dtype=np.uint8)
        if codes.size != int(np.prod(shape)):
            raise ValueError(f"{codes.size} bytes do not fill shape {tuple(shape)}")
        return cls(codes.reshape(shape), fmt)


def check_scales(s, length: int | None = None, name: str = "scale") -> np.ndarray:
    """Validate a scale vector: 1-d, strictly positive, finite."""
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if s.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ValueError(f"{name} values must be positive and finite")
    if length is not None and s.size not in (1, length):
        raise ValueError(f"{name} has length {s.size}, expected {length} or 1")
    return s


def _real(t) -> np.ndarray:
    t = np.asarray(t)
    if t.dtype.kind != "f":
        t = t.astype(np.float64)
    if t.ndim != 2:
        raise ValueError(f"expected a 2-d tensor, got shape {t.shape}")
    return t


def scale_rows(t, s, invert: bool = False) -> np.ndarray:
    """Multiply row i by s[i] (or divide when ``invert``). Keeps the float dtype."""
    t = _real(t)
    s = check_scales(s, t.shape[0])
    col = s[:, None].astype(t.dtype)
    return t / col if invert else t * col


def scale_cols(t, s, invert: bool = False) -> np.ndarray:
    """Column analogue of :func:`scale_rows`."""
    t = _real(t)
    s = check_scales(s, t.shape[1])
    row = s[None, :].astype(t.dtype)
    return t / row if invert else t * row


def matmul_mixed(a: FP8Tensor, b: FP8Tensor) -> np.ndarray:
    """FP8 x FP8 product accumulated in float32.

    Products of two FP8 values are exact in float32. Sums run k-ascending
    within each ``ACC_BLOCK``-wide block, then blocks are added in ascending
    order, so the result is bit-reproducible.
    """
    if not isinstance(a, FP8Tensor) or not isinstance(b, FP8Tensor):
        raise TypeError("matmul_mixed expects FP8Tensor operands")
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} x {b.shape}")
    av = a.dequantize().astype(np.float32)
    bv = b.dequantize().astype(np.float32)
    n, k = av.shape
    m = bv.shape[1]
    out = np.zeros((n, m), dtype=np.float32)
    block = np.empty((n, m), dtype=np.float32)
    prod = np.empty((n, m), dtype=np.float32)
    with np.errstate(invalid="ignore", over="ignore"):
        for start in range(0, k, ACC_BLOCK):
            block.fill(0.0)
            for kk in range(start, min(start + ACC_BLOCK, k)):
                np.multiply(av[:, kk, None], bv[None, kk, :], out=prod)
                block += prod
            out += block
    return out


def matmul_reference(a, b) -> np.ndarray:
    """Float64 product, the high-precision oracle for :func:`matmul_mixed`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def to_bf16(x) -> np.ndarray:
    """Round float32 values to bfloat16 precision (nearest-even), kept as float32."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    bits = x.view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = (bits + np.uint32(0x7FFF) + lsb) & np.uint32(0xFFFF0000)
    # NaN payloads must stay NaN after masking
    rounded = np.where(np.isnan(x), bits | np.uint32(0x00400000), rounded)
    return rounded.astype(np.uint32).view(np.float32)
