"""Bit-exact FP8 encode/decode.

Three layouts are supported:

* ``e4m3``        -- OCP E4M3 (no infinity, single NaN pattern per sign, max 448)
* ``e4m3_gaudi2`` -- IEEE-style E4M3 (top exponent reserved, max 240)
* ``e5m2``        -- IEEE-style E5M2 (max 57344)

Values are handled as numpy arrays of float64; codes are ``uint8``.
Subnormals are always supported.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Variant",
    "Fp8Format",
    "E4M3",
    "E4M3_GAUDI2",
    "E5M2",
    "FORMATS",
    "get_format",
    "RoundingMode",
    "NEAREST",
    "OverflowPolicy",
    "decode",
    "encode",
    "round_trip",
    "count_clipped",
    "code_table",
    "uniform_stream",
]


class Variant(str, enum.Enum):
    E4M3_OCP = "e4m3"
    E4M3_GAUDI2 = "e4m3_gaudi2"
    E5M2 = "e5m2"


@dataclass(frozen=True)
class Fp8Format:
    """Descriptor of one FP8 minifloat layout."""

    name: str
    variant: Variant
    exp_bits: int
    mant_bits: int
    exp_bias: int
    has_inf: bool

    def __post_init__(self):
        if self.exp_bits + self.mant_bits + 1 != 8:
            raise ValueError("exp_bits + mant_bits + 1 must equal 8")

    @property
    def nan_encoding(self) -> str:
        return "ieee_top_exponent" if self.has_inf else "top_mantissa_all_ones"

    @property
    def max_exp_field(self) -> int:
        # largest exponent field that still holds finite normals
        top = (1 << self.exp_bits) - 1
        return top - 1 if self.has_inf else top

    @property
    def max_finite(self) -> float:
        mant_max = (1 << self.mant_bits) - 1
        if not self.has_inf:
            mant_max -= 1  # all-ones mantissa in the top binade is NaN
        frac = 1.0 + mant_max / (1 << self.mant_bits)
        return float(np.ldexp(frac, self.max_exp_field - self.exp_bias))

    @property
    def min_normal(self) -> float:
        return float(np.ldexp(1.0, 1 - self.exp_bias))

    @property
    def min_subnormal(self) -> float:
        return float(np.ldexp(1.0, 1 - self.exp_bias - self.mant_bits))

    @property
    def max_code(self) -> int:
        """Magnitude bits of the largest finite code."""
        top = (1 << self.exp_bits) - 1
        if self.has_inf:
            return ((top - 1) << self.mant_bits) | ((1 << self.mant_bits) - 1)
        return (top << self.mant_bits) | ((1 << self.mant_bits) - 2)

    @property
    def nan_code(self) -> int:
        if self.has_inf:
            # quiet NaN: top exponent, leading mantissa bit set
            top = (1 << self.exp_bits) - 1
            return (top << self.mant_bits) | (1 << (self.mant_bits - 1))
        return 0x7F

    @property
    def inf_code(self) -> int | None:
        if not self.has_inf:
            return None
        return ((1 << self.exp_bits) - 1) << self.mant_bits

    def __str__(self) -> str:
        return self.name


E4M3 = Fp8Format("e4m3", Variant.E4M3_OCP, 4, 3, 7, has_inf=False)
E4M3_GAUDI2 = Fp8Format("e4m3_gaudi2", Variant.E4M3_GAUDI2, 4, 3, 7, has_inf=True)
E5M2 = Fp8Format("e5m2", Variant.E5M2, 5, 2, 15, has_inf=True)

FORMATS = {f.name: f for f in (E4M3, E4M3_GAUDI2, E5M2)}


def get_format(fmt: str | Fp8Format) -> Fp8Format:
    if isinstance(fmt, Fp8Format):
        return fmt
    try:
        return FORMATS[str(fmt).lower()]
    except KeyError:
        raise ValueError(
            f"unknown FP8 format {fmt!r}; expected one of {sorted(FORMATS)}"
        ) from None


@dataclass(frozen=True)
class RoundingMode:
    """Rounding used when casting to FP8.

    ``kind`` is ``"nearest_even"`` or ``"stochastic"``.  Stochastic draws
    are a pure function of ``(seed, stream, element index)``.
    """

    kind: str = "nearest_even"
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if self.kind not in ("nearest_even", "stochastic"):
            raise ValueError(f"unknown rounding mode {self.kind!r}")

    @classmethod
    def stochastic(cls, seed: int = 0) -> "RoundingMode":
        return cls("stochastic", seed)

    @property
    def is_stochastic(self) -> bool:
        return self.kind == "stochastic"

    def with_stream(self, stream: int) -> "RoundingMode":
        return RoundingMode(self.kind, self.seed, stream)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed}

    @classmethod
    def from_value(cls, value) -> "RoundingMode":
        if isinstance(value, RoundingMode):
            return value
        if value is None:
            return NEAREST
        if isinstance(value, str):
            return cls(value)
        return cls(value.get("kind", "nearest_even"), int(value.get("seed", 0)))


NEAREST = RoundingMode()


class OverflowPolicy(str, enum.Enum):
    SATURATE = "saturate"
    TO_SPECIAL = "to_special"


# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


def uniform_stream(seed: int, index, stream: int = 0) -> np.ndarray:
    """Counter-based uniforms in [0, 1), keyed by seed, stream and index."""
    with np.errstate(over="ignore"):
        key = _mix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        key = _mix64(key ^ np.uint64(stream & 0xFFFFFFFFFFFFFFFF))
        idx = np.asarray(index).astype(np.uint64)
        bits = _mix64(key + (idx + np.uint64(1)) * _GOLDEN)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def _build_decode_table(fmt: Fp8Format) -> np.ndarray:
    codes = np.arange(256)
    sign = np.where(codes & 0x80, -1.0, 1.0)
    e = (codes >> fmt.mant_bits) & ((1 << fmt.exp_bits) - 1)
    m = codes & ((1 << fmt.mant_bits) - 1)
    normal = np.ldexp(1.0 + m / (1 << fmt.mant_bits), e - fmt.exp_bias)
    sub = np.ldexp(m.astype(np.float64), 1 - fmt.exp_bias - fmt.mant_bits)
    table = sign * np.where(e == 0, sub, normal)
    top = (1 << fmt.exp_bits) - 1
    if fmt.has_inf:
        table[(e == top) & (m == 0)] = sign[(e == top) & (m == 0)] * np.inf
        table[(e == top) & (m != 0)] = np.nan
    else:
        table[(e == top) & (m == (1 << fmt.mant_bits) - 1)] = np.nan
    table.setflags(write=False)
    return table


_DECODE_TABLES = {name: _build_decode_table(f) for name, f in FORMATS.items()}


def _table(fmt: Fp8Format) -> np.ndarray:
    t = _DECODE_TABLES.get(fmt.name)
    if t is None:
        t = _DECODE_TABLES[fmt.name] = _build_decode_table(fmt)
    return t


def decode(codes, fmt: str | Fp8Format = E4M3):
    """Decode FP8 codes to float64. Scalars in, scalar out."""
    fmt = get_format(fmt)
    arr = np.asarray(codes)
    if arr.dtype.kind not in "ui":
        raise TypeError(f"codes must be integers, got {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("codes must be in [0, 255]")
    out = _table(fmt)[arr.astype(np.uint8)]
    if np.ndim(codes) == 0:
        return float(out)
    return out


def _round_magnitude(a, fmt, rnd, index_offset):
    """Round nonnegative finite magnitudes onto the FP8 grid (unbounded above)."""
    _, e = np.frexp(a)
    # exponent of the binade [2^(e-1), 2^e); subnormals share the min-normal quantum
    exp = np.maximum(e - 1, 1 - fmt.exp_bias)
    quantum_exp = exp - fmt.mant_bits
    q = np.ldexp(a, -quantum_exp)  # exact: power-of-two rescale
    if rnd.is_stochastic:
        lo = np.floor(q)
        frac = q - lo
        u = uniform_stream(rnd.seed, index_offset + np.arange(a.size), rnd.stream)
        r = lo + (u.reshape(a.shape) < frac)
    else:
        r = np.rint(q)  # ties to even integer == even mantissa
    return np.ldexp(r, quantum_exp)


def _magnitude_to_bits(v, fmt):
    """Magnitude bits for exactly representable finite nonnegative values."""
    bits = np.zeros(v.shape, dtype=np.int64)
    sub = v < fmt.min_normal
    bits[sub] = np.ldexp(v[sub], fmt.exp_bias - 1 + fmt.mant_bits).astype(np.int64)
    nrm = ~sub
    if nrm.any():
        mant, e = np.frexp(v[nrm])
        exp_field = (e - 1) + fmt.exp_bias
        m_field = np.ldexp(mant, fmt.mant_bits + 1).astype(np.int64) - (1 << fmt.mant_bits)
        bits[nrm] = (exp_field << fmt.mant_bits) | m_field
    return bits


def encode(
    values,
    fmt: str | Fp8Format = E4M3,
    rnd: RoundingMode = NEAREST,
    ovf: OverflowPolicy | str = OverflowPolicy.SATURATE,
    index_offset: int = 0,
):
    """Encode real values to FP8 codes.

    Magnitudes whose rounded value exceeds ``fmt.max_finite`` follow ``ovf``:
    saturate to +-max_finite, or produce NaN (OCP E4M3) / +-Inf. Infinite
    inputs become +-Inf where the format has it; in OCP E4M3 they saturate
    or become NaN per ``ovf``. Every zero result is the +0 code.

    ``index_offset`` shifts the element counter that keys stochastic draws.
    """
    fmt = get_format(fmt)
    ovf = OverflowPolicy(ovf)
    rnd = RoundingMode.from_value(rnd)
    x = np.asarray(values, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)

    nan = np.isnan(x)
    inf = np.isinf(x)
    a = np.where(nan | inf, 0.0, np.abs(x))
    r = _round_magnitude(a, fmt, rnd, index_offset)
    over = (r > fmt.max_finite) | inf
    r = np.minimum(r, fmt.max_finite)

    mag = _magnitude_to_bits(r, fmt)
    codes = np.where(np.signbit(x) & (mag != 0), 0x80, 0) | mag

    if ovf is OverflowPolicy.SATURATE:
        special = fmt.inf_code if fmt.has_inf else fmt.max_code
        codes[inf] = np.where(x[inf] < 0, 0x80, 0) | special
    else:
        if fmt.has_inf:
            codes[over] = np.where(x[over] < 0, 0x80, 0) | fmt.inf_code
        else:
            codes[over] = fmt.nan_code
    codes[nan] = fmt.nan_code

    codes = codes.astype(np.uint8)
    if scalar:
        return int(codes[0])
    return codes


def round_trip(
    values,
    fmt: str | Fp8Format = E4M3,
    rnd: RoundingMode = NEAREST,
    ovf: OverflowPolicy | str = OverflowPolicy.SATURATE,
    index_offset: int = 0,
):
    """``decode(encode(values))`` -- the quantize-dequantize operator Q."""
    return decode(encode(values, fmt, rnd, ovf, index_offset), fmt)


def count_clipped(values, fmt: str | Fp8Format = E4M3) -> int:
    """Number of finite elements that nearest rounding would push past ``max_finite``.

    Values that round back down to the largest finite code are not counted.
    """
    fmt = get_format(fmt)
    x = np.asarray(values, dtype=np.float64)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return 0
    decoded = decode(encode(x, fmt, NEAREST, OverflowPolicy.TO_SPECIAL), fmt)
    return int(np.count_nonzero(~np.isfinite(decoded)))


def code_table(fmt: str | Fp8Format = E4M3) -> list[dict]:
    """One row per code: hex, sign/exponent/mantissa bit fields, value, kind."""
    fmt = get_format(fmt)
    values = _table(fmt)
    rows = []
    for c in range(256):
        v = float(values[c])
        e = (c >> fmt.mant_bits) & ((1 << fmt.exp_bits) - 1)
        m = c & ((1 << fmt.mant_bits) - 1)
        if np.isnan(v):
            kind = "nan"
        elif np.isinf(v):
            kind = "inf"
        elif v == 0:
            kind = "zero"
        elif e == 0:
            kind = "subnormal"
        else:
            kind = "normal"
        rows.append(
            {
                "code": c,
                "hex": f"0x{c:02X}",
                "sign": c >> 7,
                "exponent": format(e, f"0{fmt.exp_bits}b"),
                "mantissa": format(m, f"0{fmt.mant_bits}b"),
                "value": v,
                "kind": kind,
            }
        )
    return rows
