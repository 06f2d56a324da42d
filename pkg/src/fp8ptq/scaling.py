"""Scale computation for the scaled FP8 GEMM.

A linear layer ``Y = X W^T`` is executed as

    Y = S_x (Q(S_x^-1 X S_c^-1) (x) Q(S_c W^T S_w^-1)) S_w

with diagonal scales ``s_x`` (per sample), ``s_w`` (per output channel) and
``s_c`` (per input channel). This module turns calibration statistics into
those three vectors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibStats, measure_weight
from .codec import NEAREST, Fp8Format, OverflowPolicy, RoundingMode, get_format, round_trip

__all__ = [
    "ACT_MODES",
    "WEIGHT_MODES",
    "SMOOTHQUANT_EPS",
    "GAUDI2_SCALES",
    "GAUDI3_SCALES",
    "ScaleClipWarning",
    "ScaleRounding",
    "ScaleSearchSpace",
    "ScalingConfig",
    "ScaleSet",
    "act_scale_per_tensor",
    "act_scale_per_sample",
    "weight_scale_maxabs_pt",
    "weight_scale_maxabs_poc",
    "weight_quant_error",
    "weight_scale_opt_pt",
    "weight_scale_opt_poc",
    "smoothquant_scales",
    "round_scale_pow2",
    "snap_to_hw_set",
    "unit_scales",
    "compute_scales",
]

ACT_MODES = ("per_tensor_static", "per_tensor_dynamic", "per_sample_dynamic")
WEIGHT_MODES = (
    "unit",
    "maxabs_per_tensor",
    "maxabs_per_out_channel",
    "opt_per_tensor",
    "opt_per_out_channel",
    "smoothquant_pt",
    "smoothquant_poc",
)

SMOOTHQUANT_EPS = 2.0 ** -24

GAUDI2_SCALES = tuple(2.0 ** e for e in (-8, -4, 0, 4))
GAUDI3_SCALES = tuple(2.0 ** e for e in range(-32, 32))


class ScaleClipWarning(UserWarning):
    """A scale exceeded the largest hardware-supported value and was clamped."""


def _pos_div(r, denom):
    """r / denom with the zero-statistic fallback to a unit scale."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ValueError("statistics must be finite and nonnegative")
    return np.where(r > 0, r / denom, 1.0)


def _check_beta(beta):
    if not 0 < beta <= 1:
        raise ValueError(f"backoff beta must be in (0, 1], got {beta}")


def act_scale_per_tensor(r_x: float, beta: float, r_q: float) -> float:
    _check_beta(beta)
    return float(_pos_div(r_x, beta * r_q))


def act_scale_per_sample(r_x_per_sample, beta: float, r_q: float) -> np.ndarray:
    _check_beta(beta)
    return _pos_div(np.atleast_1d(r_x_per_sample), beta * r_q)


def weight_scale_maxabs_pt(r_w: float, r_q: float) -> float:
    return float(_pos_div(r_w, r_q))


def weight_scale_maxabs_poc(r_w_poc, r_q: float) -> np.ndarray:
    return _pos_div(np.atleast_1d(r_w_poc), r_q)


def round_scale_pow2(s):
    """Round up to a power of two: ``2 ** ceil(log2(s))``, computed exactly."""
    arr = np.asarray(s, dtype=np.float64)
    if np.any(~(arr > 0)) or not np.all(np.isfinite(arr)):
        raise ValueError("scales must be positive and finite")
    mant, exp = np.frexp(arr)
    out = np.ldexp(1.0, np.where(mant == 0.5, exp - 1, exp))
    return float(out) if arr.ndim == 0 else out


def snap_to_hw_set(s, allowed):
    """Smallest allowed scale >= s, clamping to the largest with a warning."""
    allowed = np.asarray(sorted(allowed), dtype=np.float64)
    if allowed.size == 0:
        raise ValueError("allowed scale set is empty")
    arr = np.asarray(s, dtype=np.float64)
    idx = np.searchsorted(allowed, arr, side="left")
    clipped = idx >= allowed.size
    if np.any(clipped):
        warnings.warn(
            f"{int(np.count_nonzero(clipped))} scale(s) above {allowed[-1]:g} clamped "
            "to the largest supported value",
            ScaleClipWarning,
            stacklevel=2,
        )
    out = allowed[np.minimum(idx, allowed.size - 1)]
    return float(out) if arr.ndim == 0 else out


@dataclass(frozen=True)
class ScaleRounding:
    """``none``, ``pow2`` or ``hw_set`` with an explicit list of powers of two."""

    kind: str = "none"
    allowed: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("none", "pow2", "hw_set"):
            raise ValueError(f"unknown scale rounding {self.kind!r}")
        if self.kind == "hw_set":
            if not self.allowed:
                raise ValueError("hw_set rounding needs a nonempty list of scales")
            for a in self.allowed:
                mant, _ = math.frexp(a)
                if a <= 0 or mant != 0.5:
                    raise ValueError(f"hw_set entry {a} is not a power of two")
            object.__setattr__(self, "allowed", tuple(sorted(float(a) for a in self.allowed)))

    @classmethod
    def parse(cls, value) -> "ScaleRounding":
        if isinstance(value, ScaleRounding):
            return value
        if value is None:
            return cls()
        if isinstance(value, str):
            presets = {"gaudi2": GAUDI2_SCALES, "gaudi3": GAUDI3_SCALES}
            if value in presets:
                return cls("hw_set", presets[value])
            return cls(value)
        if isinstance(value, dict) and "hw_set" in value:
            return cls("hw_set", tuple(value["hw_set"]))
        raise ValueError(f"cannot parse scale rounding {value!r}")

    def apply(self, s):
        if self.kind == "pow2":
            return round_scale_pow2(s)
        if self.kind == "hw_set":
            return snap_to_hw_set(s, self.allowed)
        return s

    def to_json(self):
        if self.kind == "hw_set":
            return {"hw_set": list(self.allowed)}
        return self.kind


@dataclass(frozen=True)
class ScaleSearchSpace:
    """Ordered candidate scales for the error-minimising weight methods."""

    candidates: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(v) for v in self.candidates)
        if not c:
            raise ValueError("scale search space is empty")
        if any(v <= 0 or not math.isfinite(v) for v in c):
            raise ValueError("candidate scales must be positive and finite")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("candidate scales must be strictly increasing")
        object.__setattr__(self, "candidates", c)

    @classmethod
    def powers_of_two(cls, lo: int = -16, hi: int = 16) -> "ScaleSearchSpace":
        return cls(tuple(2.0 ** e for e in range(lo, hi + 1)))

    @classmethod
    def parse(cls, value) -> "ScaleSearchSpace":
        if isinstance(value, ScaleSearchSpace):
            return value
        if value is None or value == "pow2":
            return cls.powers_of_two()
        if value == "gaudi2":
            return cls(GAUDI2_SCALES)
        if value == "gaudi3":
            return cls(GAUDI3_SCALES)
        return cls(tuple(sorted(set(float(v) for v in value))))

    def __len__(self):
        return len(self.candidates)


@dataclass(frozen=True)
class ScalingConfig:
    act_mode: str = "per_tensor_static"
    weight_mode: str = "maxabs_per_tensor"
    beta: float = 1.0
    alpha: float = 0.5
    scale_rounding: ScaleRounding = field(default_factory=ScaleRounding)
    search_space: ScaleSearchSpace = field(default_factory=ScaleSearchSpace.powers_of_two)

    def __post_init__(self):
        if self.act_mode not in ACT_MODES:
            raise ValueError(f"unknown act_mode {self.act_mode!r}; expected one of {ACT_MODES}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(
                f"unknown weight_mode {self.weight_mode!r}; expected one of {WEIGHT_MODES}"
            )
        _check_beta(self.beta)
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"smoothquant alpha must be in [0, 1], got {self.alpha}")
        if self.is_smoothquant and self.act_mode != "per_tensor_static":
            raise ValueError("SmoothQuant scaling requires act_mode='per_tensor_static'")
        object.__setattr__(self, "scale_rounding", ScaleRounding.parse(self.scale_rounding))
        object.__setattr__(self, "search_space", ScaleSearchSpace.parse(self.search_space))

    @property
    def is_smoothquant(self) -> bool:
        return self.weight_mode.startswith("smoothquant")

    @property
    def is_static(self) -> bool:
        return self.act_mode == "per_tensor_static"

    @property
    def label(self) -> str:
        parts = [self.weight_mode, self.act_mode]
        if self.scale_rounding.kind != "none":
            parts.append(self.scale_rounding.kind)
        return "/".join(parts)

    def to_dict(self) -> dict:
        d = {
            "act_mode": self.act_mode,
            "weight_mode": self.weight_mode,
            "beta": self.beta,
            "alpha": self.alpha,
            "scale_rounding": self.scale_rounding.to_json(),
        }
        if self.weight_mode.startswith("opt"):
            d["search_space"] = list(self.search_space.candidates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingConfig":
        known = {"act_mode", "weight_mode", "beta", "alpha", "scale_rounding", "search_space"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scaling config keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ScaleSet:
    """Scales for one layer.

    ``s_x`` is ``None`` for dynamic activation modes; scales are then
    measured from each incoming batch.
    """

    s_x: np.ndarray | None
    s_w: np.ndarray
    s_c: np.ndarray

    def __post_init__(self):
        for name in ("s_x", "s_w", "s_c"):
            v = getattr(self, name)
            if v is None and name == "s_x":
                continue
            v = np.atleast_1d(np.asarray(v, dtype=np.float64))
            if v.ndim != 1 or not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise ValueError(f"{name} must be a vector of positive finite scales")
            object.__setattr__(self, name, v)

    def to_dict(self) -> dict:
        return {
            "s_x": None if self.s_x is None else self.s_x.tolist(),
            "s_w": self.s_w.tolist(),
            "s_c": self.s_c.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleSet":
        return cls(d.get("s_x"), d["s_w"], d["s_c"])


def unit_scales(in_channels: int, out_channels: int, static: bool = True) -> ScaleSet:
    return ScaleSet(np.ones(1) if static else None, np.ones(out_channels), np.ones(in_channels))


def weight_quant_error(w, s_w, fmt, rnd: RoundingMode = NEAREST, s_c=None, axis=None):
    """Squared Frobenius norm of ``S_c^-1 Q(S_c W^T S_w^-1) S_w - W^T``.

    ``w`` is (C_out, C_in); ``s_w`` is a scalar or per-row vector. With
    ``axis=1`` the error is returned per output channel.
    """
    w = np.asarray(w, dtype=np.float64)
    s_w = np.broadcast_to(np.asarray(s_w, dtype=np.float64).reshape(-1, 1), (w.shape[0], 1))
    s_c = np.ones(w.shape[1]) if s_c is None else np.asarray(s_c, dtype=np.float64)
    scaled = w * s_c[None, :] / s_w
    deq = round_trip(scaled, fmt, rnd, OverflowPolicy.SATURATE) * s_w / s_c[None, :]
    return np.sum((deq - w) ** 2, axis=axis)


def _errors_over_space(w, space, fmt, rnd):
    # rows: candidates, cols: output channels
    return np.stack([weight_quant_error(w, s, fmt, rnd, axis=1) for s in space.candidates])


def weight_scale_opt_pt(w, space: ScaleSearchSpace, fmt, rnd: RoundingMode = NEAREST) -> float:
    """Per-tensor scale from ``space`` minimising the weight reconstruction error.

    Ties resolve to the smaller scale.
    """
    fmt = get_format(fmt)
    errs = _errors_over_space(w, space, fmt, rnd).sum(axis=1)
    return space.candidates[int(np.argmin(errs))]


def weight_scale_opt_poc(w, space: ScaleSearchSpace, fmt, rnd: RoundingMode = NEAREST) -> np.ndarray:
    """Per-output-channel version of :func:`weight_scale_opt_pt`."""
    fmt = get_format(fmt)
    errs = _errors_over_space(w, space, fmt, rnd)
    # argmin returns the first (smallest-scale) minimiser
    return np.asarray(space.candidates)[np.argmin(errs, axis=0)]


def smoothquant_scales(
    r_x_pc,
    r_w_pic,
    alpha: float,
    beta: float,
    r_q: float,
    w,
    weight_stat_mode: str = "per_out_channel",
) -> ScaleSet:
    """Joint per-input-channel scales migrating activation range into the weights.

    ``s_c = r_x^alpha / r_w^(1 - alpha)`` per input channel (statistics
    clamped to ``SMOOTHQUANT_EPS``), then ``s_x`` and ``s_w`` are taken from
    the rescaled activation and weight ranges.
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    _check_beta(beta)
    if weight_stat_mode not in ("per_out_channel", "per_tensor"):
        raise ValueError(f"unknown weight_stat_mode {weight_stat_mode!r}")
    r_x_pc = np.asarray(r_x_pc, dtype=np.float64)
    r_w_pic = np.asarray(r_w_pic, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if r_x_pc.shape != r_w_pic.shape or w.shape[1] != r_x_pc.size:
        raise ValueError("SmoothQuant statistics and weight disagree on input channels")

    s_c = np.maximum(r_x_pc, SMOOTHQUANT_EPS) ** alpha / np.maximum(r_w_pic, SMOOTHQUANT_EPS) ** (1 - alpha)
    s_x = act_scale_per_tensor(float(np.max(r_x_pc / s_c)), beta, r_q)

    w_bar = w * s_c[None, :]
    r_bar = np.abs(w_bar).max(axis=1)
    if weight_stat_mode == "per_out_channel":
        s_w = weight_scale_maxabs_poc(r_bar, r_q)
    else:
        s_w = np.full(w.shape[0], weight_scale_maxabs_pt(float(r_bar.max()), r_q))
    return ScaleSet(np.array([s_x]), s_w, s_c)


def compute_scales(
    config: ScalingConfig,
    w,
    fmt: str | Fp8Format,
    stats: CalibStats | None = None,
    rnd: RoundingMode = NEAREST,
) -> ScaleSet:
    """Build the :class:`ScaleSet` for weight ``w`` under ``config``.

    Static activation modes need ``stats`` with activation maxima; weight
    statistics are measured from ``w`` directly.
    """
    fmt = get_format(fmt)
    w = np.asarray(w, dtype=np.float64)
    c_out, c_in = w.shape
    r_q = fmt.max_finite
    mode = config.weight_mode
    # unit weight scaling with static activations is the all-ones baseline
    if mode == "unit":
        return unit_scales(c_in, c_out, static=config.is_static)
    if config.is_static:
        if stats is None:
            raise ValueError("static activation scaling needs calibration statistics")
        if stats.in_channels != c_in:
            raise ValueError(f"stats cover {stats.in_channels} channels, weight has {c_in}")
    rounding = config.scale_rounding

    if config.is_smoothquant:
        ws = measure_weight(w)
        sq = smoothquant_scales(
            stats.r_x_pc, ws.r_w_pic, config.alpha, config.beta, r_q, w,
            "per_out_channel" if mode == "smoothquant_poc" else "per_tensor",
        )
        return ScaleSet(rounding.apply(sq.s_x), rounding.apply(sq.s_w), sq.s_c)

    ws = measure_weight(w)
    if mode == "maxabs_per_tensor":
        s_w = np.full(c_out, weight_scale_maxabs_pt(ws.r_w, r_q))
    elif mode == "maxabs_per_out_channel":
        s_w = weight_scale_maxabs_poc(ws.r_w_poc, r_q)
    elif mode == "opt_per_tensor":
        s_w = np.full(c_out, weight_scale_opt_pt(w, config.search_space, fmt, rnd))
    else:
        s_w = weight_scale_opt_poc(w, config.search_space, fmt, rnd)

    s_x = None
    if config.is_static:
        s_x = np.array([rounding.apply(act_scale_per_tensor(stats.r_x, config.beta, r_q))])
    return ScaleSet(s_x, rounding.apply(s_w), np.ones(c_in))
