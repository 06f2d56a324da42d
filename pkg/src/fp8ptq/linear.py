"""The deployable FP8 linear layer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibStats
from .codec import (
    NEAREST,
    Fp8Format,
    OverflowPolicy,
    RoundingMode,
    count_clipped,
    get_format,
)
from .scaling import (
    ACT_MODES,
    ScaleRounding,
    ScaleSet,
    ScalingConfig,
    act_scale_per_sample,
    act_scale_per_tensor,
    compute_scales,
)
from .tensor import FP8Tensor, check_scales, matmul_mixed, to_bf16

__all__ = [
    "QuantizedLinear",
    "LayerReport",
    "quantize_weights",
    "quantize_activation",
    "forward",
    "layer_report",
    "save_layer",
    "load_layer",
]

# stochastic-rounding stream ids, so weight and activation draws never coincide
_WEIGHT_STREAM = 0
_ACT_STREAM = 1


def quantize_weights(w, scales: ScaleSet, fmt, rnd: RoundingMode = NEAREST,
                     ovf=OverflowPolicy.SATURATE) -> FP8Tensor:
    """Encode ``S_c W^T S_w^-1``; returned codes are laid out like ``W`` (C_out x C_in)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"weight must be 2-d, got shape {w.shape}")
    s_w = check_scales(scales.s_w, w.shape[0], "s_w")
    s_c = check_scales(scales.s_c, w.shape[1], "s_c")
    scaled = w * s_c[None, :] / s_w[:, None]
    return FP8Tensor.from_real(scaled, fmt, rnd.with_stream(_WEIGHT_STREAM), ovf)


def _scaled_activation(x, act_mode, s_x, s_c, beta, r_q, rounding):
    if act_mode == "per_sample_static":
        raise ValueError(
            "per-sample activation scaling is only available with dynamic "
            "measurement (act_mode='per_sample_dynamic')"
        )
    if act_mode not in ACT_MODES:
        raise ValueError(f"unknown act_mode {act_mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"activation must be 2-d, got shape {x.shape}")
    n = x.shape[0]
    if s_c is not None:
        x = x / check_scales(s_c, x.shape[1], "s_c")[None, :]

    if act_mode == "per_tensor_static":
        if s_x is None:
            raise ValueError("per_tensor_static needs a calibrated activation scale")
        s = check_scales(s_x, None, "s_x")
        if s.size != 1:
            raise ValueError("static activation scale must be a single value")
        s_vec = np.full(n, s[0])
    else:
        if s_x is not None:
            raise ValueError(f"{act_mode} measures its scale from the input; got a static s_x")
        absx = np.abs(x)
        if act_mode == "per_tensor_dynamic":
            r = absx.max() if absx.size else 0.0
            s_vec = np.full(n, act_scale_per_tensor(r, beta, r_q))
        else:
            r = absx.max(axis=1) if absx.size else np.zeros(n)
            s_vec = act_scale_per_sample(r, beta, r_q)
        s_vec = np.asarray(rounding.apply(s_vec), dtype=np.float64)
    return x / s_vec[:, None], s_vec


def quantize_activation(
    x,
    act_mode: str,
    fmt,
    s_x=None,
    s_c=None,
    beta: float = 1.0,
    rnd: RoundingMode = NEAREST,
    ovf=OverflowPolicy.SATURATE,
    scale_rounding=None,
) -> tuple[FP8Tensor, np.ndarray]:
    """Online activation quantization.

    Returns the codes of ``S_x^-1 X S_c^-1`` and the per-row scales that
    were applied. Dynamic modes measure the input itself; static mode uses
    the calibrated ``s_x``.
    """
    fmt = get_format(fmt)
    scaled, s_vec = _scaled_activation(
        x, act_mode, s_x, s_c, beta, fmt.max_finite, ScaleRounding.parse(scale_rounding)
    )
    return FP8Tensor.from_real(scaled, fmt, rnd.with_stream(_ACT_STREAM), ovf), s_vec


@dataclass(frozen=True)
class QuantizedLinear:
    """Quantized weight codes plus everything needed to run ``X -> X W^T``."""

    w_q: FP8Tensor
    scales: ScaleSet
    fmt: Fp8Format
    act_mode: str = "per_tensor_static"
    rnd: RoundingMode = NEAREST
    ovf: OverflowPolicy = OverflowPolicy.SATURATE
    beta: float = 1.0
    scale_rounding: ScaleRounding = field(default_factory=ScaleRounding)
    bf16_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fmt", get_format(self.fmt))
        object.__setattr__(self, "ovf", OverflowPolicy(self.ovf))
        object.__setattr__(self, "scale_rounding", ScaleRounding.parse(self.scale_rounding))
        if self.act_mode not in ACT_MODES:
            raise ValueError(f"unknown act_mode {self.act_mode!r}")
        if self.w_q.fmt != self.fmt:
            raise ValueError("weight codes and layer use different FP8 formats")
        c_out, c_in = self.w_q.shape
        if self.scales.s_w.size != c_out or self.scales.s_c.size != c_in:
            raise ValueError("scale vector lengths do not match the weight shape")
        static = self.act_mode == "per_tensor_static"
        if static != (self.scales.s_x is not None):
            raise ValueError(f"act_mode {self.act_mode!r} inconsistent with stored s_x")

    @classmethod
    def from_weight(
        cls,
        w,
        config: ScalingConfig,
        fmt,
        stats: CalibStats | None = None,
        rnd: RoundingMode = NEAREST,
        ovf=OverflowPolicy.SATURATE,
        bf16_output: bool = False,
    ) -> "QuantizedLinear":
        fmt = get_format(fmt)
        scales = compute_scales(config, w, fmt, stats, rnd)
        return cls(
            quantize_weights(w, scales, fmt, rnd, ovf),
            scales,
            fmt,
            config.act_mode,
            rnd,
            ovf,
            config.beta,
            config.scale_rounding,
            bf16_output,
        )

    @property
    def in_features(self) -> int:
        return self.w_q.shape[1]

    @property
    def out_features(self) -> int:
        return self.w_q.shape[0]

    def dequantized_weight(self) -> np.ndarray:
        """``S_c^-1 W_hat_s^T S_w`` transposed back to (C_out, C_in)."""
        return self.w_q.dequantize() * self.scales.s_w[:, None] / self.scales.s_c[None, :]

    def scaled_activation(self, x):
        return _scaled_activation(
            x, self.act_mode, self.scales.s_x, self.scales.s_c, self.beta,
            self.fmt.max_finite, self.scale_rounding,
        )

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)


def forward(layer: QuantizedLinear, x) -> np.ndarray:
    """Quantize ``x`` online, run the FP8 GEMM, descale. Returns float32."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ValueError(
            f"input of shape {x.shape} does not match {layer.in_features} input features"
        )
    xq, s_x = quantize_activation(
        x, layer.act_mode, layer.fmt, layer.scales.s_x, layer.scales.s_c,
        layer.beta, layer.rnd, layer.ovf, layer.scale_rounding,
    )
    acc = matmul_mixed(xq, layer.w_q.T)
    # descale factors are combined first, then applied to the accumulator in one pass
    combined = s_x[:, None] * layer.scales.s_w[None, :]
    out = (acc * combined).astype(np.float32)
    return to_bf16(out) if layer.bf16_output else out


@dataclass(frozen=True)
class LayerReport:
    weight_err_fro: float
    output_err_rel: float
    clip_count: int
    scales_used: dict

    def to_dict(self) -> dict:
        return {
            "weight_err_fro": self.weight_err_fro,
            "output_err_rel": self.output_err_rel,
            "clip_count": self.clip_count,
            "scales_used": self.scales_used,
        }


def _summary(v):
    if v is None:
        return "dynamic"
    return {"n": int(v.size), "min": float(v.min()), "max": float(v.max())}


def layer_report(layer: QuantizedLinear, w_ref, x_probe) -> LayerReport:
    """Weight reconstruction error, relative output error and clip count."""
    w_ref = np.asarray(w_ref, dtype=np.float64)
    x_probe = np.asarray(x_probe, dtype=np.float64)
    if w_ref.shape != layer.w_q.shape:
        raise ValueError(f"reference weight {w_ref.shape} != quantized {layer.w_q.shape}")
    w_err = float(np.sum((layer.dequantized_weight() - w_ref) ** 2))

    y = forward(layer, x_probe).astype(np.float64)
    y_ref = x_probe @ w_ref.T
    ref_norm = np.linalg.norm(y_ref)
    diff_norm = np.linalg.norm(y - y_ref)
    if ref_norm > 0:
        rel = float(diff_norm / ref_norm)
    else:
        rel = 0.0 if diff_norm == 0 else float("inf")

    w_scaled = w_ref * layer.scales.s_c[None, :] / layer.scales.s_w[:, None]
    x_scaled, _ = layer.scaled_activation(x_probe)
    clips = count_clipped(w_scaled, layer.fmt) + count_clipped(x_scaled, layer.fmt)
    scales = {
        "s_x": _summary(layer.scales.s_x),
        "s_w": _summary(layer.scales.s_w),
        "s_c": _summary(layer.scales.s_c),
    }
    return LayerReport(w_err, rel, clips, scales)


def save_layer(layer: QuantizedLinear, directory, name: str) -> tuple[Path, Path]:
    """Write ``<name>.fp8`` (raw row-major codes) and ``<name>.json`` (sidecar)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    codes_path = directory / f"{name}.fp8"
    meta_path = directory / f"{name}.json"
    codes_path.write_bytes(layer.w_q.tobytes())
    scales = layer.scales.to_dict()
    if scales["s_x"] is None:
        scales["s_x"] = layer.act_mode
    meta = {
        "format": layer.fmt.name,
        "shape": list(layer.w_q.shape),
        "act_mode": layer.act_mode,
        "scales": scales,
        "beta": layer.beta,
        "scale_rounding": layer.scale_rounding.to_json(),
        "rounding": layer.rnd.to_dict(),
        "overflow": layer.ovf.value,
        "bf16_output": layer.bf16_output,
        "codes": codes_path.name,
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return codes_path, meta_path


def load_layer(meta_path) -> QuantizedLinear:
    meta_path = Path(meta_path)
    meta = json.loads(meta_path.read_text())
    fmt = get_format(meta["format"])
    w_q = FP8Tensor.frombytes((meta_path.parent / meta["codes"]).read_bytes(), meta["shape"], fmt)
    scales = dict(meta["scales"])
    if isinstance(scales.get("s_x"), str):
        scales["s_x"] = None
    return QuantizedLinear(
        w_q,
        ScaleSet.from_dict(scales),
        fmt,
        meta["act_mode"],
        RoundingMode.from_value(meta.get("rounding")),
        OverflowPolicy(meta.get("overflow", "saturate")),
        float(meta.get("beta", 1.0)),
        ScaleRounding.parse(meta.get("scale_rounding")),
        bool(meta.get("bf16_output", False)),
    )
