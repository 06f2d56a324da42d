"""Post-training quantization recipe over a sequential stack of linear layers.

The driver measures a high-precision baseline, calibrates activation
statistics, then tries candidate scaling configurations in the order given
(simplest first) and keeps the first one whose degradation is within the
threshold.

On-disk layouts
---------------
Model directory::

    manifest.json   {"version": 1, "layers": [{"name", "weight", "shape",
                     "activation", "is_first", "is_last"}, ...]}
    <weight>        raw little-endian float32, row-major (C_out x C_in)

Dataset directory::

    index.json      {"version": 1, "batches": [{"file", "shape", "labels"?}, ...]}
    <file>          raw little-endian float32, row-major (N x C)
    <labels>        raw little-endian int32, length N (optional)
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibStats, merge, observe_activation
from .codec import NEAREST, OverflowPolicy, RoundingMode, get_format
from .linear import LayerReport, QuantizedLinear, layer_report, load_layer, save_layer
from .scaling import ScalingConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

__all__ = [
    "FORMAT_VERSION",
    "ACTIVATIONS",
    "METRICS",
    "LayerSpec",
    "ModelManifest",
    "Batch",
    "load_model",
    "save_model",
    "load_dataset",
    "save_dataset",
    "QuantizedModel",
    "load_quantized",
    "RecipeConfig",
    "load_config",
    "CandidateResult",
    "RecipeResult",
    "evaluate_degradation",
    "throughput_rank",
    "run_calibration",
    "merge_stats",
    "quantize_model",
    "evaluate",
    "compare",
    "run_recipe",
]

FORMAT_VERSION = 1
METRICS = ("rel_output_error", "proxy_loss")


def _relu(x):
    return np.maximum(x, 0.0)


ACTIVATIONS = {"identity": lambda x: x, "relu": _relu}


@dataclass
class LayerSpec:
    name: str
    weight: np.ndarray
    activation: str = "identity"
    is_first: bool = False
    is_last: bool = False

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.size == 0:
            raise ValueError(f"layer {self.name!r}: weight must be a nonempty 2-d array")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"layer {self.name!r}: unknown activation {self.activation!r}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class ModelManifest:
    """Ordered linear layers; layer l's outputs feed layer l + 1."""

    layers: list[LayerSpec]
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model has no layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(
                    f"layer {nxt.name!r} expects {nxt.in_channels} inputs but "
                    f"{prev.name!r} produces {prev.out_channels}"
                )
        if not any(l.is_first for l in self.layers):
            self.layers[0].is_first = True
        if not any(l.is_last for l in self.layers):
            self.layers[-1].is_last = True

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    def forward(self, x, collect: bool = False):
        """Float64 forward pass; with ``collect`` also return each layer's input."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_channels:
            raise ValueError(f"input shape {x.shape} does not match {self.in_channels} channels")
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = ACTIVATIONS[layer.activation](x @ layer.weight.T)
        return (x, inputs) if collect else x


def _write_f32(path: Path, array) -> None:
    path.write_bytes(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_array(path: Path, shape, dtype) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path.name}: {data.size} values do not fill shape {tuple(shape)}")
    return data.reshape(shape)


def _check_version(doc: dict, what: str) -> None:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported {what} version {doc.get('version')!r}")


def save_model(model: ModelManifest, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in model.layers:
        fname = f"{layer.name}.f32"
        _write_f32(directory / fname, layer.weight)
        entries.append(
            {
                "name": layer.name,
                "weight": fname,
                "shape": list(layer.weight.shape),
                "activation": layer.activation,
                "is_first": layer.is_first,
                "is_last": layer.is_last,
            }
        )
    path = directory / "manifest.json"
    path.write_text(json.dumps({"version": FORMAT_VERSION, "layers": entries}, indent=2) + "\n")
    return path


def load_model(directory) -> ModelManifest:
    directory = Path(directory)
    doc = json.loads((directory / "manifest.json").read_text())
    _check_version(doc, "model manifest")
    if doc.get("quantized"):
        raise ValueError(f"{directory} holds a quantized model; use load_quantized")
    layers = [
        LayerSpec(
            e["name"],
            _read_array(directory / e["weight"], e["shape"], "<f4").astype(np.float64),
            e.get("activation", "identity"),
            bool(e.get("is_first", False)),
            bool(e.get("is_last", False)),
        )
        for e in doc["layers"]
    ]
    return ModelManifest(layers, doc["version"])


@dataclass
class Batch:
    x: np.ndarray
    labels: np.ndarray | None = None


def save_dataset(batches, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, b in enumerate(batches):
        if not isinstance(b, Batch):
            b = Batch(np.asarray(b))
        entry = {"file": f"batch_{i:04d}.f32", "shape": list(b.x.shape)}
        _write_f32(directory / entry["file"], b.x)
        if b.labels is not None:
            entry["labels"] = f"batch_{i:04d}.labels.i32"
            (directory / entry["labels"]).write_bytes(
                np.ascontiguousarray(b.labels, dtype="<i4").tobytes()
            )
        entries.append(entry)
    path = directory / "index.json"
    path.write_text(json.dumps({"version": FORMAT_VERSION, "batches": entries}, indent=2) + "\n")
    return path


def load_dataset(directory) -> list[Batch]:
    directory = Path(directory)
    doc = json.loads((directory / "index.json").read_text())
    _check_version(doc, "dataset index")
    batches = []
    for e in doc["batches"]:
        x = _read_array(directory / e["file"], e["shape"], "<f4").astype(np.float64)
        labels = None
        if e.get("labels"):
            labels = _read_array(directory / e["labels"], (e["shape"][0],), "<i4").astype(np.int64)
        batches.append(Batch(x, labels))
    return batches


def _as_batches(batches) -> list[Batch]:
    out = [b if isinstance(b, Batch) else Batch(np.asarray(b, dtype=np.float64)) for b in batches]
    if not out:
        raise ValueError("dataset is empty")
    return out


@dataclass
class QuantizedModel:
    """A model whose layers are either :class:`QuantizedLinear` or left in float."""

    specs: list[LayerSpec]
    layers: list[QuantizedLinear | None]

    def forward(self, x, collect: bool = False):
        x = np.asarray(x, dtype=np.float64)
        inputs = []
        for spec, q in zip(self.specs, self.layers):
            inputs.append(x)
            y = x @ spec.weight.T if q is None else q(x).astype(np.float64)
            x = ACTIVATIONS[spec.activation](y)
        return (x, inputs) if collect else x

    def save(self, directory, extra: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for spec, q in zip(self.specs, self.layers):
            entry = {
                "name": spec.name,
                "activation": spec.activation,
                "is_first": spec.is_first,
                "is_last": spec.is_last,
                "quantized": q is not None,
            }
            if q is None:
                entry["weight"] = f"{spec.name}.f32"
                entry["shape"] = list(spec.weight.shape)
                _write_f32(directory / entry["weight"], spec.weight)
            else:
                _, meta = save_layer(q, directory, spec.name)
                entry["sidecar"] = meta.name
                # float weight kept for error reports
                entry["reference_weight"] = f"{spec.name}.ref.f32"
                entry["shape"] = list(spec.weight.shape)
                _write_f32(directory / entry["reference_weight"], spec.weight)
            entries.append(entry)
        doc = {"version": FORMAT_VERSION, "quantized": True, "layers": entries}
        if extra:
            doc.update(extra)
        path = directory / "manifest.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path


def load_quantized(directory) -> QuantizedModel:
    directory = Path(directory)
    doc = json.loads((directory / "manifest.json").read_text())
    _check_version(doc, "quantized model manifest")
    if not doc.get("quantized"):
        raise ValueError(f"{directory} is not a quantized model directory")
    specs, layers = [], []
    for e in doc["layers"]:
        wfile = e["reference_weight"] if e["quantized"] else e["weight"]
        w = _read_array(directory / wfile, e["shape"], "<f4").astype(np.float64)
        specs.append(LayerSpec(e["name"], w, e.get("activation", "identity"),
                               bool(e.get("is_first")), bool(e.get("is_last"))))
        layers.append(load_layer(directory / e["sidecar"]) if e["quantized"] else None)
    return QuantizedModel(specs, layers)


@dataclass
class RecipeConfig:
    candidates: list[ScalingConfig]
    degradation_threshold: float = -1.0
    skip_first_last: bool = False
    eval_metric: str = "rel_output_error"
    fmt: str = "e4m3"
    rounding: RoundingMode = NEAREST
    overflow: OverflowPolicy = OverflowPolicy.SATURATE

    def __post_init__(self):
        self.candidates = [
            c if isinstance(c, ScalingConfig) else ScalingConfig.from_dict(c) for c in self.candidates
        ]
        if not self.candidates:
            raise ValueError("recipe needs at least one candidate configuration")
        if self.degradation_threshold > 0:
            raise ValueError("degradation_threshold is a tolerated loss and must be <= 0")
        if self.eval_metric not in METRICS:
            raise ValueError(f"unknown eval_metric {self.eval_metric!r}; expected one of {METRICS}")
        self.fmt = get_format(self.fmt).name
        self.rounding = RoundingMode.from_value(self.rounding)
        self.overflow = OverflowPolicy(self.overflow)

    @classmethod
    def from_dict(cls, d: dict) -> "RecipeConfig":
        d = dict(d)
        known = {"candidates", "degradation_threshold", "skip_first_last", "eval_metric",
                 "format", "fmt", "rounding", "overflow"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown recipe config keys: {sorted(extra)}")
        if "format" in d:
            d["fmt"] = d.pop("format")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "candidates": [c.to_dict() for c in self.candidates],
            "degradation_threshold": self.degradation_threshold,
            "skip_first_last": self.skip_first_last,
            "eval_metric": self.eval_metric,
            "format": self.fmt,
            "rounding": self.rounding.to_dict(),
            "overflow": self.overflow.value,
        }


def load_config(path) -> RecipeConfig:
    path = Path(path)
    text = path.read_text()
    doc = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    return RecipeConfig.from_dict(doc)


def evaluate_degradation(baseline: float, quantized: float) -> float:
    """Relative change in percent: ``(quantized - baseline) / |baseline| * 100``."""
    if baseline == 0:
        raise ValueError("relative degradation is undefined for a zero baseline")
    return (quantized - baseline) / abs(baseline) * 100.0


_THROUGHPUT_PRIORITY = {
    "unit": 0,
    "maxabs_per_tensor": 1,
    "opt_per_tensor": 1,
    "maxabs_per_out_channel": 2,
    "opt_per_out_channel": 2,
    "smoothquant_pt": 3,
    "smoothquant_poc": 3,
}


def throughput_rank(config: ScalingConfig) -> int:
    """Static cost rank (0 = cheapest). Not a measured throughput."""
    return _THROUGHPUT_PRIORITY[config.weight_mode]


def run_calibration(model: ModelManifest, batches) -> dict[str, CalibStats]:
    """Propagate calibration batches through the float model and record per-layer maxima."""
    batches = _as_batches(batches)
    stats: dict[str, CalibStats | None] = {l.name: None for l in model.layers}
    for b in batches:
        _, inputs = model.forward(b.x, collect=True)
        for layer, x in zip(model.layers, inputs):
            stats[layer.name] = observe_activation(stats[layer.name], x)
    return {l.name: stats[l.name].with_weight(l.weight) for l in model.layers}


def merge_stats(a: dict[str, CalibStats], b: dict[str, CalibStats]) -> dict[str, CalibStats]:
    if a.keys() != b.keys():
        raise ValueError("stats cover different layers")
    return {k: merge(a[k], b[k]) for k in a}


def quantize_model(
    model: ModelManifest,
    config: ScalingConfig,
    stats: dict[str, CalibStats],
    fmt="e4m3",
    rnd: RoundingMode = NEAREST,
    ovf=OverflowPolicy.SATURATE,
    skip_first_last: bool = False,
) -> QuantizedModel:
    layers = []
    for spec in model.layers:
        if skip_first_last and (spec.is_first or spec.is_last):
            layers.append(None)
            continue
        if spec.name not in stats and config.is_static:
            raise ValueError(f"no calibration statistics for layer {spec.name!r}")
        layers.append(QuantizedLinear.from_weight(spec.weight, config, fmt, stats.get(spec.name), rnd, ovf))
    return QuantizedModel(list(model.layers), layers)


def _softmax_xent(logits, labels) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def _metric(outputs, refs, batches, metric):
    if metric == "rel_output_error":
        num = sum(float(np.sum((o - r) ** 2)) for o, r in zip(outputs, refs))
        den = sum(float(np.sum(r ** 2)) for r in refs)
        return float(np.sqrt(num / den)) if den > 0 else 0.0
    losses, counts = [], []
    for o, r, b in zip(outputs, refs, batches):
        labels = b.labels if b.labels is not None else np.argmax(r, axis=1)
        if labels.shape[0] != o.shape[0] or labels.max() >= o.shape[1] or labels.min() < 0:
            raise ValueError("labels do not fit the model output")
        losses.append(_softmax_xent(o, labels) * len(labels))
        counts.append(len(labels))
    return sum(losses) / sum(counts)


def _signed_degradation(metric: str, baseline: float, value: float) -> float:
    """Degradation in percent with negative meaning worse, whatever the metric."""
    if metric == "rel_output_error":
        # already relative to the float output
        return -100.0 * value
    return -evaluate_degradation(baseline, value)


def evaluate(qmodel, batches, metric: str, refs=None) -> float:
    batches = _as_batches(batches)
    outputs = [qmodel.forward(b.x) for b in batches]
    if refs is None:
        refs = outputs
    return _metric(outputs, refs, batches, metric)


@dataclass
class CandidateResult:
    config: ScalingConfig
    metric: float
    degradation: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "label": self.config.label,
            "config": self.config.to_dict(),
            "metric": self.metric,
            "degradation_pct": self.degradation,
            "passed": self.passed,
            "throughput_rank": throughput_rank(self.config),
        }


@dataclass
class RecipeResult:
    selected: ScalingConfig
    selected_index: int
    passed: bool
    baseline_metric: float
    final_metric: float
    degradation: float
    eval_metric: str
    threshold: float
    layer_reports: dict[str, LayerReport]
    candidates: list[CandidateResult]
    model: QuantizedModel | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "selected": {"index": self.selected_index, "label": self.selected.label,
                         "config": self.selected.to_dict()},
            "passed": self.passed,
            "eval_metric": self.eval_metric,
            "threshold_pct": self.threshold,
            "baseline_metric": self.baseline_metric,
            "final_metric": self.final_metric,
            "degradation_pct": self.degradation,
            "layers": {k: v.to_dict() for k, v in self.layer_reports.items()},
            "candidates": [c.to_dict() for c in self.candidates],
            "throughput_note": "throughput_rank is a static cost priority, not a measurement",
        }

    def to_text(self) -> str:
        lines = [format_table(self.candidates, self.eval_metric, self.baseline_metric), ""]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(
            f"selected: {self.selected.label}  degradation {self.degradation:+.3f}%  "
            f"(threshold {self.threshold:+.3f}%)  {verdict}"
        )
        lines.append("")
        lines.append(f"{'layer':<16} {'weight_err_fro':>16} {'output_err_rel':>16} {'clips':>7}")
        for name, rep in self.layer_reports.items():
            note = "  (skipped)" if rep.scales_used.get("skipped") else ""
            lines.append(
                f"{name:<16} {rep.weight_err_fro:>16.6g} {rep.output_err_rel:>16.6g} "
                f"{rep.clip_count:>7d}{note}"
            )
        return "\n".join(lines)


def format_table(rows: list[CandidateResult], metric: str, baseline: float) -> str:
    width = max([len("Configuration")] + [len(r.config.label) for r in rows]) + 2
    out = [f"{'Configuration':<{width}} {metric:>18} {'Delta (%)':>10} {'rank':>5} {'pass':>5}"]
    out.append(f"{'float reference':<{width}} {baseline:>18.6g} {'--':>10} {'':>5} {'':>5}")
    for r in rows:
        out.append(
            f"{r.config.label:<{width}} {r.metric:>18.6g} {r.degradation:>+10.3f} "
            f"{throughput_rank(r.config):>5d} {'yes' if r.passed else 'no':>5}"
        )
    return "\n".join(out)


def _baseline(model, batches, metric):
    refs = [model.forward(b.x) for b in batches]
    return refs, _metric(refs, refs, batches, metric)


def _candidate(model, config, stats, recipe, batches, refs, baseline):
    qmodel = quantize_model(model, config, stats, recipe.fmt, recipe.rounding,
                            recipe.overflow, recipe.skip_first_last)
    value = evaluate(qmodel, batches, recipe.eval_metric, refs)
    deg = _signed_degradation(recipe.eval_metric, baseline, value)
    return qmodel, CandidateResult(config, value, deg, deg >= recipe.degradation_threshold)


def compare(model: ModelManifest, recipe: RecipeConfig, stats, batches):
    """Evaluate every candidate; returns (baseline metric, list of CandidateResult)."""
    batches = _as_batches(batches)
    refs, baseline = _baseline(model, batches, recipe.eval_metric)
    rows = [_candidate(model, c, stats, recipe, batches, refs, baseline)[1] for c in recipe.candidates]
    return baseline, rows


def run_recipe(model: ModelManifest, recipe: RecipeConfig, stats: dict[str, CalibStats],
               batches) -> RecipeResult:
    """Select the first candidate (in listed order) within the degradation threshold."""
    batches = _as_batches(batches)
    missing = [l.name for l in model.layers if l.name not in stats]
    if missing and any(c.is_static for c in recipe.candidates):
        raise ValueError(f"missing calibration statistics for layers {missing}")
    for l in model.layers:
        s = stats.get(l.name)
        if s is not None and s.in_channels != l.in_channels:
            raise ValueError(f"stats for {l.name!r} do not match the layer's input channels")

    ranks = [throughput_rank(c) for c in recipe.candidates]
    if ranks != sorted(ranks):
        log.warning("candidates are not ordered cheapest-first; evaluating in the given order")

    refs, baseline = _baseline(model, batches, recipe.eval_metric)
    rows, models = [], []
    chosen = None
    for i, config in enumerate(recipe.candidates):
        qmodel, row = _candidate(model, config, stats, recipe, batches, refs, baseline)
        rows.append(row)
        models.append(qmodel)
        log.info("candidate %s: %s=%.6g delta=%+.3f%%", config.label, recipe.eval_metric,
                 row.metric, row.degradation)
        if row.passed:
            chosen = i
            break
    passed = chosen is not None
    if not passed:
        chosen = int(np.argmax([r.degradation for r in rows]))
    qmodel = models[chosen]

    probe = batches[0].x
    _, probe_inputs = model.forward(probe, collect=True)
    reports = {}
    for spec, q, x in zip(model.layers, qmodel.layers, probe_inputs):
        if q is None:
            reports[spec.name] = LayerReport(0.0, 0.0, 0, {"skipped": True})
        else:
            reports[spec.name] = layer_report(q, spec.weight, x)

    row = rows[chosen]
    return RecipeResult(
        recipe.candidates[chosen], chosen, passed, baseline, row.metric, row.degradation,
        recipe.eval_metric, recipe.degradation_threshold, reports, rows, qmodel,
    )
