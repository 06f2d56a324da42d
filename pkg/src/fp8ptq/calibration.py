"""Max-abs calibration statistics for activations and weights."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

__all__ = [
    "STATS_VERSION",
    "CalibStats",
    "DynamicStats",
    "WeightStats",
    "observe_activation",
    "measure_weight",
    "measure_dynamic",
    "merge",
    "save_stats",
    "load_stats",
    "MaxAbsCalibrator",
]

STATS_VERSION = 1


def _as_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {x.shape}")
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    return x


@dataclass(frozen=True)
class WeightStats:
    r_w_poc: np.ndarray
    r_w_pic: np.ndarray

    @property
    def r_w(self) -> float:
        return float(self.r_w_poc.max())


@dataclass
class CalibStats:
    """Running per-layer maxima.

    The per-tensor values are derived from the per-channel vectors, so
    ``r_x == max(r_x_pc)`` and ``r_w == max(r_w_poc) == max(r_w_pic)`` hold
    by construction. Weight fields stay ``None`` until a weight is measured.
    """

    r_x_pc: np.ndarray
    r_w_poc: np.ndarray | None = None
    r_w_pic: np.ndarray | None = None
    batches_seen: int = 0

    @classmethod
    def fresh(cls, in_channels: int) -> "CalibStats":
        return cls(np.zeros(in_channels))

    @property
    def in_channels(self) -> int:
        return self.r_x_pc.size

    @property
    def r_x(self) -> float:
        return float(self.r_x_pc.max()) if self.r_x_pc.size else 0.0

    @property
    def r_w(self) -> float | None:
        return None if self.r_w_poc is None else float(self.r_w_poc.max())

    @property
    def has_weight(self) -> bool:
        return self.r_w_poc is not None

    def with_weight(self, w) -> "CalibStats":
        ws = measure_weight(w)
        if ws.r_w_pic.size != self.in_channels:
            raise ValueError(
                f"weight has {ws.r_w_pic.size} input channels, stats have {self.in_channels}"
            )
        return CalibStats(self.r_x_pc.copy(), ws.r_w_poc, ws.r_w_pic, self.batches_seen)

    def to_dict(self) -> dict:
        d = {"r_x": self.r_x, "r_x_pc": self.r_x_pc.tolist(), "batches_seen": self.batches_seen}
        if self.has_weight:
            d.update(r_w=self.r_w, r_w_poc=self.r_w_poc.tolist(), r_w_pic=self.r_w_pic.tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibStats":
        stats = cls(
            np.asarray(d["r_x_pc"], dtype=np.float64),
            None if d.get("r_w_poc") is None else np.asarray(d["r_w_poc"], dtype=np.float64),
            None if d.get("r_w_pic") is None else np.asarray(d["r_w_pic"], dtype=np.float64),
            int(d.get("batches_seen", 0)),
        )
        for key, derived in (("r_x", stats.r_x), ("r_w", stats.r_w)):
            if d.get(key) is not None and derived is not None and not np.isclose(d[key], derived):
                raise ValueError(f"{key}={d[key]} disagrees with its per-channel maximum {derived}")
        return stats


@dataclass(frozen=True)
class DynamicStats:
    r_x_per_sample: np.ndarray = field(repr=False)

    @property
    def r_x_batch(self) -> float:
        return float(self.r_x_per_sample.max())


def observe_activation(stats: CalibStats | None, x) -> CalibStats:
    """Fold one activation batch (N x C_in) into the running maxima."""
    x = _as_matrix(x, "activation batch")
    batch_pc = np.abs(x).max(axis=0)
    if stats is None:
        stats = CalibStats.fresh(x.shape[1])
    if x.shape[1] != stats.in_channels:
        raise ValueError(f"batch has {x.shape[1]} channels, stats track {stats.in_channels}")
    return CalibStats(
        np.maximum(stats.r_x_pc, batch_pc),
        stats.r_w_poc,
        stats.r_w_pic,
        stats.batches_seen + 1,
    )


def measure_weight(w) -> WeightStats:
    """Per-output-channel (row) and per-input-channel (column) max-abs of W."""
    w = np.abs(_as_matrix(w, "weight"))
    return WeightStats(w.max(axis=1), w.max(axis=0))


def measure_dynamic(x) -> DynamicStats:
    x = _as_matrix(x, "activation batch")
    return DynamicStats(np.abs(x).max(axis=1))


def merge(a: CalibStats, b: CalibStats) -> CalibStats:
    """Elementwise max of two accumulators; counts add."""
    if a.in_channels != b.in_channels:
        raise ValueError("cannot merge stats with different input channel counts")

    def _max(u, v):
        if u is None:
            return None if v is None else v.copy()
        if v is None:
            return u.copy()
        if u.shape != v.shape:
            raise ValueError("cannot merge weight stats of different shapes")
        return np.maximum(u, v)

    return CalibStats(
        np.maximum(a.r_x_pc, b.r_x_pc),
        _max(a.r_w_poc, b.r_w_poc),
        _max(a.r_w_pic, b.r_w_pic),
        a.batches_seen + b.batches_seen,
    )


def save_stats(stats: dict[str, CalibStats], path) -> None:
    doc = {"version": STATS_VERSION, "layers": {k: v.to_dict() for k, v in stats.items()}}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_stats(path) -> dict[str, CalibStats]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != STATS_VERSION:
        raise ValueError(f"unsupported stats version {doc.get('version')!r}")
    return {k: CalibStats.from_dict(v) for k, v in doc["layers"].items()}


class MaxAbsCalibrator(BaseEstimator):
    """Streaming max-abs observer with the estimator API.

    Parameters
    ----------
    weight : array-like of shape (n_out, n_in), default=None
        Optional weight whose statistics are attached to ``stats_``.

    Attributes
    ----------
    stats_ : CalibStats
    n_features_in_ : int
    """

    def __init__(self, weight=None):
        self.weight = weight

    def fit(self, X, y=None):
        for attr in ("stats_", "n_features_in_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        stats = observe_activation(getattr(self, "stats_", None), X)
        if self.weight is not None:
            stats = stats.with_weight(self.weight)
        self.stats_ = stats
        self.n_features_in_ = X.shape[1]
        return self
