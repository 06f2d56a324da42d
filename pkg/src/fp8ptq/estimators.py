"""scikit-learn style wrappers around the codec and the quantized layer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .calibration import MaxAbsCalibrator, observe_activation
from .codec import OverflowPolicy, RoundingMode, encode, get_format, round_trip
from .linear import QuantizedLinear, forward, layer_report
from .scaling import ScalingConfig

__all__ = ["FP8Cast", "FP8Linear", "MaxAbsCalibrator"]


def _rounding(kind: str, seed: int) -> RoundingMode:
    return RoundingMode(kind, int(seed))


class FP8Cast(TransformerMixin, BaseEstimator):
    """Elementwise quantize-dequantize through an FP8 format.

    Stateless: ``fit`` only validates parameters and records the input width.

    Parameters
    ----------
    fmt : {"e4m3", "e4m3_gaudi2", "e5m2"}, default="e4m3"
    rounding : {"nearest_even", "stochastic"}, default="nearest_even"
    seed : int, default=0
        Key for stochastic rounding draws.
    overflow : {"saturate", "to_special"}, default="saturate"
    """

    def __init__(self, fmt="e4m3", rounding="nearest_even", seed=0, overflow="saturate"):
        self.fmt = fmt
        self.rounding = rounding
        self.seed = seed
        self.overflow = overflow

    def fit(self, X, y=None):
        get_format(self.fmt)
        _rounding(self.rounding, self.seed)
        OverflowPolicy(self.overflow)
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but FP8Cast was fitted with {self.n_features_in_}"
            )
        return X

    def transform(self, X):
        X = self._check(X)
        return round_trip(X, self.fmt, _rounding(self.rounding, self.seed), self.overflow)

    def encode(self, X):
        """FP8 code bytes (uint8) for ``X``."""
        X = self._check(X)
        return encode(X, self.fmt, _rounding(self.rounding, self.seed), self.overflow)


class FP8Linear(TransformerMixin, BaseEstimator):
    """A linear map ``X -> X W^T`` executed as a scaled FP8 GEMM.

    ``fit`` calibrates activation statistics on ``X`` (static scaling) and
    quantizes the weight; ``partial_fit`` streams more calibration batches;
    ``transform`` runs the quantized forward pass and returns float32.

    Parameters
    ----------
    weight : array-like of shape (n_out, n_in)
    fmt : str, default="e4m3"
    act_mode : str, default="per_tensor_static"
    weight_mode : str, default="maxabs_per_tensor"
    beta : float, default=1.0
        Backoff applied to the activation range.
    alpha : float, default=0.5
        SmoothQuant migration strength.
    scale_rounding : str or dict, default="none"
        ``"none"``, ``"pow2"``, ``"gaudi2"``, ``"gaudi3"`` or ``{"hw_set": [...]}``.
    search_space : str or list, default="pow2"
        Candidate scales for the ``opt_*`` weight modes.
    rounding : str, default="nearest_even"
    seed : int, default=0
    overflow : str, default="saturate"
    bf16_output : bool, default=False
        Round outputs to bfloat16 precision.

    Attributes
    ----------
    layer_ : QuantizedLinear
    stats_ : CalibStats or None
    n_features_in_ : int
    """

    def __init__(
        self,
        weight=None,
        fmt="e4m3",
        act_mode="per_tensor_static",
        weight_mode="maxabs_per_tensor",
        beta=1.0,
        alpha=0.5,
        scale_rounding="none",
        search_space="pow2",
        rounding="nearest_even",
        seed=0,
        overflow="saturate",
        bf16_output=False,
    ):
        self.weight = weight
        self.fmt = fmt
        self.act_mode = act_mode
        self.weight_mode = weight_mode
        self.beta = beta
        self.alpha = alpha
        self.scale_rounding = scale_rounding
        self.search_space = search_space
        self.rounding = rounding
        self.seed = seed
        self.overflow = overflow
        self.bf16_output = bf16_output

    def _config(self) -> ScalingConfig:
        return ScalingConfig(
            self.act_mode, self.weight_mode, self.beta, self.alpha,
            self.scale_rounding, self.search_space,
        )

    def _weight(self):
        if self.weight is None:
            raise ValueError("FP8Linear needs a weight matrix")
        return check_array(self.weight, dtype=np.float64)

    def _build(self, stats):
        self.layer_ = QuantizedLinear.from_weight(
            self._weight(), self._config(), self.fmt, stats,
            _rounding(self.rounding, self.seed), self.overflow, self.bf16_output,
        )

    def fit(self, X=None, y=None):
        for attr in ("stats_", "layer_", "n_features_in_"):
            self.__dict__.pop(attr, None)
        config = self._config()
        w = self._weight()
        if X is None:
            if config.is_static and config.weight_mode != "unit":
                raise ValueError("static activation scaling needs calibration data X")
            self.stats_ = None
            self.n_features_in_ = w.shape[1]
            self._build(None)
            return self
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        w = self._weight()
        if X.shape[1] != w.shape[1]:
            raise ValueError(f"X has {X.shape[1]} features, weight expects {w.shape[1]}")
        self.stats_ = observe_activation(getattr(self, "stats_", None), X).with_weight(w)
        self.n_features_in_ = X.shape[1]
        self._build(self.stats_)
        return self

    def transform(self, X):
        check_is_fitted(self, "layer_")
        X = check_array(X, dtype=np.float64)
        return forward(self.layer_, X)

    def predict(self, X):
        return self.transform(X)

    def report(self, X):
        """:class:`LayerReport` for probe batch ``X`` against the float weight."""
        check_is_fitted(self, "layer_")
        return layer_report(self.layer_, self._weight(), check_array(X, dtype=np.float64))
