"""Small synthetic models and datasets with activation outliers."""

from __future__ import annotations

import numpy as np

from .recipe import Batch, LayerSpec, ModelManifest

__all__ = ["outlier_channels", "outlier_inputs", "outlier_mlp", "outlier_batches"]


def outlier_channels(in_channels: int, count: int = 4, channel_seed: int = 0) -> np.ndarray:
    """Indices of the input channels that carry outliers; fixed for a given seed."""
    rng = np.random.default_rng(channel_seed)
    return np.sort(rng.choice(in_channels, size=min(count, in_channels), replace=False))


def outlier_inputs(rng, n: int, in_channels: int, hot, outlier_scale: float = 1000.0) -> np.ndarray:
    gain = np.ones(in_channels)
    gain[np.asarray(hot, dtype=int)] = outlier_scale
    return rng.normal(size=(n, in_channels)) * gain


def outlier_mlp(seed: int = 0, dims=(64, 128, 128, 128, 16), weight_std: float = 0.02,
                channel_spread: float = 16.0, logit_std: float = 2.0, n_outliers: int = 4,
                outlier_scale: float = 1000.0, channel_seed: int = 0) -> ModelManifest:
    """ReLU MLP with small weights whose output channels span ``channel_spread``x in magnitude.

    The last layer is rescaled so logits have standard deviation ``logit_std``
    on inputs drawn like :func:`outlier_batches` draws them.
    """
    rng = np.random.default_rng(seed)
    layers = []
    n = len(dims) - 1
    for i in range(n):
        c_in, c_out = dims[i], dims[i + 1]
        gain = channel_spread ** rng.uniform(0, 1, size=(c_out, 1))
        w = rng.normal(scale=weight_std, size=(c_out, c_in)) * gain
        layers.append(LayerSpec(f"fc{i + 1}", w, "identity" if i == n - 1 else "relu"))
    model = ModelManifest(layers)

    hot = outlier_channels(dims[0], n_outliers, channel_seed)
    probe = outlier_inputs(rng, 512, dims[0], hot, outlier_scale)
    std = model.forward(probe).std()
    if std > 0:
        model.layers[-1].weight *= logit_std / std
    return model


def outlier_batches(model: ModelManifest, seed: int = 1, n_batches: int = 4, batch_size: int = 64,
                    n_outliers: int = 4, outlier_scale: float = 1000.0, channel_seed: int = 0,
                    labels: bool = True) -> list[Batch]:
    """Gaussian inputs where a few fixed channels are ``outlier_scale`` times larger.

    Labels, when requested, are sampled from the float model's softmax output.
    """
    rng = np.random.default_rng(seed)
    hot = outlier_channels(model.in_channels, n_outliers, channel_seed)
    out = []
    for _ in range(n_batches):
        x = outlier_inputs(rng, batch_size, model.in_channels, hot, outlier_scale)
        y = None
        if labels:
            logits = model.forward(x)
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            u = rng.random((batch_size, 1))
            y = np.minimum((p.cumsum(axis=1) < u).sum(axis=1), p.shape[1] - 1).astype(np.int32)
        out.append(Batch(x, y))
    return out
