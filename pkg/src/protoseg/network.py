"""Classifier-free convolutional feature extractor.

The output has ``feature_dim`` channels per pixel regardless of how many
classes are being segmented; classes only enter through the prototypes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    out_channels: int


def _default_layers():
    return (LayerSpec(3, 16), LayerSpec(3, 32), LayerSpec(3, 32), LayerSpec(1, 64))


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    layers: tuple = field(default_factory=_default_layers)

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for i, l in enumerate(layers):
            if l.kernel not in (1, 3):
                raise ValueError(f"layer {i}: kernel size must be 1 or 3, got {l.kernel}")
            if l.out_channels < 1:
                raise ValueError(f"layer {i}: zero-width layer")
        if self.in_channels < 1:
            raise ValueError("zero input channels")

    @property
    def feature_dim(self):
        return self.layers[-1].out_channels

    @classmethod
    def with_feature_dim(cls, dim, in_channels=1):
        layers = _default_layers()[:-1] + (LayerSpec(1, dim),)
        return cls(in_channels, layers)

    def to_dict(self):
        return {"in_channels": self.in_channels, "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["in_channels"], tuple(LayerSpec(**l) for l in d["layers"]))


def param_names(config):
    names = []
    for i in range(len(config.layers)):
        names += [f"conv{i}.weight", f"conv{i}.bias"]
    return names


def init(config, seed):
    """He-normal kernels (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    c_in = config.in_channels
    for i, layer in enumerate(config.layers):
        fan_in = c_in * layer.kernel * layer.kernel
        shape = (layer.out_channels, c_in, layer.kernel, layer.kernel)
        params[f"conv{i}.weight"] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[f"conv{i}.bias"] = np.zeros(layer.out_channels)
        c_in = layer.out_channels
    return params


def clone(params):
    return {k: np.array(v, copy=True) for k, v in params.items()}


def forward(params, image, config):
    """Raw per-pixel features, [D,H,W] (or [B,D,H,W] for a batch).

    ``params`` values may be arrays (frozen) or Tensors (trainable).
    """
    x = ad.as_tensor(image)
    c_axis = 1 if x.ndim == 4 else 0
    if x.shape[c_axis] != config.in_channels:
        raise ad.ShapeError("forward", f"{config.in_channels} input channels", x.shape)
    last = len(config.layers) - 1
    for i, layer in enumerate(config.layers):
        x = ad.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"],
                      padding=(layer.kernel - 1) // 2)
        if i != last:
            x = ad.relu(x)
    return x


def as_trainable(params):
    return {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
