"""Functional segmentor and patch discriminator over flat parameter vectors.

Every model is a pair ``(config, params)`` where ``params`` is a 1-D tensor
holding all trainable weights in a fixed canonical order (see ``layout``).
Keeping the weights flat makes the L1 distance between an expert and the
student a plain vector norm, and lets optimizers treat each model as a
single leaf tensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

ParamVector = torch.Tensor


@dataclass(frozen=True)
class SegmentorConfig:
    """Encoder-decoder with skip connections.

    ``depth`` stride-2 stages down, ``depth`` nearest-neighbour stages up,
    ReLU everywhere, no normalization layers.
    """

    num_classes: int
    base_width: int = 16
    depth: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.depth + 1)]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        w = self.widths()
        entries = [("stem.w", (w[0], 3, 3, 3)), ("stem.b", (w[0],))]
        for i in range(1, self.depth + 1):
            entries += [(f"down{i}.w", (w[i], w[i - 1], 3, 3)), (f"down{i}.b", (w[i],))]
        for i in range(self.depth, 0, -1):
            entries += [
                (f"up{i}.w", (w[i - 1], w[i] + w[i - 1], 3, 3)),
                (f"up{i}.b", (w[i - 1],)),
            ]
        entries += [("head.w", (self.num_classes, w[0], 1, 1)), ("head.b", (self.num_classes,))]
        return entries

    @property
    def num_params(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Three 4x4 stride-2 convs plus a 3x3 head, leaky ReLU (slope 0.2)."""

    num_classes: int
    base_width: int = 16
    negative_slope: float = 0.2

    def widths(self) -> list[int]:
        b = self.base_width
        return [self.num_classes, b, 2 * b, 4 * b]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        w = self.widths()
        entries = []
        for i in range(1, 4):
            entries += [(f"conv{i}.w", (w[i], w[i - 1], 4, 4)), (f"conv{i}.b", (w[i],))]
        entries += [("head.w", (1, w[3], 3, 3)), ("head.b", (1,))]
        return entries

    @property
    def num_params(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())


ModelConfig = SegmentorConfig | DiscriminatorConfig


def unflatten(params: ParamVector, config: ModelConfig) -> dict[str, torch.Tensor]:
    """Split a flat vector into named views (no copy)."""
    layout = config.layout()
    if params.ndim != 1 or params.numel() != config.num_params:
        raise ValueError(
            f"expected flat vector of length {config.num_params}, got shape {tuple(params.shape)}"
        )
    sizes = [math.prod(shape) for _, shape in layout]
    chunks = torch.split(params, sizes)
    return {name: c.view(shape) for (name, shape), c in zip(layout, chunks)}


def init_bound(fan_in: int) -> float:
    """He-uniform bound for a layer with the given fan-in."""
    return math.sqrt(6.0 / fan_in)


def init_params(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> ParamVector:
    """He-style fan-in uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in config.layout():
        if name.endswith(".b"):
            parts.append(np.zeros(math.prod(shape)))
        else:
            bound = init_bound(math.prod(shape[1:]))
            parts.append(rng.uniform(-bound, bound, size=math.prod(shape)))
    return torch.from_numpy(np.concatenate(parts)).to(dtype)


def max_init_bound(config: ModelConfig) -> float:
    return max(init_bound(math.prod(s[1:])) for n, s in config.layout() if n.endswith(".w"))


def clone_params(params: ParamVector) -> ParamVector:
    return params.detach().clone()


def segmentor_forward(params: ParamVector, images: torch.Tensor, config: SegmentorConfig) -> torch.Tensor:
    """Per-pixel class logits.

    Args:
        params: flat segmentor weights.
        images: ``(N, 3, H, W)`` batch; H and W divisible by ``2**depth``.
        config: architecture the vector was built for.

    Returns:
        ``(N, C, H, W)`` logits at input resolution.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    step = 2**config.depth
    if h % step or w % step:
        raise ValueError(f"image size {h}x{w} not divisible by {step} (depth={config.depth})")
    p = unflatten(params, config)
    x = F.relu(F.conv2d(images, p["stem.w"], p["stem.b"], padding=1))
    skips = [x]
    for i in range(1, config.depth + 1):
        x = F.relu(F.conv2d(x, p[f"down{i}.w"], p[f"down{i}.b"], stride=2, padding=1))
        skips.append(x)
    for i in range(config.depth, 0, -1):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = torch.cat([x, skips[i - 1]], dim=1)
        x = F.relu(F.conv2d(x, p[f"up{i}.w"], p[f"up{i}.b"], padding=1))
    return F.conv2d(x, p["head.w"], p["head.b"])


def discriminator_forward(params: ParamVector, probs: torch.Tensor, config: DiscriminatorConfig) -> torch.Tensor:
    """Pre-sigmoid patch scores ``(N, 1, h, w)`` for ``(N, C, H, W)`` probability maps."""
    if probs.ndim != 4 or probs.shape[1] != config.num_classes:
        raise ValueError(f"expected (N, {config.num_classes}, H, W) maps, got {tuple(probs.shape)}")
    p = unflatten(params, config)
    x = probs
    for i in range(1, 4):
        x = F.leaky_relu(F.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, padding=1),
                         config.negative_slope)
    return F.conv2d(x, p["head.w"], p["head.b"], padding=1)


def predict_probs(params: ParamVector, images: torch.Tensor, config: SegmentorConfig) -> torch.Tensor:
    return torch.softmax(segmentor_forward(params, images, config), dim=1)
