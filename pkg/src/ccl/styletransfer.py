"""sRGB <-> CIE L*a*b* (D65) conversion and Reinhard statistics matching."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

EPS_STD = 1e-4

# sRGB (linear) -> XYZ, IEC 61966-2-1; Y row sums to exactly 1.
_RGB2XYZ = np.array([
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
])
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

_DELTA = 6.0 / 29.0


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """Convert ``(..., 3)`` sRGB values in [0, 1] to L*a*b* (float64)."""
    rgb = np.asarray(image, dtype=np.float64)
    xyz = _srgb_to_linear(rgb) @ _RGB2XYZ.T / D65_WHITE
    fx, fy, fz = (_f(xyz[..., i]) for i in range(3))
    return np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut results are clamped to [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * D65_WHITE
    rgb = _linear_to_srgb(xyz @ _XYZ2RGB.T)
    return np.clip(rgb, 0.0, 1.0)


@dataclass(frozen=True)
class StyleStats:
    """Per-channel L*a*b* mean and standard deviation of a domain."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    sample_count: int

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "sample_count": self.sample_count}

    @classmethod
    def from_dict(cls, d: dict) -> StyleStats:
        std = tuple(max(float(s), EPS_STD) for s in d["std"])
        return cls(tuple(float(m) for m in d["mean"]), std, int(d.get("sample_count", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> StyleStats:
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_style(images: Iterable[np.ndarray]) -> StyleStats:
    """Pooled L*a*b* statistics over every pixel of every image.

    Sums are exactly rounded (``math.fsum``), so the result does not depend on
    image order or batching. Standard deviations use the population form and
    are clamped at ``EPS_STD``.
    """
    labs = [rgb_to_lab(img).reshape(-1, 3) for img in images]
    if not labs:
        raise ValueError("compute_style needs at least one image")
    pixels = np.concatenate(labs)
    n = len(pixels)
    mean, std = [], []
    for c in range(3):
        col = pixels[:, c]
        mu = math.fsum(col.tolist()) / n
        var = math.fsum(((col - mu) ** 2).tolist()) / n
        mean.append(mu)
        std.append(max(math.sqrt(var), EPS_STD))
    return StyleStats(tuple(mean), tuple(std), n)


def translate_lab(image: np.ndarray, source_stats: StyleStats, target_stats: StyleStats) -> np.ndarray:
    """Restyled image in L*a*b*, before gamut clamping."""
    lab = rgb_to_lab(image)
    mu_s, sd_s = np.asarray(source_stats.mean), np.asarray(source_stats.std)
    mu_t, sd_t = np.asarray(target_stats.mean), np.asarray(target_stats.std)
    return (lab - mu_s) / sd_s * sd_t + mu_t


def translate(image: np.ndarray, source_stats: StyleStats, target_stats: StyleStats) -> np.ndarray:
    """Move an image (or a ``(..., 3)`` batch) from one domain's colour statistics to another's."""
    return lab_to_rgb(translate_lab(image, source_stats, target_stats))
