"""Procedural multi-domain segmentation benchmark.

Every domain draws scenes from the same geometry distribution (background plus
rectangles, ellipses and triangles); domains differ only in colour style, a
global L*a*b* affine change plus pixel noise. A colour-statistics gap is
exactly what Reinhard translation can close.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ConfigError, DomainSplit, MultiDomainDataset
from .styletransfer import lab_to_rgb, rgb_to_lab

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")

# Class 0 is background; foreground classes cycle through this palette.
DEFAULT_PALETTE = np.array([
    [0.50, 0.50, 0.50],
    [0.80, 0.25, 0.20],
    [0.25, 0.65, 0.30],
    [0.25, 0.35, 0.80],
    [0.85, 0.75, 0.25],
    [0.65, 0.30, 0.70],
    [0.20, 0.70, 0.75],
    [0.90, 0.55, 0.60],
])


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 5
    shapes_per_image: tuple[int, int] = (3, 8)
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        lo, hi = self.shapes_per_image
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (background plus one shape class)")
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad shapes_per_image range {self.shapes_per_image}")
        if min(self.image_size) < 8:
            raise ConfigError(f"image_size {self.image_size} below 8x8")


@dataclass(frozen=True)
class DomainStyle:
    """Colour style of a domain.

    ``lab_scale`` stretches L about 50 and a/b about 0, then ``lab_shift`` is
    added. ``noise`` is the std of i.i.d. Gaussian RGB noise.
    """

    class_colors: tuple[tuple[float, float, float], ...]
    lab_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lab_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise: float = 0.02

    def __post_init__(self):
        if any(s <= 0 for s in self.lab_scale):
            raise ConfigError(f"lab_scale must be positive, got {self.lab_scale}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")

    def apply(self, rgb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        lab = rgb_to_lab(rgb)
        center = np.array([50.0, 0.0, 0.0])
        lab = (lab - center) * np.asarray(self.lab_scale) + center + np.asarray(self.lab_shift)
        out = lab_to_rgb(lab)
        if self.noise > 0:
            out = out + rng.normal(0.0, self.noise, size=out.shape)
        return np.clip(out, 0.0, 1.0)


def default_palette(num_classes: int) -> tuple[tuple[float, float, float], ...]:
    rows = [DEFAULT_PALETTE[0]] + [DEFAULT_PALETTE[1 + (c - 1) % (len(DEFAULT_PALETTE) - 1)]
                                   for c in range(1, num_classes)]
    return tuple(tuple(float(v) for v in r) for r in rows)


# Hand-picked target looks for the first two targets; further targets are drawn at random.
_PRESET_TARGETS = [
    dict(lab_shift=(-14.0, 30.0, -38.0), lab_scale=(0.75, 0.8, 0.8)),
    dict(lab_shift=(14.0, -30.0, 40.0), lab_scale=(0.7, 0.85, 0.9)),
]


def default_styles(M: int = 2, num_classes: int = 5, seed: int = 0) -> list[DomainStyle]:
    """Source style (identity colour transform) followed by ``M`` target styles."""
    palette = default_palette(num_classes)
    styles = [DomainStyle(palette)]
    rng = np.random.default_rng([seed, 1234])
    for m in range(M):
        if m < len(_PRESET_TARGETS):
            styles.append(DomainStyle(palette, **_PRESET_TARGETS[m]))
        else:
            shift = (rng.uniform(-15, 15), *rng.uniform(-30, 30, size=2))
            scale = tuple(rng.uniform(0.7, 0.9, size=3))
            styles.append(DomainStyle(palette, tuple(float(s) for s in shift),
                                      tuple(float(s) for s in scale)))
    return styles


@dataclass(frozen=True)
class SplitSizes:
    source: int = 200
    target_train: int = 100
    target_eval: int = 50

    def __post_init__(self):
        if min(self.source, self.target_train, self.target_eval) < 1:
            raise ConfigError(f"split sizes must be positive, got {self}")


# ------------------------------------------------------------------ geometry

GRID = 3


def _shape_mask(kind: str, rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    scale = min(h, w) / 64.0
    # Centre jittered inside one cell of a GRID x GRID layout.
    cy = (cell // GRID + rng.uniform()) * h / GRID
    cx = (cell % GRID + rng.uniform()) * w / GRID
    if kind == "rectangle":
        rh, rw = (rng.uniform(16, 32, size=2) * scale)
        return (np.abs(yy - cy) <= rh / 2) & (np.abs(xx - cx) <= rw / 2)
    if kind == "ellipse":
        ay, ax = rng.uniform(8, 16, size=2) * scale
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    if kind == "triangle":
        radius = rng.uniform(11, 20) * scale
        angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3 + rng.uniform(-0.3, 0.3, 3)
        pts = np.stack([cy + radius * np.sin(angles), cx + radius * np.cos(angles)], 1)
        signs = []
        for i in range(3):
            (y0, x0), (y1, x1) = pts[i], pts[(i + 1) % 3]
            signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
        s = np.stack(signs)
        return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)
    raise ValueError(kind)


def render_labels(spec: SceneSpec, rng: np.random.Generator, index: int) -> np.ndarray:
    """Label map of one scene.

    Shape counts cycle through the allowed range with ``index`` and classes
    cycle deterministically, which keeps class marginals stable across
    splits; the topmost shape's class also cycles with ``index`` so every
    class appears in any split of at least ``C - 1`` images.
    """
    h, w = spec.image_size
    labels = np.zeros((h, w), dtype=np.uint8)
    lo, hi = spec.shapes_per_image
    n = lo + index % (hi - lo + 1)
    fg = spec.num_classes - 1
    top = index % fg
    classes = [1 + (top + 1 + k) % fg for k in range(n - 1)] + [1 + top]
    cells = rng.permutation(GRID * GRID)
    for k, cls in enumerate(classes):
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        mask = _shape_mask(kind, rng, h, w, int(cells[k % len(cells)]))
        if not mask.any():
            # Degenerate draw: mark a single pixel so the class is still placed.
            mask[int(rng.integers(h)), int(rng.integers(w))] = True
        labels[mask] = cls
    return labels


def render_image(labels: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    palette = np.asarray(style.class_colors)
    # Per-region brightness jitter gives texture the network must ignore.
    jitter = rng.uniform(-0.06, 0.06, size=(len(palette), 1))
    rgb = np.clip(palette[labels] + jitter[labels], 0, 1)
    out = style.apply(rgb, rng)
    return (np.round(out * 255) / 255).astype(np.float32)


def _split(spec: SceneSpec, style: DomainStyle, n: int, seed: int, domain_id: int,
           split_code: int, labeled: bool) -> DomainSplit:
    images, labels = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, domain_id, split_code, i])
        lab = render_labels(spec, rng, i)
        images.append(render_image(lab, style, rng))
        labels.append(lab)
    labels_arr = np.stack(labels)
    present = np.unique(labels_arr)
    if len(present) < spec.num_classes and n >= spec.num_classes - 1:
        raise ConfigError(f"domain {domain_id} split {split_code} misses classes "
                          f"{sorted(set(range(spec.num_classes)) - set(present.tolist()))}")
    return DomainSplit(np.stack(images), labels_arr if labeled else None, domain_id)


TRAIN, EVAL = 0, 1


def generate_benchmark(spec: SceneSpec, styles: list[DomainStyle], sizes: SplitSizes | tuple[int, int, int],
                       seed: int) -> MultiDomainDataset:
    """Generate source (domain 0) and ``len(styles) - 1`` target domains.

    Image ``i`` of each split is a pure function of ``(seed, domain, split, i)``.
    """
    if len(styles) < 2:
        raise ConfigError(f"need a source style and at least one target style, got {len(styles)}")
    if not isinstance(sizes, SplitSizes):
        sizes = SplitSizes(*sizes)
    for d, st in enumerate(styles):
        if len(st.class_colors) != spec.num_classes:
            raise ConfigError(f"style {d} has {len(st.class_colors)} colours for {spec.num_classes} classes")
    source = _split(spec, styles[0], sizes.source, seed, 0, TRAIN, labeled=True)
    targets, evals = [], []
    for m, st in enumerate(styles[1:], start=1):
        targets.append(_split(spec, st, sizes.target_train, seed, m, TRAIN, labeled=False))
        evals.append(_split(spec, st, sizes.target_eval, seed, m, EVAL, labeled=True))
    meta = {"seed": seed, "scene_spec": asdict(spec), "styles": [asdict(s) for s in styles],
            "sizes": asdict(sizes)}
    return MultiDomainDataset(source, targets, evals, spec.num_classes, meta)


def hidden_target_labels(spec: SceneSpec, sizes: SplitSizes, seed: int, M: int) -> list[np.ndarray]:
    """Regenerate the label maps of the (unlabeled) target train splits, for diagnostics only."""
    out = []
    for m in range(1, M + 1):
        out.append(np.stack([render_labels(spec, np.random.default_rng([seed, m, TRAIN, i]), i)
                             for i in range(sizes.target_train)]))
    return out


def class_frequencies(labels: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(labels[labels < num_classes].ravel(), minlength=num_classes)
    return counts / counts.sum()


def nearest_centroid_error(dataset: MultiDomainDataset) -> list[float]:
    """Fraction of eval pixels per target misclassified by source colour centroids."""
    C = dataset.num_classes
    src_px = dataset.source.images.reshape(-1, 3).astype(np.float64)
    src_lab = dataset.source.labels.ravel()
    centroids = np.stack([src_px[src_lab == c].mean(0) for c in range(C)])
    errors = []
    for e in dataset.eval_splits:
        px = e.images.reshape(-1, 3).astype(np.float64)
        truth = e.labels.ravel()
        d = ((px[:, None, :] - centroids[None]) ** 2).sum(-1)
        errors.append(float(np.mean(d.argmin(1) != truth)))
    return errors


@dataclass
class BenchmarkSpec:
    """Everything needed to regenerate a benchmark; serialisable for the CLI."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    M: int = 2
    sizes: SplitSizes = field(default_factory=SplitSizes)
    seed: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> BenchmarkSpec:
        known = {"num_classes", "shapes_per_image", "image_size", "M", "sizes", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown benchmark keys: {sorted(unknown)}")
        scene = SceneSpec(num_classes=int(d.get("num_classes", 5)),
                          shapes_per_image=tuple(d.get("shapes_per_image", (3, 8))),
                          image_size=tuple(d.get("image_size", (64, 64))))
        sizes = d.get("sizes", {})
        sizes = SplitSizes(**sizes) if isinstance(sizes, dict) else SplitSizes(*sizes)
        M = int(d.get("M", 2))
        if M < 1:
            raise ConfigError(f"M must be >= 1, got {M}")
        return cls(scene, M, sizes, int(d.get("seed", 1)))

    def generate(self) -> MultiDomainDataset:
        styles = default_styles(self.M, self.scene.num_classes, self.seed)
        return generate_benchmark(self.scene, styles, self.sizes, self.seed)
