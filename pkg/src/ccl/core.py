"""Shared domain types, the multi-domain dataset, batching and on-disk layout."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

IGNORE = 255
MIN_SIZE = 8


class ConfigError(ValueError):
    """Invalid configuration or dataset contract violation."""


class NumericalError(RuntimeError):
    """A loss term became non-finite."""


@dataclass(frozen=True)
class DomainSample:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    label: np.ndarray | None  # (H, W) uint8, IGNORE = 255
    domain_id: int


@dataclass
class DomainSplit:
    """All images of one split of one domain, stored as stacked arrays."""

    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray | None  # (N, H, W) uint8
    domain_id: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ConfigError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if self.images.shape[1] < MIN_SIZE or self.images.shape[2] < MIN_SIZE:
            raise ConfigError(f"images must be at least {MIN_SIZE}x{MIN_SIZE}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("image values must lie in [0, 1]")
        if self.labels is not None and self.labels.shape != self.images.shape[:3]:
            raise ConfigError(f"labels shape {self.labels.shape} does not match images {self.images.shape[:3]}")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> DomainSample:
        label = None if self.labels is None else self.labels[i]
        return DomainSample(self.images[i], label, self.domain_id)

    @property
    def labeled(self) -> bool:
        return self.labels is not None


@dataclass
class MultiDomainDataset:
    """One labeled source split, M unlabeled target train splits, M labeled eval splits."""

    source: DomainSplit
    targets: list[DomainSplit]
    eval_splits: list[DomainSplit]
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.targets:
            raise ConfigError("at least one target domain is required")
        if len(self.eval_splits) != len(self.targets):
            raise ConfigError(f"{len(self.targets)} target splits but {len(self.eval_splits)} eval splits")
        if self.source.domain_id != 0 or not self.source.labeled:
            raise ConfigError("source split must be labeled with domain_id 0")
        for m, (t, e) in enumerate(zip(self.targets, self.eval_splits), start=1):
            if t.domain_id != m or e.domain_id != m:
                raise ConfigError(f"target {m} has mismatched domain ids ({t.domain_id}, {e.domain_id})")
            if t.labeled:
                raise ConfigError(f"target train split {m} must not carry labels")
            if not e.labeled:
                raise ConfigError(f"eval split {m} must be labeled")
        for split in [self.source, *self.eval_splits]:
            valid = split.labels[split.labels != IGNORE]
            if valid.size and valid.max() >= self.num_classes:
                raise ConfigError(f"label {valid.max()} out of range for {self.num_classes} classes")

    @property
    def M(self) -> int:
        return len(self.targets)

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.source.images.shape[1:3])

    def combined_targets(self) -> MultiDomainDataset:
        """Dataset whose single target is the union of all target splits (same for eval)."""
        union = DomainSplit(np.concatenate([t.images for t in self.targets]), None, 1)
        union_eval = DomainSplit(np.concatenate([e.images for e in self.eval_splits]),
                                 np.concatenate([e.labels for e in self.eval_splits]), 1)
        return MultiDomainDataset(self.source, [union], [union_eval], self.num_classes, dict(self.meta))

    def subset(self, target_ids: list[int]) -> MultiDomainDataset:
        """Dataset restricted to the given (1-based) target domains, renumbered 1..k."""
        targets, evals = [], []
        for new_id, m in enumerate(target_ids, start=1):
            t, e = self.targets[m - 1], self.eval_splits[m - 1]
            targets.append(DomainSplit(t.images, None, new_id))
            evals.append(DomainSplit(e.images, e.labels, new_id))
        return MultiDomainDataset(self.source, targets, evals, self.num_classes, dict(self.meta))


@dataclass
class DomainBatch:
    images: np.ndarray  # (B, H, W, 3)
    labels: np.ndarray | None
    indices: np.ndarray
    domain_id: int


@dataclass
class StepBatch:
    step: int
    source: DomainBatch
    targets: list[DomainBatch]


def _epoch_order(n: int, seed: int, domain_id: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, domain_id, epoch]).permutation(n)


def sample_indices(n: int, batch_size: int, seed: int, domain_id: int, step: int) -> np.ndarray:
    """Indices drawn at ``step`` for one domain: sequential slices of a per-epoch shuffle."""
    per_epoch = n // batch_size
    epoch, k = divmod(step, per_epoch)
    return _epoch_order(n, seed, domain_id, epoch)[k * batch_size:(k + 1) * batch_size]


def batch_iterator(dataset: MultiDomainDataset, batch_size: int, seed: int,
                   start_step: int = 0) -> Iterator[StepBatch]:
    """Infinite stream of one source batch and M target batches per step.

    Each domain is sampled independently. Batches at a given step depend only on
    ``(seed, domain, step)``, so a stream can be resumed at ``start_step``.
    Target batches never carry labels.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    splits = [dataset.source, *dataset.targets]
    for s in splits:
        if len(s) == 0:
            raise ConfigError(f"domain {s.domain_id} has an empty training split")
        if batch_size > len(s):
            raise ConfigError(f"batch_size {batch_size} exceeds size {len(s)} of domain {s.domain_id}")

    def draw(split: DomainSplit, step: int, labeled: bool) -> DomainBatch:
        idx = sample_indices(len(split), batch_size, seed, split.domain_id, step)
        labels = split.labels[idx] if labeled else None
        return DomainBatch(split.images[idx], labels, idx, split.domain_id)

    step = start_step
    while True:
        yield StepBatch(step, draw(dataset.source, step, True),
                        [draw(t, step, False) for t in dataset.targets])
        step += 1


# ---------------------------------------------------------------- disk layout

def _write_split(split: DomainSplit, root: Path, rel: str) -> dict:
    img_dir = root / rel / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(split.images):
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(img_dir / f"{i:05d}.png")
    if split.labels is not None:
        lab_dir = root / rel / "labels"
        lab_dir.mkdir(parents=True, exist_ok=True)
        for i, lab in enumerate(split.labels):
            Image.fromarray(lab.astype(np.uint8)).save(lab_dir / f"{i:05d}.png")
    return {"dir": rel, "domain_id": split.domain_id, "count": len(split), "labeled": split.labeled}


def _read_split(root: Path, entry: dict) -> DomainSplit:
    base = root / entry["dir"]
    n = entry["count"]
    images = np.stack([np.asarray(Image.open(base / "images" / f"{i:05d}.png").convert("RGB"))
                       for i in range(n)]).astype(np.float32) / 255.0
    labels = None
    if entry["labeled"]:
        labels = np.stack([np.asarray(Image.open(base / "labels" / f"{i:05d}.png"))
                           for i in range(n)]).astype(np.uint8)
    return DomainSplit(images, labels, entry["domain_id"])


def save_dataset(dataset: MultiDomainDataset, root: str | Path) -> Path:
    """Write one directory per domain (PNG images/labels) plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = {"source": _write_split(dataset.source, root, "domain_0/train")}
    for m, (t, e) in enumerate(zip(dataset.targets, dataset.eval_splits), start=1):
        splits[f"target_{m}/train"] = _write_split(t, root, f"domain_{m}/train")
        splits[f"target_{m}/eval"] = _write_split(e, root, f"domain_{m}/eval")
    manifest = {"num_classes": dataset.num_classes, "M": dataset.M,
                "image_size": list(dataset.image_size), "splits": splits, **dataset.meta}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_dataset(root: str | Path) -> MultiDomainDataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    splits = manifest["splits"]
    M = manifest["M"]
    meta = {k: v for k, v in manifest.items() if k not in ("num_classes", "M", "image_size", "splits")}
    return MultiDomainDataset(
        source=_read_split(root, splits["source"]),
        targets=[_read_split(root, splits[f"target_{m}/train"]) for m in range(1, M + 1)],
        eval_splits=[_read_split(root, splits[f"target_{m}/eval"]) for m in range(1, M + 1)],
        num_classes=manifest["num_classes"],
        meta=meta,
    )
