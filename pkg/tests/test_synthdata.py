import hashlib
import itertools

import numpy as np
import pytest

from ccl.core import ConfigError, save_dataset
from ccl.styletransfer import rgb_to_lab
from ccl.synthdata import (BenchmarkSpec, DomainStyle, SceneSpec, SplitSizes, class_frequencies, default_palette,
                           default_styles, generate_benchmark, hidden_target_labels, nearest_centroid_error,
                           render_labels)


def test_default_benchmark_shape_contract(default_dataset):
    ds = default_dataset
    assert ds.M == 2 and ds.num_classes == 5 and ds.image_size == (64, 64)
    assert len(ds.source) == 200 and ds.source.labeled
    assert [len(t) for t in ds.targets] == [100, 100]
    assert not any(t.labeled for t in ds.targets)
    assert [len(e) for e in ds.eval_splits] == [50, 50]
    assert all(e.labeled for e in ds.eval_splits)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_same_seed_gives_byte_identical_pngs(tmp_path):
    spec = BenchmarkSpec(SceneSpec(image_size=(32, 32)), sizes=SplitSizes(8, 6, 5), seed=4)
    a = save_dataset(spec.generate(), tmp_path / "a")
    b = save_dataset(spec.generate(), tmp_path / "b")
    assert _digest(a) == _digest(b)
    c = save_dataset(BenchmarkSpec(spec.scene, sizes=spec.sizes, seed=5).generate(), tmp_path / "c")
    assert _digest(a) != _digest(c)


def test_domain_lab_means_differ_beyond_standard_error(default_dataset):
    ds = default_dataset
    splits = [ds.source.images, *[t.images for t in ds.targets]]
    means, ses = [], []
    for imgs in splits:
        per_image = np.stack([rgb_to_lab(im.astype(np.float64)).reshape(-1, 3).mean(0) for im in imgs])
        means.append(per_image.mean(0))
        ses.append(per_image.std(0, ddof=1) / np.sqrt(len(per_image)))
    for a, b in itertools.combinations(range(len(splits)), 2):
        gap = np.abs(means[a] - means[b])
        assert np.all(gap > 5 * np.maximum(ses[a], ses[b])), (a, b, gap)


def test_class_frequencies_agree_across_domains(default_dataset):
    ds = default_dataset
    hidden = hidden_target_labels(SceneSpec(), SplitSizes(), 1, 2)
    freqs = [class_frequencies(ds.source.labels, 5), *[class_frequencies(h, 5) for h in hidden]]
    spread = np.max(freqs, 0) - np.min(freqs, 0)
    assert spread.max() < 0.02


def test_nearest_centroid_oracle_shows_domain_shift(default_dataset):
    assert min(nearest_centroid_error(default_dataset)) >= 0.20


def test_every_class_in_every_split(default_dataset):
    ds = default_dataset
    for labels in [ds.source.labels, *[e.labels for e in ds.eval_splits]]:
        assert set(np.unique(labels)) == set(range(5))
    for h in hidden_target_labels(SceneSpec(), SplitSizes(), 1, 2):
        assert set(np.unique(h)) == set(range(5))


def test_images_in_unit_range_and_one_label_per_pixel(default_dataset):
    ds = default_dataset
    for imgs in [ds.source.images, *[t.images for t in ds.targets]]:
        assert imgs.min() >= 0 and imgs.max() <= 1
    assert ds.source.labels.max() < 5


def test_extreme_style_stays_in_range():
    style = DomainStyle(default_palette(3), lab_shift=(80.0, 120.0, -120.0), lab_scale=(3.0, 3.0, 3.0), noise=0.5)
    rgb = np.random.default_rng(0).random((16, 16, 3))
    out = style.apply(rgb, np.random.default_rng(1))
    assert out.min() >= 0 and out.max() <= 1


def test_labels_depend_only_on_index_and_seed():
    spec = SceneSpec()
    a = render_labels(spec, np.random.default_rng([1, 0, 0, 3]), 3)
    b = render_labels(spec, np.random.default_rng([1, 0, 0, 3]), 3)
    assert np.array_equal(a, b)


def test_fewer_than_two_styles_rejected():
    with pytest.raises(ConfigError):
        generate_benchmark(SceneSpec(), default_styles(2)[:1], SplitSizes(), 1)


def test_bad_spec_values_rejected():
    with pytest.raises(ConfigError):
        SceneSpec(num_classes=1)
    with pytest.raises(ConfigError):
        SplitSizes(0, 10, 10)
    with pytest.raises(ConfigError):
        BenchmarkSpec.from_dict({"colour": "red"})


def test_m_is_configurable():
    ds = BenchmarkSpec(SceneSpec(image_size=(16, 16)), M=3, sizes=SplitSizes(8, 6, 5), seed=2).generate()
    assert ds.M == 3 and [t.domain_id for t in ds.targets] == [1, 2, 3]
