import logging
import math

import numpy as np
import pytest
from PIL import Image

from mirau.datasets import (
    Sample,
    UnlabeledSample,
    blob_mask,
    export_directory,
    generate_synthetic,
    load_directory,
    make_split,
    synth_sample,
)
from mirau.errors import ConfigError, DataError


def test_irregularity_zero_is_exact_ellipse():
    s = synth_sample(64, seed=3, index=0, irregularity=0.0)
    m = s.meta
    direct = blob_mask(64, m["center"], m["axes"], m["angle"], [], 0.0)
    np.testing.assert_array_equal(s.mask[0], direct)
    # boundary pixels sit at normalized radius 1 up to one pixel of rasterization
    yy, xx = np.mgrid[0:64, 0:64] + 0.5
    dy, dx = yy - m["center"][0], xx - m["center"][1]
    c, sn = math.cos(m["angle"]), math.sin(m["angle"])
    rho = np.hypot((c * dx + sn * dy) / m["axes"][0], (-sn * dx + c * dy) / m["axes"][1])
    mask = s.mask[0] > 0
    edge = mask & ~(np.roll(mask, 1, 0) & np.roll(mask, -1, 0) & np.roll(mask, 1, 1) & np.roll(mask, -1, 1))
    tol = 1.5 / min(m["axes"])
    assert np.all(np.abs(rho[edge] - 1.0) <= tol)


def test_area_fraction_bounds():
    samples = generate_synthetic(200, 64, seed=7)
    areas = [s.mask.mean() for s in samples]
    assert min(areas) >= 0.05 and max(areas) <= 0.6


def test_deterministic_per_seed_index():
    a = synth_sample(32, 5, 11)
    b = generate_synthetic(3, 32, 5, start=10)[1]
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert a.id == b.id


def test_sample_ranges():
    for s in generate_synthetic(10, 32, 1):
        assert s.image.dtype == np.float32 and s.image.shape == (3, 32, 32)
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0.0, 1.0}


def test_size_guard():
    with pytest.raises(ConfigError):
        generate_synthetic(1, 8, 0)


def test_sample_validation():
    with pytest.raises(DataError):
        Sample("x", np.zeros((3, 4, 4)), np.full((1, 4, 4), 0.5))
    with pytest.raises(DataError):
        Sample("x", np.full((3, 4, 4), 1.5))


def _write(root, name, arr, mode=None):
    Image.fromarray(arr, mode).save(root / name)


def test_load_directory(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    rng = np.random.default_rng(0)
    _write(tmp_path / "images", "a.jpg", rng.integers(0, 255, (572, 769, 3), dtype=np.uint8))
    mask = np.zeros((572, 769), np.uint8)
    mask[:286] = 200
    mask[286:] = 100
    _write(tmp_path / "masks", "a.png", mask)
    _write(tmp_path / "images", "b.png", rng.integers(0, 255, (40, 40, 3), dtype=np.uint8))
    samples = load_directory(tmp_path, 64)
    assert [s.id for s in samples] == ["a"]  # b has no mask and is skipped
    s = samples[0]
    assert s.image.shape == (3, 64, 64)
    assert s.mask[0, :32].min() == 1.0 and s.mask[0, 32:].max() == 0.0


def test_stem_mismatch_reported(tmp_path, caplog):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    _write(tmp_path / "images", "a.png", np.zeros((8, 8, 3), np.uint8))
    _write(tmp_path / "masks", "zz.png", np.zeros((8, 8), np.uint8))
    with caplog.at_level(logging.WARNING):
        assert load_directory(tmp_path, 16) == []
    assert "zz" in caplog.text and "a" in caplog.text


def test_missing_masks_dir_means_unlabeled(tmp_path):
    (tmp_path / "images").mkdir()
    _write(tmp_path / "images", "a.png", np.zeros((8, 8, 3), np.uint8))
    samples = load_directory(tmp_path, 16)
    assert len(samples) == 1 and samples[0].mask is None


def test_unreadable_file_names_id(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "images" / "broken.png").write_bytes(b"not a png")
    with pytest.raises(DataError, match="broken"):
        load_directory(tmp_path, 16)


def test_export_roundtrip(tmp_path):
    samples = generate_synthetic(4, 32, 2)
    export_directory(samples, tmp_path)
    back = load_directory(tmp_path, 32)
    assert [s.id for s in back] == [s.id for s in samples]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


class TestSplit:
    def samples(self, n):
        img = np.zeros((3, 4, 4), np.float32)
        return [Sample(f"s{i:03d}", img, np.zeros((1, 4, 4), np.float32)) for i in range(n)]

    def test_half_of_450(self):
        plan = make_split(self.samples(450), 0.5, seed=0)
        assert len(plan.labeled_ids) == 225 and len(plan.unlabeled_ids) == 225

    @pytest.mark.parametrize("fraction", [0.1, 0.25, 0.5, 0.37])
    def test_disjoint_cover(self, fraction):
        samples = self.samples(90)
        plan = make_split(samples, fraction, seed=4)
        lab, unl = set(plan.labeled_ids), set(plan.unlabeled_ids)
        assert not lab & unl
        assert lab | unl == {s.id for s in samples}
        assert len(lab) == math.floor(fraction * 90 + 0.5)

    def test_full_fraction(self):
        plan = make_split(self.samples(10), 1.0, seed=0)
        assert plan.unlabeled_ids == ()

    def test_deterministic(self):
        a = make_split(self.samples(50), 0.3, seed=9)
        b = make_split(self.samples(50)[::-1], 0.3, seed=9)
        assert a == b
        assert make_split(self.samples(50), 0.3, seed=10) != a

    def test_zero_labels_rejected(self):
        with pytest.raises(ConfigError):
            make_split(self.samples(3), 0.1, seed=0)
        with pytest.raises(ConfigError):
            make_split(self.samples(3), 0.0, seed=0)

    def test_partition_hides_masks(self):
        samples = self.samples(20)
        labeled, unlabeled, vault = make_split(samples, 0.25, 1).partition(samples)
        assert all(isinstance(u, UnlabeledSample) and not hasattr(u, "mask") for u in unlabeled)
        assert len(vault) == 15 and vault.reads == 0
        vault.get(unlabeled[0].id)
        assert vault.reads == 1
