import numpy as np
import pytest
from PIL import Image

from xaimeter.datasets import (SHAPES, gaze_map, gen_synthetic_dataset, load_dataset_dir, load_external_dataset,
                               save_dataset, shape_mask)


def test_synthetic_dataset_contract():
    ds = gen_synthetic_dataset(30, 32, 3, seed=4)
    assert ds.images.shape == (30, 32, 32, 3) and ds.images.dtype == np.uint8
    assert sorted(np.bincount(ds.labels)) == [10, 10, 10]
    np.testing.assert_allclose(ds.gaze.sum(axis=(1, 2)), 1.0)
    assert np.all(ds.gaze >= 0)


def test_synthetic_dataset_deterministic():
    a = gen_synthetic_dataset(5, seed=9)
    b = gen_synthetic_dataset(5, seed=9)
    c = gen_synthetic_dataset(5, seed=10)
    assert a.checksum() == b.checksum() != c.checksum()


def test_gaze_peaks_on_the_shape():
    ds = gen_synthetic_dataset(10, 32, 5, seed=2)
    for img, gz in zip(ds.images, ds.gaze):
        peak = np.unravel_index(np.argmax(gz), gz.shape)
        # the shape colour has one channel >= 170; the background stays below ~160
        assert img[peak].max() >= 150


@pytest.mark.parametrize("kind", SHAPES)
def test_shape_masks_are_non_empty_and_centred(kind):
    m = shape_mask(kind, 32, (16.0, 16.0), 7.0)
    assert 20 < m.sum() < 32 * 32 / 2
    assert m[16, 16]


def test_gaze_map_is_normalised_gaussian():
    g = gaze_map(16, (8.0, 8.0), 2.0)
    assert g.sum() == pytest.approx(1.0)
    assert np.unravel_index(np.argmax(g), g.shape) == (8, 8)


@pytest.mark.parametrize("kw", [dict(n=0), dict(n=3, size=8), dict(n=3, classes=6)])
def test_invalid_arguments(kw):
    with pytest.raises(ValueError):
        gen_synthetic_dataset(**kw)


def test_save_load_round_trip(tmp_path):
    ds = gen_synthetic_dataset(6, seed=3)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset_dir(tmp_path / "d")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.names == ds.names
    np.testing.assert_allclose(back.gaze, ds.gaze, rtol=0, atol=1e-6)


def test_external_missing_gaze_names_the_file(tmp_path):
    (tmp_path / "img").mkdir()
    (tmp_path / "gaze").mkdir()
    for name in ("a", "b"):
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "img" / f"{name}.png")
    Image.fromarray(np.ones((16, 16), np.uint8)).save(tmp_path / "gaze" / "a.png")
    with pytest.raises(FileNotFoundError, match="b.png"):
        load_external_dataset(tmp_path / "img", tmp_path / "gaze")


def test_external_shape_mismatch(tmp_path):
    (tmp_path / "img").mkdir()
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "img" / "a.png")
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "img" / "b.png")
    with pytest.raises(ValueError, match="b.png"):
        load_external_dataset(tmp_path / "img")


def test_external_grayscale_is_expanded_and_unlabelled(tmp_path):
    (tmp_path / "img").mkdir()
    Image.fromarray(np.full((16, 16), 7, np.uint8)).save(tmp_path / "img" / "a.png")
    ds = load_external_dataset(tmp_path / "img")
    assert ds.images.shape == (1, 16, 16, 3) and ds.labels is None and not ds.has_gaze
