import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from xaimeter.explainers import (EXPLAINER_KINDS, ExplainerSpec, bilinear_upsample, broadcast_map, explain,
                                 explain_cb_cam, explain_fake_cam, explain_gradcam, explain_integrated_gradients,
                                 explain_smoothgrads, explain_with_slope, gradcam_from_activations, importance_2d,
                                 minmax_normalize, nearest_upsample, parse_explainers, save_saliency_png)
from xaimeter.model import ClassLogitModel, linear_classifier, toy_cnn
from xaimeter.numeric import random_stream


@pytest.fixture
def linear(rng):
    w = rng.normal(size=(3, 8, 8, 3))
    return w, linear_classifier(w, rng.normal(size=3), input_scale=1 / 255)


@pytest.fixture
def image(rng):
    return rng.integers(0, 256, size=(8, 8, 3)).astype(np.float64)


def test_linear_model_maps(linear, image):
    w, clf = linear
    g = ClassLogitModel(clf, 1)
    grads = explain(ExplainerSpec("grads"), g, image)
    np.testing.assert_allclose(grads, w[1] / 255, rtol=1e-12)
    np.testing.assert_allclose(explain(ExplainerSpec("grad-times-input"), g, image), w[1] / 255 * image, rtol=1e-12)
    sg = explain(ExplainerSpec("smoothgrads"), g, image, rng=random_stream(0, "sg"))
    np.testing.assert_allclose(sg, grads, rtol=1e-12)
    ig, slope = explain_with_slope(ExplainerSpec("integrated-gradients"), g, image)
    np.testing.assert_allclose(ig, w[1] / 255 * image, rtol=1e-12)
    np.testing.assert_allclose(slope, grads, rtol=1e-12)


def test_slope_equals_map_for_non_attribution_kinds(linear, image):
    _, clf = linear
    g = ClassLogitModel(clf, 0)
    m, s = explain_with_slope(ExplainerSpec("grads"), g, image)
    assert m is s


def test_gradient_map_matches_finite_differences(rng):
    m = toy_cnn(3, seed=1)
    x = rng.uniform(0, 255, size=(32, 32, 3))
    g = ClassLogitModel(m, 0)
    grads = explain(ExplainerSpec("grads"), g, x)
    for idx in rng.choice(x.size, size=20, replace=False):
        e = np.zeros(x.size)
        e[idx] = 1e-3
        e = e.reshape(x.shape)
        fd = (g(x + e) - g(x - e)) / 2e-3
        assert fd == pytest.approx(grads.ravel()[idx], abs=1e-6)


def test_ig_error_shrinks_with_steps(toy_model, eval_set):
    x = eval_set.images[3].astype(np.float64)
    g = ClassLogitModel(toy_model, toy_model.predict(x))
    delta = g(x) - g(np.zeros_like(x))
    errs = [abs(explain_integrated_gradients(g, x, steps=m).sum() - delta) for m in (5, 50, 1000)]
    assert errs[2] < errs[1] < errs[0]
    assert errs[2] / abs(delta) < 5e-3


def test_smoothgrads_noise_zero_is_grads(toy_model, image):
    g = ClassLogitModel(toy_model, 0)
    x = np.kron(image, np.ones((4, 4, 1)))
    np.testing.assert_array_equal(explain_smoothgrads(g, x, noise=0.0), g.grad(x))


def test_smoothgrads_seeded(toy_model, eval_set):
    g = ClassLogitModel(toy_model, 0)
    x = eval_set.images[0].astype(np.float64)
    a = explain_smoothgrads(g, x, rng=random_stream(1, "s"))
    b = explain_smoothgrads(g, x, rng=random_stream(1, "s"))
    c = explain_smoothgrads(g, x, rng=random_stream(2, "s"))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        explain_smoothgrads(g, x)


@pytest.mark.parametrize("kind", EXPLAINER_KINDS)
def test_batch_matches_single(kind, toy_model, eval_set):
    g = ClassLogitModel(toy_model, 1)
    xs = eval_set.images[:3].astype(np.float64)
    spec = ExplainerSpec(kind)
    batch = explain(spec, g, xs, rng=[random_stream(0, k) for k in range(3)])
    for k, x in enumerate(xs):
        np.testing.assert_allclose(explain(spec, g, x, rng=random_stream(0, k)), batch[k], rtol=1e-10, atol=1e-12)


def test_gradcam_range_and_manual_recomputation(toy_model, eval_set):
    g = ClassLogitModel(toy_model, 2)
    x = eval_set.images[5].astype(np.float64)
    cam = explain_gradcam(g, x)
    assert cam.shape == (32, 32) and cam.min() >= 0 and cam.max() <= 1
    feats, grads = g.conv_features_and_grads(x, "conv2")
    raw = np.maximum(np.einsum("c,chw->hw", grads.mean(axis=(1, 2)), feats), 0)
    np.testing.assert_allclose(cam, minmax_normalize(bilinear_upsample(raw, (32, 32))), atol=1e-12)
    np.testing.assert_allclose(explain_gradcam(g, x, layer="conv2"), cam)
    with pytest.raises(KeyError):
        explain_gradcam(g, x, layer="missing")


def test_gradcam_all_negative_is_zero_map():
    feats = np.ones((2, 4, 4))
    grads = -np.ones((2, 4, 4))
    assert np.all(gradcam_from_activations(feats, grads, (8, 8)) == 0)


def test_bilinear_matches_skimage(rng):
    skt = pytest.importorskip("skimage.transform")
    m = rng.normal(size=(5, 7))
    want = skt.resize(m, (16, 21), order=1, mode="edge", anti_aliasing=False)
    np.testing.assert_allclose(bilinear_upsample(m, (16, 21)), want, atol=1e-12)


def test_bilinear_preserves_constants_and_identity(rng):
    np.testing.assert_allclose(bilinear_upsample(np.full((3, 3), 2.5), (10, 10)), 2.5)
    m = rng.normal(size=(6, 6))
    np.testing.assert_allclose(bilinear_upsample(m, (6, 6)), m)


def test_fake_and_cb_cam_layouts():
    x = np.zeros((32, 32, 3))
    fake = explain_fake_cam(x)
    assert fake.shape == (32, 32)
    assert np.all(fake[:5, :5] == 0) and fake.sum() == 32 * 32 - 25
    cb = explain_cb_cam(x)
    assert np.all(cb[14:19, 14:19] == 1) and cb.sum() == 25
    np.testing.assert_array_equal(nearest_upsample(np.eye(2), (4, 4)), np.kron(np.eye(2), np.ones((2, 2))))


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (16, 16, 3)))
def test_trivial_maps_ignore_the_input(img):
    np.testing.assert_array_equal(explain_fake_cam(img), explain_fake_cam(np.zeros((16, 16, 3))))
    np.testing.assert_array_equal(explain_cb_cam(img), explain_cb_cam(np.zeros((16, 16, 3))))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-1e6, 1e6)))
def test_minmax_range(m):
    out = minmax_normalize(m)
    assert out.min() >= 0 and out.max() <= 1
    if np.ptp(m) > 0:
        assert out.min() == 0 and out.max() == 1


def test_minmax_constant_rules():
    assert np.all(minmax_normalize(np.full((2, 2), 3.0)) == 1)
    assert np.all(minmax_normalize(np.zeros((2, 2))) == 0)
    assert np.all(minmax_normalize(np.full((2, 2), -1.0)) == 0)


def test_importance_and_broadcast():
    s = np.array([[[1.0, -2.0, 3.0]]])
    assert importance_2d(s)[0, 0] == pytest.approx(2.0)
    b = broadcast_map(np.ones((2, 3)), (2, 3, 3))
    assert b.shape == (2, 3, 3)
    with pytest.raises(ValueError):
        broadcast_map(np.ones((2, 2)), (2, 3, 3))


def test_parse_explainers():
    specs = parse_explainers("grads, smoothgrads:samples=20:noise=0.1,integrated-gradients:steps=50")
    assert [s.kind for s in specs] == ["grads", "smoothgrads", "integrated-gradients"]
    assert specs[1].params == {"samples": 20, "noise": 0.1}
    assert specs[2].params["steps"] == 50
    assert ExplainerSpec("fake-cam").trivial and not ExplainerSpec("grad-cam").trivial
    for bad in ("nope", "grads:foo=1", "smoothgrads:samples=0", "integrated-gradients:steps=0"):
        with pytest.raises(ValueError):
            parse_explainers(bad)


def test_save_saliency_png(tmp_path, rng):
    s = rng.normal(size=(8, 8, 3))
    path = save_saliency_png(s, tmp_path / "m.png")
    arr = np.asarray(Image.open(path))
    assert arr.dtype == np.uint16 and arr.max() == 65535 and arr.min() == 0
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["max"] == pytest.approx(importance_2d(s).max())
