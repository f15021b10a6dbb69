import itertools

import numpy as np
import pytest
from scipy.stats import spearmanr

from xagg.explain import (
    Heatmap, UnsupportedLayerError, bilinear_resize, explain, grad_cam, guided_backprop,
    integrated_gradients, lime, lrp_epsilon, normalize_heatmap, saliency, smoothgrad, weighted_ridge,
)
from xagg.model import build_reference_cnn, compile_graph
from xagg.segment import grid_segments
from xagg.tensor import Conv2D, Dense, Flatten, Graph, Layer, ReLU, SoftPlus, forward, grad_input


def linear_graph(w):
    w = np.asarray(w, dtype=float)
    return Graph([Flatten(), Dense(w.reshape(-1, 1), np.zeros(1))], (1,) + w.shape)


@pytest.fixture(scope="module")
def cnn():
    return compile_graph(build_reference_cnn(), seed=7)


@pytest.fixture(scope="module")
def digit():
    return np.random.default_rng(11).random((1, 28, 28))


# -- saliency ----------------------------------------------------------------

def test_saliency_linear_is_abs_weight():
    w = np.random.default_rng(0).standard_normal((3, 4))
    hm = saliency(linear_graph(w), np.ones((1, 3, 4)), 0)
    np.testing.assert_array_equal(hm.values, np.abs(w))


def test_saliency_constant_model_is_zero():
    g = Graph([Flatten(), Dense(np.zeros((6, 2)), np.array([1.0, 2.0]))], (1, 2, 3))
    np.testing.assert_array_equal(saliency(g, np.ones((1, 2, 3)), 1).values, 0)


def test_saliency_rank_matches_finite_differences(cnn, digit):
    hm = saliency(cnn, digit, 2).values
    top = np.argsort(-hm.ravel())[:100]
    fd = []
    for idx in top:
        e = np.zeros(digit.size)
        e[idx] = 1e-6
        e = e.reshape(digit.shape)
        fd.append(abs(forward(cnn, digit + e)[0][2] - forward(cnn, digit - e)[0][2]) / 2e-6)
    assert spearmanr(hm.ravel()[top], fd)[0] > 0.99


# -- guided backprop ---------------------------------------------------------

def test_guided_equals_saliency_without_negative_gradients():
    rng = np.random.default_rng(1)
    g = Graph([Flatten(), Dense(np.abs(rng.standard_normal((4, 5))), np.ones(5)), ReLU(),
               Dense(np.abs(rng.standard_normal((5, 2))), np.zeros(2))], (1, 2, 2))
    x = rng.random((1, 2, 2))
    np.testing.assert_array_equal(guided_backprop(g, x, 0).values, saliency(g, x, 0).values)


def test_guided_dead_unit_contributes_nothing():
    g = Graph([Flatten(), Dense(np.array([[1.0], [1.0]]), np.array([-5.0])), ReLU(),
               Dense(np.array([[3.0]]), np.zeros(1))], (1, 1, 2))
    np.testing.assert_array_equal(guided_backprop(g, np.array([[[1.0, 2.0]]]), 0).values, 0)


def test_guided_masking_rule_against_sign_enumeration():
    """Two hidden ReLU layers; every sign pattern of pre-activations and upstream signals."""
    rng = np.random.default_rng(2)
    seen = set()
    for _ in range(300):
        w1, w2, w3 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3)), rng.standard_normal((3, 1))
        x = rng.standard_normal(3)
        g = Graph([Flatten(), Dense(w1, np.zeros(3)), ReLU(), Dense(w2, np.zeros(3)), ReLU(),
                   Dense(w3, np.zeros(1))], (1, 1, 3))
        z1 = x @ w1
        z2 = np.maximum(z1, 0) @ w2
        # backward by hand: a unit passes signal only if active AND signal positive
        u2 = w3[:, 0]
        m2 = (z2 > 0) & (u2 > 0)
        u1 = w2 @ (u2 * m2)
        m1 = (z1 > 0) & (u1 > 0)
        expected = np.abs(w1 @ (u1 * m1))
        seen.add((tuple(z2 > 0), tuple(u2 > 0)))
        np.testing.assert_allclose(guided_backprop(g, x.reshape(1, 1, 3), 0).values.ravel(), expected,
                                   atol=1e-12)
    assert len(seen) >= 40  # most of the 64 joint sign patterns of the last layer occur


def test_guided_reference_cnn_nonnegative(cnn, digit):
    assert np.all(guided_backprop(cnn, digit, 4).values >= 0)


def test_guided_falls_back_without_relu():
    g = Graph([Flatten(), Dense(np.ones((4, 2)), np.zeros(2)), SoftPlus(1.0), Dense(np.ones((2, 1)), np.zeros(1))],
              (1, 2, 2))
    x = np.random.default_rng(0).random((1, 2, 2))
    hm = guided_backprop(g, x, 0)
    assert "warning" in hm.provenance
    np.testing.assert_array_equal(hm.values, saliency(g, x, 0).values)


# -- integrated gradients ----------------------------------------------------

@pytest.mark.parametrize("steps", [1, 3, 64])
def test_ig_linear_exact(steps):
    w = np.random.default_rng(3).standard_normal((2, 3))
    x = np.random.default_rng(4).random((1, 2, 3))
    np.testing.assert_allclose(integrated_gradients(linear_graph(w), x, 0, steps=steps).values, w * x[0],
                               rtol=1e-12)


def test_ig_at_baseline_is_zero(cnn, digit):
    np.testing.assert_array_equal(integrated_gradients(cnn, digit, 1, baseline=digit, steps=8).values, 0)


def test_ig_rejects_zero_steps(cnn, digit):
    with pytest.raises(ValueError):
        integrated_gradients(cnn, digit, 1, steps=0)


def test_ig_is_left_riemann_sum(cnn, digit):
    ig = integrated_gradients(cnn, digit, 5, steps=4).values
    grads = sum(grad_input(cnn, digit * k / 4, 5) for k in range(4)) / 4
    np.testing.assert_allclose(ig, (digit * grads)[0], rtol=1e-10, atol=1e-14)


# -- smoothgrad ----------------------------------------------------------------

def test_smoothgrad_zero_noise_is_saliency(cnn, digit):
    for samples in (1, 7):
        np.testing.assert_array_equal(smoothgrad(cnn, digit, 3, noise_sigma=0.0, samples=samples).values,
                                      saliency(cnn, digit, 3).values)


def test_smoothgrad_single_sample_is_saliency_of_noisy_input(cnn, digit):
    from xagg.explain import method_rng
    noisy = digit + 0.2 * method_rng(5, "sg", 9).standard_normal(digit.shape)
    got = smoothgrad(cnn, digit, 3, noise_sigma=0.2, samples=1, seed=5, image_id=9).values
    np.testing.assert_allclose(got, saliency(cnn, noisy, 3).values, rtol=1e-12)


def test_smoothgrad_linear_is_abs_weight():
    w = np.random.default_rng(5).standard_normal((3, 3))
    np.testing.assert_allclose(smoothgrad(linear_graph(w), np.ones((1, 3, 3)), 0, noise_sigma=0.7).values,
                               np.abs(w))


def test_smoothgrad_deterministic(cnn, digit):
    a = smoothgrad(cnn, digit, 0, samples=3, seed=1)
    b = smoothgrad(cnn, digit, 0, samples=3, seed=1)
    c = smoothgrad(cnn, digit, 0, samples=3, seed=2)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


# -- Grad-CAM ----------------------------------------------------------------

def test_gradcam_single_map_tracks_relu_of_input():
    x = np.random.default_rng(6).standard_normal((1, 5, 5))
    g = Graph([Conv2D(np.ones((1, 1, 1, 1)), np.zeros(1)), ReLU(), Flatten(),
               Dense(np.full((25, 1), 0.3), np.zeros(1))], (1, 5, 5))
    hm = grad_cam(g, x, 0).values
    np.testing.assert_allclose(hm, 0.3 * np.maximum(x[0], 0), rtol=1e-12)


def test_gradcam_zero_features_give_zero_map():
    g = Graph([Conv2D(np.zeros((2, 1, 3, 3)), np.zeros(2)), ReLU(), Flatten(),
               Dense(np.ones((4, 1)), np.zeros(1))], (1, 4, 3))
    np.testing.assert_array_equal(grad_cam(g, np.ones((1, 4, 3)), 0).values, 0)


def test_gradcam_hand_computed_on_two_by_two_maps():
    rng = np.random.default_rng(7)
    w, b = rng.standard_normal((3, 1, 3, 3)), rng.standard_normal(3)
    dense = rng.standard_normal((12, 2))
    g = Graph([Conv2D(w, b), ReLU(), Flatten(), Dense(dense, np.zeros(2))], (1, 4, 4))
    x = rng.random((1, 4, 4))
    feats = np.zeros((3, 2, 2))
    for f in range(3):
        for i in range(2):
            for j in range(2):
                feats[f, i, j] = max(np.sum(w[f, 0] * x[0, i:i + 3, j:j + 3]) + b[f], 0.0)
    grads = dense[:, 1].reshape(3, 2, 2)
    alpha = grads.mean(axis=(1, 2))
    coarse = np.maximum(np.einsum("f,fij->ij", alpha, feats), 0)
    hm = grad_cam(g, x, 1)
    np.testing.assert_allclose(hm.values, bilinear_resize(coarse, (4, 4)), rtol=1e-12, atol=1e-15)
    assert len(np.unique(coarse)) <= 4


def test_gradcam_reference_cnn_nonnegative(cnn, digit):
    hm = grad_cam(cnn, digit, 6)
    assert hm.shape == (28, 28)
    assert np.all(hm.values >= 0)


def test_gradcam_rejects_flat_target(cnn, digit):
    with pytest.raises(ValueError):
        grad_cam(cnn, digit, 0, target_layer=len(cnn.layers) - 1)


def test_bilinear_resize_identity_and_constant():
    a = np.random.default_rng(0).random((3, 5))
    np.testing.assert_array_equal(bilinear_resize(a, (3, 5)), a)
    np.testing.assert_allclose(bilinear_resize(np.full((2, 2), 4.0), (7, 9)), 4.0)


# -- LRP -----------------------------------------------------------------------

def test_lrp_single_dense_exact_share():
    rng = np.random.default_rng(8)
    w, x = rng.random(6), rng.random((1, 2, 3))
    hm = lrp_epsilon(linear_graph(w.reshape(2, 3)), x, 0, eps_rule=1e-12)
    np.testing.assert_allclose(hm.values, w.reshape(2, 3) * x[0], rtol=1e-9)


def test_lrp_two_layer_hand_computed():
    # x = (1, 2); hidden z = x W1 = (1*1 + 2*0.5, 1*(-1) + 2*1, 1*2 + 2*(-2)) = (2, 1, -2)
    # a = relu(z) = (2, 1, 0); out = a . (1, 3, 5) = 5
    w1 = np.array([[1.0, -1.0, 2.0], [0.5, 1.0, -2.0]])
    w2 = np.array([[1.0], [3.0], [5.0]])
    g = Graph([Flatten(), Dense(w1, np.zeros(3)), ReLU(), Dense(w2, np.zeros(1))], (1, 1, 2))
    hm = lrp_epsilon(g, np.array([[[1.0, 2.0]]]), 0, eps_rule=0.0)
    # hidden relevances: a_j w_j / 5 * 5 = (2, 3, 0)
    # input: R_1 = 1*1/2*2 + 1*(-1)/1*3 = -2 ; R_2 = 2*0.5/2*2 + 2*1/1*3 = 7
    np.testing.assert_allclose(hm.values, [[-2.0, 7.0]], rtol=1e-12)


def test_lrp_conservation_bias_free():
    rng = np.random.default_rng(9)
    for _ in range(20):
        g = Graph([Conv2D(rng.standard_normal((3, 1, 3, 3)), np.zeros(3)), ReLU(), Flatten(),
                   Dense(rng.standard_normal((108, 8)), np.zeros(8)), ReLU(),
                   Dense(rng.standard_normal((8, 2)), np.zeros(2))], (1, 8, 8))
        x = rng.random((1, 8, 8))
        logit = forward(g, x)[0][1]
        total = lrp_epsilon(g, x, 1, eps_rule=1e-7).values.sum()
        assert abs(total - logit) <= 1e-3 * abs(logit)


def test_lrp_rejects_unknown_layer():
    class Odd(Layer):
        kind = "odd"

        def forward(self, a, train=False, rng=None):
            return a, None

        def vjp(self, cache, g):
            return g

    g = Graph([Flatten(), Odd(), Dense(np.ones((2, 1)), np.zeros(1))], (1, 1, 2))
    with pytest.raises(UnsupportedLayerError, match="1:odd"):
        lrp_epsilon(g, np.ones((1, 1, 2)), 0)


# -- LIME ------------------------------------------------------------------------

def segment_model(labels, target):
    """Two logits: sum of the pixels of one segment, and zero."""
    w = np.zeros((labels.size, 2))
    w[:, 0] = (labels.ravel() == target)
    return Graph([Flatten(), Dense(w, np.zeros(2))], (1,) + labels.shape)


def test_weighted_ridge_matches_exhaustive_least_squares():
    labels = grid_segments((4, 8), 2).labels  # 8 segments
    x = np.random.default_rng(10).random((1, 4, 8)) + 0.5
    g = segment_model(labels, 5)
    masks = np.array(list(itertools.product([0.0, 1.0], repeat=8)))
    keep = masks[:, labels]
    probs = forward(g, np.where(keep[:, None] > 0, x, 0.0))[1][:, 0]
    wts = np.sqrt(np.exp(-(1 - masks.sum(1) / (np.maximum(np.linalg.norm(masks, axis=1), 1e-300) * np.sqrt(8))) ** 2
                         / 0.25 ** 2))
    design = np.hstack([np.ones((256, 1)), masks])
    sw = np.sqrt(wts)[:, None]
    exact = np.linalg.lstsq(design * sw, probs * sw[:, 0], rcond=None)[0]
    coef, intercept, _ = weighted_ridge(masks, probs, wts, 0.0)
    np.testing.assert_allclose(coef, exact[1:], rtol=1e-9, atol=1e-12)
    assert intercept == pytest.approx(exact[0], abs=1e-10)
    assert np.argmax(exact[1:]) == 5


def test_lime_picks_the_driving_segment():
    labels = grid_segments((4, 8), 2).labels
    x = np.random.default_rng(10).random((1, 4, 8)) + 0.5
    hm = lime(segment_model(labels, 5), x, 0, segments=labels, samples=500)
    per_seg = np.array([hm.values[labels == s][0] for s in range(8)])
    assert np.argmax(per_seg) == 5
    assert per_seg[5] > np.max(np.delete(per_seg, 5))


def test_lime_constant_model_zero():
    labels = grid_segments((4, 4), 2).labels
    g = Graph([Flatten(), Dense(np.zeros((16, 3)), np.array([0.0, 1.0, 2.0]))], (1, 4, 4))
    hm = lime(g, np.ones((1, 4, 4)), 2, segments=labels, samples=100)
    assert np.max(np.abs(hm.values)) < 1e-8


def test_lime_deterministic_and_needs_enough_samples(cnn, digit):
    seg = grid_segments((28, 28), 7)
    a = lime(cnn, digit, 1, segments=seg, samples=40, seed=3)
    b = lime(cnn, digit, 1, segments=seg, samples=40, seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    with pytest.raises(ValueError):
        lime(cnn, digit, 1, segments=seg, samples=10)


# -- normalization and dispatch ------------------------------------------------

def test_normalize_examples():
    np.testing.assert_allclose(normalize_heatmap(np.array([[1.0, 3.0], [0.0, 0.0]])), [[0.25, 0.75], [0, 0]])
    np.testing.assert_allclose(normalize_heatmap(np.zeros((2, 2))), 0.25)
    np.testing.assert_allclose(normalize_heatmap(np.array([[-1.0, 1.0], [1.0, 1.0]])),
                               [[0, 1 / 3], [1 / 3, 1 / 3]])


def test_normalize_sums_to_one_and_is_idempotent():
    rng = np.random.default_rng(12)
    for _ in range(50):
        E = rng.standard_normal((7, 5))
        for pos in (True, False):
            if not pos and E.sum() <= 0:
                continue
            n1 = normalize_heatmap(E, pos)
            assert abs(n1.sum() - 1) < 1e-12
            np.testing.assert_allclose(normalize_heatmap(n1, pos), n1, rtol=1e-12)


def test_normalize_keeps_heatmap_provenance():
    hm = normalize_heatmap(Heatmap(np.ones((2, 2)), {"method": "sm"}))
    assert hm.provenance["method"] == "sm" and hm.provenance["positive_only"] is True


@pytest.mark.parametrize("method", ["sm", "gb", "ig", "sg", "gc", "lrp", "lime"])
def test_every_method_shape_finite_deterministic(cnn, digit, method):
    params = {"ig": {"steps": 8}, "sg": {"samples": 3}, "lime": {"samples": 60,
                                                                 "segments": grid_segments((28, 28), 4)}}
    a = explain(cnn, digit, method, seed=1, image_id=2, **params.get(method, {}))
    b = explain(cnn, digit, method, seed=1, image_id=2, **params.get(method, {}))
    assert a.shape == (28, 28)
    assert np.all(np.isfinite(a.values))
    np.testing.assert_array_equal(a.values, b.values)
    assert a.provenance["method"] == method


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown explanation method"):
        explain(linear_graph(np.ones((2, 2))), np.ones((1, 2, 2)), "occlusion")
