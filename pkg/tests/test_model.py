import numpy as np
import pytest
from hypothesis import given, strategies as st

from adageo import tensor as T
from adageo.model import (ClassifierHead, GeoNet, NetConfig, VladLayer, attention_weight, batched_triplet_loss,
                          class_scores, combined_loss, conv_output_size, discriminate_domain, init_centroids,
                          select_class, triplet_loss, vlad_aggregate, vlad_residuals)
from adageo.tensor import Tensor


def naive_vlad(f, c):
    """Soft-assignment VLAD by explicit loops, then intra + global L2 normalization."""
    D, H, W = f.shape
    K = c.shape[0]
    x = f.reshape(D, H * W)
    V = np.zeros((D, K))
    for i in range(H * W):
        e = np.array([np.exp(-np.sum((x[:, i] - c[k]) ** 2)) for k in range(K)])
        a = e / e.sum()
        for k in range(K):
            for j in range(D):
                V[j, k] += a[k] * (x[j, i] - c[k, j])
    raw = V.copy()
    for k in range(K):
        n = np.sqrt(np.sum(V[:, k] ** 2))
        V[:, k] /= max(n, 1e-12)
    flat = V.T.reshape(-1)
    return flat / max(np.linalg.norm(flat), 1e-12), raw


def head_with(weights):
    head = ClassifierHead(len(weights[0]), len(weights), np.random.default_rng(0))
    head.weight.data = np.array(weights, dtype=float)
    return head


# ---------------------------------------------------------------- encoder

def test_zero_image_zero_features():
    net = GeoNet(NetConfig(channels=(4, 6), strides=(2, 1)), seed=0)
    f = net.features(np.zeros((2, 3, 12, 12))).data
    assert f.shape == (2, 6, 6, 6)
    assert np.all(f == 0)


def test_encoder_deterministic(rng):
    x = rng.uniform(size=(1, 3, 16, 16))
    a = GeoNet(NetConfig(), seed=7).features(x).data
    b = GeoNet(NetConfig(), seed=7).features(x).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("size,strides", [(16, (2, 2, 1)), (17, (2, 2, 1)), (32, (2, 1, 2)), (9, (1, 1, 1))])
def test_encoder_output_size_formula(size, strides):
    cfg = NetConfig(strides=strides)
    net = GeoNet(cfg, seed=0)
    h = size
    for s in strides:
        h = (h + 2 * (cfg.kernel // 2) - cfg.kernel) // s + 1
    assert net.features(np.zeros((1, 3, size, size))).shape[2:] == (h, h)
    assert net.encoder.output_shape(size) == (h, h)
    assert conv_output_size(7, 3, 2, 1) == 4


def test_encoder_rejects_bad_input():
    with pytest.raises(T.ShapeError, match="3, H, W"):
        GeoNet(NetConfig(), seed=0).features(np.zeros((1, 1, 8, 8)))


def test_local_features_unit_norm(rng):
    f = GeoNet(NetConfig(), seed=1).features(rng.uniform(size=(2, 3, 16, 16))).data
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-10)


# ---------------------------------------------------------------- attention

def test_constant_map_gives_uniform_attention():
    f = np.ones((1, 3, 4, 5))
    _, am, _ = attention_weight(Tensor(f), head_with([[1.0, 1.0, 1.0], [0.5, 0.5, 0.5]]))
    np.testing.assert_allclose(am.data, 1 / 20, rtol=0, atol=1e-15)


def test_c_max_larger_score_and_ties():
    f = Tensor(np.abs(np.random.default_rng(0).normal(size=(1, 2, 3, 3))) + 0.1)
    _, _, c = attention_weight(f, head_with([[1.0, 1.0], [2.0, 2.0]]))
    assert c[0] == 1
    _, _, c = attention_weight(f, head_with([[1.0, 1.0], [1.0, 1.0]]))
    assert c[0] == 0
    assert select_class(np.array([[0.3, 0.3, 0.1]]))[0] == 0


@given(st.integers(0, 10 ** 6), st.integers(1, 4), st.integers(1, 5), st.integers(2, 5))
def test_attention_contract(seed, D, H, C):
    r = np.random.default_rng(seed)
    f = r.normal(size=(2, D, H, H + 1))
    head = head_with(r.normal(size=(C, D)))
    fw, am, c = attention_weight(Tensor(f), head, rescale=False)
    assert np.all(np.abs(am.data.sum(axis=(1, 2)) - 1) <= 1e-10)
    np.testing.assert_array_equal(fw.data, f * am.data[:, None])
    fw2, _, _ = attention_weight(Tensor(f), head, rescale=True)
    np.testing.assert_allclose(fw2.data, fw.data * H * (H + 1), rtol=1e-14)
    scores = class_scores(Tensor(f), head).data
    np.testing.assert_array_equal(c, np.argmax(scores, axis=1))


@given(st.integers(0, 10 ** 6), st.floats(-1e3, 1e3))
def test_c_max_shift_invariant(seed, shift):
    r = np.random.default_rng(seed)
    scores = r.normal(size=(5, 4))
    np.testing.assert_array_equal(select_class(scores), select_class(scores + shift))


def test_attention_rejects_dim_mismatch():
    with pytest.raises(T.ShapeError):
        attention_weight(Tensor(np.ones((1, 3, 2, 2))), head_with([[1.0, 1.0], [0.0, 0.0]]))


# ---------------------------------------------------------------- k-means

def test_kmeans_two_blobs():
    r = np.random.default_rng(3)
    sigma, n = 0.1, 200
    a = r.normal([0, 0], sigma, (n, 2))
    b = r.normal([5, 5], sigma, (n, 2))
    layer = init_centroids(np.vstack([a, b]), 2, seed=0)
    means = sorted([a.mean(0), b.mean(0)], key=lambda m: m[0])
    for c, m in zip(layer.centroids, means):
        assert np.all(np.abs(c - m) <= 3 * sigma / np.sqrt(n))


def test_kmeans_k1_is_mean(rng):
    x = rng.normal(size=(50, 3))
    np.testing.assert_allclose(init_centroids(x, 1).centroids[0], x.mean(0), rtol=0, atol=1e-15)


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(80, 4))
    assert init_centroids(x, 3, seed=2).centroids.tobytes() == init_centroids(x, 3, seed=2).centroids.tobytes()


def test_kmeans_duplicates_still_distinct():
    layer = init_centroids(np.zeros((10, 2)), 3)
    assert len({tuple(c) for c in layer.centroids}) == 3


def test_vlad_layer_invariants():
    with pytest.raises(ValueError, match="distinct"):
        VladLayer(np.array([[1.0, 2.0], [1.0, 2.0]]))
    with pytest.raises(ValueError):
        VladLayer(np.zeros((0, 2)))
    with pytest.raises(ValueError, match="at least K"):
        init_centroids(np.zeros((2, 2)), 3)


# ---------------------------------------------------------------- VLAD

def test_vlad_k1_is_residual_sum(rng):
    f = rng.normal(size=(1, 3, 2, 2))
    c = rng.normal(size=(1, 3))
    V, a = vlad_residuals(Tensor(f), Tensor(c))
    np.testing.assert_array_equal(a.data, 1.0)
    np.testing.assert_allclose(V.data[0, :, 0], (f[0].reshape(3, -1) - c[0][:, None]).sum(1), atol=1e-14)


def test_vlad_descriptors_at_centroids():
    c = np.array([[0.0, 0.0], [10.0, 10.0]])
    f = np.stack([np.array([[0.0, 10.0], [0.0, 10.0]])], axis=0).reshape(1, 2, 1, 2)
    # positions: (0, 0) and (10, 10)
    V, a = vlad_residuals(Tensor(f), Tensor(c))
    _, raw = naive_vlad(f[0], c)
    np.testing.assert_allclose(V.data[0], raw, atol=1e-12)
    # own-cluster residuals vanish; only tiny cross terms exp(-200) remain
    assert np.all(np.abs(V.data) < 1e-80)


@pytest.mark.parametrize("seed", range(5))
def test_vlad_matches_naive_oracle(seed):
    r = np.random.default_rng(seed)
    f = r.normal(size=(3, 4, 2, 3))
    c = r.normal(size=(3, 4))
    got = vlad_aggregate(Tensor(f), Tensor(c)).data
    for n in range(3):
        assert np.max(np.abs(got[n] - naive_vlad(f[n], c)[0])) <= 1e-10


@given(st.integers(0, 10 ** 6), st.integers(1, 8), st.integers(1, 4), st.integers(1, 16))
def test_vlad_assignments_and_norm(seed, D, K, R):
    r = np.random.default_rng(seed)
    f = r.normal(size=(2, D, R, 1))
    c = r.normal(size=(K, D))
    V, a = vlad_residuals(Tensor(f), Tensor(c))
    assert np.all(np.abs(a.data.sum(-1) - 1) <= 1e-12)
    d = vlad_aggregate(Tensor(f), Tensor(c)).data
    assert np.all(np.abs(np.linalg.norm(d, axis=1) - 1) <= 1e-10)


def test_vlad_shape_mismatch():
    with pytest.raises(T.ShapeError, match="centroids"):
        vlad_aggregate(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones((2, 4))))


@given(st.integers(0, 10 ** 6), st.floats(0.01, 100.0))
def test_ranking_invariant_to_common_rescaling(seed, s):
    r = np.random.default_rng(seed)
    raw = r.normal(size=(12, 6))
    q = r.normal(size=6)
    norm = lambda m: m / np.linalg.norm(m, axis=-1, keepdims=True)
    d1 = np.linalg.norm(norm(raw) - norm(q), axis=1)
    d2 = np.linalg.norm(norm(raw * s) - norm(q * s), axis=1)
    np.testing.assert_array_equal(np.argsort(d1, kind="stable"), np.argsort(d2, kind="stable"))


def test_descriptor_unit_norm_and_length(rng):
    net = GeoNet(NetConfig(clusters=4), seed=0)
    d = net.describe(rng.uniform(size=(3, 3, 16, 16)))
    assert d.shape == (3, 4 * net.cfg.dim)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-10)


# ---------------------------------------------------------------- losses

def _desc_at(d2):
    # unit vectors whose squared distance to e0 is d2
    cos = 1 - d2 / 2
    return np.array([cos, np.sqrt(max(0.0, 1 - cos * cos))])


def test_triplet_closed_forms():
    q = np.array([1.0, 0.0])
    assert triplet_loss(q, [q], [_desc_at(1.0)], 0.1).item() == pytest.approx(0.0, abs=1e-15)
    assert triplet_loss(q, [_desc_at(0.5)], [_desc_at(0.2)], 0.1).item() == pytest.approx(0.4, abs=1e-12)
    val = triplet_loss(q, [_desc_at(0.5)], [_desc_at(0.2), _desc_at(1.0)], 0.1).item()
    assert val == pytest.approx(0.4, abs=1e-12)


def test_triplet_uses_best_positive():
    q = np.array([1.0, 0.0])
    val = triplet_loss(q, [_desc_at(1.5), _desc_at(0.5)], [_desc_at(0.2)], 0.1).item()
    assert val == pytest.approx(0.4, abs=1e-12)


def test_triplet_nonnegative_1000_random():
    r = np.random.default_rng(0)
    for _ in range(1000):
        v = r.normal(size=(4, 8))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        assert triplet_loss(v[0], v[1:2], v[2:], 0.1).item() >= 0.0


@given(st.integers(0, 10 ** 6), st.floats(0.0, 1.0))
def test_triplet_zero_when_negatives_far(seed, m):
    r = np.random.default_rng(seed)
    v = r.normal(size=(5, 6))
    q, p, n = v[0], v[1:2], v[2:]
    dp = np.sum((q - p[0]) ** 2)
    dn = np.sum((q - n) ** 2, axis=1)
    if np.all(dn >= dp + m):
        assert triplet_loss(q, p, n, m).item() == 0.0


def test_batched_triplet_is_mean_of_singles(rng):
    q, p, n = rng.normal(size=(3, 5)), rng.normal(size=(3, 2, 5)), rng.normal(size=(3, 4, 5))
    singles = [triplet_loss(q[b], p[b], n[b], 0.3).item() for b in range(3)]
    assert batched_triplet_loss(Tensor(q), Tensor(p), Tensor(n), 0.3).item() == pytest.approx(np.mean(singles))


def test_combined_loss_examples():
    assert combined_loss(1.0, 2.0, 0.1) == pytest.approx(1.2)
    assert combined_loss(1.0, 5.0, 0.0) == 1.0
    assert combined_loss(0.0, 3.0, 0.1) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, -0.1)


# ---------------------------------------------------------------- discriminator

def test_discriminator_logits_independent_of_lambda(rng):
    net = GeoNet(NetConfig(), seed=0)
    f = net.features(rng.uniform(size=(2, 3, 16, 16)))
    a = net.discriminate(f, 0.1).data
    b = net.discriminate(f, 1.0).data
    assert a.shape == (2, 3)
    np.testing.assert_array_equal(a, b)


def test_grl_flips_encoder_gradient_not_discriminator(rng):
    net = GeoNet(NetConfig(), seed=0)
    x = rng.uniform(size=(3, 3, 16, 16))
    labels = np.array([0, 1, 2])
    w = net.encoder.convs[0].weight
    d = net.disc.fc1.weight

    g_rev = T.backward(T.cross_entropy(net.discriminate(net.features(x), 1.0), labels))
    from adageo.model import global_pool
    g_plain = T.backward(T.cross_entropy(net.disc(global_pool(net.features(x))), labels))
    np.testing.assert_allclose(g_rev[w], -g_plain[w], rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(g_rev[d], g_plain[d])

    g_half = T.backward(T.cross_entropy(discriminate_domain(net.features(x), 0.5, net.disc), labels))
    np.testing.assert_allclose(g_half[w], -0.5 * g_plain[w], rtol=1e-12, atol=1e-15)
