import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surftex import attention, raster
from surftex.attention import (
    NEG_INF,
    BiasParams,
    attended_sets,
    attention_bias,
    build_view_biases,
    load_bias,
    pairwise_distance,
    replace_attention,
    reweigh_attention,
    save_bias,
)
from surftex.cameras import make_camera_ring


def toy_maps(positions, fg):
    """RenderedMaps stub at an arbitrary resolution from per-pixel data."""
    positions = np.asarray(positions, dtype=np.float64)
    h, w = positions.shape[:2]
    fg = np.asarray(fg, dtype=bool)
    return raster.RenderedMaps(
        position=positions,
        normal=np.tile([0.0, 0.0, 1.0], (h, w, 1)),
        depth=np.where(fg, 1.0, 0.0),
        cosine=fg.astype(float),
        fg_mask=fg,
        face_id=np.where(fg, 0, raster.FACE_NONE).astype(np.int32),
        uv=np.zeros((h, w, 2)),
    )


def softmax_oracle(row):
    e = np.exp(row - row.max())
    return e / e.sum()


def test_distance_same_pixel_zero():
    m = toy_maps([[[0.1, 0.2, 0.3]]], [[True]])
    d = pairwise_distance(m, [m])
    assert d.entries.shape == (1, 1)
    assert d.entries[0, 0] == 0.0


def test_distance_hand_value():
    q = toy_maps([[[0.1, 0.0, 0.0]]], [[True]])
    k = toy_maps([[[-0.1, 0.0, 0.0]]], [[True]])
    d = pairwise_distance(q, [k])
    np.testing.assert_allclose(d.entries, [[0.2]])


def test_distance_two_views_shape():
    q = toy_maps([[[0.0, 0.0, 0.0]]], [[True]])
    k1 = toy_maps([[[1.0, 0.0, 0.0]]], [[True]])
    k2 = toy_maps([[[0.0, 1.0, 0.0]]], [[False]])
    d = pairwise_distance(q, [k1, k2])
    assert d.entries.shape == (1, 2)
    assert d.k_fg.tolist() == [True, False]


def test_distance_resolution_mismatch():
    q = toy_maps(np.zeros((2, 2, 3)), np.ones((2, 2), dtype=bool))
    k = toy_maps(np.zeros((1, 1, 3)), [[True]])
    with pytest.raises(ValueError):
        pairwise_distance(q, [k])


def simple_distance(d_vals, q_fg, k_fg):
    return attention.DistanceMatrix(
        entries=np.asarray(d_vals, dtype=np.float64),
        q_fg=np.asarray(q_fg, dtype=bool),
        k_fg=np.asarray(k_fg, dtype=bool),
    )


def test_bias_cases():
    d = simple_distance([[0.0, 0.05, 0.5]], [True], [True, True, True])
    w = attention_bias(d, o=2.0, r=20.0, delta=0.1)
    assert w.entries[0, 0] == 0.0  # ln(1) = 0
    np.testing.assert_allclose(w.entries[0, 1], -2.0 * np.log(2.0))  # d=0.05
    np.testing.assert_allclose(w.entries[0, 2], np.log(0.1))  # clamped
    assert -2.0 * np.log(11.0) < np.log(0.1)  # the unclamped value is below


def test_bias_mixed_and_background():
    d = simple_distance([[0.3, 0.3], [0.3, 0.3]], [True, False], [False, False])
    w = attention_bias(d, 2.0, 20.0, 0.1)
    assert w.entries[0, 0] == NEG_INF  # FG query, BG key
    assert w.entries[1, 0] == 0.0  # BG-BG untouched
    assert w.entries[1, 1] == 0.0


def test_bias_parameter_domain():
    d = simple_distance([[0.0]], [True], [True])
    for bad in [dict(o=0.0, r=20, delta=0.1), dict(o=2, r=-1, delta=0.1),
                dict(o=2, r=20, delta=0.0), dict(o=2, r=20, delta=1.0)]:
        with pytest.raises(ValueError):
            attention_bias(d, **bad)


def test_clamp_onset_matches_closed_form():
    rng = np.random.default_rng(3)
    for _ in range(10):
        o = rng.uniform(0.5, 8.0)
        r = rng.uniform(1.0, 50.0)
        delta = rng.uniform(0.01, 0.9)
        params = BiasParams(o=o, r=r, delta=delta)
        d_star = params.clamp_onset
        # bisect the implemented bias for the onset of clamping
        lo, hi = 0.0, d_star * 4 + 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            d = simple_distance([[mid]], [True], [True])
            w = attention_bias(d, o, r, delta).entries[0, 0]
            if w > np.log(delta):
                lo = mid
            else:
                hi = mid
        assert abs(0.5 * (lo + hi) - d_star) < 1e-9


def test_reweigh_identity_bias():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(3, 5))
    V = rng.normal(size=(5, 4))
    W = np.zeros((3, 5))
    out = reweigh_attention(S, W, V)
    expected = np.stack([softmax_oracle(S[i]) for i in range(3)]) @ V
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_reweigh_hard_mask():
    S = np.array([[0.0, 0.0]])
    W = np.array([[0.0, NEG_INF]])
    V = np.eye(2)
    out = reweigh_attention(S, W, V)
    np.testing.assert_allclose(out, [[1.0, 0.0]])


def test_reweigh_half_weight():
    S = np.array([[0.0, 0.0]])
    W = np.array([[0.0, np.log(0.5)]])
    V = np.eye(2)
    out = reweigh_attention(S, W, V)
    np.testing.assert_allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)


def test_reweigh_all_masked_row():
    S = np.zeros((1, 2))
    W = np.full((1, 2), NEG_INF)
    with pytest.raises(ValueError):
        reweigh_attention(S, W, np.eye(2))
    with pytest.raises(ValueError):
        replace_attention(W, np.eye(2))


def test_reweigh_shape_mismatch():
    with pytest.raises(ValueError):
        reweigh_attention(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((3, 1)))


def test_replace_equal_distances():
    S = np.array([[5.0, -3.0]])  # must be ignored
    d = simple_distance([[0.2, 0.2]], [True], [True, True])
    W = attention_bias(d, 2.0, 20.0, 0.01)
    out = replace_attention(W, np.eye(2))
    np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-12)
    out2 = reweigh_attention(np.zeros_like(S), W, np.eye(2))
    np.testing.assert_allclose(out, out2, atol=1e-12)


def test_replace_clamped_key_weights():
    d = simple_distance([[0.0, 10.0]], [True], [True, True])
    W = attention_bias(d, 2.0, 20.0, 0.1)
    out = replace_attention(W, np.eye(2))
    np.testing.assert_allclose(out, [[1.0 / 1.1, 0.1 / 1.1]], atol=1e-12)


def test_replace_single_finite_key():
    W = np.array([[NEG_INF, 0.7, NEG_INF]])
    out = replace_attention(W, np.eye(3))
    np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]])


def test_monotonicity_in_distance():
    base = np.array([0.01, 0.02, 0.03])
    S = np.zeros((1, 3))
    V = np.eye(3)

    def weights(d1):
        d = simple_distance([[d1, base[1], base[2]]], [True], [True] * 3)
        W = attention_bias(d, 2.0, 20.0, 0.1)
        return reweigh_attention(S, W, V)[0]

    w_near = weights(0.01)
    w_far = weights(0.05)  # still below the clamp onset (~0.108)
    assert w_far[0] < w_near[0]
    assert w_far[1] >= w_near[1] and w_far[2] >= w_near[2]


def test_bias_transpose_symmetry(rng):
    pos_a = rng.random((4, 4, 3)) - 0.5
    pos_b = rng.random((4, 4, 3)) - 0.5
    fg_a = rng.random((4, 4)) > 0.3
    fg_b = rng.random((4, 4)) > 0.3
    A, B = toy_maps(pos_a, fg_a), toy_maps(pos_b, fg_b)
    w_ab = attention_bias(pairwise_distance(A, [B]), 2.0, 20.0, 0.1)
    w_ba = attention_bias(pairwise_distance(B, [A]), 2.0, 20.0, 0.1)
    np.testing.assert_allclose(w_ab.entries, w_ba.entries.T, atol=1e-12)


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 2**31 - 1), n_q=st.integers(1, 6), n_k=st.integers(1, 8))
def test_softmax_rows_sum_to_one(seed, n_q, n_k):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(n_q, n_k))
    d = simple_distance(
        rng.random((n_q, n_k)) * 0.3,
        np.ones(n_q, dtype=bool),  # FG queries; keys mixed
        rng.random(n_k) > 0.4,
    )
    if not d.k_fg.any():
        d.k_fg[0] = True  # avoid the all-masked-row error path
    W = attention_bias(d, 2.0, 20.0, 0.1)
    probs = np.exp(
        np.where(W.entries <= NEG_INF / 2, -np.inf, S + W.entries)
    )
    probs = probs / probs.sum(axis=1, keepdims=True)
    out = reweigh_attention(S, W, np.eye(n_k))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(replace_attention(W, np.eye(n_k)).sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out, probs, atol=1e-9)


def test_build_view_biases_self_attention(icosphere1):
    cams = make_camera_ring(2, resolution=32)
    maps = [raster.render_maps(icosphere1, c) for c in cams]
    biases = build_view_biases(maps, [[0], [0, 1]], [16], BiasParams())
    solo = biases[(0, 16)]
    small = raster.downsample_maps(maps[0], 2)
    direct = attention_bias(pairwise_distance(small, [small]), 2.0, 20.0, 0.1)
    np.testing.assert_allclose(solo.entries, direct.entries)
    assert solo.entries.shape == (256, 256)


def test_build_view_biases_shapes(icosphere1):
    cams = make_camera_ring(2, resolution=32)
    maps = [raster.render_maps(icosphere1, c) for c in cams]
    biases = build_view_biases(maps, attended_sets(2), [16, 8], BiasParams())
    assert set(biases) == {(0, 16), (1, 16), (0, 8), (1, 8)}
    assert biases[(0, 16)].entries.shape == (256, 512)
    assert biases[(1, 8)].entries.shape == (64, 128)


def test_build_view_biases_finite_counts(icosphere1):
    cams = make_camera_ring(3, resolution=32)
    maps = [raster.render_maps(icosphere1, c) for c in cams]
    biases = build_view_biases(maps, attended_sets(3), [16], BiasParams())
    small = [raster.downsample_maps(m, 2) for m in maps]
    k_fg = np.concatenate([m.fg_mask.reshape(-1) for m in small])
    w = biases[(0, 16)].entries
    q_fg = small[0].fg_mask.reshape(-1)
    finite = w > NEG_INF / 2
    # FG query rows attend to exactly the FG keys
    assert np.all(finite[q_fg].sum(axis=1) == k_fg.sum())


def test_attended_sets_validation(icosphere1):
    cams = make_camera_ring(2, resolution=16)
    maps = [raster.render_maps(icosphere1, c) for c in cams]
    with pytest.raises(ValueError):
        build_view_biases(maps, [[1], [0, 1]], [16], BiasParams())  # missing self
    with pytest.raises(ValueError):
        build_view_biases(maps, [[], [0, 1]], [16], BiasParams())
    sets = attended_sets(6, "neighbors:1")
    assert sets[0] == [0, 1, 5]
    assert sets[3] == [2, 3, 4]


def test_bias_save_load_round_trip(tmp_path, rng):
    d = simple_distance(rng.random((3, 4)), [True, True, False], [True, False, True, True])
    bias = attention_bias(d, 2.0, 20.0, 0.1)
    bias.view = 1
    bias.resolution = 2
    bias.attended_views = (0, 1)
    save_bias(bias, tmp_path / "b.twtf")
    back = load_bias(tmp_path / "b.twtf")
    np.testing.assert_allclose(back.entries, bias.entries, atol=1e-2)  # f32 on wire
    assert back.view == 1 and back.resolution == 2 and back.attended_views == (0, 1)
    assert back.params == bias.params
