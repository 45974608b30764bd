import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mianet.hpm import (
    FULL_SCALES,
    HpmConfig,
    build_prior_pyramid,
    filter_support,
    query_activation,
    resize_support,
    weighted_downsample,
)
from mianet.tensor import average_pool_to, hadamard, resize_bilinear


def activation_oracle(support, query):
    """Double-loop cosine, row mean over support pixels, scalar min-max."""
    c, h, w = query.shape
    sim = oracles.cosine_loops(query.reshape(c, -1), support.reshape(c, -1))
    means = [sum(row) / len(row) for row in sim]
    return np.array(oracles.minmax_loop(means)).reshape(h, w)


class TestFilterSupport:
    def test_full_mask_keeps_features(self, rng):
        f = rng.standard_normal((3, 4, 4))
        out, empty = filter_support(f, np.ones((8, 8), np.uint8))
        assert not empty
        np.testing.assert_array_equal(out, f)

    def test_empty_mask(self, rng):
        out, empty = filter_support(rng.standard_normal((3, 4, 4)), np.zeros((8, 8), np.uint8))
        assert empty and not out.any()

    def test_checkerboard(self, rng):
        f = rng.standard_normal((2, 4, 4))
        board = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(np.uint8)
        out, _ = filter_support(f, board)
        for r in range(4):
            for q in range(4):
                if board[r, q]:
                    assert np.array_equal(out[:, r, q], f[:, r, q])
                else:
                    assert np.all(out[:, r, q] == 0)


class TestQueryActivation:
    def test_matches_brute_force(self, rng):
        s, q = rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3))
        np.testing.assert_allclose(query_activation(s, q), activation_oracle(s, q), atol=1e-9)

    def test_identical_full_mask(self, rng):
        f = rng.standard_normal((5, 4, 4))
        np.testing.assert_allclose(query_activation(f, f), activation_oracle(f, f), atol=1e-9)

    def test_empty_support_gives_zero_map(self, rng):
        out = query_activation(np.zeros((3, 4, 4)), rng.standard_normal((3, 4, 4)))
        assert np.all(out == 0)

    def test_two_channel_toy(self):
        # support: one foreground pixel with feature (1, 0), three zeroed pixels
        support = np.zeros((2, 2, 2))
        support[:, 0, 0] = [1.0, 0.0]
        # query pixels in raster order: (1,0), (0,1), (-1,1), (0,1)
        query = np.array([[[1.0, 0.0], [-1.0, 0.0]], [[0.0, 1.0], [1.0, 1.0]]])
        out = query_activation(support, query)
        # zero support columns contribute cosine 0, so each mean is cos/4
        means = np.array([0.25, 0.0, -0.25 / np.sqrt(2), 0.0])
        expected = (means - means.min()) / (means.max() - means.min() + 1e-7)
        np.testing.assert_allclose(out.reshape(-1), expected, atol=1e-8)
        assert out[0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            query_activation(np.ones((2, 3, 3)), np.ones((2, 3, 4)))


class TestWeightedDownsample:
    def test_uniform_weights_equal_plain_pooling(self, rng):
        f = rng.standard_normal((3, 12, 12))
        out = weighted_downsample(f, np.ones((12, 12)), (6, 6))
        assert out.tobytes() == average_pool_to(f, 6, 6).tobytes()

    def test_zero_weights(self, rng):
        assert not weighted_downsample(rng.standard_normal((3, 8, 8)), np.zeros((8, 8)), (3, 3)).any()

    def test_matches_composition(self, rng):
        f, m = rng.standard_normal((2, 9, 9)), rng.random((9, 9))
        out = weighted_downsample(f, m, (4, 4))
        assert out.tobytes() == average_pool_to(hadamard(f, m), 4, 4).tobytes()
        np.testing.assert_allclose(out, oracles.window_mean(f * m[None], 4, 4), atol=1e-12)

    def test_upsample_rejected(self, rng):
        with pytest.raises(ValueError):
            weighted_downsample(np.ones((1, 3, 3)), np.ones((3, 3)), (4, 4))


def test_resize_support(rng):
    f = rng.standard_normal((2, 6, 6))
    np.testing.assert_array_equal(resize_support(f, (6, 6)), f)
    assert np.all(resize_support(np.full((2, 6, 6), 2.0), (3, 3)) == 2.0)
    np.testing.assert_allclose(resize_support(f, (4, 3))[1], oracles.bilinear_pixel(f[1], 4, 3), atol=1e-12)


class TestPyramid:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            HpmConfig(scales=((8, 8), (8, 4)))
        with pytest.raises(ValueError):
            HpmConfig(scales=())
        assert HpmConfig().scales == ((60, 60), (30, 30), (15, 15), (8, 8))

    def test_single_scale_is_activation(self, rng):
        f_s, f_q = rng.standard_normal((4, 6, 6)), rng.standard_normal((4, 6, 6))
        mask = np.zeros((12, 12), np.uint8)
        mask[2:9, 3:10] = 1
        pyr = build_prior_pyramid(f_s, f_q, mask, HpmConfig(scales=((6, 6),)))
        filtered, _ = filter_support(f_s, mask)
        assert len(pyr) == 1
        assert pyr.maps[0].tobytes() == query_activation(filtered, f_q).tobytes()

    def test_full_profile_shapes(self, rng):
        f = rng.standard_normal((8, 60, 60))
        pyr = build_prior_pyramid(f, f, np.ones((240, 240), np.uint8), HpmConfig())
        assert pyr.shapes == list(FULL_SCALES)

    def test_identical_features_scan_endpoints(self, rng):
        f = rng.standard_normal((6, 12, 12))
        cfg = HpmConfig(scales=((12, 12), (6, 6), (3, 3)))
        pyr = build_prior_pyramid(f, f, np.ones((12, 12), np.uint8), cfg)
        for m in pyr.maps:
            flat = m.reshape(-1).tolist()
            assert min(flat) == 0.0
            assert all(0.0 <= v <= 1.0 for v in flat)
            assert max(flat) == pytest.approx(1.0, abs=1e-5)

    def test_stage_recursion_matches_manual(self, rng):
        f_s, f_q = rng.standard_normal((3, 8, 8)), rng.standard_normal((3, 8, 8))
        mask = (rng.random((16, 16)) > 0.4).astype(np.uint8)
        cfg = HpmConfig(scales=((8, 8), (4, 4)))
        pyr = build_prior_pyramid(f_s, f_q, mask, cfg)
        s1, _ = filter_support(f_s, mask)
        m1 = query_activation(s1, f_q)
        q2 = average_pool_to(f_q * m1[None], 4, 4)
        s2 = resize_bilinear(s1, 4, 4)
        np.testing.assert_array_equal(pyr.maps[1], query_activation(s2, q2))

    def test_info_channel_switch(self, rng):
        f_s, f_q = rng.standard_normal((3, 8, 8)), rng.standard_normal((3, 8, 8))
        mask = np.ones((8, 8), np.uint8)
        pyr = build_prior_pyramid(f_s, f_q, mask, HpmConfig(scales=((8, 8), (4, 4)), info_channels=False))
        q2 = average_pool_to(f_q, 4, 4)
        np.testing.assert_array_equal(pyr.maps[1], query_activation(resize_bilinear(f_s, 4, 4), q2))

    def test_empty_mask_never_fails(self, rng):
        f = rng.standard_normal((3, 8, 8))
        pyr = build_prior_pyramid(f, f, np.zeros((8, 8), np.uint8), HpmConfig(scales=((8, 8), (4, 4), (2, 2))))
        assert pyr.empty_foreground
        assert all(not m.any() for m in pyr.maps)

    def test_pure_and_bit_identical(self, rng):
        f_s, f_q = rng.standard_normal((4, 12, 12)), rng.standard_normal((4, 12, 12))
        mask = (rng.random((24, 24)) > 0.5).astype(np.uint8)
        cfg = HpmConfig(scales=((12, 12), (6, 6), (3, 3)))
        a = build_prior_pyramid(f_s, f_q, mask, cfg)
        b = build_prior_pyramid(f_s.copy(), f_q.copy(), mask.copy(), cfg)
        assert [m.tobytes() for m in a.maps] == [m.tobytes() for m in b.maps]

    def test_refilter_flag_changes_later_stages_only(self, rng):
        f_s, f_q = rng.standard_normal((3, 8, 8)), rng.standard_normal((3, 8, 8))
        mask = np.zeros((8, 8), np.uint8)
        mask[1:5, 2:7] = 1
        a = build_prior_pyramid(f_s, f_q, mask, HpmConfig(scales=((8, 8), (4, 4))))
        b = build_prior_pyramid(f_s, f_q, mask, HpmConfig(scales=((8, 8), (4, 4)), refilter_each_stage=True))
        np.testing.assert_array_equal(a.maps[0], b.maps[0])
        # bilinear resizing smears support features into background pixels; refiltering zeroes them again
        assert not np.array_equal(a.maps[1], b.maps[1])

    def test_max_reduction(self, rng):
        s, q = rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 4, 4))
        sim = oracles.cosine_loops(q.reshape(3, -1), s.reshape(3, -1))
        expected = np.array(oracles.minmax_loop([max(row) for row in sim])).reshape(4, 4)
        np.testing.assert_allclose(query_activation(s, q, "max"), expected, atol=1e-9)
        with pytest.raises(ValueError):
            HpmConfig(reduce="median")

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_support_permutation_invariance(self, seed):
        # the activation averages over support pixels, so shuffling support
        # positions (features and mask together) leaves the first map unchanged
        r = np.random.default_rng(seed)
        f_s, f_q = r.standard_normal((4, 6, 6)), r.standard_normal((4, 6, 6))
        mask = (r.random((6, 6)) > 0.5).astype(np.uint8)
        perm = r.permutation(36)
        f_p = f_s.reshape(4, 36)[:, perm].reshape(4, 6, 6)
        m_p = mask.reshape(36)[perm].reshape(6, 6)
        cfg = HpmConfig(scales=((6, 6),))
        a = build_prior_pyramid(f_s, f_q, mask, cfg).maps[0]
        b = build_prior_pyramid(f_p, f_q, m_p, cfg).maps[0]
        np.testing.assert_allclose(a, b, atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_maps_in_unit_range(self, seed):
        r = np.random.default_rng(seed)
        f_s, f_q = r.standard_normal((3, 12, 12)), r.standard_normal((3, 12, 12))
        mask = (r.random((12, 12)) > r.random()).astype(np.uint8)
        pyr = build_prior_pyramid(f_s, f_q, mask, HpmConfig(scales=((12, 12), (6, 6), (3, 3))))
        for m in pyr.maps:
            assert m.min() >= 0.0 and m.max() <= 1.0
