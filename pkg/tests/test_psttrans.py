import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from pstconv.pstops import SpatialKernel, TemporalKernel, pst_conv_forward
from pstconv.psttrans import (TransKernel, interpolation_weights, pst_trans_conv_backward, pst_trans_conv_forward,
                              spatial_interp, temporal_trans_conv, trans_weights)
from pstconv.tube import TubeSpec


def encode(rng, L, N, spec, C=2):
    """Run a featureless encoder layer to get realistic anchor coordinates."""
    coords = rng.uniform(size=(L, N, 3))
    io = pst_conv_forward(coords, None, spec, SpatialKernel(rng.normal(size=(C, 3))),
                          TemporalKernel(rng.normal(size=(spec.l, C, C))))
    return coords, io.out_coords, io.out_feats


class TestTemporalTransConv:
    def test_scalar_expansion(self):
        spec = TubeSpec(l=3, s_t=1, p=(1, 1))
        T = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
        feats = np.zeros((3, 1, 1))
        feats[1] = 2.0
        out = temporal_trans_conv(feats, spec, T, 3)
        # the middle encoded frame (anchor frame 1) spreads 2*[1, 2, 3] over frames 0, 1, 2
        contrib = {t: dict(zip(map(tuple, e["source"].tolist()), e["feats"][:, 0])) for t, e in enumerate(out)}
        assert [contrib[t][(1, 0)] for t in range(3)] == [2.0, 4.0, 6.0]

    def test_identity_window_is_channel_map(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(4, 3, 2))
        T = rng.normal(size=(1, 5, 2))
        out = temporal_trans_conv(feats, TubeSpec(), T, 4)
        for t in range(4):
            np.testing.assert_allclose(out[t]["feats"], feats[t] @ T[0].T)

    def test_every_frame_covered_for_worked_example(self):
        out = temporal_trans_conv(np.ones((3, 2, 1)), TubeSpec(l=3, s_t=2, p=(1, 1)), np.ones((3, 1, 1)), 5)
        assert all(len(e["source"]) >= 1 for e in out)

    def test_uncovered_frames_are_empty(self):
        # l=1, s_t=2 over 5 frames roots tubes at 0, 2, 4; frames 1 and 3 get nothing
        out = temporal_trans_conv(np.ones((3, 2, 1)), TubeSpec(l=1, s_t=2), np.ones((1, 1, 1)), 5)
        assert [len(e["source"]) for e in out] == [2, 0, 2, 0, 2]

    def test_rejects_mismatched_frames(self):
        with pytest.raises(ValueError):
            temporal_trans_conv(np.ones((2, 2, 1)), TubeSpec(l=3, s_t=2, p=(1, 1)), np.ones((3, 1, 1)), 5)


class TestSpatialInterp:
    def test_hand_example(self):
        orig = np.zeros((1, 3))
        anchors = np.array([[1.0, 0, 0], [2.0, 0, 0]])
        out = spatial_interp(orig, anchors, np.array([[3.0], [9.0]]), 5.0, np.eye(1))
        assert out[0, 0] == pytest.approx(4.2, rel=1e-14)

    def test_coincident_anchor_dominates(self):
        orig = np.array([[0.3, 0.3, 0.3]])
        anchors = np.array([[0.3, 0.3, 0.3], [0.5, 0.3, 0.3], [0.3, 0.6, 0.3]])
        feats = np.array([[1.0], [100.0], [-50.0]])
        out = spatial_interp(orig, anchors, feats, 1.0, np.eye(1))
        assert abs(out[0, 0] - 1.0) / 1.0 < 1e-6

    def test_nearest_fallback_outside_radius(self):
        out = spatial_interp(np.zeros((1, 3)), np.array([[3.0, 0, 0], [2.0, 0, 0]]),
                             np.array([[5.0], [7.0]]), 0.5, np.array([[2.0]]))
        assert out[0, 0] == 14.0

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), r=st.floats(0.05, 2.0))
    def test_weights_normalize(self, seed, r):
        rng = np.random.default_rng(seed)
        w = interpolation_weights(rng.uniform(size=(7, 3)), rng.uniform(size=(4, 3)), r)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(w >= 0)


class TestForward:
    def test_worked_example_restores_shape(self):
        rng = np.random.default_rng(1)
        spec = TubeSpec(l=3, s_t=2, p=(1, 1), s_s=4, r=0.6, K=3)
        orig, enc_c, enc_f = encode(rng, 5, 8, spec)
        k = TransKernel(rng.normal(size=(3, 4, 2)), rng.normal(size=(6, 4)))
        out, _ = pst_trans_conv_forward(enc_c, enc_f, orig, k, spec)
        assert out.shape == (5, 8, 6)

    def test_identity_geometry(self):
        rng = np.random.default_rng(2)
        coords = rng.uniform(size=(3, 5, 3))
        feats = rng.normal(size=(3, 5, 2))
        k = TransKernel(rng.normal(size=(1, 4, 2)), rng.normal(size=(3, 4)))
        out, _ = pst_trans_conv_forward(coords, feats, coords, k, TubeSpec(r=0.5))
        # the squared-distance floor leaves other in-radius anchors a ~1e-8 relative share
        np.testing.assert_allclose(out, feats @ k.T_prime[0].T @ k.S_prime.T, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("trailing", [False, True])
    def test_matches_loop_oracle(self, trailing):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 25:
            L, N = int(rng.integers(1, 5)), int(rng.integers(2, 9))
            l = int(rng.choice([1, 3]))
            s_t = int(rng.integers(1, 3))
            p = (1, 1) if l == 3 else (0, 0)
            if trailing:
                p = (p[0] + p[1], 0)
            spec = TubeSpec(l=l, s_t=s_t, p=p, s_s=int(rng.integers(1, N + 1)), r=float(rng.uniform(0.1, 0.8)),
                            K=3, anchor_mode="trailing" if trailing else "centered")
            if spec.out_frames(L) < 1:
                continue
            C, Cm, Co = (int(v) for v in rng.integers(1, 4, size=3))
            orig, enc_c, _ = encode(rng, L, N, spec)
            enc_f = rng.normal(size=enc_c.shape[:2] + (C,))
            k = TransKernel(rng.normal(size=(l, Cm, C)), rng.normal(size=(Co, Cm)))
            out, _ = pst_trans_conv_forward(enc_c, enc_f, orig, k, spec)
            expected = oracles.pst_trans_conv(enc_c, enc_f, orig, l, s_t, p, spec.r, k.T_prime, k.S_prime,
                                              trailing)
            np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12 * max(np.abs(expected).max(), 1))
            checked += 1

    def test_cached_weights_normalize(self):
        rng = np.random.default_rng(4)
        spec = TubeSpec(l=3, s_t=2, p=(1, 1), s_s=2, r=0.3, K=3)
        orig, enc_c, _ = encode(rng, 5, 8, spec)
        w = trans_weights(enc_c[None], orig[None], spec)
        np.testing.assert_allclose(w.sum(axis=(-2, -1)), 1.0, atol=1e-12)

    def test_linear_in_encoded_features(self):
        rng = np.random.default_rng(5)
        spec = TubeSpec(l=3, s_t=2, p=(1, 1), s_s=2, r=0.4, K=3)
        orig, enc_c, enc_f = encode(rng, 5, 8, spec)
        k = TransKernel(rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2)))
        a, _ = pst_trans_conv_forward(enc_c, enc_f, orig, k, spec)
        b, _ = pst_trans_conv_forward(enc_c, -3 * enc_f, orig, k, spec)
        np.testing.assert_allclose(b, -3 * a, rtol=1e-12, atol=1e-12)


class TestBackward:
    def _setup(self, seed):
        rng = np.random.default_rng(seed)
        spec = TubeSpec(l=3, s_t=2, p=(1, 1), s_s=4, r=0.5, K=3)
        orig, enc_c, enc_f = encode(rng, 5, 8, spec)
        k = TransKernel(rng.normal(size=(3, 3, 2)), rng.normal(size=(2, 3)))
        out, cache = pst_trans_conv_forward(enc_c, enc_f, orig, k, spec)
        return rng, out, cache

    def test_zero_upstream(self):
        _, out, cache = self._setup(6)
        for g in pst_trans_conv_backward(cache, np.zeros_like(out)).values():
            assert not np.any(g)

    def test_linear_in_upstream(self):
        rng, out, cache = self._setup(7)
        g = rng.normal(size=out.shape)
        one, two = pst_trans_conv_backward(cache, g), pst_trans_conv_backward(cache, 2 * g)
        for key in one:
            np.testing.assert_allclose(two[key], 2 * one[key], rtol=1e-13)
