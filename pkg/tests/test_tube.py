import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from pstconv.tube import TubeSpec, build_tube, select_anchor_frames


class TestTubeSpec:
    @pytest.mark.parametrize("kw", [
        {"l": 2},
        {"l": 1, "p": (1, 0)},
        {"l": 3, "p": (2, 0)},
        {"s_t": 0},
        {"s_s": 0},
        {"r": 0.0},
        {"K": 0},
        {"anchor_mode": "sideways"},
        {"p": (1,)},
    ])
    def test_rejects_contradictions(self, kw):
        with pytest.raises(ValueError):
            TubeSpec(**kw)

    def test_round_trips_through_dict(self):
        spec = TubeSpec(l=3, s_t=2, p=(2, 0), s_s=4, r=0.7, K=5, anchor_mode="trailing")
        assert TubeSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("L,l,s_t,p,expected", [
        (5, 3, 2, (1, 1), 3),
        (8, 3, 2, (0, 0), 3),
        (4, 1, 1, (0, 0), 4),
        (24, 3, 2, (1, 1), 12),
    ])
    def test_out_frames(self, L, l, s_t, p, expected):
        assert TubeSpec(l=l, s_t=s_t, p=p).out_frames(L) == expected


class TestAnchorFrames:
    def test_small_worked_example(self):
        assert select_anchor_frames(5, TubeSpec(l=3, s_t=2, p=(1, 1))).tolist() == [0, 2, 4]

    def test_unpadded(self):
        assert select_anchor_frames(8, TubeSpec(l=3, s_t=2)).tolist() == [1, 3, 5]

    def test_trailing_mode(self):
        spec = TubeSpec(l=3, s_t=1, p=(2, 0), anchor_mode="trailing")
        assert spec.offsets.tolist() == [-2, -1, 0]
        assert select_anchor_frames(4, spec).tolist() == [0, 1, 2, 3]
        assert select_anchor_frames(4, TubeSpec(l=3, anchor_mode="trailing")).tolist() == [2, 3]

    @pytest.mark.parametrize("p", [(1, 1), (0, 1), (3, 0)])
    def test_trailing_mode_rejects_right_or_excess_padding(self, p):
        with pytest.raises(ValueError):
            TubeSpec(l=3, p=p, anchor_mode="trailing")

    def test_too_short_sequence(self):
        with pytest.raises(ValueError):
            select_anchor_frames(2, TubeSpec(l=5, s_t=1, p=(0, 0)))

    @settings(max_examples=100, deadline=None)
    @given(L=st.integers(1, 30), half=st.integers(0, 3), s_t=st.integers(1, 4), data=st.data())
    def test_matches_closed_form(self, L, half, s_t, data):
        l = 2 * half + 1
        p = (data.draw(st.integers(0, half)), data.draw(st.integers(0, half)))
        spec = TubeSpec(l=l, s_t=s_t, p=p)
        if spec.out_frames(L) < 1:
            return
        frames = select_anchor_frames(L, spec)
        assert frames.tolist() == oracles.anchor_frames(L, l, s_t, p)
        assert len(frames) == (L + p[0] + p[1] - l) // s_t + 1
        assert frames.min() >= 0 and frames.max() <= L - 1


class TestBuildTube:
    def test_worked_example_shape(self):
        coords = np.random.default_rng(0).uniform(size=(5, 8, 3))
        tube = build_tube(coords, TubeSpec(l=3, s_t=2, p=(1, 1), s_s=4, r=0.5, K=3))
        assert tube.shape == (3, 2)
        assert tube.neighbor_index.shape == (3, 3, 2, 3)
        assert tube.slice_valid.tolist() == [[False, True, True], [True, True, True], [True, True, False]]

    def test_padded_slices_are_empty(self):
        coords = np.random.default_rng(1).uniform(size=(5, 8, 3))
        tube = build_tube(coords, TubeSpec(l=3, s_t=2, p=(1, 1), s_s=4, r=0.5, K=3))
        assert tube.slice(0, 0, 0) is None
        assert np.all(tube.displacements[~tube.slice_valid] == 0)

    def test_anchor_coords_copied_to_every_slot(self):
        rng = np.random.default_rng(2)
        coords = rng.uniform(size=(4, 10, 3))
        tube = build_tube(coords, TubeSpec(l=3, s_t=1, p=(1, 1), s_s=2, r=0.4, K=4))
        for i in range(tube.shape[0]):
            for k in range(3):
                if not tube.slice_valid[i, k]:
                    continue
                f = tube.frame_index[i, k]
                recon = coords[f][tube.neighbor_index[i, k]] - tube.displacements[i, k]
                np.testing.assert_allclose(recon, np.broadcast_to(tube.anchor_coords[i][:, None], recon.shape))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        coords = rng.uniform(size=(6, 9, 3))
        spec = TubeSpec(l=3, s_t=2, p=(1, 0), s_s=3, r=0.45, K=4)
        tube = build_tube(coords, spec)
        for i, t in enumerate(oracles.anchor_frames(6, 3, 2, (1, 0))):
            idx = oracles.fps(coords[t], 3)
            assert tube.anchor_index[i].tolist() == idx
            for k, off in enumerate(oracles.window(3)):
                if not 0 <= t + off < 6:
                    assert not tube.slice_valid[i, k]
                    continue
                for j, a in enumerate(idx):
                    expected = oracles.neighbors(coords[t][a], coords[t + off], 0.45, 4)
                    assert tube.neighbor_index[i, k, j].tolist() == expected

    def test_rejects_ragged_input(self):
        with pytest.raises(ValueError):
            build_tube(np.zeros((3, 4, 2)), TubeSpec())

    def test_rejects_oversubsampling(self):
        with pytest.raises(ValueError):
            build_tube(np.zeros((2, 3, 3)), TubeSpec(s_s=4))

    def test_identity_spec_keeps_shape(self):
        coords = np.random.default_rng(4).uniform(size=(4, 6, 3))
        tube = build_tube(coords, TubeSpec(l=1, s_t=1, s_s=1, r=1.0, K=2))
        assert tube.shape == (4, 6)
        assert tube.slice_valid.all()
