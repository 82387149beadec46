import gzip

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pstconv import data
from pstconv.data import (MotionSpec, ParseError, PointCloudSequence, bounce_trajectory, clip_indices,
                          decode_sequence, distortion_scale, encode_sequence, generate_classification_set,
                          generate_moving_digit, generate_segmentation_set, generate_two_digit_segmentation,
                          image_to_points, load_digit_images, read_idx_images, read_sequence, split_clips,
                          write_idx_images, write_sequence)


@pytest.fixture(scope="module")
def digit():
    return data.builtin_digit_points(1, seed=0)[0]


class TestMotionSpec:
    def test_class_id_is_a_bijection(self):
        ids = {MotionSpec(loc, vel, dist).class_id
               for loc in range(9) for vel in range(8) for dist in range(2)}
        assert ids == set(range(144))
        for cid in range(144):
            assert MotionSpec.from_class_id(cid).class_id == cid

    @pytest.mark.parametrize("args", [(9, 0, 0), (0, 8, 0), (0, 0, 2), (-1, 0, 0)])
    def test_rejects_out_of_range(self, args):
        with pytest.raises(ValueError):
            MotionSpec(*args)

    def test_rejects_bad_class_id(self):
        with pytest.raises(ValueError):
            MotionSpec.from_class_id(144)


class TestGeneration:
    def test_distortion_scale_minimum(self):
        assert distortion_scale(8) == pytest.approx(0.6)
        assert distortion_scale(1) == pytest.approx(0.95)

    def test_unbounced_centroid_moves_by_velocity(self, digit):
        seq = generate_moving_digit(digit, MotionSpec(0, 0, 0))  # top-left start, velocity (1, 1)
        centroid = seq.coords[:, :, :2].mean(axis=1)
        np.testing.assert_allclose(np.diff(centroid, axis=0), 1.0, atol=1e-12)

    def test_shape_and_plane(self, digit):
        seq = generate_moving_digit(digit, MotionSpec(4, 3, 1))
        assert seq.coords.shape == (16, 128, 3)
        assert np.all(seq.coords[..., 2] == 0)
        assert seq.label == MotionSpec(4, 3, 1).class_id

    def test_rejects_points_outside_box(self):
        with pytest.raises(ValueError):
            generate_moving_digit(np.full((128, 2), 30.0), MotionSpec(0, 0, 0))

    @settings(max_examples=60, deadline=None)
    @given(cid=st.integers(0, 143), seed=st.integers(0, 1000), jitter=st.sampled_from([0.0, 4.0]))
    def test_stays_on_canvas(self, digit, cid, seed, jitter):
        seq = generate_moving_digit(digit, MotionSpec.from_class_id(cid), seed, jitter=jitter)
        assert seq.coords[..., :2].min() >= 0 and seq.coords[..., :2].max() <= 64

    def test_pure_function_of_inputs(self, digit):
        a = generate_moving_digit(digit, MotionSpec(2, 5, 0), seed=3, jitter=2.0)
        b = generate_moving_digit(digit, MotionSpec(2, 5, 0), seed=3, jitter=2.0)
        assert np.array_equal(a.coords, b.coords)

    def test_motions_pairwise_distinguishable(self, digit):
        signatures = []
        for cid in range(144):
            c = generate_moving_digit(digit, MotionSpec.from_class_id(cid)).coords[..., :2]
            centroid = c.mean(axis=1)
            spread = c.std(axis=1)
            signatures.append(np.round(np.concatenate([centroid.ravel(), spread.ravel()]), 9).tobytes())
        assert len(set(signatures)) == 144

    def test_location_grid_is_inset(self):
        offsets = np.array([data.location_offset(i) for i in range(9)])
        assert sorted(set(offsets[:, 0].tolist())) == [6.0, 18.0, 30.0]

    def test_bounce_reflects(self):
        track = bounce_trajectory([35.0, 10.0], (2, 0), 4, 36.0)
        np.testing.assert_allclose(track[:, 0], [35.0, 35.0, 33.0, 31.0])

    def test_sweep_covers_all_classes(self):
        labels = {s.label for s in generate_classification_set(144, seed=0)}
        assert labels == set(range(144))

    def test_velocity_subset_labels(self):
        seqs = generate_classification_set(16, seed=0, subset="velocity")
        assert sorted({s.label for s in seqs}) == list(range(8))

    def test_unknown_subset(self):
        with pytest.raises(ValueError):
            generate_classification_set(4, subset="colour")


class TestSegmentationToy:
    def test_balanced_labels_per_frame(self):
        seq = generate_two_digit_segmentation(0)
        assert seq.coords.shape == (16, 256, 3)
        for t in range(16):
            assert np.bincount(seq.point_labels[t]).tolist() == [128, 128]

    def test_labels_follow_the_digit(self):
        seq = generate_two_digit_segmentation(1)
        assert np.all(seq.point_labels == seq.point_labels[0])

    def test_speeds_differ_by_label(self):
        seq = generate_two_digit_segmentation(2, n_frames=2)
        step = np.abs(np.diff(seq.coords[..., :2].reshape(2, 2, 128, 2).mean(axis=2), axis=0))[0]
        # centroid step of the slow digit is 1 per axis, of the fast one 2 (unless it bounced)
        np.testing.assert_allclose(step[0], 1.0, atol=1e-9)
        assert np.all(step[1] <= 2.0 + 1e-9)

    def test_set_is_seeded(self):
        a = generate_segmentation_set(3, seed=5, n_frames=4)
        b = generate_segmentation_set(3, seed=5, n_frames=4)
        assert all(np.array_equal(x.coords, y.coords) for x, y in zip(a, b))
        assert a[0].L == 4

    def test_pools_fix_digit_identity(self):
        a, b = np.full((128, 2), 5.0), np.full((128, 2), 20.0)
        seq = generate_segmentation_set(1, seed=0, digits=([a], [b]), n_frames=1)[0]
        spread = seq.coords[0, :, :2]
        # each digit collapses to one point, so label 0 and label 1 points coincide within their group
        assert np.ptp(spread[seq.point_labels[0] == 0], axis=0).max() == 0

    def test_rejects_single_pool(self):
        with pytest.raises(ValueError):
            generate_segmentation_set(1, digits=[[np.zeros((128, 2))]])

    def test_round_trip_keeps_labels(self, tmp_path):
        seq = generate_two_digit_segmentation(3)
        write_sequence(tmp_path / "s.pcsq", seq)
        back = read_sequence(tmp_path / "s.pcsq")
        assert np.array_equal(back.point_labels, seq.point_labels)


class TestDigitSources:
    def test_all_black_image_rejected(self):
        with pytest.raises(ValueError):
            image_to_points(np.zeros((28, 28)), np.random.default_rng(0))

    def test_bright_image_gives_distinct_points(self):
        img = np.zeros((28, 28))
        img[4:24, 4:24] = 1.0
        pts = image_to_points(img, np.random.default_rng(0))
        assert pts.shape == (128, 2)
        assert len(np.unique(np.floor(pts), axis=0)) == 128

    def test_sparse_image_samples_with_replacement(self):
        img = np.zeros((28, 28))
        img[10, 10:15] = 1.0
        pts = image_to_points(img, np.random.default_rng(1))
        assert pts.shape == (128, 2)
        assert set(np.floor(pts[:, 1]).astype(int)) == {10}

    def test_builtin_sprites(self):
        pts = data.builtin_digit_points(5, seed=2)
        assert len(pts) == 5
        assert all(p.shape == (128, 2) and p.min() >= 0 and p.max() <= 28 for p in pts)

    @pytest.mark.parametrize("compress", [False, True])
    def test_idx_round_trip(self, tmp_path, compress):
        images, _ = data.builtin_digit_images(3, seed=0)
        raw = (images * 255).astype(np.uint8)
        path = tmp_path / "imgs.idx"
        write_idx_images(path, raw)
        if compress:
            path.write_bytes(gzip.compress(path.read_bytes()))
        assert np.array_equal(read_idx_images(path), raw)
        assert len(load_digit_images(path, count=2)) == 2

    def test_idx_labels_and_pools(self, tmp_path):
        images, classes = data.builtin_digit_images(30, seed=4)
        write_idx_images(tmp_path / "i.idx", (images * 255).astype(np.uint8))
        data.write_idx_labels(tmp_path / "l.idx", classes)
        assert np.array_equal(data.read_idx_labels(tmp_path / "l.idx"), classes)
        present = sorted(set(classes.tolist()))[:2]
        pools = data.load_digit_pools(tmp_path / "i.idx", tmp_path / "l.idx", classes=present)
        assert [len(p) for p in pools] == [int(np.sum(classes == c)) for c in present]
        with pytest.raises(ParseError):
            data.read_idx_labels(tmp_path / "i.idx")

    @pytest.mark.parametrize("payload", [b"", b"\x00\x00\x09\x03" + b"\x00" * 12, b"\x00\x00\x08\x03" + b"\x00" * 11])
    def test_idx_malformed(self, tmp_path, payload):
        (tmp_path / "bad.idx").write_bytes(payload)
        with pytest.raises(ParseError):
            read_idx_images(tmp_path / "bad.idx")


class TestRecordFormat:
    @settings(max_examples=30, deadline=None)
    @given(L=st.integers(1, 4), N=st.integers(1, 6), C=st.integers(0, 3), labels=st.booleans(),
           seed=st.integers(0, 1000))
    def test_round_trip_is_bit_exact(self, L, N, C, labels, seed):
        rng = np.random.default_rng(seed)
        seq = PointCloudSequence(rng.normal(size=(L, N, 3)).astype(np.float32),
                                 rng.normal(size=(L, N, C)).astype(np.float32) if C else None,
                                 int(rng.integers(-5, 5)),
                                 rng.integers(0, 9, size=(L, N)).astype(np.int32) if labels else None)
        raw = encode_sequence(seq)
        back = decode_sequence(raw)
        assert encode_sequence(back) == raw
        assert back.label == seq.label and back.C == C

    def test_truncated_and_wrong_magic(self):
        raw = encode_sequence(PointCloudSequence(np.zeros((2, 3, 3))))
        with pytest.raises(ParseError):
            decode_sequence(raw[:-1])
        with pytest.raises(ParseError):
            decode_sequence(b"PCSQ2" + raw[5:])
        with pytest.raises(ParseError):
            decode_sequence(raw[:8])

    def test_header_layout(self):
        raw = encode_sequence(PointCloudSequence(np.zeros((2, 3, 3)), None, 7))
        assert raw[:5] == b"PCSQ1"
        assert np.frombuffer(raw[5:25], "<u4").tolist()[:3] == [2, 3, 0]
        assert len(raw) == 25 + 4 * 2 * 3 * 3


class TestClips:
    def test_single_full_clip(self):
        assert len(split_clips(PointCloudSequence(np.zeros((24, 2, 3))), 24)) == 1

    def test_sliding_window_count(self):
        assert len(split_clips(PointCloudSequence(np.zeros((16, 2, 3))), 8)) == 9

    def test_frame_stride_spacing(self):
        assert clip_indices(7, 3, 2)[0].tolist() == [0, 2, 4]
        assert len(clip_indices(7, 3, 2)) == 3

    def test_too_long_clip(self):
        with pytest.raises(ValueError):
            clip_indices(4, 5)
