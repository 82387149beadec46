"""Synthetic moving-digit point cloud sequences, the PCSQ1 record format,
digit image loading and clip splitting.

Canvas convention: a 64 x 64 area; each digit lives in a 28 x 28 box whose
top-left corner starts at one of nine grid positions. Grid values g in
{1, 3, 5} map to offsets (g - 1) / 4 * (canvas - box), i.e. 0, 18 and 36.
Points are (x, y, 0) with x along image columns and y along image rows.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANVAS = 64.0
BOX = 28.0
N_DIGIT_POINTS = 128
SEQ_LEN = 16
SEG_GLYPHS = (0, 1)  # digit classes of segmentation digits A and B

LOCATIONS = [(1, 1), (1, 3), (1, 5), (3, 1), (3, 3), (3, 5), (5, 1), (5, 3), (5, 5)]
VELOCITIES = [(1, 1), (-1, 1), (-1, -1), (1, -1), (2, 2), (-2, 2), (-2, -2), (2, -2)]
DISTORTIONS = ("horizontal", "vertical")
N_MOTIONS = len(LOCATIONS) * len(VELOCITIES) * len(DISTORTIONS)


class ParseError(ValueError):
    """Malformed file contents."""


@dataclass
class PointCloudSequence:
    """L frames of N points. ``feats`` is (L, N, C) or None; ``point_labels`` is (L, N) or None."""

    coords: np.ndarray
    feats: np.ndarray | None = None
    label: int = -1
    point_labels: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.coords)
        if c.ndim != 3 or c.shape[-1] != 3:
            raise ValueError(f"coords must be (L, N, 3), got {c.shape}")
        if self.feats is not None and np.asarray(self.feats).shape[:2] != c.shape[:2]:
            raise ValueError("feats must share (L, N) with coords")
        if self.point_labels is not None and np.asarray(self.point_labels).shape != c.shape[:2]:
            raise ValueError("point_labels must be (L, N)")

    @property
    def L(self) -> int:
        return self.coords.shape[0]

    @property
    def N(self) -> int:
        return self.coords.shape[1]

    @property
    def C(self) -> int:
        return 0 if self.feats is None else self.feats.shape[-1]


# ---------------------------------------------------------------------------
# Motions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MotionSpec:
    location: int
    velocity: int
    distortion: int

    def __post_init__(self):
        if not (0 <= self.location < len(LOCATIONS) and 0 <= self.velocity < len(VELOCITIES)
                and 0 <= self.distortion < len(DISTORTIONS)):
            raise ValueError(f"motion indices out of range: {self}")

    @property
    def class_id(self) -> int:
        return self.location * 16 + self.velocity * 2 + self.distortion

    @classmethod
    def from_class_id(cls, class_id: int) -> "MotionSpec":
        if not 0 <= class_id < N_MOTIONS:
            raise ValueError(f"class id must lie in [0, {N_MOTIONS}), got {class_id}")
        return cls(class_id // 16, (class_id % 16) // 2, class_id % 2)


def distortion_scale(t: int) -> float:
    """Scale applied along the distorted axis at frame ``t`` (1-based)."""
    return abs(0.4 - 0.05 * t) + 0.6


def location_offset(location: int, canvas: float = CANVAS, box: float = BOX) -> np.ndarray:
    # grid values 1, 3, 5 land at 1/6, 1/2, 5/6 of the free span; starting on a wall would make
    # opposite velocities indistinguishable after the first reflection
    gx, gy = LOCATIONS[location]
    span = canvas - box
    return np.array([gx / 6 * span, gy / 6 * span])


def bounce_trajectory(start, velocity, n_frames: int, hi: float) -> np.ndarray:
    """Box positions for ``n_frames`` frames moving inside [0, hi]^2 with elastic reflection."""
    pos = np.array(start, dtype=np.float64)
    vel = np.array(velocity, dtype=np.float64)
    out = [pos.copy()]
    for _ in range(n_frames - 1):
        pos = pos + vel
        for a in range(2):
            if pos[a] < 0:
                pos[a] = -pos[a]
                vel[a] = -vel[a]
            elif pos[a] > hi:
                pos[a] = 2 * hi - pos[a]
                vel[a] = -vel[a]
        out.append(pos.copy())
    return np.stack(out)


def generate_moving_digit(digit_points, motion: MotionSpec, seed: int = 0, n_frames: int = SEQ_LEN,
                          jitter: float = 0.0, canvas: float = CANVAS, box: float = BOX) -> PointCloudSequence:
    """One moving, bouncing, distorting digit as an (L, 128, 3) sequence.

    Args:
        digit_points: (N, 2) points in box coordinates [0, box].
        motion: location, velocity and distortion choice.
        seed: drives the optional start jitter.
        jitter: maximum start offset (uniform, per axis) added to the grid
            location, clipped to the canvas.
    """
    pts = np.asarray(digit_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"digit points must be (N, 2), got {pts.shape}")
    if pts.min() < 0 or pts.max() > box:
        raise ValueError(f"digit points must lie inside the [0, {box}] box")
    hi = canvas - box
    start = location_offset(motion.location, canvas, box)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        start = np.clip(start + rng.uniform(-jitter, jitter, size=2), 0, hi)
    track = bounce_trajectory(start, VELOCITIES[motion.velocity], n_frames, hi)
    center = pts.mean(axis=0)
    axis = motion.distortion
    frames = []
    for t in range(1, n_frames + 1):
        shaped = pts.copy()
        shaped[:, axis] = distortion_scale(t) * (pts[:, axis] - center[axis]) + center[axis]
        xy = shaped + track[t - 1]
        frames.append(np.column_stack([xy, np.zeros(len(xy))]))
    return PointCloudSequence(np.stack(frames), None, motion.class_id)


def generate_two_digit_segmentation(seed: int, digits=None, n_frames: int = SEQ_LEN,
                                    canvas: float = CANVAS, box: float = BOX) -> PointCloudSequence:
    """Two digits moving independently in one canvas, labelled per point.

    Digit A (label 0) is a glyph of class ``SEG_GLYPHS[0]`` moving at speed 1
    per axis; digit B (label 1) is a ``SEG_GLYPHS[1]`` glyph moving at speed 2.
    Directions, start positions, distortions and glyph styles are drawn from
    ``seed``. Point order is [A points, B points] in every frame.

    Args:
        digits: optional (A points, B points) pair replacing the rendered glyphs.
    """
    rng = np.random.default_rng(seed)
    if digits is None:
        digits = [image_to_points(render_glyph(c, rng), rng) for c in SEG_GLYPHS]
    hi = canvas - box
    parts, labels = [], []
    for label, speed_set in enumerate((range(0, 4), range(4, 8))):
        vel = int(rng.choice(list(speed_set)))
        start = rng.uniform(0, hi, size=2)
        track = bounce_trajectory(start, VELOCITIES[vel], n_frames, hi)
        pts = np.asarray(digits[label], dtype=np.float64)
        center = pts.mean(axis=0)
        axis = int(rng.integers(2))
        frames = []
        for t in range(1, n_frames + 1):
            shaped = pts.copy()
            shaped[:, axis] = distortion_scale(t) * (pts[:, axis] - center[axis]) + center[axis]
            xy = shaped + track[t - 1]
            frames.append(np.column_stack([xy, np.zeros(len(xy))]))
        parts.append(np.stack(frames))
        labels.append(np.full((n_frames, len(pts)), label, dtype=np.int32))
    return PointCloudSequence(np.concatenate(parts, axis=1), None, -1, np.concatenate(labels, axis=1))


# ---------------------------------------------------------------------------
# Digit sources
# ---------------------------------------------------------------------------

# Glyph strokes in a unit box (x right, y down); arcs are (cx, cy, rx, ry, start_deg, end_deg).
_GLYPHS = {
    0: {"arcs": [(0.5, 0.5, 0.28, 0.38, 0, 360)]},
    1: {"lines": [(0.5, 0.12, 0.5, 0.88), (0.35, 0.25, 0.5, 0.12), (0.35, 0.88, 0.65, 0.88)]},
    2: {"arcs": [(0.5, 0.32, 0.25, 0.2, 180, 380)], "lines": [(0.73, 0.4, 0.25, 0.88), (0.25, 0.88, 0.78, 0.88)]},
    3: {"arcs": [(0.5, 0.3, 0.24, 0.18, 200, 450), (0.5, 0.68, 0.26, 0.2, 270, 520)]},
    4: {"lines": [(0.62, 0.12, 0.2, 0.62), (0.2, 0.62, 0.8, 0.62), (0.62, 0.12, 0.62, 0.88)]},
    5: {"lines": [(0.75, 0.12, 0.3, 0.12), (0.3, 0.12, 0.28, 0.45)], "arcs": [(0.48, 0.64, 0.27, 0.24, 220, 500)]},
    6: {"arcs": [(0.5, 0.66, 0.25, 0.22, 0, 360), (0.62, 0.55, 0.37, 0.43, 180, 270)]},
    7: {"lines": [(0.22, 0.12, 0.78, 0.12), (0.78, 0.12, 0.4, 0.88)]},
    8: {"arcs": [(0.5, 0.3, 0.2, 0.18, 0, 360), (0.5, 0.68, 0.25, 0.2, 0, 360)]},
    9: {"arcs": [(0.5, 0.34, 0.25, 0.22, 0, 360), (0.38, 0.45, 0.37, 0.43, 0, 90)]},
}


def _glyph_polylines(digit: int) -> list[np.ndarray]:
    g = _GLYPHS[digit]
    lines = [np.array([[x0, y0], [x1, y1]]) for x0, y0, x1, y1 in g.get("lines", [])]
    for cx, cy, rx, ry, a0, a1 in g.get("arcs", []):
        ang = np.deg2rad(np.linspace(a0, a1, 48))
        lines.append(np.column_stack([cx + rx * np.cos(ang), cy + ry * np.sin(ang)]))
    return lines


def render_glyph(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """Rasterize a jittered stroke glyph into a (size, size) image with values in [0, 1]."""
    angle = rng.uniform(-0.2, 0.2)
    scale = rng.uniform(0.85, 1.05, size=2)
    shear = rng.uniform(-0.15, 0.15)
    thickness = rng.uniform(1.1, 1.8)
    A = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) \
        @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag(scale)
    yy, xx = np.mgrid[0:size, 0:size]
    pix = np.column_stack([xx.ravel() + 0.5, yy.ravel() + 0.5])
    dist = np.full(len(pix), np.inf)
    for poly in _glyph_polylines(digit):
        pts = (poly - 0.5) @ A.T * (size - 6) + size / 2
        for a, b in zip(pts[:-1], pts[1:]):
            ab = b - a
            t = np.clip(((pix - a) @ ab) / max(ab @ ab, 1e-12), 0, 1)
            dist = np.minimum(dist, np.linalg.norm(pix - (a + t[:, None] * ab), axis=1))
    img = np.clip(1.5 - dist / thickness, 0, 1)
    return img.reshape(size, size)


def builtin_digit_images(count: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``count`` synthetic 28 x 28 digit images and their digit classes."""
    rng = np.random.default_rng(seed)
    classes = rng.integers(0, 10, size=count)
    return np.stack([render_glyph(int(c), rng) for c in classes]), classes


def image_to_points(image, rng: np.random.Generator, n_points: int = N_DIGIT_POINTS) -> np.ndarray:
    """Sample ``n_points`` (x, y) points from the pixels brighter than 0.5.

    Each point is its pixel corner plus a uniform sub-pixel offset, so the
    points are distinct whenever enough pixels are lit.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.max(initial=0) > 1.0:
        img = img / 255.0
    rows, cols = np.nonzero(img > 0.5)
    if len(rows) == 0:
        raise ValueError("image has no pixel above the 0.5 threshold")
    replace = len(rows) < n_points
    pick = rng.choice(len(rows), size=n_points, replace=replace)
    xy = np.column_stack([cols[pick], rows[pick]]).astype(np.float64)
    return xy + rng.uniform(0, 1, size=xy.shape)


def read_idx_images(path) -> np.ndarray:
    """Read an IDX image container (optionally gzipped) as (count, rows, cols) uint8."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 16:
        raise ParseError(f"{path}: too short for an IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08 or ndim != 3:
        raise ParseError(f"{path}: not an IDX3 unsigned-byte image file")
    count, rows, cols = struct.unpack(">III", raw[4:16])
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, 3))
        fh.write(struct.pack(">III", *images.shape))
        fh.write(images.tobytes())


def read_idx_labels(path) -> np.ndarray:
    """Read an IDX label container (optionally gzipped) as a (count,) uint8 array."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 8:
        raise ParseError(f"{path}: too short for an IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08 or ndim != 1:
        raise ParseError(f"{path}: not an IDX1 unsigned-byte label file")
    (count,) = struct.unpack(">I", raw[4:8])
    if len(raw) != 8 + count:
        raise ParseError(f"{path}: expected {8 + count} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBBI", 0, 0x08, 1, len(labels)))
        fh.write(labels.tobytes())


def load_digit_pools(images_path, labels_path, classes=SEG_GLYPHS, per_class: int = 500,
                     seed: int = 0) -> list[list[np.ndarray]]:
    """Point sets of the given digit classes from an IDX image/label file pair."""
    rng = np.random.default_rng(seed)
    images, labels = read_idx_images(images_path), read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    pools = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise ValueError(f"no images of digit class {c}")
        idx = rng.choice(idx, size=min(per_class, len(idx)), replace=False)
        pools.append([image_to_points(images[i], rng) for i in idx])
    return pools


def load_digit_images(source="builtin", count: int | None = None, seed: int = 0) -> list[np.ndarray]:
    """Digit point sets (128 x 2 each) from an IDX file or the built-in sprites.

    Args:
        source: path to an IDX image file, or ``"builtin"``.
        count: number of digits; for IDX sources this takes a seeded random
            subset (all images when None).
        seed: drives image choice and point sampling.
    """
    rng = np.random.default_rng(seed)
    if str(source) == "builtin":
        images, _ = builtin_digit_images(count or 64, seed)
    else:
        images = read_idx_images(source)
        if count is not None:
            images = images[rng.choice(len(images), size=count, replace=count > len(images))]
    return [image_to_points(img, rng) for img in images]


def builtin_digit_points(count: int, seed: int = 0) -> list[np.ndarray]:
    return load_digit_images("builtin", count, seed)


# ---------------------------------------------------------------------------
# PCSQ1 records
# ---------------------------------------------------------------------------

MAGIC = b"PCSQ1"
_HEADER = struct.Struct("<IIIiI")  # L, N, C, label, flags
FLAG_POINT_LABELS = 1


def encode_sequence(seq: PointCloudSequence) -> bytes:
    L, N, C = seq.L, seq.N, seq.C
    flags = FLAG_POINT_LABELS if seq.point_labels is not None else 0
    parts = [MAGIC, _HEADER.pack(L, N, C, int(seq.label), flags),
             np.ascontiguousarray(seq.coords, dtype="<f4").tobytes()]
    if C:
        parts.append(np.ascontiguousarray(seq.feats, dtype="<f4").tobytes())
    if flags & FLAG_POINT_LABELS:
        parts.append(np.ascontiguousarray(seq.point_labels, dtype="<i4").tobytes())
    return b"".join(parts)


def decode_sequence(raw: bytes, name: str = "<bytes>") -> PointCloudSequence:
    head = len(MAGIC) + _HEADER.size
    if raw[:len(MAGIC)] != MAGIC:
        raise ParseError(f"{name}: bad magic {raw[:len(MAGIC)]!r}")
    if len(raw) < head:
        raise ParseError(f"{name}: truncated header")
    L, N, C, label, flags = _HEADER.unpack(raw[len(MAGIC):head])
    n_coord, n_feat = L * N * 3, L * N * C
    n_lab = L * N if flags & FLAG_POINT_LABELS else 0
    expected = head + 4 * (n_coord + n_feat + n_lab)
    if len(raw) != expected:
        raise ParseError(f"{name}: expected {expected} bytes, found {len(raw)}")
    off = head
    coords = np.frombuffer(raw, "<f4", n_coord, off).reshape(L, N, 3)
    off += 4 * n_coord
    feats = None
    if C:
        feats = np.frombuffer(raw, "<f4", n_feat, off).reshape(L, N, C)
        off += 4 * n_feat
    labels = np.frombuffer(raw, "<i4", n_lab, off).reshape(L, N) if n_lab else None
    return PointCloudSequence(coords.copy(), None if feats is None else feats.copy(), label,
                              None if labels is None else labels.copy())


def write_sequence(path, seq: PointCloudSequence) -> None:
    Path(path).write_bytes(encode_sequence(seq))


def read_sequence(path) -> PointCloudSequence:
    return decode_sequence(Path(path).read_bytes(), str(path))


def write_manifest(directory, records: list[dict], meta: dict | None = None) -> Path:
    path = Path(directory) / "manifest.json"
    path.write_text(json.dumps({"format": "PCSQ1", "meta": meta or {}, "records": records}, indent=1))
    return path


def read_manifest(directory) -> dict:
    path = Path(directory)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: cannot read dataset manifest ({exc})") from exc
    if manifest.get("format") != "PCSQ1" or "records" not in manifest:
        raise ParseError(f"{path}: not a PCSQ1 dataset manifest")
    manifest["root"] = str(path.parent)
    return manifest


def load_split(manifest: dict, split: str) -> list[PointCloudSequence]:
    root = Path(manifest["root"])
    return [read_sequence(root / r["path"]) for r in manifest["records"] if r.get("split", "train") == split]


# ---------------------------------------------------------------------------
# Clips
# ---------------------------------------------------------------------------


def clip_indices(L: int, clip_len: int, frame_stride: int = 1) -> list[np.ndarray]:
    """Frame indices of every clip: sliding window of ``clip_len`` frames spaced ``frame_stride`` apart."""
    if clip_len < 1 or frame_stride < 1:
        raise ValueError("clip length and frame stride must be >= 1")
    span = (clip_len - 1) * frame_stride + 1
    if span > L:
        raise ValueError(f"a clip of {clip_len} frames at stride {frame_stride} needs {span} frames, sequence has {L}")
    return [np.arange(s, s + span, frame_stride) for s in range(L - span + 1)]


def split_clips(sequence: PointCloudSequence, clip_len: int, frame_stride: int = 1) -> list[PointCloudSequence]:
    clips = []
    for idx in clip_indices(sequence.L, clip_len, frame_stride):
        clips.append(PointCloudSequence(
            sequence.coords[idx],
            None if sequence.feats is None else sequence.feats[idx],
            sequence.label,
            None if sequence.point_labels is None else sequence.point_labels[idx]))
    return clips


# ---------------------------------------------------------------------------
# Dataset sweeps
# ---------------------------------------------------------------------------

SUBSETS = ("full", "velocity")


def generate_classification_set(count: int, seed: int = 0, subset: str = "full", digits=None,
                                jitter: float | None = None) -> list[PointCloudSequence]:
    """``count`` moving-digit sequences cycling through the motion classes.

    ``subset="full"`` sweeps all 144 motions (label = class id). ``"velocity"``
    fixes the centre location and horizontal distortion and labels by velocity
    (8 classes); starts are jittered by up to 4 units so position alone does
    not identify the class.
    """
    if subset not in SUBSETS:
        raise ValueError(f"subset must be one of {SUBSETS}, got {subset!r}")
    rng = np.random.default_rng(seed)
    pool = digits if digits is not None else builtin_digit_points(max(count, 1), seed=seed)
    out = []
    for i in range(count):
        pts = pool[int(rng.integers(len(pool)))]
        if subset == "full":
            motion = MotionSpec.from_class_id(i % N_MOTIONS)
            seq = generate_moving_digit(pts, motion, seed=int(rng.integers(2**31)),
                                        jitter=0.0 if jitter is None else jitter)
        else:
            motion = MotionSpec(4, i % len(VELOCITIES), 0)
            seq = generate_moving_digit(pts, motion, seed=int(rng.integers(2**31)),
                                        jitter=4.0 if jitter is None else jitter)
            seq.label = motion.velocity
        out.append(seq)
    return out


def generate_segmentation_set(count: int, seed: int = 0, digits=None,
                              n_frames: int = SEQ_LEN) -> list[PointCloudSequence]:
    """``count`` two-digit segmentation sequences.

    Args:
        digits: optional (A pool, B pool) of point sets; each sequence draws
            digit A from the first pool and digit B from the second.
    """
    rng = np.random.default_rng(seed)
    if digits is not None and (len(digits) != 2 or not all(len(pool) for pool in digits)):
        raise ValueError("digits must be two non-empty pools (A, B)")
    out = []
    for _ in range(count):
        pair = None
        if digits is not None:
            pair = [pool[int(rng.integers(len(pool)))] for pool in digits]
        out.append(generate_two_digit_segmentation(int(rng.integers(2**31)), pair, n_frames))
    return out
