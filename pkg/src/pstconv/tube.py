"""Point tube construction.

A tube is rooted at an anchor frame. Anchor points are sampled by FPS in that
frame and their coordinates are copied, untracked, to every frame of the
temporal window; each (anchor, window frame) pair gets a fixed-size radius
neighborhood.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geom import NeighborList, farthest_point_sample_batch, radius_neighbors_batch

ANCHOR_MODES = ("centered", "trailing")


@dataclass
class TubeSpec:
    """Hyperparameters of a point tube."""

    l: int = 1
    s_t: int = 1
    p: tuple[int, int] = (0, 0)
    s_s: int = 1
    r: float = 1.0
    K: int = 9
    anchor_mode: str = "centered"

    def __post_init__(self):
        self.p = tuple(int(v) for v in self.p)
        self.validate()

    def validate(self) -> None:
        if self.anchor_mode not in ANCHOR_MODES:
            raise ValueError(f"anchor_mode must be one of {ANCHOR_MODES}, got {self.anchor_mode!r}")
        if len(self.p) != 2 or min(self.p) < 0:
            raise ValueError(f"temporal padding must be a pair of non-negative counts, got {self.p}")
        if self.l < 1 or self.l % 2 == 0:
            raise ValueError(f"temporal kernel size must be odd and positive, got {self.l}")
        if self.anchor_mode == "trailing":
            # a causal window looks back only, so padding goes on the left
            if self.p[1] != 0 or self.p[0] > self.l - 1:
                raise ValueError(f"trailing windows take left padding only, at most l-1={self.l - 1}; "
                                 f"got {list(self.p)}")
        elif self.l // 2 < max(self.p):
            raise ValueError(f"floor(l/2)={self.l // 2} must be >= padding {list(self.p)}")
        if self.s_t < 1 or self.s_s < 1:
            raise ValueError("strides must be >= 1")
        if not self.r > 0:
            raise ValueError(f"radius must be positive, got {self.r}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")

    @property
    def offsets(self) -> np.ndarray:
        """Temporal offset of each window slot relative to the anchor frame."""
        if self.anchor_mode == "trailing":
            return np.arange(-(self.l - 1), 1)
        h = self.l // 2
        return np.arange(-h, h + 1)

    def out_frames(self, L: int) -> int:
        return (L + self.p[0] + self.p[1] - self.l) // self.s_t + 1

    def out_points(self, N: int) -> int:
        return N // self.s_s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p"] = list(self.p)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TubeSpec":
        return cls(**d)


@dataclass
class PointTube:
    """Materialized tube over one sequence.

    Attributes:
        anchor_frames: (L',) anchor frame indices.
        anchor_index: (L', N') source point index of each anchor in its anchor frame.
        anchor_coords: (L', N', 3).
        frame_index: (L', l) frame read by each window slot (clipped into range for padded slots).
        slice_valid: (L', l) False where the slot falls into padding.
        neighbor_index: (L', l, N', K); zeros in invalid slots.
        displacements: (L', l, N', K, 3); zeros in invalid slots.
        clamped: (L', l, N') radius fallback flags.
    """

    spec: TubeSpec
    anchor_frames: np.ndarray
    anchor_index: np.ndarray
    anchor_coords: np.ndarray
    frame_index: np.ndarray
    slice_valid: np.ndarray
    neighbor_index: np.ndarray
    displacements: np.ndarray
    clamped: np.ndarray
    n_frames: int = 0
    n_points: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.anchor_coords.shape[0], self.anchor_coords.shape[1]

    def slice(self, i: int, k: int, j: int) -> NeighborList | None:
        """Neighbor list of anchor ``j`` at window slot ``k`` of anchor frame ``i``; None if padded."""
        if not self.slice_valid[i, k]:
            return None
        return NeighborList(self.neighbor_index[i, k, j], self.displacements[i, k, j],
                            bool(self.clamped[i, k, j]))


def select_anchor_frames(L: int, spec: TubeSpec) -> np.ndarray:
    """Anchor frame indices (0-based) for a sequence of ``L`` frames."""
    if L < 1:
        raise ValueError(f"sequence length must be >= 1, got {L}")
    n_out = spec.out_frames(L)
    if n_out < 1:
        raise ValueError(f"sequence of {L} frames is too short for l={spec.l}, p={list(spec.p)}")
    start = (spec.l - 1 if spec.anchor_mode == "trailing" else spec.l // 2) - spec.p[0]
    frames = np.arange(n_out) * spec.s_t + start
    if frames[0] < 0 or frames[-1] > L - 1:
        raise ValueError(f"anchor frames {frames.tolist()} fall outside [0, {L - 1}]")
    return frames


def build_tube(coords, spec: TubeSpec, rng: np.random.Generator | None = None) -> PointTube:
    """Build the tube for one sequence of coordinates shaped (L, N, 3)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[-1] != 3:
        raise ValueError(f"expected (L, N, 3) coordinates with a common N per frame, got shape {coords.shape}")
    L, N, _ = coords.shape
    frames = select_anchor_frames(L, spec)
    n_anchor = spec.out_points(N)
    if n_anchor < 1:
        raise ValueError(f"{N} points per frame cannot be subsampled at rate {spec.s_s}")

    anchor_index = farthest_point_sample_batch(coords[frames], n_anchor, rng)
    anchor_coords = np.take_along_axis(coords[frames], anchor_index[..., None], axis=1)

    window = frames[:, None] + spec.offsets[None, :]  # (L', l)
    valid = (window >= 0) & (window <= L - 1)
    frame_index = np.clip(window, 0, L - 1)

    Lp, l = window.shape
    anchors = np.broadcast_to(anchor_coords[:, None], (Lp, l, n_anchor, 3)).reshape(Lp * l, n_anchor, 3)
    points = coords[frame_index.reshape(-1)]
    idx, disp, clamped = radius_neighbors_batch(anchors, points, spec.r, spec.K, rng)
    idx = idx.reshape(Lp, l, n_anchor, spec.K)
    disp = disp.reshape(Lp, l, n_anchor, spec.K, 3)
    clamped = clamped.reshape(Lp, l, n_anchor)
    idx[~valid] = 0
    disp[~valid] = 0.0
    clamped[~valid] = False
    return PointTube(spec, frames, anchor_index, anchor_coords, frame_index, valid,
                     idx, disp, clamped, n_frames=L, n_points=N)
