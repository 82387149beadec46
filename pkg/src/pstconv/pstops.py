"""PST convolution: displacement-kernel spatial convolution over tube slices,
followed by a temporal convolution across the slices of each tube.

Feature layout is channels-last: coordinates (B, L, N, 3), features (B, L, N, C).
Geometry (sampling, neighbor selection) is treated as constant; gradients flow
only through features and kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .tube import PointTube, TubeSpec, build_tube


@dataclass
class SpatialKernel:
    """Factorized displacement kernel.

    ``theta_d`` is (C_m, 3), ``theta_s`` is (C_m, C). Either may be None, which
    selects the corresponding degenerate form: without ``theta_s`` the slice
    response is the summed transformed displacement; without ``theta_d`` it is
    the summed lifted feature.
    """

    theta_d: np.ndarray | None
    theta_s: np.ndarray | None = None

    def __post_init__(self):
        if self.theta_d is None and self.theta_s is None:
            raise ValueError("spatial kernel needs theta_d, theta_s or both")
        if self.theta_d is not None and self.theta_d.shape[-1] != 3:
            raise ValueError(f"theta_d must be C_m x 3, got {self.theta_d.shape}")
        if self.theta_d is not None and self.theta_s is not None \
                and self.theta_d.shape[0] != self.theta_s.shape[0]:
            raise ValueError("theta_d and theta_s disagree on C_m")

    @property
    def mid_channels(self) -> int:
        return (self.theta_d if self.theta_d is not None else self.theta_s).shape[0]

    @property
    def in_channels(self) -> int:
        return 0 if self.theta_s is None else self.theta_s.shape[1]


@dataclass
class TemporalKernel:
    """``T`` is (l, C', C_m); optional ``bias`` is (C',)."""

    T: np.ndarray
    bias: np.ndarray | None = None


@dataclass
class LayerIO:
    out_coords: np.ndarray
    out_feats: np.ndarray
    cache: dict | None = field(default=None, repr=False)


def spatial_conv(displacements, neighbor_feats, kernel: SpatialKernel) -> np.ndarray:
    """Response of one tube slice: sum over neighbors of (theta_d . delta) * (theta_s . F)."""
    disp = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    if kernel.theta_s is not None:
        feats = np.asarray(neighbor_feats, dtype=np.float64).reshape(len(disp), -1)
        if feats.shape[1] != kernel.theta_s.shape[1]:
            raise ValueError(f"neighbor features have {feats.shape[1]} channels, kernel expects {kernel.theta_s.shape[1]}")
        lifted = feats @ kernel.theta_s.T
        if kernel.theta_d is None:
            return lifted.sum(axis=0)
        return ((disp @ kernel.theta_d.T) * lifted).sum(axis=0)
    return (disp @ kernel.theta_d.T).sum(axis=0)


def temporal_conv(M_slices, valid, kernel: TemporalKernel) -> np.ndarray:
    """Masked sum of T_k . M_k over the window, plus bias."""
    M = np.asarray(M_slices, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if M.shape[0] != kernel.T.shape[0] or valid.shape[0] != kernel.T.shape[0]:
        raise ValueError(f"expected {kernel.T.shape[0]} slices, got {M.shape[0]}")
    out = np.zeros(kernel.T.shape[1])
    for k in range(M.shape[0]):
        if valid[k]:
            out += kernel.T[k] @ M[k]
    if kernel.bias is not None:
        out = out + kernel.bias
    return out


def _batched(coords, feats):
    coords = np.asarray(coords)
    squeeze = coords.ndim == 3
    if squeeze:
        coords = coords[None]
        feats = None if feats is None else np.asarray(feats)[None]
    return coords, feats, squeeze


def build_tubes(coords, spec: TubeSpec, rng: np.random.Generator | None = None) -> list[PointTube]:
    """One tube per batch item of ``coords`` (B, L, N, 3)."""
    return [build_tube(c, spec, rng) for c in coords]


def pst_conv_forward(coords, feats, spec: TubeSpec, spatial: SpatialKernel, temporal: TemporalKernel,
                     rng: np.random.Generator | None = None, tubes: list[PointTube] | None = None) -> LayerIO:
    """Forward PST convolution.

    Args:
        coords: (B, L, N, 3) or unbatched (L, N, 3).
        feats: (B, L, N, C), unbatched, or None for a featureless input.
        spec: tube hyperparameters.
        spatial, temporal: kernels.
        rng: None for deterministic tube construction.
        tubes: prebuilt tubes, one per batch item; built on the fly if omitted.

    Returns:
        LayerIO with anchor coordinates (B, L', N', 3) and features (B, L', N', C').
    """
    coords, feats, squeeze = _batched(coords, feats)
    B, L, N, _ = coords.shape
    C = 0 if feats is None else feats.shape[-1]
    if spatial.theta_s is not None:
        if feats is None or C != spatial.in_channels:
            raise ValueError(f"input has {C} feature channels, sharing kernel expects {spatial.in_channels}")
    if temporal.T.shape[0] != spec.l or temporal.T.shape[2] != spatial.mid_channels:
        raise ValueError(f"temporal kernel shape {temporal.T.shape} inconsistent with l={spec.l}, "
                         f"C_m={spatial.mid_channels}")
    if tubes is None:
        tubes = build_tubes(coords, spec, rng)
    if len(tubes) != B:
        raise ValueError(f"got {len(tubes)} tubes for a batch of {B}")

    valid = tubes[0].slice_valid
    frame_index = tubes[0].frame_index
    idx = np.stack([t.neighbor_index for t in tubes])         # (B, L', l, N', K)
    disp = np.stack([t.displacements for t in tubes])         # (B, L', l, N', K, 3)
    anchors = np.stack([t.anchor_coords for t in tubes])      # (B, L', N', 3)
    mask = valid[None, :, :, None, None].astype(disp.dtype)   # broadcast over (B, ., ., N', C_m)

    cache = {"spec": spec, "spatial": spatial, "temporal": temporal, "tubes": tubes,
             "mask": mask, "disp": disp, "shape": (B, L, N, C), "squeeze": squeeze}

    if spatial.theta_s is not None:
        flat = ((np.arange(B)[:, None, None, None, None] * L + frame_index[None, :, :, None, None]) * N + idx)
        lifted = feats.reshape(-1, C) @ spatial.theta_s.T     # (B*L*N, C_m)
        gathered = lifted[flat]                               # (B, L', l, N', K, C_m)
        cache["flat"] = flat
        cache["feats"] = feats
        cache["gathered"] = gathered
        if spatial.theta_d is not None:
            dproj = disp @ spatial.theta_d.T
            cache["dproj"] = dproj
            M = (dproj * gathered).sum(axis=-2)
        else:
            M = gathered.sum(axis=-2)
    else:
        disp_sum = disp.sum(axis=-2)
        cache["disp_sum"] = disp_sum
        M = disp_sum @ spatial.theta_d.T
    M = M * mask
    cache["M"] = M

    out = np.einsum("bikjm,kcm->bijc", M, temporal.T, optimize=True)
    if temporal.bias is not None:
        out = out + temporal.bias
    if squeeze:
        return LayerIO(anchors[0], out[0], cache)
    return LayerIO(anchors, out, cache)


def _scatter_rows(flat: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into an (n_rows, C) array at positions ``flat``."""
    flat = flat.reshape(-1)
    ones = np.ones(flat.shape[0])
    S = sp.csr_matrix((ones, (flat, np.arange(flat.shape[0]))), shape=(n_rows, flat.shape[0]))
    return np.asarray(S @ values.reshape(flat.shape[0], -1))


def pst_conv_backward(io: LayerIO, grad_out) -> dict:
    """Gradients of a scalar loss given dLoss/d(out_feats).

    Returns a dict with ``feats`` (None for featureless input), ``theta_d``,
    ``theta_s``, ``T`` and ``bias``; entries are None where the parameter is absent.
    """
    cache = io.cache
    if not cache or "M" not in cache:
        raise RuntimeError("layer cache is missing; run pst_conv_forward first")
    spatial: SpatialKernel = cache["spatial"]
    temporal: TemporalKernel = cache["temporal"]
    B, L, N, C = cache["shape"]
    g = np.asarray(grad_out, dtype=np.float64)
    if cache["squeeze"]:
        g = g[None]
    M = cache["M"]

    grads = {"feats": None, "theta_d": None, "theta_s": None, "T": None, "bias": None}
    grads["T"] = np.einsum("bijc,bikjm->kcm", g, M, optimize=True)
    if temporal.bias is not None:
        grads["bias"] = g.sum(axis=(0, 1, 2))
    dM = np.einsum("bijc,kcm->bikjm", g, temporal.T, optimize=True) * cache["mask"]

    if spatial.theta_s is None:
        grads["theta_d"] = np.einsum("bikjm,bikjx->mx", dM, cache["disp_sum"], optimize=True)
        return grads

    if spatial.theta_d is not None:
        dproj = cache["dproj"]
        grads["theta_d"] = np.einsum("bikjnm,bikjm,bikjnx->mx", cache["gathered"], dM, cache["disp"],
                                     optimize=True)
        d_gathered = dproj * dM[..., None, :]
    else:
        d_gathered = np.broadcast_to(dM[..., None, :], cache["gathered"].shape)
    d_lifted = _scatter_rows(cache["flat"], d_gathered, B * L * N)
    feats = cache["feats"].reshape(-1, C)
    grads["theta_s"] = d_lifted.T @ feats
    d_feats = (d_lifted @ spatial.theta_s).reshape(B, L, N, C)
    grads["feats"] = d_feats[0] if cache["squeeze"] else d_feats
    return grads
