"""PST transposed convolution.

Each encoded anchor feature is expanded into ``l`` per-offset features by the
temporal transposed kernel and scattered back onto the frames its tube covered.
Every original point then takes the inverse-square-distance weighted mean of
the in-radius anchors present in its frame, mapped through the sharing kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import pairwise_distances
from .tube import TubeSpec, select_anchor_frames

SQ_DIST_FLOOR = 1e-10


@dataclass
class TransKernel:
    """``T_prime`` is (l, C'_m, C'); ``S_prime`` is (C'', C'_m)."""

    T_prime: np.ndarray
    S_prime: np.ndarray

    def __post_init__(self):
        if self.T_prime.ndim != 3 or self.S_prime.ndim != 2:
            raise ValueError("T_prime must be 3-D and S_prime 2-D")
        if self.T_prime.shape[0] % 2 == 0:
            raise ValueError(f"temporal kernel size must be odd, got {self.T_prime.shape[0]}")
        if self.S_prime.shape[1] != self.T_prime.shape[1]:
            raise ValueError(f"S_prime expects {self.S_prime.shape[1]} channels, T_prime emits {self.T_prime.shape[1]}")


def _coverage(target_L: int, spec: TubeSpec, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor frames, per (frame, anchor frame) kernel slot, and coverage mask."""
    if spec.out_frames(target_L) != n_in:
        raise ValueError(f"{n_in} encoded frames do not match {target_L} target frames "
                         f"under l={spec.l}, s_t={spec.s_t}, p={list(spec.p)}")
    frames = select_anchor_frames(target_L, spec)
    slot = np.arange(target_L)[:, None] - frames[None, :] - spec.offsets[0]  # (L, L')
    covers = (slot >= 0) & (slot < spec.l)
    return frames, np.where(covers, slot, 0), covers


def temporal_trans_conv(feats, spec: TubeSpec, T_prime, target_L: int, anchor_coords=None) -> list[dict]:
    """Expand (L', N', C') features onto ``target_L`` frames.

    Returns one dict per target frame with ``source`` (n_t, 2) pairs of
    (encoded frame, anchor), ``feats`` (n_t, C'_m) and, when ``anchor_coords``
    is given, ``coords`` (n_t, 3). Frames no tube covers are empty.
    """
    feats = np.asarray(feats, dtype=np.float64)
    T_prime = np.asarray(T_prime, dtype=np.float64)
    if T_prime.shape[0] != spec.l:
        raise ValueError(f"T_prime has {T_prime.shape[0]} slots, spec has l={spec.l}")
    Lp, Np, _ = feats.shape
    _, slot, covers = _coverage(target_L, spec, Lp)
    frames_out = []
    for t in range(target_L):
        src = [(i, j) for i in range(Lp) if covers[t, i] for j in range(Np)]
        src = np.array(src, dtype=np.int64).reshape(-1, 2)
        expanded = np.stack([T_prime[slot[t, i]] @ feats[i, j] for i, j in src]) if len(src) \
            else np.zeros((0, T_prime.shape[1]))
        entry = {"source": src, "feats": expanded}
        if anchor_coords is not None:
            entry["coords"] = np.asarray(anchor_coords)[src[:, 0], src[:, 1]].reshape(-1, 3)
        frames_out.append(entry)
    return frames_out


def interpolation_weights(original_coords, anchor_coords, r: float, available=None) -> np.ndarray:
    """Normalized inverse-square-distance weights.

    Args:
        original_coords: (..., N, 3).
        anchor_coords: (..., A, 3).
        r: radius; anchors beyond it are ignored unless none are inside,
           in which case the single nearest anchor takes weight 1.
        available: optional boolean mask broadcastable to (..., N, A) of anchors
           that exist in the frame. Rows with no available anchor are all zero.

    Returns:
        (..., N, A) weights; each row sums to 1 or is all zero.
    """
    dist = pairwise_distances(np.asarray(original_coords, dtype=np.float64),
                              np.asarray(anchor_coords, dtype=np.float64))
    if available is None:
        available = np.ones(dist.shape, dtype=bool)
    available = np.broadcast_to(available, dist.shape)
    inside = (dist <= r) & available
    w = np.where(inside, 1.0 / np.maximum(dist * dist, SQ_DIST_FLOOR), 0.0)
    none_inside = ~inside.any(axis=-1)
    if none_inside.any():
        masked = np.where(available, dist, np.inf)
        nearest = np.argmin(masked, axis=-1)
        has_any = available.any(axis=-1)
        fallback = none_inside & has_any
        onehot = np.zeros_like(w)
        np.put_along_axis(onehot, nearest[..., None], 1.0, axis=-1)
        w = np.where(fallback[..., None], onehot, w)
    total = w.sum(axis=-1, keepdims=True)
    return np.divide(w, total, out=np.zeros_like(w), where=total > 0)


def spatial_interp(original_coords, anchor_coords, anchor_feats, r: float, S_prime) -> np.ndarray:
    """Features for every original point of one frame, shaped (N, C'')."""
    anchor_coords = np.asarray(anchor_coords, dtype=np.float64).reshape(-1, 3)
    if len(anchor_coords) == 0:
        raise ValueError("spatial interpolation needs at least one anchor")
    w = interpolation_weights(original_coords, anchor_coords, r)
    return (w @ np.asarray(anchor_feats, dtype=np.float64)) @ np.asarray(S_prime).T


def pst_trans_conv_forward(encoded_coords, encoded_feats, original_coords, kernel: TransKernel,
                           spec: TubeSpec, weights: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """Propagate encoded features back onto the original points.

    Args:
        encoded_coords: (B, L', N', 3) anchor coordinates (or unbatched).
        encoded_feats: (B, L', N', C').
        original_coords: (B, L, N, 3).
        kernel: transposed kernels.
        spec: tube spec of the paired encoder layer; l, s_t, p, r and
            anchor_mode are used.
        weights: precomputed (B, L, N, L', N') interpolation weights, as
            returned by :func:`trans_weights`; computed when omitted.

    Returns:
        features (B, L, N, C'') and a cache for the backward pass.
    """
    enc_c = np.asarray(encoded_coords, dtype=np.float64)
    enc_f = np.asarray(encoded_feats, dtype=np.float64)
    orig = np.asarray(original_coords, dtype=np.float64)
    squeeze = orig.ndim == 3
    if squeeze:
        enc_c, enc_f, orig = enc_c[None], enc_f[None], orig[None]
    if kernel.T_prime.shape[0] != spec.l:
        raise ValueError(f"T_prime has {kernel.T_prime.shape[0]} slots, spec has l={spec.l}")
    if enc_f.shape[-1] != kernel.T_prime.shape[2]:
        raise ValueError(f"encoded features have {enc_f.shape[-1]} channels, T_prime expects {kernel.T_prime.shape[2]}")
    B, L, N, _ = orig.shape
    Lp = enc_f.shape[1]
    _, slot, covers = _coverage(L, spec, Lp)

    T_sel = kernel.T_prime[slot] * covers[:, :, None, None]   # (L, L', C'_m, C')
    expanded = np.einsum("tiac,bijc->btija", T_sel, enc_f, optimize=True)
    if weights is None:
        weights = trans_weights(enc_c, orig, spec)
    interp = np.einsum("btnij,btija->btna", weights, expanded, optimize=True)
    out = interp @ kernel.S_prime.T
    cache = {"kernel": kernel, "T_sel": T_sel, "slot": slot, "covers": covers, "weights": weights,
             "interp": interp, "enc_f": enc_f, "squeeze": squeeze}
    return (out[0] if squeeze else out), cache


def trans_weights(encoded_coords, original_coords, spec: TubeSpec) -> np.ndarray:
    """Interpolation weights (B, L, N, L', N') of a transposed layer; geometry only."""
    enc_c = np.asarray(encoded_coords, dtype=np.float64)
    orig = np.asarray(original_coords, dtype=np.float64)
    B, L, N, _ = orig.shape
    Lp, Np = enc_c.shape[1], enc_c.shape[2]
    _, _, covers = _coverage(L, spec, Lp)
    # anchors of encoded frame i exist in target frame t iff the tube of i covers t
    available = np.repeat(covers, Np, axis=1)[None, :, None, :]
    w = interpolation_weights(orig, enc_c.reshape(B, 1, Lp * Np, 3), spec.r, available)
    return w.reshape(B, L, N, Lp, Np)


def pst_trans_conv_backward(cache: dict, grad_out) -> dict:
    """Gradients w.r.t. encoded features, ``T_prime`` and ``S_prime``.

    Interpolation weights depend only on coordinates and are held constant.
    """
    if not cache or "weights" not in cache:
        raise RuntimeError("transposed layer cache is missing; run pst_trans_conv_forward first")
    kernel: TransKernel = cache["kernel"]
    g = np.asarray(grad_out, dtype=np.float64)
    if cache["squeeze"]:
        g = g[None]
    grad_S = np.einsum("btnc,btna->ca", g, cache["interp"], optimize=True)
    d_interp = g @ kernel.S_prime
    d_expanded = np.einsum("btnij,btna->btija", cache["weights"], d_interp, optimize=True)
    d_enc = np.einsum("btija,tiac->bijc", d_expanded, cache["T_sel"], optimize=True)
    d_T_sel = np.einsum("btija,bijc->tiac", d_expanded, cache["enc_f"], optimize=True)
    d_T_sel *= cache["covers"][:, :, None, None]
    grad_T = np.zeros_like(kernel.T_prime)
    np.add.at(grad_T, cache["slot"].reshape(-1), d_T_sel.reshape(-1, *grad_T.shape[1:]))
    return {"feats": d_enc[0] if cache["squeeze"] else d_enc, "T_prime": grad_T, "S_prime": grad_S}
