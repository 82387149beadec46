"""PSTNet assembly: declarative layer configs, a model with explicit
forward/backward, clip-level evaluation and checkpoint I/O.

A config is an ordered list of layers executed sequentially. Every layer's
output state (coordinates + features) is recorded under its name so that
transposed layers can restore the coordinates of an earlier level and skip
connections can concatenate earlier features. The network input is recorded
as ``"input"``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import clip_indices
from .pstops import SpatialKernel, TemporalKernel, build_tubes, pst_conv_backward, pst_conv_forward
from .psttrans import TransKernel, pst_trans_conv_backward, pst_trans_conv_forward, trans_weights
from .tube import TubeSpec, select_anchor_frames

LAYER_KINDS = ("pstconv", "psttrans", "bn", "relu", "pool", "fc", "conv1d")
DEFAULT_CLS_WIDTHS = (64, 128, 128, 256, 256, 1024)
DEFAULT_SEG_WIDTHS = (64, 128, 256, 256, 256, 256, 128, 128)


@dataclass
class LayerSpec:
    name: str
    kind: str
    tube: TubeSpec | None = None
    in_channels: int = 0
    mid_channels: int = 0
    out_channels: int = 0
    target: str | None = None
    bias: bool = True
    kernel: str = "full"  # full | displacement | sharing

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "tube"}
        d["tube"] = None if self.tube is None else self.tube.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        tube = d.pop("tube", None)
        return cls(tube=None if tube is None else TubeSpec.from_dict(tube), **d)


@dataclass
class NetConfig:
    task: str
    layers: list[LayerSpec]
    skips: list[tuple[str, str]] = field(default_factory=list)
    num_classes: int = 2
    in_channels: int = 0
    init_scale: float = 1.0
    radius_multiplier: float = 2.0

    def __post_init__(self):
        if self.task not in ("classification", "segmentation"):
            raise ValueError(f"unknown task {self.task!r}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names) or "input" in names:
            raise ValueError("layer names must be unique and must not be 'input'")
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"layer {layer.name}: unknown kind {layer.kind!r}")
            if layer.kind in ("pstconv", "psttrans") and layer.tube is None:
                raise ValueError(f"layer {layer.name}: {layer.kind} needs a tube spec")
        order = {n: i for i, n in enumerate(["input"] + names)}
        self.skips = [tuple(s) for s in self.skips]
        for src, dst in self.skips:
            if src not in order or dst not in order or order[src] >= order[dst]:
                raise ValueError(f"skip {src} -> {dst} must connect an earlier layer to a later one")

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {"task": self.task, "num_classes": self.num_classes, "in_channels": self.in_channels,
                "init_scale": self.init_scale, "radius_multiplier": self.radius_multiplier,
                "layers": [l.to_dict() for l in self.layers],
                "skips": [list(s) for s in self.skips]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["layers"] = [LayerSpec.from_dict(l) for l in d["layers"]]
        return cls(**d)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source) -> "NetConfig":
        """Load from a JSON string or a path to a JSON file."""
        text = str(source)
        if not text.lstrip().startswith("{"):
            text = Path(source).read_text()
        return cls.from_dict(json.loads(text))

    # -- static shape audit ---------------------------------------------

    def shapes(self, L: int, N: int) -> list[dict]:
        """Per-layer output (L', N', C') without running the network.

        Raises ValueError when a tube spec cannot be applied to the incoming
        sequence or a skip joins mismatched levels.
        """
        levels = {"input": (L, N, self.in_channels)}
        cur = levels["input"]
        rows = []
        skips_into = {}
        for src, dst in self.skips:
            skips_into.setdefault(dst, []).append(src)
        for layer in self.layers:
            Lc, Nc, Cc = cur
            if layer.kind == "pstconv":
                t = layer.tube
                if t.out_frames(Lc) < 1:
                    raise ValueError(f"{layer.name}: {Lc} frames too short for l={t.l}, p={list(t.p)}")
                select_anchor_frames(Lc, t)
                if t.out_points(Nc) < 1:
                    raise ValueError(f"{layer.name}: {Nc} points cannot be subsampled by {t.s_s}")
                cur = (t.out_frames(Lc), t.out_points(Nc), layer.out_channels)
            elif layer.kind == "psttrans":
                tL, tN, _ = levels[layer.target]
                if layer.tube.out_frames(tL) != Lc:
                    raise ValueError(f"{layer.name}: {Lc} frames cannot be expanded to {tL} "
                                     f"with l={layer.tube.l}, s_t={layer.tube.s_t}")
                cur = (tL, tN, layer.out_channels)
            elif layer.kind == "pool":
                cur = (1, 1, Cc)
            elif layer.kind in ("fc", "conv1d"):
                cur = (Lc, Nc, layer.out_channels)
            for src in skips_into.get(layer.name, []):
                sL, sN, sC = levels[src]
                if (sL, sN) != cur[:2]:
                    raise ValueError(f"skip {src} -> {layer.name} joins {sL}x{sN} with {cur[0]}x{cur[1]}")
                cur = (cur[0], cur[1], cur[2] + sC)
            levels[layer.name] = cur
            rows.append({"name": layer.name, "kind": layer.kind, "L": cur[0], "N": cur[1], "C": cur[2]})
        return rows


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _block(layers: list, name: str, kind: str, width: int, **kw):
    layers.append(LayerSpec(name, kind, out_channels=width, **kw))
    layers.append(LayerSpec(f"{name}.bn", "bn", in_channels=width, out_channels=width))
    layers.append(LayerSpec(f"{name}.relu", "relu", in_channels=width, out_channels=width))


def build_classification_net(num_classes: int, base_radius: float, widths=DEFAULT_CLS_WIDTHS, K: int = 9,
                             in_channels: int = 0, radius_multiplier: float = 2.0,
                             mid_channels=None, init_scale: float = 1.0) -> NetConfig:
    """Six PST convolutions (1, 2a, 2b, 3a, 3b, 4), pooling and an FC classifier.

    Spatial subsampling by 2 at 1, 2a, 3a, 4; temporal stride 2 at 2a and 3a;
    temporal kernel 3 (padding [1, 1]) at 2a-3b, 1 elsewhere. The radius
    starts at ``base_radius`` and is multiplied after each subsampling layer.
    """
    if not base_radius > 0:
        raise ValueError(f"base radius must be positive, got {base_radius}")
    if len(widths) != 6:
        raise ValueError("classification net needs 6 widths")
    mids = list(widths) if mid_channels is None else list(mid_channels)
    plan = [  # name, l, s_t, p, s_s
        ("conv1", 1, 1, (0, 0), 2),
        ("conv2a", 3, 2, (1, 1), 2),
        ("conv2b", 3, 1, (1, 1), 1),
        ("conv3a", 3, 2, (1, 1), 2),
        ("conv3b", 3, 1, (1, 1), 1),
        ("conv4", 1, 1, (0, 0), 2),
    ]
    layers: list[LayerSpec] = []
    r, c_in = base_radius, in_channels
    for (name, l, s_t, p, s_s), width, mid in zip(plan, widths, mids):
        tube = TubeSpec(l=l, s_t=s_t, p=p, s_s=s_s, r=r, K=K)
        _block(layers, name, "pstconv", width, tube=tube, in_channels=c_in, mid_channels=mid)
        c_in = width
        if s_s > 1:
            r *= radius_multiplier
    layers.append(LayerSpec("pool", "pool", in_channels=c_in, out_channels=c_in))
    layers.append(LayerSpec("fc", "fc", in_channels=c_in, out_channels=num_classes))
    return NetConfig("classification", layers, [], num_classes, in_channels, init_scale, radius_multiplier)


def build_segmentation_net(num_classes: int, base_radius: float, widths=DEFAULT_SEG_WIDTHS, K: int = 32,
                           in_channels: int = 0, radius_multiplier: float = 2.0,
                           init_scale: float = 1.0) -> NetConfig:
    """Four PST convolutions, four PST transposed convolutions and a per-point head.

    ``widths`` lists conv1..conv4 then trans4..trans1 (execution order).
    Subsampling 4, 4, 4, 2; temporal kernel 3 (padding [1, 1]) at conv3 and
    trans2 so a 3-frame clip keeps 3 frames throughout. ``trans_k`` restores
    the level ``conv_k`` consumed and is followed by the skip from that level.
    """
    if not base_radius > 0:
        raise ValueError(f"base radius must be positive, got {base_radius}")
    if len(widths) != 8:
        raise ValueError("segmentation net needs 8 widths")
    enc = [("conv1", 1, (0, 0), 4), ("conv2", 1, (0, 0), 4), ("conv3", 3, (1, 1), 4), ("conv4", 1, (0, 0), 2)]
    layers: list[LayerSpec] = []
    radii = []
    r, c_in = base_radius, in_channels
    for (name, l, p, s_s), width in zip(enc, widths[:4]):
        radii.append(r)
        tube = TubeSpec(l=l, s_t=1, p=p, s_s=s_s, r=r, K=K)
        _block(layers, name, "pstconv", width, tube=tube, in_channels=c_in, mid_channels=width)
        c_in = width
        r *= radius_multiplier
    level_width = {"input": in_channels, "conv1.relu": widths[0], "conv2.relu": widths[1],
                   "conv3.relu": widths[2]}
    dec = [("trans4", 4, 1, "conv3", "conv3.relu"), ("trans3", 3, 1, "conv2", "conv2.relu"),
           ("trans2", 2, 3, "conv1", "conv1.relu"), ("trans1", 1, 1, None, "input")]
    skips = []
    for (name, k, l, target, skip_src), width in zip(dec, widths[4:]):
        p = (l // 2, l // 2)
        tube = TubeSpec(l=l, s_t=1, p=p, s_s=1, r=radii[k - 1], K=K)
        layers.append(LayerSpec(name, "psttrans", tube=tube, in_channels=c_in, mid_channels=width,
                                out_channels=width, target=target or "input"))
        skips.append((skip_src, name))
        c_in = width + level_width[skip_src]
        layers.append(LayerSpec(f"{name}.bn", "bn", in_channels=c_in, out_channels=c_in))
        layers.append(LayerSpec(f"{name}.relu", "relu", in_channels=c_in, out_channels=c_in))
    layers.append(LayerSpec("head", "conv1d", in_channels=c_in, out_channels=num_classes))
    return NetConfig("segmentation", layers, skips, num_classes, in_channels, init_scale, radius_multiplier)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _uniform(rng, shape, fan_in, scale):
    bound = scale * np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: NetConfig, seed: int = 0) -> tuple[dict, dict]:
    """Kaiming-style uniform fan-in initialization. Returns (params, buffers)."""
    rng = np.random.default_rng(seed)
    s = config.init_scale
    params, buffers = {}, {}
    for layer in config.layers:
        n, cin, cm, cout = layer.name, layer.in_channels, layer.mid_channels, layer.out_channels
        if layer.kind == "pstconv":
            cm = cm or cout
            if layer.kernel in ("full", "displacement") or cin == 0:
                params[f"{n}.theta_d"] = _uniform(rng, (cm, 3), 3, s)
            if cin > 0 and layer.kernel in ("full", "sharing"):
                params[f"{n}.theta_s"] = _uniform(rng, (cm, cin), cin, s)
            params[f"{n}.T"] = _uniform(rng, (layer.tube.l, cout, cm), layer.tube.l * cm, s)
            if layer.bias:
                params[f"{n}.bias"] = np.zeros(cout)
        elif layer.kind == "psttrans":
            cm = cm or cout
            params[f"{n}.T_prime"] = _uniform(rng, (layer.tube.l, cm, cin), cin, s)
            params[f"{n}.S_prime"] = _uniform(rng, (cout, cm), cm, s)
        elif layer.kind == "bn":
            params[f"{n}.gamma"] = np.ones(cin)
            params[f"{n}.beta"] = np.zeros(cin)
            buffers[f"{n}.running_mean"] = np.zeros(cin)
            buffers[f"{n}.running_var"] = np.ones(cin)
        elif layer.kind in ("fc", "conv1d"):
            params[f"{n}.W"] = _uniform(rng, (cout, cin), cin, s)
            params[f"{n}.b"] = np.zeros(cout)
    return params, buffers


@dataclass
class _State:
    coords: np.ndarray | None
    feats: np.ndarray | None


class PSTNet:
    """A configured network with its parameters and batch-norm buffers."""

    def __init__(self, config: NetConfig, params: dict | None = None, buffers: dict | None = None,
                 seed: int = 0, bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        self.config = config
        if params is None:
            params, init_buffers = init_params(config, seed)
            buffers = init_buffers if buffers is None else buffers
        self.params = params
        self.buffers = buffers if buffers is not None else init_params(config, seed)[1]
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.training = False
        self._skips_into = {}
        for src, dst in config.skips:
            self._skips_into.setdefault(dst, []).append(src)

    # -- geometry -------------------------------------------------------

    def plan_geometry(self, coords, rng: np.random.Generator | None = None) -> dict:
        """Tubes and interpolation weights for a batch of coordinates (B, L, N, 3).

        Geometry depends only on coordinates, so in deterministic mode it can be
        computed once per sample and reused across epochs.
        """
        coords = np.asarray(coords, dtype=np.float64)
        levels = {"input": coords}
        cur = coords
        plan = {}
        for layer in self.config.layers:
            if layer.kind == "pstconv":
                tubes = build_tubes(cur, layer.tube, rng)
                plan[layer.name] = tubes
                cur = np.stack([t.anchor_coords for t in tubes])
            elif layer.kind == "psttrans":
                target = levels[layer.target]
                plan[layer.name] = trans_weights(cur, target, layer.tube)
                cur = target
            elif layer.kind == "pool":
                cur = None
            levels[layer.name] = cur
        return plan

    @staticmethod
    def stack_geometry(plans: list[dict]) -> dict:
        """Merge per-sample geometry plans into one batch plan."""
        merged = {}
        for key in plans[0]:
            first = plans[0][key]
            if isinstance(first, list):
                merged[key] = [t for p in plans for t in p[key]]
            else:
                merged[key] = np.concatenate([p[key] for p in plans], axis=0)
        return merged

    # -- forward / backward --------------------------------------------

    def forward(self, coords, feats=None, geometry: dict | None = None,
                rng: np.random.Generator | None = None):
        """Run the network on a batch. Returns (logits, cache).

        Classification logits are (B, num_classes); segmentation logits are
        (B, L, N, num_classes).
        """
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim == 3:
            coords = coords[None]
            feats = None if feats is None else np.asarray(feats)[None]
        if feats is not None:
            feats = np.asarray(feats, dtype=np.float64)
            if feats.shape[-1] == 0:
                feats = None
        in_c = 0 if feats is None else feats.shape[-1]
        if in_c != self.config.in_channels:
            raise ValueError(f"network expects {self.config.in_channels} input channels, got {in_c}")
        P = self.params
        state = _State(coords, feats)
        states = {"input": state}
        caches = []
        for layer in self.config.layers:
            n = layer.name
            if layer.kind == "pstconv":
                spatial = SpatialKernel(P.get(f"{n}.theta_d"), P.get(f"{n}.theta_s"))
                temporal = TemporalKernel(P[f"{n}.T"], P.get(f"{n}.bias"))
                tubes = None if geometry is None else geometry.get(n)
                io = pst_conv_forward(state.coords, state.feats, layer.tube, spatial, temporal, rng, tubes)
                caches.append(io)
                state = _State(io.out_coords, io.out_feats)
            elif layer.kind == "psttrans":
                target = states[layer.target]
                kernel = TransKernel(P[f"{n}.T_prime"], P[f"{n}.S_prime"])
                w = None if geometry is None else geometry.get(n)
                out, cache = pst_trans_conv_forward(state.coords, state.feats, target.coords, kernel,
                                                    layer.tube, weights=w)
                caches.append(cache)
                state = _State(target.coords, out)
            elif layer.kind == "bn":
                bn_state = nn.BatchNormState(P[f"{n}.gamma"], P[f"{n}.beta"],
                                             self.buffers[f"{n}.running_mean"],
                                             self.buffers[f"{n}.running_var"],
                                             self.bn_momentum, self.bn_eps, self.training)
                out, cache = nn.batch_norm(state.feats, bn_state)
                self.buffers[f"{n}.running_mean"] = bn_state.running_mean
                self.buffers[f"{n}.running_var"] = bn_state.running_var
                caches.append(cache)
                state = _State(state.coords, out)
            elif layer.kind == "relu":
                out, mask = nn.relu(state.feats)
                caches.append(mask)
                state = _State(state.coords, out)
            elif layer.kind == "pool":
                out, cache = nn.pool_sequence(state.feats)
                caches.append(cache)
                state = _State(None, out)
            elif layer.kind in ("fc", "conv1d"):
                caches.append(state.feats)
                state = _State(state.coords, nn.fully_connected(state.feats, P[f"{n}.W"], P[f"{n}.b"]))
            widths = []
            for src in self._skips_into.get(n, []):
                extra = states[src].feats
                widths.append(0 if extra is None else extra.shape[-1])
                if extra is not None:
                    state = _State(state.coords, np.concatenate([state.feats, extra], axis=-1))
            states[n] = state
            if widths:
                caches[-1] = (caches[-1], widths)
        return state.feats, {"caches": caches, "states": states}

    def backward(self, cache: dict, grad_logits) -> dict:
        """Gradients of every parameter given dLoss/dlogits."""
        P = self.params
        grads: dict = {}
        pending: dict = {}
        g = np.asarray(grad_logits, dtype=np.float64)
        layers = self.config.layers
        caches = cache["caches"]
        for layer, c in zip(reversed(layers), reversed(caches)):
            n = layer.name
            if n in pending:
                g = g + pending.pop(n)
            if n in self._skips_into:
                c, widths = c
                total = sum(widths)
                if total:
                    own = g.shape[-1] - total
                    parts = np.split(g, np.cumsum([own] + widths)[:-1], axis=-1)
                    g = parts[0]
                    for src, part, w in zip(self._skips_into[n], parts[1:], widths):
                        if w:
                            pending[src] = pending.get(src, 0) + part
            if layer.kind == "pstconv":
                r = pst_conv_backward(c, g)
                for key in ("theta_d", "theta_s", "T", "bias"):
                    if r[key] is not None and f"{n}.{key}" in P:
                        grads[f"{n}.{key}"] = r[key]
                g = r["feats"]
            elif layer.kind == "psttrans":
                r = pst_trans_conv_backward(c, g)
                grads[f"{n}.T_prime"] = r["T_prime"]
                grads[f"{n}.S_prime"] = r["S_prime"]
                g = r["feats"]
            elif layer.kind == "bn":
                g, grads[f"{n}.gamma"], grads[f"{n}.beta"] = nn.batch_norm_backward(c, g)
            elif layer.kind == "relu":
                g = nn.relu_backward(c, g)
            elif layer.kind == "pool":
                g = nn.pool_sequence_backward(c, g)
            elif layer.kind in ("fc", "conv1d"):
                g, grads[f"{n}.W"], grads[f"{n}.b"] = nn.fully_connected_backward(c, P[f"{n}.W"], g)
            if g is None:
                break
        return grads

    def loss_and_grads(self, coords, feats, labels, geometry=None, rng=None):
        logits, cache = self.forward(coords, feats, geometry, rng)
        loss, dlogits = nn.softmax_cross_entropy(logits, labels)
        return loss, self.backward(cache, dlogits), logits

    def predict_proba(self, coords, feats=None, geometry=None) -> np.ndarray:
        was = self.training
        self.training = False
        try:
            logits, _ = self.forward(coords, feats, geometry)
        finally:
            self.training = was
        return nn.softmax(logits)


def evaluate_sequence(model: PSTNet, coords, feats=None, clip_len: int | None = None,
                      frame_stride: int = 1) -> tuple[int, np.ndarray]:
    """Sequence-level class from the mean of clip-level probabilities.

    Returns (class index, mean probability vector).
    """
    coords = np.asarray(coords, dtype=np.float64)
    clip_len = coords.shape[0] if clip_len is None else clip_len
    starts = clip_indices(coords.shape[0], clip_len, frame_stride)
    clip_coords = np.stack([coords[s] for s in starts])
    clip_feats = None if feats is None else np.stack([np.asarray(feats)[s] for s in starts])
    probs = model.predict_proba(clip_coords, clip_feats)
    mean = probs.mean(axis=0)
    return int(np.argmax(mean)), mean


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PSTCKPT1"


def save_checkpoint(path, model: PSTNet, extra: dict | None = None, velocity: dict | None = None) -> None:
    """Flat little-endian float64 blob preceded by a JSON manifest.

    Layout: magic (8 bytes), manifest length (u32 LE), manifest JSON (UTF-8),
    then every tensor's raw bytes at the offset the manifest records.
    ``velocity`` (optimizer momentum buffers) is stored so training can resume
    exactly.
    """
    entries, blobs, offset = [], [], 0
    groups = [("param", model.params), ("buffer", model.buffers), ("velocity", velocity or {})]
    for group, tensors in groups:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "group": group, "shape": list(np.shape(arr)), "offset": offset,
                            "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    manifest = {"config": model.config.to_dict(), "tensors": entries, "dtype": "<f8", "extra": extra or {}}
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def _read_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC or len(raw) < 12:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        manifest = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint manifest") from exc
    body = raw[12 + hlen:]
    groups: dict = {"param": {}, "buffer": {}, "velocity": {}}
    for e in manifest["tensors"]:
        if e["offset"] + e["nbytes"] > len(body):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(body, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        groups.setdefault(e["group"], {})[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return manifest, groups


def load_checkpoint(path) -> tuple[PSTNet, dict]:
    """Inverse of :func:`save_checkpoint`. Returns (model, extra)."""
    manifest, groups = _read_checkpoint(path)
    try:
        config = NetConfig.from_dict(manifest["config"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: checkpoint manifest has no usable config") from exc
    return PSTNet(config, groups["param"], groups["buffer"]), manifest.get("extra", {})


def load_velocity(path) -> dict:
    """Optimizer momentum buffers stored alongside the parameters (empty if none)."""
    return _read_checkpoint(path)[1]["velocity"]
