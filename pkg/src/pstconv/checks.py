"""Finite-difference gradient suite over every differentiable op.

Each check builds a small random instance, reduces the op output to a scalar
through a fixed random projection, and compares the analytic backward pass
with central differences via :func:`pstconv.nn.grad_check`.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .net import LayerSpec, NetConfig, PSTNet
from .pstops import SpatialKernel, TemporalKernel, build_tubes, pst_conv_backward, pst_conv_forward
from .psttrans import TransKernel, pst_trans_conv_backward, pst_trans_conv_forward, trans_weights
from .tube import TubeSpec

EPS = 1e-5
DEFAULT_TOL = 1e-4


def _projected(out: np.ndarray, R: np.ndarray) -> float:
    return float(np.sum(out * R))


def _check_pst_conv(rng, tol, kernel: str) -> nn.GradCheckReport:
    B, L, N, C, Cm, Co = 2, 4, 8, 3, 4, 2
    spec = TubeSpec(l=3, s_t=2, p=(1, 1), s_s=2, r=0.6, K=3)
    coords = rng.uniform(size=(B, L, N, 3))
    feats = rng.normal(size=(B, L, N, C))
    theta_d = rng.normal(size=(Cm, 3)) if kernel != "shared" else None
    theta_s = rng.normal(size=(Cm, C)) if kernel != "displacement" else None
    T = rng.normal(size=(spec.l, Co, Cm))
    bias = rng.normal(size=Co)
    tubes = build_tubes(coords, spec)
    inputs = {"T": T, "bias": bias}
    if theta_d is not None:
        inputs["theta_d"] = theta_d
    if theta_s is not None:
        inputs["theta_s"] = theta_s
        inputs["feats"] = feats
    in_feats = feats if theta_s is not None else None

    def run():
        return pst_conv_forward(coords, in_feats, spec, SpatialKernel(theta_d, theta_s),
                                TemporalKernel(T, bias), tubes=tubes)

    io = run()
    R = rng.normal(size=io.out_feats.shape)
    grads = pst_conv_backward(io, R)
    return nn.grad_check(lambda: _projected(run().out_feats, R), inputs, grads, EPS, tol,
                         name=f"pst_conv[{kernel}]")


def _check_pst_trans(rng, tol) -> nn.GradCheckReport:
    B, L, N, Lp, Np, C, Cm, Co = 2, 5, 8, 3, 2, 3, 4, 2
    spec = TubeSpec(l=3, s_t=2, p=(1, 1), s_s=4, r=0.5, K=3)
    orig = rng.uniform(size=(B, L, N, 3))
    enc_coords = orig[:, [0, 2, 4]][:, :, :Np]
    feats = rng.normal(size=(B, Lp, Np, C))
    kernel = TransKernel(rng.normal(size=(spec.l, Cm, C)), rng.normal(size=(Co, Cm)))
    w = trans_weights(enc_coords, orig, spec)

    def run():
        return pst_trans_conv_forward(enc_coords, feats, orig, kernel, spec, weights=w)[0]

    out, cache = pst_trans_conv_forward(enc_coords, feats, orig, kernel, spec, weights=w)
    R = rng.normal(size=out.shape)
    grads = pst_trans_conv_backward(cache, R)
    inputs = {"feats": feats, "T_prime": kernel.T_prime, "S_prime": kernel.S_prime}
    return nn.grad_check(lambda: _projected(run(), R), inputs, grads, EPS, tol, name="pst_trans_conv")


def _check_batch_norm(rng, tol, training: bool) -> nn.GradCheckReport:
    x = rng.normal(size=(3, 4, 5))
    state = nn.BatchNormState.create(5)
    state.gamma = rng.normal(size=5)
    state.beta = rng.normal(size=5)
    state.running_mean = rng.normal(size=5)
    state.running_var = rng.uniform(0.5, 2.0, size=5)
    frozen = (state.running_mean.copy(), state.running_var.copy())

    def run():
        state.running_mean, state.running_var = frozen[0].copy(), frozen[1].copy()
        return nn.batch_norm(x, state, training)

    y, cache = run()
    R = rng.normal(size=y.shape)
    gx, gg, gb = nn.batch_norm_backward(cache, R)
    inputs = {"x": x, "gamma": state.gamma, "beta": state.beta}
    mode = "train" if training else "eval"
    return nn.grad_check(lambda: _projected(run()[0], R), inputs, {"x": gx, "gamma": gg, "beta": gb},
                         EPS, tol, name=f"batch_norm[{mode}]")


def _check_relu(rng, tol) -> nn.GradCheckReport:
    # keep inputs away from the kink so central differences stay one-sided-free
    x = rng.uniform(0.1, 1.0, size=(4, 6)) * rng.choice([-1.0, 1.0], size=(4, 6))
    y, mask = nn.relu(x)
    R = rng.normal(size=y.shape)
    return nn.grad_check(lambda: _projected(nn.relu(x)[0], R), {"x": x}, {"x": nn.relu_backward(mask, R)},
                         EPS, tol, name="relu")


def _check_pool(rng, tol) -> nn.GradCheckReport:
    x = rng.normal(size=(2, 3, 4, 5))
    y, cache = nn.pool_sequence(x)
    R = rng.normal(size=y.shape)
    return nn.grad_check(lambda: _projected(nn.pool_sequence(x)[0], R), {"x": x},
                         {"x": nn.pool_sequence_backward(cache, R)}, EPS, tol, name="pool_sequence")


def _check_fc(rng, tol, name: str) -> nn.GradCheckReport:
    shape = (5, 4) if name == "fully_connected" else (2, 3, 4, 4)
    x = rng.normal(size=shape)
    W = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    R = rng.normal(size=shape[:-1] + (3,))
    gx, gW, gb = nn.fully_connected_backward(x, W, R)
    return nn.grad_check(lambda: _projected(nn.fully_connected(x, W, b), R), {"x": x, "W": W, "b": b},
                         {"x": gx, "W": gW, "b": gb}, EPS, tol, name=name)


def _check_softmax_ce(rng, tol) -> nn.GradCheckReport:
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    _, g = nn.softmax_cross_entropy(logits, labels)
    return nn.grad_check(lambda: nn.softmax_cross_entropy(logits, labels)[0], {"logits": logits},
                         {"logits": g}, EPS, tol, name="softmax_cross_entropy")


def micro_classification_config(num_classes: int = 3) -> NetConfig:
    """Two PST convolutions with batch norm, pooling and a classifier."""
    t1 = TubeSpec(l=1, s_t=1, p=(0, 0), s_s=2, r=0.5, K=3)
    t2 = TubeSpec(l=3, s_t=2, p=(1, 1), s_s=2, r=1.0, K=3)
    layers = [
        LayerSpec("conv1", "pstconv", t1, 0, 4, 4),
        LayerSpec("conv1.bn", "bn", in_channels=4, out_channels=4),
        LayerSpec("conv1.relu", "relu", in_channels=4, out_channels=4),
        LayerSpec("conv2", "pstconv", t2, 4, 3, 5),
        LayerSpec("pool", "pool", in_channels=5, out_channels=5),
        LayerSpec("fc", "fc", in_channels=5, out_channels=num_classes),
    ]
    return NetConfig("classification", layers, [], num_classes)


def micro_segmentation_config(num_classes: int = 2) -> NetConfig:
    """One PST convolution, one PST transposed convolution with an input skip, and a head."""
    t1 = TubeSpec(l=3, s_t=1, p=(1, 1), s_s=2, r=0.6, K=3)
    tt = TubeSpec(l=1, s_t=1, p=(0, 0), s_s=1, r=0.6, K=3)
    layers = [
        LayerSpec("conv1", "pstconv", t1, 1, 3, 4),
        LayerSpec("conv1.relu", "relu", in_channels=4, out_channels=4),
        LayerSpec("trans1", "psttrans", tt, 4, 3, 3, target="input"),
        LayerSpec("trans1.bn", "bn", in_channels=4, out_channels=4),
        LayerSpec("head", "conv1d", in_channels=4, out_channels=num_classes),
    ]
    return NetConfig("segmentation", layers, [("input", "trans1")], num_classes, in_channels=1)


def _check_net(config: NetConfig, rng, tol, name: str, L: int = 4, N: int = 8, B: int = 2):
    model = PSTNet(config, seed=int(rng.integers(2**31)))
    model.training = True
    coords = rng.uniform(size=(B, L, N, 3))
    feats = rng.normal(size=(B, L, N, config.in_channels)) if config.in_channels else None
    if config.task == "classification":
        labels = rng.integers(0, config.num_classes, size=B)
    else:
        labels = rng.integers(0, config.num_classes, size=(B, L, N))
    geometry = model.plan_geometry(coords)
    snapshot = {k: v.copy() for k, v in model.buffers.items()}

    def loss():
        # batch-norm buffers drift on every training-mode call; pin them
        for k, v in snapshot.items():
            model.buffers[k] = v.copy()
        return model.loss_and_grads(coords, feats, labels, geometry)[0]

    _, grads, _ = model.loss_and_grads(coords, feats, labels, geometry)
    inputs = {k: v for k, v in model.params.items() if k in grads}
    return nn.grad_check(loss, inputs, grads, EPS, tol, name=name)


def gradient_suite(seed: int = 0, tol: float = DEFAULT_TOL, config: NetConfig | None = None,
                   L: int = 4, N: int = 8) -> list[nn.GradCheckReport]:
    """Run every check; ``config`` replaces the built-in micro-nets when given."""
    rng = np.random.default_rng(seed)
    reports = [
        _check_pst_conv(rng, tol, "full"),
        _check_pst_conv(rng, tol, "displacement"),
        _check_pst_conv(rng, tol, "shared"),
        _check_pst_trans(rng, tol),
        _check_batch_norm(rng, tol, True),
        _check_batch_norm(rng, tol, False),
        _check_relu(rng, tol),
        _check_pool(rng, tol),
        _check_fc(rng, tol, "fully_connected"),
        _check_fc(rng, tol, "point_conv1d"),
        _check_softmax_ce(rng, tol),
    ]
    if config is not None:
        reports.append(_check_net(config, rng, tol, f"net[{config.task}]", L, N))
    else:
        reports.append(_check_net(micro_classification_config(), rng, tol, "micro_net[classification]"))
        reports.append(_check_net(micro_segmentation_config(), rng, tol, "micro_net[segmentation]"))
    return reports
