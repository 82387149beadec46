"""Framework-free building blocks with explicit forward/backward pairs.

Features are channels-last; every op reduces over all leading axes where it
needs statistics. Backward functions take the cache their forward returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable

import numpy as np

# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   momentum, eps)


def batch_norm(x: np.ndarray, state: BatchNormState, training: bool | None = None):
    """Normalize over every axis but the last. Returns (y, cache).

    In training mode batch statistics are used and the running averages are
    updated as ``running = momentum * running + (1 - momentum) * batch``.
    """
    training = state.training if training is None else training
    C = x.shape[-1]
    flat = x.reshape(-1, C)
    if training:
        if flat.shape[0] < 2:
            raise ValueError("training-mode batch norm needs at least 2 samples per channel")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        n = flat.shape[0]
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var * n / (n - 1)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (flat - mean) * inv_std
    y = x_hat * state.gamma + state.beta
    cache = {"x_hat": x_hat, "inv_std": inv_std, "gamma": state.gamma, "training": training, "shape": x.shape}
    return y.reshape(x.shape), cache


def batch_norm_backward(cache: dict, grad: np.ndarray):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    C = cache["shape"][-1]
    g = grad.reshape(-1, C)
    x_hat = cache["x_hat"]
    grad_gamma = (g * x_hat).sum(axis=0)
    grad_beta = g.sum(axis=0)
    gx_hat = g * cache["gamma"]
    if cache["training"]:
        gx = cache["inv_std"] * (gx_hat - gx_hat.mean(axis=0) - x_hat * (gx_hat * x_hat).mean(axis=0))
    else:
        gx = gx_hat * cache["inv_std"]
    return gx.reshape(cache["shape"]), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Pointwise and pooling
# ---------------------------------------------------------------------------


def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * mask


def pool_sequence(feats: np.ndarray):
    """Average over points within each frame, then max over frames.

    ``feats`` is (..., L', N', C'); returns (..., C') and the cache.
    """
    frame_means = feats.mean(axis=-2)                 # (..., L', C')
    winner = np.argmax(frame_means, axis=-2)          # first maximal frame
    pooled = np.take_along_axis(frame_means, winner[..., None, :], axis=-2)[..., 0, :]
    return pooled, {"winner": winner, "shape": feats.shape}


def pool_sequence_backward(cache: dict, grad: np.ndarray) -> np.ndarray:
    shape = cache["shape"]
    L, N = shape[-3], shape[-2]
    onehot = np.zeros(shape[:-3] + (L, shape[-1]))
    np.put_along_axis(onehot, cache["winner"][..., None, :], grad[..., None, :], axis=-2)
    return np.broadcast_to((onehot / N)[..., None, :], shape).copy()


# ---------------------------------------------------------------------------
# Affine maps
# ---------------------------------------------------------------------------


def fully_connected(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ W.T + b`` on the last axis. ``W`` is (C_out, C_in)."""
    y = x @ W.T
    return y if b is None else y + b


def fully_connected_backward(x: np.ndarray, W: np.ndarray, grad: np.ndarray):
    """Returns (grad_x, grad_W, grad_b)."""
    C_in, C_out = W.shape[1], W.shape[0]
    g = grad.reshape(-1, C_out)
    grad_W = g.T @ x.reshape(-1, C_in)
    return grad @ W, grad_W, g.sum(axis=0)


# per-point 1D convolution with kernel size 1 is the same affine map applied at every point
point_conv1d = fully_connected
point_conv1d_backward = fully_connected_backward


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all leading positions and its gradient.

    ``logits`` is (..., n_classes); ``labels`` holds integer classes with the
    leading shape. A single vector with a scalar label is accepted.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    flat = logits.reshape(-1, logits.shape[-1])
    lab = labels.reshape(-1)
    if lab.shape[0] != flat.shape[0]:
        raise ValueError(f"{lab.shape[0]} labels for {flat.shape[0]} predictions")
    z = flat - flat.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(flat.shape[0])
    loss = float(np.mean(log_norm - z[rows, lab]))
    grad = softmax(flat)
    grad[rows, lab] -= 1.0
    grad /= flat.shape[0]
    return loss, grad.reshape(logits.shape)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class SGDState:
    lr: float = 0.01
    momentum_coeff: float = 0.9
    decay_epochs: list[int] = field(default_factory=lambda: [10, 20])
    decay_rate: float = 0.1
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    def lr_at(self, epoch: int) -> float:
        """Step-decayed learning rate for ``epoch`` (0-based)."""
        n_decays = sum(1 for e in self.decay_epochs if epoch >= e)
        # decimal arithmetic keeps 0.01 * 0.1**2 equal to the literal 0.0001
        return float(Decimal(repr(self.lr)) * Decimal(repr(self.decay_rate)) ** n_decays)


def sgd_step(params: dict, grads: dict, state: SGDState, epoch: int) -> float:
    """In-place momentum SGD update; returns the learning rate used."""
    lr = state.lr_at(epoch)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum_coeff * v + g
        state.velocity[name] = v
        p -= lr * v
    return lr


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" (worst: {self.worst})" if self.worst else ""
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}){extra}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max absolute difference over the larger gradient magnitude of the pair.

    ``floor`` bounds the denominator so identically-zero gradients (a bias
    feeding batch norm) compare finite-difference noise against an absolute
    scale instead of against zero.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(f: Callable[[], float], inputs: dict, analytic: dict, eps: float = 1e-5,
               tol: float = 1e-4, name: str = "op") -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Args:
        f: zero-argument scalar function reading the arrays in ``inputs``.
        inputs: name -> array, perturbed in place one coordinate at a time.
        analytic: name -> gradient array of the same shape.
    """
    worst_err, worst_name = 0.0, ""
    for key, arr in inputs.items():
        numeric = np.zeros_like(arr, dtype=np.float64)
        for ix in np.ndindex(arr.shape):
            orig = arr[ix]
            arr[ix] = orig + eps
            up = f()
            arr[ix] = orig - eps
            down = f()
            arr[ix] = orig
            numeric[ix] = (up - down) / (2 * eps)
        err = relative_error(np.asarray(analytic[key]), numeric)
        if err >= worst_err:
            worst_err, worst_name = err, key
    return GradCheckReport(name, worst_err, tol, worst_name)
