"""Training and evaluation loops shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .data import PointCloudSequence, clip_indices
from .net import PSTNet, save_checkpoint

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    return np.bincount(truth * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def mean_iou(pred, truth, num_classes: int) -> float:
    """Mean over classes of TP / (TP + FP + FN); classes absent from both pred and truth are skipped."""
    cm = confusion_matrix(pred, truth, num_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = denom > 0
    if not present.any():
        return float("nan")
    return float(np.mean(tp[present] / denom[present]))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class ClipSet:
    """Every training unit as (sequence index, frame indices)."""

    sequences: list[PointCloudSequence]
    units: list[tuple[int, np.ndarray]]

    @classmethod
    def from_sequences(cls, sequences, clip_len: int | None = None, frame_stride: int = 1) -> "ClipSet":
        units = []
        for i, seq in enumerate(sequences):
            if clip_len is None or clip_len == seq.L and frame_stride == 1:
                units.append((i, np.arange(seq.L)))
            else:
                units.extend((i, idx) for idx in clip_indices(seq.L, clip_len, frame_stride))
        return cls(list(sequences), units)

    def __len__(self) -> int:
        return len(self.units)

    def batch(self, which) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
        coords, feats, labels = [], [], []
        for u in which:
            i, idx = self.units[u]
            seq = self.sequences[i]
            coords.append(np.asarray(seq.coords[idx], dtype=np.float64))
            if seq.feats is not None:
                feats.append(np.asarray(seq.feats[idx], dtype=np.float64))
            labels.append(seq.point_labels[idx] if seq.point_labels is not None else seq.label)
        return np.stack(coords), (np.stack(feats) if feats else None), np.asarray(labels)


class GeometryCache:
    """Per-unit geometry plans, reused across epochs (deterministic mode only)."""

    def __init__(self, model: PSTNet, clips: ClipSet):
        self.model = model
        self.clips = clips
        self._plans: dict[int, dict] = {}

    def plan(self, which) -> dict:
        missing = [u for u in which if u not in self._plans]
        if missing:
            coords, _, _ = self.clips.batch(missing)
            for u, c in zip(missing, coords):
                self._plans[u] = self.model.plan_geometry(c[None])
        return PSTNet.stack_geometry([self._plans[u] for u in which])


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    split: str
    loss: float
    metric: float
    lr: float
    extra: dict = field(default_factory=dict)


def _check_finite(loss: float, params: dict, step: int):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} at step {step}")
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"non-finite values in parameter {name} after step {step}")


def train_epoch(model: PSTNet, clips: ClipSet, sgd: nn.SGDState, epoch: int, batch_size: int,
                rng: np.random.Generator, cache: GeometryCache | None = None,
                sample_rng: np.random.Generator | None = None) -> tuple[float, float]:
    """One pass over ``clips`` in shuffled mini-batches. Returns (mean loss, lr)."""
    model.training = True
    order = rng.permutation(len(clips))
    losses, lr = [], sgd.lr_at(epoch)
    for step, start in enumerate(range(0, len(order), batch_size)):
        which = order[start:start + batch_size]
        if len(which) < 2 and len(order) >= 2:
            continue  # batch norm needs more than one sample
        coords, feats, labels = clips.batch(which)
        geometry = cache.plan(which) if cache is not None else None
        loss, grads, _ = model.loss_and_grads(coords, feats, labels, geometry, sample_rng)
        lr = nn.sgd_step(model.params, grads, sgd, epoch)
        _check_finite(loss, model.params, step)
        losses.append(loss)
    model.training = False
    return float(np.mean(losses)), lr


def evaluate_classification(model: PSTNet, sequences: list[PointCloudSequence], clip_len: int | None = None,
                            frame_stride: int = 1, batch_size: int = 32) -> dict:
    """Clip-probability-averaged sequence accuracy and mean clip loss."""
    model.training = False
    correct, losses = 0, []
    preds = []
    for seq in sequences:
        cl = seq.L if clip_len is None else clip_len
        starts = clip_indices(seq.L, cl, frame_stride)
        probs = []
        for b in range(0, len(starts), batch_size):
            idx = starts[b:b + batch_size]
            c = np.stack([np.asarray(seq.coords[i], dtype=np.float64) for i in idx])
            f = None if seq.feats is None else np.stack([np.asarray(seq.feats[i], dtype=np.float64) for i in idx])
            probs.append(model.predict_proba(c, f))
        probs = np.concatenate(probs)
        losses.append(float(-np.mean(np.log(np.maximum(probs[:, seq.label], 1e-300)))))
        pred = int(np.argmax(probs.mean(axis=0)))
        preds.append(pred)
        correct += pred == seq.label
    return {"loss": float(np.mean(losses)), "accuracy": correct / max(len(sequences), 1),
            "predictions": preds}


def evaluate_segmentation(model: PSTNet, sequences: list[PointCloudSequence], clip_len: int = 3,
                          frame_stride: int = 1, batch_size: int = 16) -> dict:
    """Per-point accuracy and mIoU over every clip of every sequence."""
    model.training = False
    clips = ClipSet.from_sequences(sequences, clip_len, frame_stride)
    preds, truths, losses = [], [], []
    for b in range(0, len(clips), batch_size):
        coords, feats, labels = clips.batch(range(b, min(b + batch_size, len(clips))))
        probs = model.predict_proba(coords, feats)
        flat = probs.reshape(-1, probs.shape[-1])
        lab = labels.reshape(-1)
        losses.append(float(-np.mean(np.log(np.maximum(flat[np.arange(len(lab)), lab], 1e-300)))))
        preds.append(np.argmax(probs, axis=-1).reshape(-1))
        truths.append(lab)
    pred, truth = np.concatenate(preds), np.concatenate(truths)
    k = model.config.num_classes
    return {"loss": float(np.mean(losses)), "accuracy": float(np.mean(pred == truth)),
            "miou": mean_iou(pred, truth, k)}


def evaluate(model: PSTNet, sequences, clip_len=None, frame_stride=1) -> dict:
    if model.config.task == "classification":
        return evaluate_classification(model, sequences, clip_len, frame_stride)
    return evaluate_segmentation(model, sequences, clip_len or 3, frame_stride)


def headline_metric(model: PSTNet, result: dict) -> float:
    return result["accuracy"] if model.config.task == "classification" else result["miou"]


def fit(model: PSTNet, train_set: list[PointCloudSequence], test_set: list[PointCloudSequence] | None,
        epochs: int, batch_size: int = 16, seed: int = 0, sgd: nn.SGDState | None = None,
        clip_len: int | None = None, frame_stride: int = 1, out_dir=None, start_epoch: int = 0,
        on_epoch: Callable[[EpochLog], None] | None = None, cache_geometry: bool = True,
        best_metric: float = -np.inf) -> list[EpochLog]:
    """Train with momentum SGD and step decay, evaluating after each epoch.

    When ``out_dir`` is given, ``metrics.csv`` gains one row per split per
    epoch, and ``last.ckpt`` / ``best.ckpt`` are written (best by test accuracy
    for classification, mIoU for segmentation). ``start_epoch`` and
    ``best_metric`` continue an interrupted run.
    """
    sgd = sgd or nn.SGDState()
    if model.config.task == "segmentation" and clip_len is None:
        clip_len = 3
    clips = ClipSet.from_sequences(train_set, clip_len, frame_stride)
    cache = GeometryCache(model, clips) if cache_geometry else None
    history: list[EpochLog] = []
    best = best_metric
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["epoch", "split", "loss", "accuracy", "miou", "lr"])
    try:
        for epoch in range(start_epoch, start_epoch + epochs):
            # per-epoch shuffling stream so a resumed run sees the same batches
            rng = np.random.default_rng((seed, epoch))
            loss, lr = train_epoch(model, clips, sgd, epoch, batch_size, rng, cache)
            rows = [EpochLog(epoch, "train", loss, float("nan"), lr)]
            if test_set:
                res = evaluate(model, test_set, clip_len, frame_stride)
                rows.append(EpochLog(epoch, "test", res["loss"], headline_metric(model, res), lr,
                                     {k: v for k, v in res.items() if k != "predictions"}))
            for row in rows:
                history.append(row)
                log.info("epoch %d %s loss %.4f metric %.4f lr %g", row.epoch, row.split, row.loss, row.metric, row.lr)
                if on_epoch:
                    on_epoch(row)
                if writer:
                    writer.writerow([row.epoch, row.split, f"{row.loss:.6f}",
                                     f"{row.extra.get('accuracy', float('nan')):.6f}",
                                     f"{row.extra.get('miou', float('nan')):.6f}", repr(row.lr)])
            if out is not None:
                fh.flush()
                meta = {"epoch": epoch, "lr": lr, "seed": seed}
                if test_set:
                    meta["metric"] = rows[-1].metric
                save_checkpoint(out / "last.ckpt", model, meta, sgd.velocity)
                if test_set and rows[-1].metric > best:
                    best = rows[-1].metric
                    save_checkpoint(out / "best.ckpt", model, meta, sgd.velocity)
    finally:
        if writer:
            fh.close()
    return history
