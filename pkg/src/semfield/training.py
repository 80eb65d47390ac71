"""Contrastive training of the field against its embedding tables.

Two weighted InfoNCE losses share the trunk: the semantic loss pulls
f(P) toward the text row of the point's label (weighted by detector
confidence c), the visual loss pulls h(P) toward the image row of the
point's source detection (weighted by exp(-d/sigma) for camera distance
d).  An optional instance head adds plain cross-entropy, scaled by alpha.

Denominators include the positive term by default (standard InfoNCE,
keeps every per-point term non-negative).  The exclusive mode restores
the reading where only batch members with a *different* key form the
denominator; points whose batch has no such member contribute zero.

All softmax/log-sum-exp arithmetic runs in float64 regardless of model
dtype, so float32 training is deterministic and float64 gradient checks
are exact to roundoff.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from semfield.dataset import Batch, SceneDataset, sample_batch
from semfield.encoding import encode, encode_backward
from semfield.errors import InvalidInputError, NumericError
from semfield.network import (
    FieldModel,
    l2_normalize,
    l2_normalize_backward,
    l2_normalize_cached,
    save_model,
)

TAU_FLOOR = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    epochs: int = 100
    batch_size: int = 12544
    alpha: float = 100.0
    seed: int = 0
    distance_scale: float = 1.0  # sigma in the visual weight exp(-d/sigma)
    exclusive_denominator: bool = False
    iters_per_epoch: int | None = None  # None -> ceil(len(ds) / batch_size)
    checkpoint_interval: int = 0  # steps between checkpoints; 0 = none

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidInputError("learning rate must be positive")
        if self.weight_decay < 0:
            raise InvalidInputError("weight decay must be non-negative")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise InvalidInputError("momentum coefficients must lie in [0, 1)")
        if self.epsilon <= 0:
            raise InvalidInputError("epsilon must be positive")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")
        if self.batch_size < 2:
            raise InvalidInputError("contrastive losses need batch size >= 2")
        if self.alpha < 0:
            raise InvalidInputError("alpha must be non-negative")
        if self.distance_scale <= 0:
            raise InvalidInputError("distance scale must be positive")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise InvalidInputError("iterations per epoch must be >= 1")


@dataclass(frozen=True)
class LossReport:
    """Per-step loss values; total = semantic + visual + alpha * instance."""

    step: int
    semantic: float
    visual: float
    instance: float | None
    total: float
    tau_semantic: float
    tau_visual: float

    def __post_init__(self):
        values = [self.semantic, self.visual, self.total]
        if self.instance is not None:
            values.append(self.instance)
        if not all(math.isfinite(v) for v in values):
            raise NumericError(f"non-finite loss at step {self.step}")

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "semantic": self.semantic,
            "visual": self.visual,
            "instance": self.instance,
            "total": self.total,
            "tau_semantic": self.tau_semantic,
            "tau_visual": self.tau_visual,
        }


def _weighted_info_nce(
    pred: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    log_tau,
    keys: np.ndarray,
    exclusive: bool,
):
    """Batch-mean weighted InfoNCE and its exact gradients.

    Scores are S[i, j] = pred_i . targets_j / tau.  Returns
    (loss, d_pred, d_log_tau); d_log_tau uses dS/d(log tau) = -S.
    """
    n = pred.shape[0]
    if n < 2:
        raise InvalidInputError("contrastive loss needs at least 2 points")
    if pred.shape != targets.shape:
        raise InvalidInputError(
            f"prediction shape {pred.shape} != target shape {targets.shape}"
        )
    lt = float(log_tau)
    if not -80.0 < lt < 80.0:  # exp() would overflow or underflow to 0
        raise NumericError(f"temperature out of range: log tau = {lt!r}")
    tau = math.exp(lt)
    scores = (pred.astype(np.float64) @ targets.astype(np.float64).T) / tau
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite contrastive scores")
    w = weights.astype(np.float64)
    diag = np.arange(n)

    if exclusive:
        in_denom = keys[None, :] != keys[:, None]
        has_neg = in_denom.any(axis=1)
        masked = np.where(in_denom, scores, -np.inf)
        row_max = np.max(masked, axis=1, initial=-np.inf)
        safe_max = np.where(has_neg, row_max, 0.0)
        sums = np.exp(masked - safe_max[:, None]).sum(axis=1)
        lse = np.where(has_neg, safe_max + np.log(np.where(has_neg, sums, 1.0)), 0.0)
        per_point = np.where(has_neg, -scores[diag, diag] + lse, 0.0)
        probs = np.where(
            in_denom & has_neg[:, None], np.exp(masked - lse[:, None]), 0.0
        )
        d_scores = (w[:, None] / n) * probs
        d_scores[diag, diag] -= np.where(has_neg, w / n, 0.0)
    else:
        row_max = scores.max(axis=1, keepdims=True)
        lse = row_max[:, 0] + np.log(np.exp(scores - row_max).sum(axis=1))
        per_point = -scores[diag, diag] + lse
        probs = np.exp(scores - lse[:, None])
        d_scores = (w[:, None] / n) * probs
        d_scores[diag, diag] -= w / n

    loss = float((w * per_point).sum() / n)
    if not math.isfinite(loss):
        raise NumericError("non-finite contrastive loss")
    d_pred = ((d_scores @ targets.astype(np.float64)) / tau).astype(pred.dtype)
    d_log_tau = float(-(d_scores * scores).sum())
    return loss, d_pred, d_log_tau


def semantic_label_loss(
    pred: np.ndarray,
    label_ids: np.ndarray,
    confidences: np.ndarray,
    text_table: np.ndarray,
    log_tau,
    exclusive: bool = False,
):
    """Confidence-weighted InfoNCE against normalized text rows.

    Returns (loss, d_pred, d_log_tau).
    """
    if np.any(label_ids >= text_table.shape[0]):
        raise InvalidInputError("label id out of range of text table")
    targets = l2_normalize(text_table[label_ids])
    return _weighted_info_nce(pred, targets, confidences, log_tau, label_ids, exclusive)


def visual_feature_loss(
    pred: np.ndarray,
    image_emb_ids: np.ndarray,
    distances: np.ndarray,
    image_table: np.ndarray,
    log_tau,
    distance_scale: float = 1.0,
    exclusive: bool = False,
):
    """Distance-weighted InfoNCE against normalized image rows.

    Weight per point is exp(-d / distance_scale); returns
    (loss, d_pred, d_log_tau).
    """
    if np.any(image_emb_ids >= image_table.shape[0]):
        raise InvalidInputError("image embedding id out of range of image table")
    weights = np.exp(-distances.astype(np.float64) / distance_scale)
    targets = l2_normalize(image_table[image_emb_ids])
    return _weighted_info_nce(pred, targets, weights, log_tau, image_emb_ids, exclusive)


def instance_loss(logits: np.ndarray, instance_ids: np.ndarray):
    """Mean softmax cross-entropy; returns (loss, d_logits)."""
    n, classes = logits.shape
    ids = np.asarray(instance_ids)
    if np.any(ids < 0) or np.any(ids >= classes):
        raise InvalidInputError(
            f"instance id out of range [0, {classes - 1}]"
        )
    scores = logits.astype(np.float64)
    row_max = scores.max(axis=1, keepdims=True)
    log_probs = scores - row_max - np.log(np.exp(scores - row_max).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), ids].mean())
    if not math.isfinite(loss):
        raise NumericError("non-finite instance loss")
    d_logits = np.exp(log_probs)
    d_logits[np.arange(n), ids] -= 1.0
    return loss, (d_logits / n).astype(logits.dtype)


def total_loss(semantic: float, visual: float, instance: float | None, alpha: float) -> float:
    if instance is None:
        return semantic + visual
    return semantic + visual + alpha * instance


def loss_and_grads(
    model: FieldModel,
    batch: Batch,
    text_table: np.ndarray,
    image_table: np.ndarray,
    cfg: TrainConfig,
    instance_ids: np.ndarray | None = None,
    step: int = 0,
):
    """One full forward/backward pass over a batch.

    Returns (LossReport, grads) with grads keyed like model.parameters().
    The trunk gradient sums the contributions of every active head.
    """
    points = batch.positions
    feats = encode(points, model.grid)
    if not np.all(np.isfinite(feats)):
        raise NumericError("non-finite values in hash encoding")
    grads: dict[str, np.ndarray] = {}
    d_feats = np.zeros_like(feats)

    z_s, cache_s = model.head_semantic.forward_cached(feats, "semantic")
    pred_s, ncache_s = l2_normalize_cached(z_s)
    loss_s, d_pred_s, d_tau_s = semantic_label_loss(
        pred_s,
        batch.label_ids,
        batch.confidences,
        text_table,
        model.log_tau_semantic,
        exclusive=cfg.exclusive_denominator,
    )
    d_f, head_grads = model.head_semantic.backward(
        cache_s, l2_normalize_backward(ncache_s, d_pred_s)
    )
    d_feats += d_f
    for key, grad in head_grads.items():
        grads[f"semantic.{key}"] = grad
    grads["log_tau_semantic"] = np.array(d_tau_s, dtype=model.dtype)

    z_v, cache_v = model.head_visual.forward_cached(feats, "visual")
    pred_v, ncache_v = l2_normalize_cached(z_v)
    loss_v, d_pred_v, d_tau_v = visual_feature_loss(
        pred_v,
        batch.image_emb_ids,
        batch.distances,
        image_table,
        model.log_tau_visual,
        distance_scale=cfg.distance_scale,
        exclusive=cfg.exclusive_denominator,
    )
    d_f, head_grads = model.head_visual.backward(
        cache_v, l2_normalize_backward(ncache_v, d_pred_v)
    )
    d_feats += d_f
    for key, grad in head_grads.items():
        grads[f"visual.{key}"] = grad
    grads["log_tau_visual"] = np.array(d_tau_v, dtype=model.dtype)

    loss_i = None
    if model.head_instance is not None and instance_ids is not None:
        logits, cache_i = model.head_instance.forward_cached(feats, "instance")
        loss_i, d_logits = instance_loss(logits, instance_ids)
        d_f, head_grads = model.head_instance.backward(cache_i, cfg.alpha * d_logits)
        d_feats += d_f
        for key, grad in head_grads.items():
            grads[f"instance.{key}"] = grad

    for level, grad in enumerate(encode_backward(points, d_feats, model.grid)):
        grads[f"table{level}"] = grad

    report = LossReport(
        step=step,
        semantic=loss_s,
        visual=loss_v,
        instance=loss_i,
        total=total_loss(loss_s, loss_v, loss_i, cfg.alpha),
        tau_semantic=model.tau_semantic,
        tau_visual=model.tau_visual,
    )
    return report, grads


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    step: int,
):
    """Adaptive-moment update with bias correction, in place.

    Decoupled weight decay multiplies parameters by (1 - lr * wd) before
    the moment update; log-temperatures are exempt from decay.
    """
    if step < 1:
        raise InvalidInputError("optimizer step count starts at 1")
    lr = cfg.learning_rate
    b1, b2 = cfg.betas
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for {name}")
        if cfg.weight_decay and not name.startswith("log_tau"):
            param *= 1.0 - lr * cfg.weight_decay
        if name not in state:
            state[name] = (np.zeros_like(param), np.zeros_like(param))
        m, v = state[name]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * np.square(grad)
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        param -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return params, state


def _write_checkpoint(directory: Path, model: FieldModel, history: list[LossReport], step: int):
    directory.mkdir(parents=True, exist_ok=True)
    save_model(model, directory / f"step_{step:06d}.sfm")
    sidecar = {
        "step": step,
        "seed": model.seed,
        "losses": [r.to_dict() for r in history],
    }
    with open(directory / f"step_{step:06d}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")


def train(
    ds: SceneDataset,
    cfg: TrainConfig,
    model: FieldModel,
    checkpoint_dir=None,
    instance_ids: np.ndarray | None = None,
) -> tuple[FieldModel, list[LossReport]]:
    """Run epochs x iters_per_epoch optimization steps on the dataset.

    Fully determined by cfg.seed: batches are drawn by (seed, step) and
    nothing else consumes randomness.  ``instance_ids`` is an optional
    per-record id array in [0, K]; if the model has an instance head and
    ids are given, the cross-entropy term is trained as well.

    On divergence (any non-finite loss, activation, or gradient) raises
    a numeric error; checkpoints already on disk are left in place.
    """
    if len(ds) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if model.head_semantic.out_dim != ds.tables.text_dim:
        raise InvalidInputError(
            f"semantic head emits {model.head_semantic.out_dim}-d but text "
            f"table rows are {ds.tables.text_dim}-d"
        )
    if model.head_visual.out_dim != ds.tables.image_dim:
        raise InvalidInputError(
            f"visual head emits {model.head_visual.out_dim}-d but image "
            f"table rows are {ds.tables.image_dim}-d"
        )
    if instance_ids is not None:
        if model.head_instance is None:
            raise InvalidInputError("instance ids given but model has no instance head")
        if len(instance_ids) != len(ds):
            raise InvalidInputError("instance ids length does not match dataset")

    iters = cfg.iters_per_epoch or max(1, math.ceil(len(ds) / cfg.batch_size))
    total_steps = cfg.epochs * iters
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    log_tau_floor = math.log(TAU_FLOOR)

    params = model.parameters()
    state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    history: list[LossReport] = []
    last_checkpoint = None
    for step in range(1, total_steps + 1):
        batch = sample_batch(ds, cfg.batch_size, cfg.seed, step)
        ids = instance_ids[batch.indices] if instance_ids is not None else None
        try:
            report, grads = loss_and_grads(
                model, batch, ds.tables.text, ds.tables.image, cfg, ids, step=step
            )
            optimizer_step(params, grads, state, cfg, step)
        except NumericError as exc:
            where = (
                f"last checkpoint at step {last_checkpoint}"
                if last_checkpoint is not None
                else "no checkpoint written"
            )
            raise NumericError(f"training diverged at step {step} ({where}): {exc}") from exc
        for name in ("log_tau_semantic", "log_tau_visual"):
            np.maximum(params[name], log_tau_floor, out=params[name])
        model.step_count = step
        history.append(report)
        if (
            checkpoint_dir is not None
            and cfg.checkpoint_interval
            and step % cfg.checkpoint_interval == 0
        ):
            _write_checkpoint(checkpoint_dir, model, history, step)
            last_checkpoint = step
    return model, history
