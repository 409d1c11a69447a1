"""Non-transferable teacher objectives and the mixed-batch training loop.

A teacher is trained to stay accurate on the in-distribution blobs while its
outputs and features on the shifted domain are repelled (KL and MMD terms,
their product clamped at one) and optionally pinned to a designated class.
Six variants cover plain supervised learning, the full repulsion objective,
and the ablations that drop one repulsion term or keep only class pinning.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import numerics as nm
from .domains import DomainPair, LabeledSet, mixed_batch

__all__ = [
    "TeacherVariant",
    "NtlConfig",
    "LossBreakdown",
    "ntl_losses",
    "train_teacher",
    "make_teacher_model",
    "write_history_csv",
    "HISTORY_COLUMNS",
]


class TeacherVariant(str, Enum):
    SL = "sl"
    NTL = "ntl"
    NTL_CLS = "ntl_cls"
    SL2DOMAIN = "sl2domain"
    NTL_WO_MMD = "ntl_wo_mmd"
    NTL_WO_KL = "ntl_wo_kl"


@dataclass
class NtlConfig:
    alpha: float = 0.1
    lambda_cls: float = 1.0
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    use_bn: bool = True
    hidden: tuple[int, ...] = (100, 500)
    # reference side of the paired output divergence: True keeps the
    # in-distribution (or teacher) distribution as the KL target
    kl_ref_second: bool = True
    mmd_scales: tuple[float, ...] = (0.5, 1.0, 2.0)
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_cls < 0:
            raise ValueError("alpha and lambda_cls must be nonnegative")
        if self.batch_size % 2 != 0:
            raise ValueError("batch size must be even")


@dataclass
class LossBreakdown:
    l_id: float
    l_out: float
    l_feat: float
    l_cls: float
    clamp_active: bool
    l_total: float


def make_teacher_model(cfg: NtlConfig, n_classes: int, rng) -> nm.MlpModel:
    return nm.make_mlp([2, *cfg.hidden, n_classes], bn=cfg.use_bn, rng=rng)


def _paired_kl_grad(ref_logits, other_logits, kl_ref_second: bool):
    """Divergence between paired rows with a configurable reference side.

    Returns (value, d_ref, d_other); with ``kl_ref_second`` the reference
    distribution is the KL target, i.e. KL(ref || other).
    """
    if kl_ref_second:
        value, d_ref, d_other = nm.categorical_kl_grad(ref_logits, other_logits)
    else:
        value, d_other, d_ref = nm.categorical_kl_grad(other_logits, ref_logits)
    return value, d_ref, d_other


def ntl_losses(
    teacher: nm.MlpModel,
    id_half: LabeledSet,
    ood_half: LabeledSet,
    variant: TeacherVariant,
    cfg: NtlConfig,
    y_ood: int = 0,
    bandwidths=None,
):
    """Per-variant training loss on one mixed batch.

    Returns (LossBreakdown, param_grads) where the gradients belong to the
    assembled total. The plain supervised variant consumes only the
    in-distribution half; every other variant forwards the concatenated
    batch so batchnorm sees the two-domain mixture. ``bandwidths`` overrides
    the per-batch median heuristic for the feature-level MMD.
    """
    variant = TeacherVariant(variant)
    n_classes = teacher.output_width
    if not 0 <= y_ood < n_classes:
        raise ValueError(f"y_ood {y_ood} outside label space [0, {n_classes})")

    if variant == TeacherVariant.SL:
        logits, _, trace = nm.forward(teacher, id_half.points, "train")
        l_id, d_logits = nm.cross_entropy_grad(logits, id_half.labels)
        grads, _ = nm.backward(teacher, trace, d_logits)
        bd = LossBreakdown(l_id, 0.0, 0.0, 0.0, False, l_id)
        return bd, grads

    if len(id_half) != len(ood_half):
        raise ValueError("halves must be paired row for row")
    k = len(id_half)
    X = np.vstack([id_half.points, ood_half.points])
    logits, feats, trace = nm.forward(teacher, X, "train")
    logits_id, logits_ood = logits[:k], logits[k:]
    feats_id, feats_ood = feats[:k], feats[k:]

    l_id, d_ce_id = nm.cross_entropy_grad(logits_id, id_half.labels)
    l_out, d_out_id, d_out_ood = _paired_kl_grad(
        logits_id, logits_ood, cfg.kl_ref_second
    )
    if bandwidths is None:
        bandwidths = nm.median_heuristic_bandwidths(
            feats_ood, feats_id, cfg.mmd_scales
        )
    l_feat, d_feat_ood, d_feat_id = nm.mmd_grad(feats_ood, feats_id, bandwidths)
    ood_targets = np.full(k, y_ood, dtype=np.int64)
    l_cls, d_cls_ood = nm.cross_entropy_grad(logits_ood, ood_targets)

    # assemble the variant total; the min(1, .) clamp zeroes the repulsion
    # gradient once the (weighted) product reaches one
    alpha, lam = cfg.alpha, cfg.lambda_cls
    c_out = c_feat = c_cls = 0.0
    if variant == TeacherVariant.NTL:
        rep = alpha * l_out * l_feat
        clamp = rep >= 1.0
        total = l_id - min(1.0, rep)
        if not clamp:
            c_out, c_feat = -alpha * l_feat, -alpha * l_out
    elif variant == TeacherVariant.NTL_CLS:
        rep = alpha * l_out * l_feat
        clamp = rep >= 1.0
        total = l_id - min(1.0, rep) + lam * l_cls
        if not clamp:
            c_out, c_feat = -alpha * l_feat, -alpha * l_out
        c_cls = lam
    elif variant == TeacherVariant.SL2DOMAIN:
        clamp = False
        total = l_id + lam * l_cls
        c_cls = lam
    elif variant == TeacherVariant.NTL_WO_MMD:
        rep = alpha * l_out
        clamp = rep >= 1.0
        total = l_id - min(1.0, rep) + lam * l_cls
        if not clamp:
            c_out = -alpha
        c_cls = lam
    elif variant == TeacherVariant.NTL_WO_KL:
        rep = alpha * l_feat
        clamp = rep >= 1.0
        total = l_id - min(1.0, rep) + lam * l_cls
        if not clamp:
            c_feat = -alpha
        c_cls = lam
    else:  # pragma: no cover
        raise ValueError(f"unhandled variant {variant}")

    d_logits = np.zeros_like(logits)
    d_logits[:k] += d_ce_id
    d_logits[:k] += c_out * d_out_id
    d_logits[k:] += c_out * d_out_ood
    d_logits[k:] += c_cls * d_cls_ood
    d_features = np.zeros_like(feats)
    d_features[:k] += c_feat * d_feat_id
    d_features[k:] += c_feat * d_feat_ood

    grads, _ = nm.backward(teacher, trace, d_logits, d_features=d_features)
    bd = LossBreakdown(l_id, l_out, l_feat, l_cls, bool(clamp), float(total))
    return bd, grads


HISTORY_COLUMNS = [
    "epoch",
    "l_id",
    "l_out",
    "l_feat",
    "l_cls",
    "l_total",
    "iacc",
    "oacc",
    "olacc",
]


def _accuracy(model, labeled: LabeledSet) -> float:
    return float((nm.predict_classes(model, labeled.points) == labeled.labels).mean())


def _ood_capture(model, labeled: LabeledSet, y_ood: int) -> float:
    return float((nm.predict_classes(model, labeled.points) == y_ood).mean())


def train_teacher(variant, pair: DomainPair, cfg: NtlConfig):
    """Train one teacher variant on a domain pair.

    Returns (model, history) where history holds one row per epoch with the
    mean loss breakdown and, on evaluation epochs, the test accuracies
    (ID accuracy, OOD accuracy to true labels, OOD rate of the designated
    class). Deterministic given ``cfg.seed``.
    """
    variant = TeacherVariant(variant)
    rng = np.random.default_rng(cfg.seed)
    n_classes = int(pair.id_train.labels.max()) + 1
    model = make_teacher_model(cfg, n_classes, rng)
    opt = nm.OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)
    params = model.parameters()

    half = cfg.batch_size // 2
    steps = max(1, min(len(pair.id_train), len(pair.ood_train)) // half)
    history = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(5)
        for _ in range(steps):
            id_half, ood_half = mixed_batch(pair, cfg.batch_size, rng)
            bd, grads = ntl_losses(
                model, id_half, ood_half, variant, cfg, y_ood=pair.ood_class_label
            )
            if not np.isfinite(bd.l_total):
                raise nm.NonFiniteLossError(
                    f"epoch {epoch}: non-finite loss {bd}"
                )
            nm.optimizer_step(params, grads, opt)
            sums += (bd.l_id, bd.l_out, bd.l_feat, bd.l_cls, bd.l_total)
        means = sums / steps
        is_eval = (
            cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0
        ) or epoch == cfg.epochs - 1
        iacc = _accuracy(model, pair.id_test) if is_eval else float("nan")
        oacc = _accuracy(model, pair.ood_test) if is_eval else float("nan")
        olacc = (
            _ood_capture(model, pair.ood_test, pair.ood_class_label)
            if is_eval
            else float("nan")
        )
        history.append(
            {
                "epoch": epoch,
                "l_id": means[0],
                "l_out": means[1],
                "l_feat": means[2],
                "l_cls": means[3],
                "l_total": means[4],
                "iacc": iacc,
                "oacc": oacc,
                "olacc": olacc,
            }
        )
    return model, history


def write_history_csv(history, path, columns=None):
    """Write a training history (list of dicts) with 12-significant-digit
    floats; integer fields stay integers."""
    if columns is None:
        columns = list(history[0].keys()) if history else HISTORY_COLUMNS
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            out = []
            for col in columns:
                v = row[col]
                if isinstance(v, (int, np.integer)):
                    out.append(str(int(v)))
                else:
                    out.append(f"{float(v):.12g}")
            writer.writerow(out)
