"""Adversarial trap escaping: probe, group, distill, forget.

Synthetic samples are probed with an untargeted sign-gradient attack against
the frozen teacher. Samples whose prediction flips are "fragile" and treated
as in-distribution-like (normal distillation targets); samples that survive
are "robust" and treated as out-of-distribution-like (the student is pushed
away from the teacher on them, clamped for stability).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .dfkd import DfkdConfig, _disagreement_grad, _epoch_metrics, generator_step
from .dfkd import make_generator, make_student
from .domains import DomainPair, noise_batch

__all__ = [
    "AttackConfig",
    "GroupedBatch",
    "AtescConfig",
    "pgd_untargeted",
    "fgsm",
    "group_split",
    "atesc_loss",
    "run_dfkd_atesc",
    "export_grouped_csv",
    "ATESC_HISTORY_COLUMNS",
]


@dataclass
class AttackConfig:
    epsilon: float = 0.225  # half the default blob std
    steps: int = 10
    step_size: float | None = None  # defaults to epsilon / 4
    random_start: bool = False
    box: tuple[float, float] | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("need at least one attack step")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.box is not None and not self.box[0] < self.box[1]:
            raise ValueError("box bounds must satisfy lo < hi")

    @property
    def eta(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0


@dataclass
class GroupedBatch:
    """Disjoint partition of a probed batch; labels are the teacher argmax
    on the unperturbed samples."""

    fragile: np.ndarray
    fragile_labels: np.ndarray
    robust: np.ndarray
    robust_labels: np.ndarray

    @property
    def n_fragile(self) -> int:
        return self.fragile.shape[0]

    @property
    def n_robust(self) -> int:
        return self.robust.shape[0]


@dataclass
class AtescConfig:
    attack: AttackConfig = field(default_factory=AttackConfig)
    lam: float = 1e-4
    ckd_only: bool = False
    attack_kind: str = "pgd"  # or "fgsm"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.attack_kind not in ("pgd", "fgsm"):
            raise ValueError(f"unknown attack kind {self.attack_kind!r}")


def _input_ce_grad(teacher: nm.MlpModel, x: np.ndarray, labels: np.ndarray):
    logits, _, trace = nm.forward(teacher, x, "eval")
    _, d_logits = nm.cross_entropy_grad(logits, labels)
    _, dx = nm.backward(teacher, trace, d_logits)
    return dx


def pgd_untargeted(
    teacher: nm.MlpModel,
    X,
    atk: AttackConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Iterated sign-gradient ascent on the cross entropy of the original
    predictions, projected onto the l-inf ball around the original points.

    The attacked labels are the teacher argmax on the unperturbed inputs and
    stay fixed across iterations. The teacher runs in eval mode throughout,
    so probing never touches its running statistics.
    """
    X0 = nm.as_matrix(X).copy()
    y0 = nm.predict_classes(teacher, X0)
    x = X0.copy()
    if atk.random_start:
        if rng is None:
            rng = np.random.default_rng(0)
        x = X0 + rng.uniform(-atk.epsilon, atk.epsilon, size=X0.shape)
    eta = atk.eta
    for _ in range(atk.steps):
        dx = _input_ce_grad(teacher, x, y0)
        x = x + eta * np.sign(dx)
        x = X0 + np.clip(x - X0, -atk.epsilon, atk.epsilon)
        if atk.box is not None:
            x = np.clip(x, atk.box[0], atk.box[1])
    return x


def fgsm(teacher: nm.MlpModel, X, epsilon: float) -> np.ndarray:
    """Single sign-gradient step of size epsilon: one-step PGD."""
    atk = AttackConfig(
        epsilon=epsilon, steps=1, step_size=epsilon, random_start=False, box=None
    )
    return pgd_untargeted(teacher, X, atk)


def group_split(teacher: nm.MlpModel, X, X_hat) -> GroupedBatch:
    """Partition by probe outcome: rows whose teacher argmax changed go to
    the fragile group, the rest to the robust group."""
    X, X_hat = nm.as_matrix(X), nm.as_matrix(X_hat)
    if X.shape != X_hat.shape:
        raise ValueError("probed batch must align row for row with the original")
    y0 = nm.predict_classes(teacher, X)
    y1 = nm.predict_classes(teacher, X_hat)
    flipped = y1 != y0
    return GroupedBatch(
        fragile=X[flipped],
        fragile_labels=y0[flipped],
        robust=X[~flipped],
        robust_labels=y0[~flipped],
    )


def atesc_loss(
    student: nm.MlpModel,
    teacher: nm.MlpModel,
    grouped: GroupedBatch,
    lam: float,
    kl_ref_second: bool = True,
    t_logits: np.ndarray | None = None,
):
    """Calibrated distillation on the fragile group minus the clamped,
    weighted forgetting term on the robust group.

    Returns (total, l_ckd, l_forget, clamp_active, student_grads). Only the
    student receives gradients; an empty fragile group contributes no
    distillation signal, an empty robust group no forgetting signal.
    """
    kf, kr = grouped.n_fragile, grouped.n_robust
    if kf + kr == 0:
        raise ValueError("both groups empty: degenerate probing batch")
    X = np.vstack([grouped.fragile, grouped.robust])
    if t_logits is None:
        t_logits, _, _ = nm.forward(teacher, X, "eval")
    s_logits, _, s_trace = nm.forward(student, X, "train")

    d_s = np.zeros_like(s_logits)
    l_ckd = 0.0
    if kf:
        l_ckd, _, d_f = _disagreement_grad(
            t_logits[:kf], s_logits[:kf], kl_ref_second
        )
        d_s[:kf] = d_f
    l_forget = 0.0
    clamp_active = False
    if kr and lam > 0.0:
        l_forget, _, d_r = _disagreement_grad(
            t_logits[kf:], s_logits[kf:], kl_ref_second
        )
        clamp_active = lam * l_forget >= 1.0
        if not clamp_active:
            d_s[kf:] = -lam * d_r
    elif kr:
        # forgetting disabled; still no gradient on the robust rows
        pass
    total = l_ckd - min(1.0, lam * l_forget)
    grads, _ = nm.backward(student, s_trace, d_s)
    return float(total), float(l_ckd), float(l_forget), clamp_active, grads


ATESC_HISTORY_COLUMNS = [
    "epoch",
    "l_syn",
    "l_bn",
    "l_ckd",
    "l_forget",
    "n_fragile",
    "n_robust",
    "frac_fragile",
    "iacc",
    "oacc",
    "olacc",
]


def run_dfkd_atesc(
    teacher: nm.MlpModel,
    pair: DomainPair,
    dfkd_cfg: DfkdConfig,
    atesc_cfg: AtescConfig,
):
    """Distillation loop with probing: per epoch, generator step(s) as in the
    baseline, then one fresh synthetic batch is probed and grouped, and the
    student takes its steps on the grouped loss (the grouping is reused
    across the student steps of the epoch).

    Returns (student, generator, history); history rows add group sizes and
    both loss terms. Epochs with an empty fragile group simply contribute no
    distillation term.
    """
    rng = np.random.default_rng(dfkd_cfg.seed)
    gen = make_generator(dfkd_cfg, teacher.input_width, rng)
    student = make_student(dfkd_cfg, teacher.input_width, teacher.output_width, rng)
    gen_opt = nm.OptimizerState(learning_rate=dfkd_cfg.gen_lr)
    student_opt = nm.OptimizerState(learning_rate=dfkd_cfg.student_lr)
    lam = 0.0 if atesc_cfg.ckd_only else atesc_cfg.lam

    history = []
    for epoch in range(dfkd_cfg.epochs):
        l_syn = l_bn = 0.0
        for _ in range(dfkd_cfg.g_steps):
            l_syn, l_bn = generator_step(
                gen, student, teacher, gen_opt, dfkd_cfg, rng
            )
        noise = noise_batch(dfkd_cfg.batch_size, dfkd_cfg.noise_dim, rng)
        synth, _, _ = nm.forward(gen, noise, "eval")
        if atesc_cfg.attack_kind == "fgsm":
            probed = fgsm(teacher, synth, atesc_cfg.attack.epsilon)
        else:
            probed = pgd_untargeted(teacher, synth, atesc_cfg.attack, rng)
        grouped = group_split(teacher, synth, probed)

        X = np.vstack([grouped.fragile, grouped.robust])
        t_logits, _, _ = nm.forward(teacher, X, "eval")
        l_ckd = l_forget = 0.0
        for _ in range(dfkd_cfg.s_steps):
            total, l_ckd, l_forget, _, grads = atesc_loss(
                student,
                teacher,
                grouped,
                lam,
                kl_ref_second=dfkd_cfg.kl_ref_second,
                t_logits=t_logits,
            )
            if not np.isfinite(total):
                raise nm.NonFiniteLossError(
                    f"epoch {epoch}: non-finite grouped loss {total}"
                )
            nm.optimizer_step(student.parameters(), grads, student_opt)
        if atesc_cfg.ckd_only:
            l_forget = 0.0

        do_eval = (
            dfkd_cfg.eval_every > 0 and (epoch + 1) % dfkd_cfg.eval_every == 0
        ) or epoch == dfkd_cfg.epochs - 1
        iacc, oacc, olacc = _epoch_metrics(student, pair, do_eval)
        n = grouped.n_fragile + grouped.n_robust
        history.append(
            {
                "epoch": epoch,
                "l_syn": l_syn,
                "l_bn": l_bn,
                "l_ckd": l_ckd,
                "l_forget": l_forget,
                "n_fragile": grouped.n_fragile,
                "n_robust": grouped.n_robust,
                "frac_fragile": grouped.n_fragile / n,
                "iacc": iacc,
                "oacc": oacc,
                "olacc": olacc,
            }
        )
    return student, gen, history


def export_grouped_csv(grouped: GroupedBatch, path):
    """Write a grouped batch as ``x,y,group,teacher_pred`` CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "group", "teacher_pred"])
        for (x, y), p in zip(grouped.fragile, grouped.fragile_labels):
            writer.writerow([f"{x:.12g}", f"{y:.12g}", "fragile", int(p)])
        for (x, y), p in zip(grouped.robust, grouped.robust_labels):
            writer.writerow([f"{x:.12g}", f"{y:.12g}", "robust", int(p)])
