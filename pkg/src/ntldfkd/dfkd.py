"""Generator-based data-free distillation baseline.

Each epoch alternates: (i) generator ascent on teacher-student disagreement,
optionally regularized toward the teacher's stored batchnorm statistics, and
(ii) student descent on the same divergence over freshly synthesized
batches. The teacher is frozen throughout; gradients reach the generator
through input gradients of both frozen networks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .domains import DomainPair, noise_batch

__all__ = [
    "DfkdConfig",
    "make_generator",
    "make_student",
    "bn_loss",
    "bn_loss_grad",
    "generator_step",
    "kd_step",
    "run_dfkd_baseline",
    "export_synthetic_csv",
    "DFKD_HISTORY_COLUMNS",
]


@dataclass
class DfkdConfig:
    noise_dim: int = 8
    gen_hidden: tuple[int, ...] = (64, 64)
    batch_size: int = 128
    lambda_bn: float = 1.0
    bn_loss_enabled: bool = True
    g_steps: int = 1
    s_steps: int = 5
    epochs: int = 400
    gen_lr: float = 1e-3
    student_lr: float = 1e-3
    student_use_bn: bool = True
    student_hidden: tuple[int, ...] = (100, 500)
    # scales the generator's output-layer init, i.e. how widely the initial
    # synthetic cloud is spread over the plane
    gen_out_gain: float = 1.0
    # distance of the initial synthetic cloud from the origin; the direction
    # is drawn from the run seed, so seeds double as cloud initializations
    gen_bias_radius: float = 0.0
    kl_ref_second: bool = True
    eval_every: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.lambda_bn < 0:
            raise ValueError("lambda_bn must be nonnegative")
        if min(self.batch_size, self.g_steps, self.s_steps, self.noise_dim) <= 0:
            raise ValueError("counts must be positive")


def make_generator(cfg: DfkdConfig, data_dim: int, rng) -> nm.MlpModel:
    gen = nm.make_mlp([cfg.noise_dim, *cfg.gen_hidden, data_dim], bn=False, rng=rng)
    if cfg.gen_out_gain != 1.0:
        gen.layers[-1].weight *= cfg.gen_out_gain
    if cfg.gen_bias_radius > 0.0:
        direction = rng.standard_normal(data_dim)
        direction /= np.linalg.norm(direction)
        gen.layers[-1].bias += cfg.gen_bias_radius * direction
    return gen


def make_student(cfg: DfkdConfig, data_dim: int, n_classes: int, rng) -> nm.MlpModel:
    return nm.make_mlp(
        [data_dim, *cfg.student_hidden, n_classes], bn=cfg.student_use_bn, rng=rng
    )


def _bn_terms(teacher: nm.MlpModel, trace: nm.ForwardTrace):
    """Statistics-matching loss terms from a traced eval forward.

    Returns (value, {layer index: pre-BN cotangent}) where the value sums the
    Gaussian KL between observed batch statistics and stored running
    statistics over every batchnorm layer.
    """
    n = trace.x.shape[0]
    value = 0.0
    d_pre_bn = {}
    for i, layer in enumerate(teacher.layers):
        if not layer.has_bn:
            continue
        mu_b, var_b = trace.batch_stats[i]
        v, dmu, dvar = nm.gaussian_kl_grad(
            mu_b, var_b, layer.bn.running_mean, layer.bn.running_var
        )
        value += v
        z = trace.pre_act[i]
        d_pre_bn[i] = dmu / n + dvar * 2.0 * (z - mu_b) / n
    return value, d_pre_bn


def _check_has_bn(teacher: nm.MlpModel):
    if not any(l.has_bn for l in teacher.layers):
        raise ValueError("statistics loss needs a teacher with batchnorm layers")


def bn_loss(teacher: nm.MlpModel, synth) -> float:
    """Divergence of the synthetic batch's per-layer feature statistics from
    the teacher's stored running statistics (teacher run in eval mode)."""
    _check_has_bn(teacher)
    synth = nm.as_matrix(synth)
    if synth.shape[0] < 2:
        raise ValueError("need a synthetic batch of size >= 2")
    _, _, trace = nm.forward(teacher, synth, "eval")
    value, _ = _bn_terms(teacher, trace)
    return float(value)


def bn_loss_grad(teacher: nm.MlpModel, synth):
    """Statistics loss and its gradient with respect to the synthetic batch;
    the gradient flows through the recorded batch statistics only."""
    _check_has_bn(teacher)
    synth = nm.as_matrix(synth)
    if synth.shape[0] < 2:
        raise ValueError("need a synthetic batch of size >= 2")
    logits, _, trace = nm.forward(teacher, synth, "eval")
    value, d_pre_bn = _bn_terms(teacher, trace)
    _, d_synth = nm.backward(
        teacher, trace, np.zeros_like(logits), d_pre_bn=d_pre_bn
    )
    return float(value), d_synth


def _disagreement_grad(t_logits, s_logits, kl_ref_second: bool):
    """Teacher-student divergence with gradients for both logit sets."""
    if kl_ref_second:
        value, d_t, d_s = nm.categorical_kl_grad(t_logits, s_logits)
    else:
        value, d_s, d_t = nm.categorical_kl_grad(s_logits, t_logits)
    return value, d_t, d_s


def generator_step(
    gen: nm.MlpModel,
    student: nm.MlpModel,
    teacher: nm.MlpModel,
    gen_opt: nm.OptimizerState,
    cfg: DfkdConfig,
    rng: np.random.Generator,
):
    """One ascent step on disagreement minus the weighted statistics loss.

    Teacher and student stay frozen (eval mode, gradients used only to reach
    the synthetic inputs). Returns (l_syn, l_bn).
    """
    noise = noise_batch(cfg.batch_size, cfg.noise_dim, rng)
    synth, _, g_trace = nm.forward(gen, noise, "train")
    t_logits, _, t_trace = nm.forward(teacher, synth, "eval")
    s_logits, _, s_trace = nm.forward(student, synth, "eval")

    l_syn, d_t, d_s = _disagreement_grad(t_logits, s_logits, cfg.kl_ref_second)
    l_bn = 0.0
    d_pre_bn = None
    if cfg.bn_loss_enabled:
        _check_has_bn(teacher)
        l_bn, d_pre_bn = _bn_terms(teacher, t_trace)
        d_pre_bn = {i: -cfg.lambda_bn * g for i, g in d_pre_bn.items()}
    # d(objective)/d(synth), objective = l_syn - lambda_bn * l_bn
    _, d_synth_t = nm.backward(teacher, t_trace, d_t, d_pre_bn=d_pre_bn)
    _, d_synth_s = nm.backward(student, s_trace, d_s)
    d_synth = d_synth_t + d_synth_s
    # ascend the objective = descend its negation
    g_grads, _ = nm.backward(gen, g_trace, -d_synth)
    nm.optimizer_step(gen.parameters(), g_grads, gen_opt)
    return float(l_syn), float(l_bn)


def kd_step(
    student: nm.MlpModel,
    teacher: nm.MlpModel,
    synth,
    student_opt: nm.OptimizerState,
    cfg: DfkdConfig,
    t_logits: np.ndarray | None = None,
):
    """One student descent step mimicking frozen teacher outputs on a
    synthetic batch; returns the divergence value."""
    synth = nm.as_matrix(synth)
    if t_logits is None:
        t_logits, _, _ = nm.forward(teacher, synth, "eval")
    s_logits, _, s_trace = nm.forward(student, synth, "train")
    l_kd, _, d_s = _disagreement_grad(t_logits, s_logits, cfg.kl_ref_second)
    s_grads, _ = nm.backward(student, s_trace, d_s)
    nm.optimizer_step(student.parameters(), s_grads, student_opt)
    return float(l_kd)


DFKD_HISTORY_COLUMNS = [
    "epoch",
    "l_syn",
    "l_bn",
    "l_kd",
    "iacc",
    "oacc",
    "olacc",
]


def _epoch_metrics(student, pair: DomainPair, do_eval: bool):
    if not do_eval:
        return float("nan"), float("nan"), float("nan")
    pred_id = nm.predict_classes(student, pair.id_test.points)
    pred_ood = nm.predict_classes(student, pair.ood_test.points)
    iacc = float((pred_id == pair.id_test.labels).mean())
    oacc = float((pred_ood == pair.ood_test.labels).mean())
    olacc = float((pred_ood == pair.ood_class_label).mean())
    return iacc, oacc, olacc


def run_dfkd_baseline(teacher: nm.MlpModel, pair: DomainPair, cfg: DfkdConfig):
    """Full alternating loop; returns (student, generator, history).

    The teacher is immutable; generator and student are created fresh from
    ``cfg.seed``. Aborts with a diagnostic on the first non-finite loss.
    """
    rng = np.random.default_rng(cfg.seed)
    n_classes = teacher.output_width
    gen = make_generator(cfg, teacher.input_width, rng)
    student = make_student(cfg, teacher.input_width, n_classes, rng)
    gen_opt = nm.OptimizerState(learning_rate=cfg.gen_lr)
    student_opt = nm.OptimizerState(learning_rate=cfg.student_lr)

    history = []
    for epoch in range(cfg.epochs):
        l_syn = l_bn = 0.0
        for _ in range(cfg.g_steps):
            l_syn, l_bn = generator_step(gen, student, teacher, gen_opt, cfg, rng)
        kd_vals = []
        for _ in range(cfg.s_steps):
            noise = noise_batch(cfg.batch_size, cfg.noise_dim, rng)
            synth, _, _ = nm.forward(gen, noise, "eval")
            kd_vals.append(kd_step(student, teacher, synth, student_opt, cfg))
        l_kd = float(np.mean(kd_vals))
        if not np.isfinite([l_syn, l_bn, l_kd]).all():
            raise nm.NonFiniteLossError(
                f"epoch {epoch}: non-finite losses "
                f"(l_syn={l_syn}, l_bn={l_bn}, l_kd={l_kd})"
            )
        do_eval = (
            cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0
        ) or epoch == cfg.epochs - 1
        iacc, oacc, olacc = _epoch_metrics(student, pair, do_eval)
        history.append(
            {
                "epoch": epoch,
                "l_syn": l_syn,
                "l_bn": l_bn,
                "l_kd": l_kd,
                "iacc": iacc,
                "oacc": oacc,
                "olacc": olacc,
            }
        )
    return student, gen, history


def export_synthetic_csv(points, teacher_preds, path):
    """Write a synthetic batch as ``x,y,teacher_pred`` CSV."""
    points = nm.as_matrix(points)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "teacher_pred"])
        for (x, y), p in zip(points, np.asarray(teacher_preds)):
            writer.writerow([f"{x:.12g}", f"{y:.12g}", int(p)])
