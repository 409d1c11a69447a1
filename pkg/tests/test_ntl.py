import math

import numpy as np
import pytest

from conftest import FD_TOL, fd_max_rel_err
from ntldfkd import numerics as nm
from ntldfkd import ntl
from ntldfkd.domains import LabeledSet, ToySpec, make_toy_domains
from ntldfkd.ntl import LossBreakdown, NtlConfig, TeacherVariant, ntl_losses


def tiny_cfg(**kw):
    defaults = dict(hidden=(6, 5), use_bn=False, batch_size=4, epochs=1, seed=0)
    defaults.update(kw)
    return NtlConfig(**defaults)


def tiny_halves(seed=0, k=4):
    rng = np.random.default_rng(seed)
    id_half = LabeledSet(rng.standard_normal((k, 2)), rng.integers(0, 3, k))
    ood_half = LabeledSet(
        rng.standard_normal((k, 2)) + 3.0, rng.integers(0, 3, k)
    )
    return id_half, ood_half


def tiny_teacher(cfg, seed=1):
    return ntl.make_teacher_model(cfg, 3, np.random.default_rng(seed))


def test_alpha_zero_disables_repulsion():
    cfg = tiny_cfg(alpha=0.0)
    teacher = tiny_teacher(cfg)
    id_half, ood_half = tiny_halves()
    bd, _ = ntl_losses(teacher, id_half, ood_half, "ntl", cfg)
    assert bd.l_total == pytest.approx(bd.l_id, abs=1e-15)
    assert not bd.clamp_active


def test_clamp_activates_and_bounds_total():
    cfg = tiny_cfg(alpha=1e6)  # force the product over one
    teacher = tiny_teacher(cfg)
    id_half, ood_half = tiny_halves()
    bd, _ = ntl_losses(teacher, id_half, ood_half, "ntl", cfg)
    assert bd.clamp_active
    assert bd.l_total == pytest.approx(bd.l_id - 1.0, abs=1e-12)


def test_losses_match_scalar_oracles_on_two_point_batch():
    cfg = tiny_cfg(batch_size=2)
    teacher = tiny_teacher(cfg, seed=3)
    id_half, ood_half = tiny_halves(seed=4, k=2)
    bw = [1.3]
    bd, _ = ntl_losses(teacher, id_half, ood_half, "ntl_cls", cfg, bandwidths=bw)

    logits_id, feats_id, _ = nm.forward(teacher, id_half.points, "eval")
    logits_ood, feats_ood, _ = nm.forward(teacher, ood_half.points, "eval")
    # paired KL with the in-distribution output as the target distribution
    kl_rows = []
    for r in range(2):
        pi = np.exp(logits_id[r] - max(logits_id[r]))
        pi /= pi.sum()
        qo = np.exp(logits_ood[r] - max(logits_ood[r]))
        qo /= qo.sum()
        kl_rows.append(sum(pi * (np.log(pi) - np.log(qo))))
    # note: the teacher was forwarded in train mode inside ntl_losses; with
    # no BN layers train and eval forwards coincide
    assert bd.l_out == pytest.approx(np.mean(kl_rows), abs=1e-10)

    def k(a, b):
        return math.exp(-np.sum((a - b) ** 2) / (2 * bw[0] ** 2))

    kxx = np.mean([[k(a, b) for b in feats_ood] for a in feats_ood])
    kyy = np.mean([[k(a, b) for b in feats_id] for a in feats_id])
    kxy = np.mean([[k(a, b) for b in feats_id] for a in feats_ood])
    assert bd.l_feat == pytest.approx(kxx + kyy - 2 * kxy, abs=1e-10)


def test_variant_assembly_formulas():
    cfg = tiny_cfg(alpha=0.03, lambda_cls=0.7)
    teacher = tiny_teacher(cfg, seed=5)
    id_half, ood_half = tiny_halves(seed=6)
    values = {}
    for variant in TeacherVariant:
        bd, _ = ntl_losses(teacher, id_half, ood_half, variant, cfg, bandwidths=[1.0])
        values[variant] = bd
    b = values[TeacherVariant.NTL_CLS]
    a, lam = cfg.alpha, cfg.lambda_cls
    assert values[TeacherVariant.SL].l_total == pytest.approx(
        values[TeacherVariant.SL].l_id
    )
    assert b.l_total == pytest.approx(
        b.l_id - min(1.0, a * b.l_out * b.l_feat) + lam * b.l_cls, abs=1e-12
    )
    assert values[TeacherVariant.NTL].l_total == pytest.approx(
        b.l_id - min(1.0, a * b.l_out * b.l_feat), abs=1e-12
    )
    assert values[TeacherVariant.SL2DOMAIN].l_total == pytest.approx(
        b.l_id + lam * b.l_cls, abs=1e-12
    )
    assert values[TeacherVariant.NTL_WO_MMD].l_total == pytest.approx(
        b.l_id - min(1.0, a * b.l_out) + lam * b.l_cls, abs=1e-12
    )
    assert values[TeacherVariant.NTL_WO_KL].l_total == pytest.approx(
        b.l_id - min(1.0, a * b.l_feat) + lam * b.l_cls, abs=1e-12
    )


def test_total_never_below_id_minus_one():
    rng = np.random.default_rng(7)
    for trial in range(10):
        cfg = tiny_cfg(alpha=float(rng.uniform(0, 5)), lambda_cls=float(rng.uniform(0, 2)))
        teacher = tiny_teacher(cfg, seed=trial)
        id_half, ood_half = tiny_halves(seed=trial, k=3)
        for variant in TeacherVariant:
            bd, _ = ntl_losses(
                teacher, id_half, ood_half, variant, cfg, bandwidths=[1.0]
            )
            assert bd.l_total >= bd.l_id - 1.0 - 1e-12


@pytest.mark.parametrize("variant", [v.value for v in TeacherVariant])
@pytest.mark.parametrize("use_bn", [False, True])
def test_assembled_gradients_match_finite_differences(variant, use_bn):
    cfg = tiny_cfg(alpha=0.5, lambda_cls=0.8, use_bn=use_bn, hidden=(5,))
    teacher = tiny_teacher(cfg, seed=8)
    id_half, ood_half = tiny_halves(seed=9, k=5)
    bw = [1.2, 2.5]

    bd, grads = ntl_losses(teacher, id_half, ood_half, variant, cfg, bandwidths=bw)

    def loss():
        b, _ = ntl_losses(teacher, id_half, ood_half, variant, cfg, bandwidths=bw)
        return b.l_total

    assert fd_max_rel_err(loss, teacher.parameters(), grads) < FD_TOL


def test_clamp_active_gradient_drops_repulsion_term():
    cfg = tiny_cfg(alpha=1e5, hidden=(5,))
    teacher = tiny_teacher(cfg, seed=10)
    id_half, ood_half = tiny_halves(seed=11, k=5)
    bd, grads = ntl_losses(teacher, id_half, ood_half, "ntl", cfg, bandwidths=[1.0])
    assert bd.clamp_active
    # with the clamp active the total reduces to the plain supervised loss
    # gradient-wise even though the value keeps the constant -1
    sl_bd, sl_grads = ntl_losses(teacher, id_half, ood_half, "sl", cfg)
    # the SL variant forwards only the in-distribution half, so compare via
    # finite differences on the assembled total instead
    def loss():
        b, _ = ntl_losses(teacher, id_half, ood_half, "ntl", cfg, bandwidths=[1.0])
        return b.l_total

    assert fd_max_rel_err(loss, teacher.parameters(), grads) < FD_TOL


def test_y_ood_out_of_range_rejected():
    cfg = tiny_cfg()
    teacher = tiny_teacher(cfg)
    id_half, ood_half = tiny_halves()
    with pytest.raises(ValueError):
        ntl_losses(teacher, id_half, ood_half, "ntl_cls", cfg, y_ood=3)


def test_epochs_zero_returns_initialization():
    pair = make_toy_domains(ToySpec(train_per_class=20, test_per_class=10, seed=1))
    cfg = tiny_cfg(epochs=0, batch_size=8, hidden=(4,), seed=77)
    model, history = ntl.train_teacher("sl", pair, cfg)
    fresh = ntl.make_teacher_model(cfg, 3, np.random.default_rng(77))
    for a, b in zip(model.parameters(), fresh.parameters()):
        np.testing.assert_array_equal(a, b)
    assert history == []


def test_train_teacher_deterministic():
    pair = make_toy_domains(ToySpec(train_per_class=20, test_per_class=10, seed=2))
    cfg = tiny_cfg(epochs=3, batch_size=8, hidden=(8,), use_bn=True, seed=5)
    m1, h1 = ntl.train_teacher("ntl_cls", pair, cfg)
    m2, h2 = ntl.train_teacher("ntl_cls", pair, cfg)
    np.testing.assert_array_equal(nm.model_state_vector(m1), nm.model_state_vector(m2))
    for r1, r2 in zip(h1, h2):
        for key in r1:
            np.testing.assert_equal(r1[key], r2[key])  # nan-tolerant equality


def test_sl_training_reaches_high_accuracy(toy_pair, teacher_cache):
    model, history = teacher_cache("sl")
    assert history[-1]["iacc"] >= 0.97


def test_ntl_cls_traps_ood(toy_pair, teacher_cache):
    model, history = teacher_cache("ntl_cls")
    assert history[-1]["iacc"] >= 0.95
    assert history[-1]["olacc"] >= 0.95


def test_history_csv_roundtrip(tmp_path):
    # 12 significant digits survive the printed precision exactly
    history = [
        {"epoch": 0, "l_id": 1.23456789012, "l_out": float("nan"), "iacc": 0.5},
        {"epoch": 1, "l_id": 0.3, "l_out": 2.0, "iacc": 1.0},
    ]
    path = tmp_path / "h.csv"
    ntl.write_history_csv(history, path, ["epoch", "l_id", "l_out", "iacc"])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,l_id,l_out,iacc"
    cells = lines[1].split(",")
    assert int(cells[0]) == 0
    assert float(cells[1]) == pytest.approx(1.23456789012, rel=1e-12)
    assert math.isnan(float(cells[2]))
    # reprinting the parsed value reproduces the file cell
    assert f"{float(cells[1]):.12g}" == cells[1]
