"""Experiment orchestration: config resolution, single runs, sweeps, matrix.

A run is a pure function of (config, seed): domain generation, teacher
training (or checkpoint reuse), distillation, metrics, decision grids, and
the resolved config snapshot all land in one run directory with stable
bytes. Sweep and matrix modes fan out over a worker pool, one isolated run
directory per point, and reuse trained teachers across points that share a
seed or variant.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .. import numerics as nm
from ..atesc import AtescConfig, AttackConfig, run_dfkd_atesc, ATESC_HISTORY_COLUMNS
from ..dfkd import DfkdConfig, run_dfkd_baseline, DFKD_HISTORY_COLUMNS
from ..domains import ToySpec, make_toy_domains
from ..ntl import (
    HISTORY_COLUMNS,
    NtlConfig,
    TeacherVariant,
    train_teacher,
    write_history_csv,
)
from .checkpoints import checkpoint_load, checkpoint_save
from .metrics import evaluate, export_decision_grid

__all__ = [
    "ConfigError",
    "DEFAULT_CONFIG",
    "resolve_config",
    "load_config",
    "run_experiment",
    "run_single",
    "run_sweep",
    "run_matrix",
]


class ConfigError(ValueError):
    """Unknown key or unusable value in an experiment config."""


DEFAULT_CONFIG = {
    "mode": "single",  # single | sweep | matrix
    "seed": 0,
    "distiller": "baseline",  # none | baseline | ckd | atesc
    "domain": {
        "centers": [[0.0, 2.0], [-2.0, -1.0], [2.0, -1.0]],
        "std": 0.45,
        "translation": [4.5, 4.5],
        "rotation": 0.0,
        "train_per_class": 300,
        "test_per_class": 300,
        "y_ood": 0,
    },
    "teacher": {
        "variant": "ntl_cls",
        "checkpoint": None,
        "use_bn": True,
        "hidden": [100, 500],
        "alpha": 0.1,
        "lambda_cls": 1.0,
        "epochs": 200,
        "batch_size": 128,
        "learning_rate": 1e-3,
        "eval_every": 10,
    },
    "dfkd": {
        "noise_dim": 8,
        "gen_hidden": [64, 64],
        "batch_size": 128,
        "lambda_bn": 1.0,
        "bn_loss_enabled": True,
        "g_steps": 1,
        "s_steps": 5,
        "epochs": 400,
        "gen_lr": 1e-3,
        "student_lr": 1e-3,
        "student_use_bn": True,
        "student_hidden": [100, 500],
        "gen_out_gain": 1.0,
        "kl_ref_second": True,
        "eval_every": 25,
    },
    "atesc": {
        "epsilon": 0.225,
        "steps": 10,
        "step_size": None,
        "random_start": False,
        "attack_kind": "pgd",
        "lam": 1e-4,
    },
    "eval": {
        "grid_resolution": 120,
        "consistency_steps": [0, 1, 5, 10, 20],
    },
    "sweep": {
        "axis": "epsilon",  # epsilon | lambda
        "values": [0.1, 0.25, 0.5, 1.0],
        "seeds": 3,
    },
}

_DISTILLERS = ("none", "baseline", "ckd", "atesc")


def _merge(defaults, user, path=""):
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"{here}: unknown key")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected a section object")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def resolve_config(user: dict | None) -> dict:
    """Overlay a user config onto the defaults, rejecting unknown keys."""
    cfg = _merge(DEFAULT_CONFIG, user or {})
    if cfg["mode"] not in ("single", "sweep", "matrix"):
        raise ConfigError(f"mode: unknown mode {cfg['mode']!r}")
    if cfg["distiller"] not in _DISTILLERS:
        raise ConfigError(f"distiller: must be one of {_DISTILLERS}")
    try:
        TeacherVariant(cfg["teacher"]["variant"])
    except ValueError:
        raise ConfigError(
            f"teacher.variant: unknown variant {cfg['teacher']['variant']!r}"
        ) from None
    if cfg["sweep"]["axis"] not in ("epsilon", "lambda"):
        raise ConfigError("sweep.axis: must be 'epsilon' or 'lambda'")
    if cfg["mode"] == "sweep":
        if not cfg["sweep"]["values"]:
            raise ConfigError("sweep.values: must be nonempty")
        if int(cfg["sweep"]["seeds"]) < 1:
            raise ConfigError("sweep.seeds: need at least one seed")
    return cfg


def load_config(path_or_dict) -> dict:
    if isinstance(path_or_dict, dict):
        return resolve_config(path_or_dict)
    with open(path_or_dict) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve_config(user)


def _derived_seeds(seed: int):
    kids = np.random.SeedSequence(int(seed)).spawn(3)
    return tuple(int(k.generate_state(1)[0]) for k in kids)


def _toy_spec(cfg: dict, seed: int) -> ToySpec:
    d = cfg["domain"]
    return ToySpec(
        centers=tuple(tuple(c) for c in d["centers"]),
        std=float(d["std"]),
        translation=tuple(d["translation"]),
        rotation=float(d["rotation"]),
        train_per_class=int(d["train_per_class"]),
        test_per_class=int(d["test_per_class"]),
        seed=seed,
        y_ood=int(d["y_ood"]),
    )


def _ntl_config(cfg: dict, seed: int) -> NtlConfig:
    t = cfg["teacher"]
    return NtlConfig(
        alpha=float(t["alpha"]),
        lambda_cls=float(t["lambda_cls"]),
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        learning_rate=float(t["learning_rate"]),
        use_bn=bool(t["use_bn"]),
        hidden=tuple(t["hidden"]),
        eval_every=int(t["eval_every"]),
        seed=seed,
    )


def _dfkd_config(cfg: dict, seed: int) -> DfkdConfig:
    d = cfg["dfkd"]
    return DfkdConfig(
        noise_dim=int(d["noise_dim"]),
        gen_hidden=tuple(d["gen_hidden"]),
        batch_size=int(d["batch_size"]),
        lambda_bn=float(d["lambda_bn"]),
        bn_loss_enabled=bool(d["bn_loss_enabled"]),
        g_steps=int(d["g_steps"]),
        s_steps=int(d["s_steps"]),
        epochs=int(d["epochs"]),
        gen_lr=float(d["gen_lr"]),
        student_lr=float(d["student_lr"]),
        student_use_bn=bool(d["student_use_bn"]),
        student_hidden=tuple(d["student_hidden"]),
        gen_out_gain=float(d["gen_out_gain"]),
        kl_ref_second=bool(d["kl_ref_second"]),
        eval_every=int(d["eval_every"]),
        seed=seed,
    )


def _atesc_config(cfg: dict, ckd_only: bool) -> AtescConfig:
    a = cfg["atesc"]
    attack = AttackConfig(
        epsilon=float(a["epsilon"]),
        steps=int(a["steps"]),
        step_size=None if a["step_size"] is None else float(a["step_size"]),
        random_start=bool(a["random_start"]),
    )
    return AtescConfig(
        attack=attack,
        lam=float(a["lam"]),
        ckd_only=ckd_only,
        attack_kind=str(a["attack_kind"]),
    )


def _metric_row(model, pair, context, variant, distiller, seed, epoch):
    iacc = evaluate(model, pair.id_test, "true_label")
    oacc = evaluate(model, pair.ood_test, "true_label")
    olacc = evaluate(model, pair.ood_test, "ood_class", y_ood=pair.ood_class_label)
    return {
        "context": context,
        "variant": variant,
        "distiller": distiller,
        "seed": seed,
        "epoch": epoch,
        "iacc": iacc,
        "oacc": oacc,
        "olacc": olacc,
        "asr": olacc,
    }


METRICS_COLUMNS = [
    "context",
    "variant",
    "distiller",
    "seed",
    "epoch",
    "iacc",
    "oacc",
    "olacc",
    "asr",
]


def _write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            out = []
            for col in METRICS_COLUMNS:
                v = row[col]
                if isinstance(v, float):
                    out.append(f"{v:.12g}")
                else:
                    out.append(str(v))
            writer.writerow(out)


def run_single(cfg: dict, out_dir) -> dict:
    """Execute one resolved single-mode config into ``out_dir``.

    Writes teacher.ckpt, student.ckpt (unless distiller is none),
    history.csv, metrics.csv, decision grids, and config.resolved.json.
    A partial run leaves a FAILED marker. Returns the metrics rows keyed by
    context.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return _run_single_body(cfg, out)
    except Exception as exc:
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        raise


def _run_single_body(cfg: dict, out: Path) -> dict:
    seed = int(cfg["seed"])
    domain_seed, teacher_seed, distill_seed = _derived_seeds(seed)
    pair = make_toy_domains(_toy_spec(cfg, domain_seed))
    variant = cfg["teacher"]["variant"]
    distiller = cfg["distiller"]

    if cfg["teacher"]["checkpoint"]:
        teacher, _ = checkpoint_load(cfg["teacher"]["checkpoint"])
        teacher_history = []
    else:
        teacher, teacher_history = train_teacher(
            variant, pair, _ntl_config(cfg, teacher_seed)
        )
    checkpoint_save(
        out / "teacher.ckpt",
        teacher,
        seed_provenance={"seed": seed, "teacher_seed": teacher_seed},
        config_snapshot=cfg["teacher"],
    )

    student = None
    history, columns = teacher_history, HISTORY_COLUMNS
    if distiller == "baseline":
        student, _, history = run_dfkd_baseline(
            teacher, pair, _dfkd_config(cfg, distill_seed)
        )
        columns = DFKD_HISTORY_COLUMNS
    elif distiller in ("ckd", "atesc"):
        student, _, history = run_dfkd_atesc(
            teacher,
            pair,
            _dfkd_config(cfg, distill_seed),
            _atesc_config(cfg, ckd_only=distiller == "ckd"),
        )
        columns = ATESC_HISTORY_COLUMNS

    rows = [
        _metric_row(teacher, pair, "teacher", variant, distiller, seed, -1)
    ]
    if student is not None:
        checkpoint_save(
            out / "student.ckpt",
            student,
            seed_provenance={"seed": seed, "distill_seed": distill_seed},
            config_snapshot=cfg["dfkd"],
        )
        rows.append(
            _metric_row(
                student, pair, "student", variant, distiller, seed,
                int(cfg["dfkd"]["epochs"]) - 1,
            )
        )

    if history:
        write_history_csv(history, out / "history.csv", columns)
    _write_metrics_csv(rows, out / "metrics.csv")
    res = int(cfg["eval"]["grid_resolution"])
    export_decision_grid(teacher, pair.bounding_box, res, out / "grid_teacher.csv")
    if student is not None:
        export_decision_grid(
            student, pair.bounding_box, res, out / "grid_student.csv"
        )
    with open(out / "config.resolved.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return {row["context"]: row for row in rows}


def _train_sweep_teacher(cfg: dict, seed: int, path: Path):
    _, teacher_seed, _ = _derived_seeds(seed)
    domain_seed = _derived_seeds(seed)[0]
    pair = make_toy_domains(_toy_spec(cfg, domain_seed))
    teacher, _ = train_teacher(
        cfg["teacher"]["variant"], pair, _ntl_config(cfg, teacher_seed)
    )
    checkpoint_save(
        path,
        teacher,
        seed_provenance={"seed": seed, "teacher_seed": teacher_seed},
        config_snapshot=cfg["teacher"],
    )


def _run_point(args):
    point_cfg, out_dir = args
    metrics = run_single(point_cfg, out_dir)
    return out_dir, metrics


def _map_points(points, jobs: int):
    if jobs <= 1 or len(points) <= 1:
        return [_run_point(p) for p in points]
    with get_context("fork").Pool(min(jobs, len(points))) as pool:
        return pool.map(_run_point, points)


SWEEP_COLUMNS = [
    "axis",
    "value",
    "seed",
    "run_dir",
    "teacher_iacc",
    "student_iacc",
    "student_oacc",
    "student_olacc",
    "student_asr",
]


def run_sweep(cfg: dict, out_dir, jobs: int = 1) -> Path:
    """Fan one config out over an epsilon or lambda grid times seeds.

    Teachers are trained once per seed and shared by every point of that
    seed. Each point becomes an isolated single-mode run directory; the
    student metrics are collected into sweep_summary.csv.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    axis = cfg["sweep"]["axis"]
    values = list(cfg["sweep"]["values"])
    n_seeds = int(cfg["sweep"]["seeds"])
    base_seed = int(cfg["seed"])
    if cfg["distiller"] in ("none",):
        raise ConfigError("sweep mode needs a distiller")

    seeds = [base_seed + i for i in range(n_seeds)]
    teacher_paths = {}
    for s in seeds:
        per_seed = dict(copy.deepcopy(cfg), seed=s)
        path = out / f"teacher_seed{s}.ckpt"
        if cfg["teacher"]["checkpoint"]:
            path = Path(cfg["teacher"]["checkpoint"])
        else:
            _train_sweep_teacher(per_seed, s, path)
        teacher_paths[s] = str(path)

    points = []
    for value in values:
        for s in seeds:
            point = copy.deepcopy(cfg)
            point["mode"] = "single"
            point["seed"] = s
            point["teacher"]["checkpoint"] = teacher_paths[s]
            if axis == "epsilon":
                point["atesc"]["epsilon"] = float(value)
            else:
                point["atesc"]["lam"] = float(value)
            points.append((point, str(out / f"{axis}_{value:g}_seed{s}")))

    results = _map_points(points, jobs)
    rows = []
    for (point, run_dir), (_, metrics) in zip(points, results):
        value = point["atesc"]["epsilon" if axis == "epsilon" else "lam"]
        student = metrics.get("student")
        rows.append(
            {
                "axis": axis,
                "value": value,
                "seed": point["seed"],
                "run_dir": os.path.basename(run_dir),
                "teacher_iacc": metrics["teacher"]["iacc"],
                "student_iacc": student["iacc"],
                "student_oacc": student["oacc"],
                "student_olacc": student["olacc"],
                "student_asr": student["asr"],
            }
        )
    _write_summary_csv(rows, SWEEP_COLUMNS, out / "sweep_summary.csv")
    return out


MATRIX_COLUMNS = [
    "variant",
    "distiller",
    "teacher_iacc",
    "teacher_oacc",
    "teacher_olacc",
    "student_iacc",
    "student_oacc",
    "student_olacc",
    "student_asr",
]


def run_matrix(cfg: dict, out_dir, jobs: int = 1) -> Path:
    """All six teacher variants crossed with baseline/ckd/atesc distillers;
    teachers are trained once per variant and reused."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = [v.value for v in TeacherVariant]
    distillers = ["baseline", "ckd", "atesc"]
    seed = int(cfg["seed"])

    teacher_paths = {}
    for variant in variants:
        per_variant = copy.deepcopy(cfg)
        per_variant["teacher"]["variant"] = variant
        path = out / f"teacher_{variant}.ckpt"
        _train_sweep_teacher(per_variant, seed, path)
        teacher_paths[variant] = str(path)

    points = []
    for variant in variants:
        for distiller in distillers:
            point = copy.deepcopy(cfg)
            point["mode"] = "single"
            point["teacher"]["variant"] = variant
            point["teacher"]["checkpoint"] = teacher_paths[variant]
            point["distiller"] = distiller
            points.append((point, str(out / f"{variant}_{distiller}")))

    results = _map_points(points, jobs)
    rows = []
    for (point, run_dir), (_, metrics) in zip(points, results):
        teacher, student = metrics["teacher"], metrics["student"]
        rows.append(
            {
                "variant": point["teacher"]["variant"],
                "distiller": point["distiller"],
                "teacher_iacc": teacher["iacc"],
                "teacher_oacc": teacher["oacc"],
                "teacher_olacc": teacher["olacc"],
                "student_iacc": student["iacc"],
                "student_oacc": student["oacc"],
                "student_olacc": student["olacc"],
                "student_asr": student["asr"],
            }
        )
    _write_summary_csv(rows, MATRIX_COLUMNS, out / "matrix_summary.csv")
    return out


def _write_summary_csv(rows, columns, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            out = []
            for col in columns:
                v = row[col]
                if isinstance(v, float):
                    out.append(f"{v:.12g}")
                else:
                    out.append(str(v))
            writer.writerow(out)


def run_experiment(config, out_dir, seed: int | None = None, jobs: int = 1) -> Path:
    """Load and resolve a config, then dispatch on its mode.

    ``config`` may be a path to a JSON file or an already-parsed dict;
    ``seed`` overrides the config seed. Returns the run directory.
    """
    cfg = load_config(config)
    if seed is not None:
        cfg["seed"] = int(seed)
    out = Path(out_dir)
    if cfg["mode"] == "single":
        run_single(cfg, out)
        return out
    if cfg["mode"] == "sweep":
        return run_sweep(cfg, out, jobs)
    return run_matrix(cfg, out, jobs)
