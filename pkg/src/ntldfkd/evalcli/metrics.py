"""Accuracy metrics, robustness-consistency curves, and decision-grid export."""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .. import numerics as nm
from ..atesc import AttackConfig, pgd_untargeted
from ..domains import LabeledSet

__all__ = [
    "MetricsRecord",
    "evaluate",
    "confusion_matrix",
    "robustness_consistency",
    "export_decision_grid",
]


@dataclass
class MetricsRecord:
    """One evaluated model in one run context; asr mirrors olacc since the
    shifted domain plays the triggered-domain role here."""

    iacc: float
    oacc: float
    olacc: float
    asr: float
    context: str = ""
    epoch: int = -1
    variant: str = ""
    distiller: str = ""


def evaluate(model: nm.MlpModel, labeled: LabeledSet, mode="true_label", y_ood=None):
    """Fraction of points whose argmax matches the stored label
    (``true_label``) or the designated class (``ood_class``)."""
    if len(labeled) == 0:
        raise ValueError("cannot evaluate an empty set")
    preds = nm.predict_classes(model, labeled.points)
    if mode == "true_label":
        return float((preds == labeled.labels).mean())
    if mode == "ood_class":
        if y_ood is None:
            raise ValueError("ood_class mode needs y_ood")
        return float((preds == int(y_ood)).mean())
    raise ValueError(f"unknown mode {mode!r}")


def confusion_matrix(model: nm.MlpModel, labeled: LabeledSet, n_classes: int):
    preds = nm.predict_classes(model, labeled.points)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(labeled.labels, preds):
        cm[t, p] += 1
    return cm


def robustness_consistency(
    teacher: nm.MlpModel,
    labeled: LabeledSet,
    atk: AttackConfig,
    step_grid,
):
    """Fraction of points whose prediction survives the probe, per step
    count. Step 0 means no attack (consistency one by definition)."""
    step_grid = [int(k) for k in step_grid]
    if not step_grid:
        raise ValueError("empty step grid")
    points = labeled.points
    y0 = nm.predict_classes(teacher, points)
    curve = []
    for k in step_grid:
        if k == 0:
            curve.append((0, 1.0))
            continue
        probed = pgd_untargeted(teacher, points, replace(atk, steps=k))
        y1 = nm.predict_classes(teacher, probed)
        curve.append((k, float((y1 == y0).mean())))
    return curve


def export_decision_grid(model: nm.MlpModel, bbox, resolution: int, path=None):
    """Model predictions on a resolution x resolution lattice over bbox.

    Rows are ``x,y,pred`` with 6-decimal coordinates, y as the outer loop.
    Returns the CSV text; also writes it when ``path`` is given.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    min_x, min_y, max_x, max_y = bbox
    if not (min_x < max_x and min_y < max_y):
        raise ValueError(f"degenerate bounding box {bbox}")
    xs = np.linspace(min_x, max_x, resolution)
    ys = np.linspace(min_y, max_y, resolution)
    gx, gy = np.meshgrid(xs, ys)  # row-major: y outer, x inner
    points = np.column_stack([gx.ravel(), gy.ravel()])
    preds = nm.predict_classes(model, points)
    buf = io.StringIO()
    buf.write("x,y,pred\n")
    for (x, y), p in zip(points, preds):
        buf.write(f"{x:.6f},{y:.6f},{int(p)}\n")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
