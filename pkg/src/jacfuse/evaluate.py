"""Confusion matrices, one-vs-rest sensitivity/specificity, macro metrics and reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import CLASS_NAMES
from .errors import AllUndefined, LengthMismatch

N_CLASSES = 4
MODEL_ROWS = ("CNN", "RF-CT", "RF-MRI", "ELF")


def confusion_matrix(actual: Sequence[int], predicted: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = actual class, columns = predicted class."""
    a = np.asarray(actual, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if a.shape != p.shape:
        raise LengthMismatch(f"{len(a)} actual vs {len(p)} predicted labels")
    if a.size and (min(a.min(), p.min()) < 0 or max(a.max(), p.max()) >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (a, p), 1)
    return cm


def per_class_rates(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class (sensitivity, specificity) via one-vs-rest reduction.

    A zero denominator yields NaN, the undefined marker.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = total - tp - fn - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        tpr = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), np.nan)
        tnr = np.where(tn + fp > 0, tn / np.maximum(tn + fp, 1), np.nan)
    return tpr.astype(np.float64), tnr.astype(np.float64)


@dataclass
class MetricsReport:
    name: str
    confusion: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    macro_sensitivity: float
    macro_specificity: float
    accuracy: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            return [None if np.isnan(x) else float(x) for x in v]

        return {
            "name": self.name,
            "confusion": self.confusion.tolist(),
            "sensitivity": dict(zip(CLASS_NAMES, clean(self.sensitivity))),
            "specificity": dict(zip(CLASS_NAMES, clean(self.specificity))),
            "macro_sensitivity": self.macro_sensitivity,
            "macro_specificity": self.macro_specificity,
            "accuracy": self.accuracy,
            **self.extra,
        }


def macro_metrics(cm: np.ndarray) -> tuple[float, float, float]:
    """(mean sensitivity, mean specificity, accuracy) over classes with defined rates."""
    cm = np.asarray(cm)
    tpr, tnr = per_class_rates(cm)
    if np.isnan(tpr).all() or np.isnan(tnr).all():
        raise AllUndefined("no class has a defined rate")
    return float(np.nanmean(tpr)), float(np.nanmean(tnr)), float(np.trace(cm) / cm.sum())


def metrics_report(name: str, actual, predicted) -> MetricsReport:
    cm = confusion_matrix(actual, predicted)
    tpr, tnr = per_class_rates(cm)
    sens, spec, acc = macro_metrics(cm)
    return MetricsReport(name, cm, tpr, tnr, sens, spec, acc)


def ablation_reports(predictions) -> list[MetricsReport]:
    """One report per single model plus the late-fused ensemble, in table order."""
    actual = [p.actual for p in predictions]
    sources = {
        "CNN": [int(np.argmax(p.p_cnn)) for p in predictions],
        "RF-CT": [int(np.argmax(p.p_rf_ct)) for p in predictions],
        "RF-MRI": [int(np.argmax(p.p_rf_mri)) for p in predictions],
        "ELF": [p.predicted for p in predictions],
    }
    return [metrics_report(name, actual, sources[name]) for name in MODEL_ROWS]


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table: model, sensitivity, specificity, accuracy (percent)."""
    header = f"{'Model':<8}{'Sensitivity':>13}{'Specificity':>13}{'Accuracy':>10}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.name:<8}{100 * r.macro_sensitivity:>13.2f}{100 * r.macro_specificity:>13.2f}{100 * r.accuracy:>10.2f}"
        )
    return "\n".join(lines) + "\n"


def write_report(reports: Sequence[MetricsReport], path, **meta) -> None:
    doc = {"rows": [r.to_dict() for r in reports], **meta}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def write_class_bars(report: MetricsReport, path) -> None:
    """Per-class sensitivity/specificity rows for a bar chart (empty cell = undefined)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "sensitivity", "specificity"])
        for name, s, t in zip(CLASS_NAMES, report.sensitivity, report.specificity):
            w.writerow([name, "" if np.isnan(s) else f"{s:.6f}", "" if np.isnan(t) else f"{t:.6f}"])


def write_curve(rows: Sequence[dict], path) -> None:
    """Learning curve CSV with columns epoch, loss, accuracy plus any validation columns."""
    keys = ["epoch", "loss", "accuracy"] + [k for k in ("val_loss", "val_accuracy") if rows and k in rows[0]]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] if k == "epoch" else f"{r[k]:.8g}" for k in keys])
