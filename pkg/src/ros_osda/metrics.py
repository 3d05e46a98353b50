"""Open-set evaluation: OS*, UNK, OS, HOS, AUC-ROC, openness and multi-run aggregation.

Accuracies are percentages in [0, 100]. Ground-truth labels ``< n_known``
are known classes; anything ``>= n_known`` is a target-private class, and
predicting ``n_known`` means "unknown".
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError

METRIC_KEYS = ("os_star", "unk", "os", "hos", "auc_roc")


def _arrays(y_pred, y_true):
    y_pred = np.asarray(y_pred, dtype=np.int64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if y_pred.shape != y_true.shape:
        raise ValidationError("predictions and ground truth differ in length")
    return y_pred, y_true


def per_class_accuracy(y_pred, y_true, n_known) -> dict:
    """Accuracy (%) of each known class present in the ground truth."""
    y_pred, y_true = _arrays(y_pred, y_true)
    out = {}
    for k in range(n_known):
        mask = y_true == k
        if mask.any():
            out[k] = 100.0 * float(np.mean(y_pred[mask] == k))
    return out


def os_star(y_pred, y_true, n_known) -> float:
    """Mean per-class accuracy over the known classes present in the target."""
    acc = per_class_accuracy(y_pred, y_true, n_known)
    if not acc:
        raise UndefinedMetricError("OS* is undefined without known-class samples")
    return float(np.mean(list(acc.values())))


def unk_accuracy(y_pred, y_true, n_known) -> float:
    """Share (%) of target-private samples predicted as unknown."""
    y_pred, y_true = _arrays(y_pred, y_true)
    mask = y_true >= n_known
    if not mask.any():
        raise UndefinedMetricError("UNK is undefined without unknown-class samples")
    return 100.0 * float(np.mean(y_pred[mask] == n_known))


def os_score(os_star_value, unk_value, n_known) -> float:
    """Unknown treated as one more class: ``(K * OS* + UNK) / (K + 1)``."""
    if n_known < 1:
        raise ValidationError("n_known must be >= 1")
    return (n_known * os_star_value + unk_value) / (n_known + 1)


def hos(os_star_value, unk_value) -> float:
    """Harmonic mean of OS* and UNK (zero when either is zero)."""
    if os_star_value <= 0 or unk_value <= 0:
        return 0.0
    return 2.0 * os_star_value * unk_value / (os_star_value + unk_value)


def auc_roc(scores, is_known) -> float:
    """P(score of a random known > score of a random unknown), ties counted 1/2.

    Computed from average ranks (Mann-Whitney U).
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_known = np.asarray(is_known, dtype=bool)
    if scores.shape != is_known.shape:
        raise ValidationError("scores and labels differ in length")
    n_pos = int(is_known.sum())
    n_neg = len(is_known) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC-ROC needs both known and unknown samples")
    ranks = rankdata(scores)
    u = ranks[is_known].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def openness(n_known, n_total) -> float:
    if not 1 <= n_known <= n_total:
        raise ValidationError(f"need 1 <= n_known <= n_total, got {n_known}, {n_total}")
    return 1.0 - n_known / n_total


@dataclass
class MetricsReport:
    os_star: float
    unk: float
    os: float
    hos: float
    n_known: int
    per_class_accuracy: dict = field(default_factory=dict)
    auc_roc: float | None = None
    openness: float | None = None
    excluded_classes: list = field(default_factory=list)
    n_runs: int = 1
    std: dict = field(default_factory=dict)
    label: str = ""
    config_hash: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in sorted(self.per_class_accuracy.items())}
        return d

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        d = dict(d)
        d["per_class_accuracy"] = {int(k): float(v) for k, v in d.get("per_class_accuracy", {}).items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def summary_row(self) -> str:
        """One results row: OS*, UNK, HOS and OS with one decimal."""
        def cell(key):
            v = getattr(self, key)
            if key in self.std and self.n_runs > 1:
                return f"{v:.1f}±{self.std[key]:.1f}"
            return f"{v:.1f}"
        row = f"OS*={cell('os_star')} UNK={cell('unk')} HOS={cell('hos')} OS={cell('os')}"
        if self.auc_roc is not None:
            row += f" AUC={self.auc_roc:.3f}"
        return row


def evaluate(y_pred, y_true, n_known, normality=None, label="", config_hash="") -> MetricsReport:
    """Full report from predicted and true labels (and optionally normality scores)."""
    y_pred, y_true = _arrays(y_pred, y_true)
    acc = per_class_accuracy(y_pred, y_true, n_known)
    s = os_star(y_pred, y_true, n_known)
    u = unk_accuracy(y_pred, y_true, n_known)
    n_total = n_known + len(np.unique(y_true[y_true >= n_known]))
    auc = None
    if normality is not None:
        auc = auc_roc(normality, y_true < n_known)
    return MetricsReport(
        os_star=s, unk=u, os=os_score(s, u, n_known), hos=hos(s, u), n_known=n_known,
        per_class_accuracy=acc, auc_roc=auc, openness=openness(n_known, n_total),
        excluded_classes=[k for k in range(n_known) if k not in acc],
        label=label, config_hash=config_hash,
    )


def aggregate_runs(reports) -> MetricsReport:
    """Mean and sample standard deviation over runs of one configuration.

    HOS is averaged over runs, not recomputed from the averaged OS* and UNK.
    """
    reports = list(reports)
    if not reports:
        raise ValidationError("nothing to aggregate")
    hashes = {r.config_hash for r in reports}
    if len(hashes) > 1:
        raise ValidationError(f"cannot aggregate runs of different configurations: {sorted(hashes)}")
    n = len(reports)

    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), (float(arr.std(ddof=1)) if n > 1 else 0.0)

    means, std = {}, {}
    for key in METRIC_KEYS:
        values = [getattr(r, key) for r in reports]
        if any(v is None for v in values):
            means[key] = None
            continue
        means[key], std[key] = stats(values)
    classes = sorted(set().union(*(r.per_class_accuracy.keys() for r in reports)))
    per_class = {}
    for k in classes:
        vals = [r.per_class_accuracy[k] for r in reports if k in r.per_class_accuracy]
        per_class[k] = float(np.mean(vals))
    opens = [r.openness for r in reports if r.openness is not None]
    return MetricsReport(
        os_star=means["os_star"], unk=means["unk"], os=means["os"], hos=means["hos"],
        n_known=reports[0].n_known, per_class_accuracy=per_class, auc_roc=means["auc_roc"],
        openness=float(np.mean(opens)) if opens else None,
        excluded_classes=sorted(set().union(*(r.excluded_classes for r in reports))),
        n_runs=n, std=std, label=reports[0].label, config_hash=reports[0].config_hash,
    )


def format_table(rows) -> str:
    """Plain-text table: one line per ``(name, report)``; 1-decimal presentation."""
    lines = [f"{'setting':<40} {'OS*':>11} {'UNK':>11} {'HOS':>11} {'AUC':>7}"]
    for name, r in rows:
        def cell(key):
            v = getattr(r, key)
            if v is None:
                return "-"
            if key == "auc_roc":
                return f"{100 * v:.1f}"
            if r.n_runs > 1 and key in r.std:
                return f"{v:.1f}±{r.std[key]:.1f}"
            return f"{v:.1f}"
        lines.append(f"{name:<40} {cell('os_star'):>11} {cell('unk'):>11} {cell('hos'):>11} {cell('auc_roc'):>7}")
    return "\n".join(lines)


def is_finite_report(r: MetricsReport) -> bool:
    return all(v is None or math.isfinite(v) for v in (r.os_star, r.unk, r.os, r.hos, r.auc_roc))
