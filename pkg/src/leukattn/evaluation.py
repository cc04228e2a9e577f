"""Binary classification metrics over {HEM=0, ALL=1}."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ConfusionMatrix2x2:
    """Counts indexed [true][pred]; row/col 0 is HEM, 1 is ALL."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self) -> None:
        if any(c < 0 for row in self.counts for c in row):
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_counts(cls, hem_hem: int, hem_all: int, all_hem: int, all_all: int):
        return cls(((int(hem_hem), int(hem_all)), (int(all_hem), int(all_all))))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.array.sum())


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix2x2:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.size == 0:
        raise ValueError("confusion of an empty sample")
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if not np.isin(true, (0, 1)).all() or not np.isin(pred, (0, 1)).all():
        raise ValueError("labels and predictions must be 0 or 1")
    cm = np.bincount(true * 2 + pred, minlength=4).reshape(2, 2)
    return ConfusionMatrix2x2(tuple(tuple(int(c) for c in row) for row in cm))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC as the Mann-Whitney statistic (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one sample of each class")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    accuracy: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    sensitivity: float
    specificity: float
    per_class: dict[str, dict[str, float]]
    confusion: list[list[int]]
    n: int
    auc: float | None = None
    zero_division: list[str] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema {d.get('schema_version')!r}")
        return cls(**d)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def headline(self) -> str:
        return (
            f"accuracy={self.accuracy:.2%} precision={self.precision_weighted:.2%} "
            f"recall={self.recall_weighted:.2%} f1={self.f1_weighted:.2%}"
        )


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def derive_metrics(
    cm: ConfusionMatrix2x2, scores: Sequence[float] | None = None,
    labels: Sequence[int] | None = None,
) -> MetricsReport:
    """Accuracy, per-class/weighted/macro P/R/F1, sensitivity, specificity, AUC.

    Weighted averages use true-class support. A zero denominator yields 0 and
    is listed in ``zero_division`` (e.g. ``"precision:ALL"``). AUC is computed
    only when ``scores`` (probability of ALL) and ``labels`` are given and both
    classes are present.
    """
    m = cm.array.astype(np.float64)
    total = m.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    flags: list[str] = []
    per_class = {}
    for k, name in enumerate(("HEM", "ALL")):
        tp = m[k, k]
        prec, zp = _ratio(tp, m[:, k].sum())
        rec, zr = _ratio(tp, m[k, :].sum())
        f1, zf = _ratio(2 * prec * rec, prec + rec)
        for metric, z in (("precision", zp), ("recall", zr), ("f1", zf)):
            if z:
                flags.append(f"{metric}:{name}")
        per_class[name] = {"precision": prec, "recall": rec, "f1": f1,
                           "support": int(m[k, :].sum())}
    support = np.array([per_class[c]["support"] for c in ("HEM", "ALL")], dtype=float)
    w = support / total

    def avg(metric: str, weights) -> float:
        return float(sum(wi * per_class[c][metric] for wi, c in zip(weights, ("HEM", "ALL"))))

    auc_value = None
    if scores is not None and labels is not None:
        y = np.asarray(labels)
        if (y == 0).any() and (y == 1).any():
            auc_value = auc(scores, labels)
    return MetricsReport(
        accuracy=float(np.trace(m) / total),
        precision_weighted=avg("precision", w),
        recall_weighted=avg("recall", w),
        f1_weighted=avg("f1", w),
        precision_macro=avg("precision", (0.5, 0.5)),
        recall_macro=avg("recall", (0.5, 0.5)),
        f1_macro=avg("f1", (0.5, 0.5)),
        sensitivity=per_class["ALL"]["recall"],
        specificity=per_class["HEM"]["recall"],
        per_class=per_class,
        confusion=[[int(c) for c in row] for row in cm.counts],
        n=int(total),
        auc=auc_value,
        zero_division=flags,
    )


def evaluate_predictions(
    predictions: Sequence[int], labels: Sequence[int], scores: Sequence[float] | None = None
) -> MetricsReport:
    return derive_metrics(confusion(predictions, labels), scores, labels)
