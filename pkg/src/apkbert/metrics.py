"""Classification metrics: accuracy, MCC, F1 (per class and macro)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import EmptyCounts, LabelOutOfRange, LengthMismatch


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> "ConfusionCounts":
        """Counts seen from the other class of a binary problem."""
        return ConfusionCounts(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)


def _check(c: ConfusionCounts) -> None:
    if c.total <= 0:
        raise EmptyCounts("confusion counts are all zero")


def accuracy(c: ConfusionCounts) -> float:
    _check(c)
    return (c.tp + c.tn) / c.total


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation; 0.0 when any marginal is empty."""
    _check(c)
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if denom == 0:
        return 0.0
    # integer numerator and product are exact; one rounding in sqrt, one in the divide
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def f1(c: ConfusionCounts) -> float:
    _check(c)
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 0.0
    return 2 * c.tp / denom


def f1_macro(per_class: list[ConfusionCounts]) -> float:
    if not per_class:
        raise EmptyCounts("no classes")
    return sum(f1(c) for c in per_class) / len(per_class)


def confusion_from_predictions(true_labels, predicted_labels, n_classes: int) -> list[ConfusionCounts]:
    """One-vs-rest counts for each class ``0..n_classes-1``."""
    y = list(true_labels)
    p = list(predicted_labels)
    if len(y) != len(p):
        raise LengthMismatch(f"{len(y)} true labels vs {len(p)} predictions")
    for v in y + p:
        if not 0 <= v < n_classes:
            raise LabelOutOfRange(f"label {v} outside [0, {n_classes})")
    out = []
    n = len(y)
    for k in range(n_classes):
        tp = sum(1 for a, b in zip(y, p) if a == k and b == k)
        fp = sum(1 for a, b in zip(y, p) if a != k and b == k)
        fn = sum(1 for a, b in zip(y, p) if a == k and b != k)
        out.append(ConfusionCounts(tp=tp, tn=n - tp - fp - fn, fp=fp, fn=fn))
    return out


@dataclass
class MetricsReport:
    """Evaluation summary in the column order ACC, F1, Loss, MCC.

    ``mcc`` and ``f1_positive`` are only filled for the binary task.
    """

    accuracy: float
    f1_macro: float
    loss: float
    class_names: list[str]
    f1_per_class: dict[str, float] = field(default_factory=dict)
    mcc: float | None = None
    f1_positive: float | None = None
    n_samples: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0 or not 0.0 <= self.f1_macro <= 1.0:
            raise ValueError("accuracy/F1 out of [0, 1]")
        if self.mcc is not None and not -1.0 - 1e-12 <= self.mcc <= 1.0 + 1e-12:
            raise ValueError("MCC out of [-1, 1]")
        if self.loss < 0:
            raise ValueError("negative loss")

    def to_keyvalue(self) -> str:
        lines = [
            f"n_samples={self.n_samples}",
            f"accuracy={self.accuracy!r}",
            f"f1_macro={self.f1_macro!r}",
            f"loss={self.loss!r}",
        ]
        if self.mcc is not None:
            lines.append(f"mcc={self.mcc!r}")
        if self.f1_positive is not None:
            lines.append(f"f1_positive={self.f1_positive!r}")
        for name in self.class_names:
            lines.append(f"f1[{name}]={self.f1_per_class[name]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_keyvalue(cls, text: str) -> "MetricsReport":
        kv = {}
        per_class = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key.startswith("f1[") and key.endswith("]"):
                per_class[key[3:-1]] = float(value)
            else:
                kv[key] = value
        return cls(
            accuracy=float(kv["accuracy"]),
            f1_macro=float(kv["f1_macro"]),
            loss=float(kv["loss"]),
            class_names=list(per_class),
            f1_per_class=per_class,
            mcc=float(kv["mcc"]) if "mcc" in kv else None,
            f1_positive=float(kv["f1_positive"]) if "f1_positive" in kv else None,
            n_samples=int(kv.get("n_samples", 0)),
        )

    def to_table(self, model_name: str = "model") -> str:
        headers = ["Algos", "ACC", "F1", "Loss"]
        row = [model_name, f"{self.accuracy:.4f}", f"{self.f1_macro:.4f}", f"{self.loss:.4f}"]
        if self.mcc is not None:
            headers.append("MCC")
            row.append(f"{self.mcc:.4f}")
        widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
        return "\n".join([rule, fmt.format(*headers), rule, fmt.format(*row), rule]) + "\n"


def build_report(true_labels, predicted_labels, losses, class_names) -> MetricsReport:
    """Aggregate per-record predictions and losses into a report."""
    y = list(true_labels)
    p = list(predicted_labels)
    if not y:
        raise EmptyCounts("no predictions")
    n_classes = len(class_names)
    per_class = confusion_from_predictions(y, p, n_classes)
    correct = sum(1 for a, b in zip(y, p) if a == b)
    per_class_f1 = {name: f1(c) for name, c in zip(class_names, per_class)}
    report = MetricsReport(
        accuracy=correct / len(y),
        f1_macro=f1_macro(per_class),
        loss=float(sum(losses) / len(losses)),
        class_names=list(class_names),
        f1_per_class=per_class_f1,
        n_samples=len(y),
    )
    if n_classes == 2:
        report.mcc = mcc(per_class[1])
        report.f1_positive = per_class_f1[class_names[1]]
    return report
