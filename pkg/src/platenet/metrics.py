"""Thresholded predictions, confusion matrix and the per-class classification report."""

from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from platenet.errors import ShapeError

CLASS_LABELS = (0, 1)
ROW_NAMES = ("0", "1", "accuracy", "macro avg", "weighted avg")


def threshold_predict(probabilities, threshold=0.5):
    """Label 1 where ``p >= threshold``, else 0; returns an ``(N,)`` int array."""
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return (np.asarray(probabilities).reshape(-1) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are actual ok/bad, columns predicted ok/bad; bad (1) is the positive class."""

    tn: int = 0
    fp: int = 0
    fn: int = 0
    tp: int = 0

    @property
    def total(self):
        return self.tn + self.fp + self.fn + self.tp

    def as_array(self):
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])

    def swapped(self):
        """The same outcomes with the positive and negative classes exchanged."""
        return ConfusionMatrix(tn=self.tp, fp=self.fn, fn=self.fp, tp=self.tn)


def _binary(values, name):
    arr = np.asarray(values).reshape(-1)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def confusion(y_true, y_pred):
    t, p = _binary(y_true, "y_true"), _binary(y_pred, "y_pred")
    if t.shape != p.shape:
        raise ShapeError(f"y_true has {t.size} entries, y_pred has {p.size}")
    return ConfusionMatrix(
        tn=int(np.sum((t == 0) & (p == 0))),
        fp=int(np.sum((t == 0) & (p == 1))),
        fn=int(np.sum((t == 1) & (p == 0))),
        tp=int(np.sum((t == 1) & (p == 1))),
    )


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassificationReport:
    per_class: dict  # label -> ClassMetrics
    accuracy: float
    macro: tuple  # (precision, recall, f1)
    weighted: tuple
    total: int
    zero_division: list = field(default_factory=list)  # e.g. ["precision[0]"]


def _ratio(num, den, flag, flags):
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def report(cm):
    """Per-class precision/recall/F1/support plus accuracy, macro and weighted averages.

    Zero denominators give 0 and are listed in ``zero_division``.
    """
    if cm.total == 0:
        raise ValueError("cannot build a report from an empty confusion matrix")
    flags = []
    # (true positives for the class, predicted as the class, actually the class)
    counts = {0: (cm.tn, cm.tn + cm.fn, cm.tn + cm.fp), 1: (cm.tp, cm.tp + cm.fp, cm.tp + cm.fn)}
    per_class = {}
    for label, (hit, predicted, actual) in counts.items():
        p = _ratio(hit, predicted, f"precision[{label}]", flags)
        r = _ratio(hit, actual, f"recall[{label}]", flags)
        per_class[label] = ClassMetrics(p, r, _f1(p, r), actual)
    rows = [per_class[c] for c in CLASS_LABELS]
    macro = tuple(sum(getattr(m, k) for m in rows) / len(rows) for k in ("precision", "recall", "f1"))
    weighted = tuple(sum(getattr(m, k) * m.support for m in rows) / cm.total
                     for k in ("precision", "recall", "f1"))
    return ClassificationReport(per_class, (cm.tn + cm.tp) / cm.total, macro, weighted, cm.total, flags)


def fmt4(value):
    """Four decimals, round-half-even on the exact binary value."""
    return str(Decimal(value).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN))


def _rows(rep):
    """(name, precision, recall, f1, support) with None for blank cells."""
    out = []
    for c in CLASS_LABELS:
        m = rep.per_class[c]
        out.append((str(c), m.precision, m.recall, m.f1, m.support))
    out.append(("accuracy", None, None, rep.accuracy, rep.total))
    out.append(("macro avg", *rep.macro, rep.total))
    out.append(("weighted avg", *rep.weighted, rep.total))
    return out


def render_report(rep):
    """Fixed-width text table: rows 0, 1, accuracy, macro avg, weighted avg."""
    width = 12
    lines = [" " * width + "".join(f"{h:>{width}}" for h in ("precision", "recall", "f1-score", "support")), ""]
    for i, (name, p, r, f, support) in enumerate(_rows(rep)):
        cells = ["" if v is None else fmt4(v) for v in (p, r, f)]
        lines.append(f"{name:>{width}}" + "".join(f"{c:>{width}}" for c in cells) + f"{support:>{width}}")
        if i == 1:
            lines.append("")
    return "\n".join(lines) + "\n"


def render_report_tsv(rep):
    lines = ["row\tprecision\trecall\tf1-score\tsupport"]
    for name, p, r, f, support in _rows(rep):
        cells = ["" if v is None else fmt4(v) for v in (p, r, f)]
        lines.append("\t".join([name, *cells, str(support)]))
    return "\n".join(lines) + "\n"


def parse_report(text):
    """Read a rendered report back into ``{row name: (precision, recall, f1, support)}``.

    Blank cells come back as None. Accepts both the fixed-width and TSV forms.
    """
    rows = {}
    for line in text.splitlines():
        if "\t" in line:
            fields = line.split("\t")
            name, values = fields[0], fields[1:]
            if name == "row":
                continue
        else:
            stripped = line.strip()
            name = next((n for n in ROW_NAMES if stripped.startswith(n + " ") or stripped == n), None)
            if name is None:
                continue
            values = stripped[len(name):].split()
            if name == "accuracy":
                values = ["", "", *values]
        if name not in ROW_NAMES:
            continue
        nums = [float(v) if v else None for v in values[:3]]
        rows[name] = (*nums, int(values[3]))
    return rows


def render_confusion(cm):
    return (f"{'':<12}{'Predicted':>10}\n"
            f"{'':<12}{'ok':>5}{'bad':>5}\n"
            f"{'Actual ok':<12}{cm.tn:>5}{cm.fp:>5}\n"
            f"{'Actual bad':<12}{cm.fn:>5}{cm.tp:>5}\n")
