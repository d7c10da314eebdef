"""Clip-level tagging metrics and per-class reports.

Averages are macro averages over classes.  A class whose test clips are all
positive or all negative has no AUC; it is left out of the AUC mean.
"""

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateLabels


@dataclass
class EvalRecord:
    clip_id: str
    scores: np.ndarray
    predicted: set
    truth: set


def auc(scores, labels):
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly.

    Ties count one half.  Raises :class:`DegenerateLabels` unless both classes
    are present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # twice the Mann-Whitney U, kept integral so the result is exact
    twice_u = int((below + at_or_below).sum())
    return twice_u / (2 * pos.size * neg.size)


def _ratio(num, den):
    return num / den if den else 0.0


def prf(records, k):
    """Precision, recall and F-score of tag ``k`` over ``records``.

    Zero denominators give zero.
    """
    tp = sum(1 for r in records if k in r.predicted and k in r.truth)
    fp = sum(1 for r in records if k in r.predicted and k not in r.truth)
    fn = sum(1 for r in records if k not in r.predicted and k in r.truth)
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return p, r, _ratio(2 * p * r, p + r)


@dataclass
class ReportRow:
    name: str
    auc: float
    precision: float
    recall: float
    fscore: float


@dataclass
class Report:
    rows: list
    average: ReportRow

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "auc", "precision", "recall", "fscore"])
        for row in self.rows + [self.average]:
            writer.writerow([row.name] + [f"{v:.6f}" for v in
                                          (row.auc, row.precision, row.recall, row.fscore)])
        return buf.getvalue()

    def to_text(self, title="Averaged stats of audio tagging (macro over classes)"):
        width = max(len(r.name) for r in self.rows + [self.average])
        lines = [title, f"{'class':<{width}}  {'AUC':>6}  {'P':>6}  {'R':>6}  {'F':>6}"]
        for row in self.rows + [self.average]:
            vals = "  ".join(f"{v:6.3f}" for v in (row.auc, row.precision, row.recall, row.fscore))
            lines.append(f"{row.name:<{width}}  {vals}")
        return "\n".join(lines) + "\n"


def report(records, table):
    """Per-class AUC/P/R/F plus their macro averages (an ``AVERAGE`` row)."""
    scores = np.array([r.scores for r in records], dtype=np.float64)
    rows = []
    for k, name in enumerate(table.names):
        truth = [k in r.truth for r in records]
        try:
            value = auc(scores[:, k], truth)
        except DegenerateLabels:
            warnings.warn(f"AUC undefined for class {name!r}: excluded from the average",
                          stacklevel=2)
            value = float("nan")
        rows.append(ReportRow(name, value, *prf(records, k)))
    aucs = [r.auc for r in rows if not np.isnan(r.auc)]
    average = ReportRow(
        "AVERAGE",
        float(np.mean(aucs)) if aucs else float("nan"),
        float(np.mean([r.precision for r in rows])),
        float(np.mean([r.recall for r in rows])),
        float(np.mean([r.fscore for r in rows])),
    )
    return Report(rows, average)


SPARK_LEVELS = " .:-=+*#%@"


def sparkline(values):
    """One character per frame; the level is the absolute value in [0, 1]."""
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    top = len(SPARK_LEVELS) - 1
    return "".join(SPARK_LEVELS[int(round(v * top))] for v in values)


def dump_frame_trace(trace, path, token_names=None, skip=("blank",)):
    """Write a ``T x N`` trace as CSV and an ASCII sparkline per token.

    The CSV goes to ``path``; the sparklines to ``path`` with a ``.txt``
    suffix.  Tokens named in ``skip`` are left out of the sparkline file
    only.  Returns the two paths.
    """
    trace = np.asarray(trace)
    n_frames, n_tokens = trace.shape
    names = list(token_names) if token_names is not None else [f"token{i}" for i in range(n_tokens)]
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame"] + names)
        for t in range(n_frames):
            writer.writerow([t] + [f"{v:.6f}" for v in trace[t]])
    width = max(len(n) for n in names)
    lines = [f"{name:<{width}} |{sparkline(trace[:, j])}|"
             for j, name in enumerate(names) if name not in skip]
    spark_path = path.with_suffix(".txt")
    spark_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path, spark_path
