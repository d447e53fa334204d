"""Detection metrics and score tables.

The in-distribution side is always the positive class.  AUC counts score
pairs exactly (ties worth one half), AUPR sums the precision staircase
over descending thresholds with tied scores grouped, and FPR95 reports
the false-positive rate at the largest threshold that still accepts 95%
of the ID scores.
"""
from __future__ import annotations

import bisect
import csv
import json
from dataclasses import dataclass

import numpy as np


def _clean(scores):
    out = [float(s) for s in scores]
    if not out:
        raise ValueError("empty score list")
    return out


def auc(id_scores, ood_scores) -> float:
    """P(ID score > OOD score) + 0.5 * P(tie), computed exactly."""
    ids = _clean(id_scores)
    oods = sorted(_clean(ood_scores))
    numerator = 0  # counts in half-units
    for s in ids:
        lo = bisect.bisect_left(oods, s)
        hi = bisect.bisect_right(oods, s)
        numerator += 2 * lo + (hi - lo)
    return numerator / (2 * len(ids) * len(oods))


def aupr(id_scores, ood_scores) -> float:
    """Area under precision-recall with ID positive, via the descending
    threshold staircase; tied scores enter together."""
    ids = _clean(id_scores)
    oods = _clean(ood_scores)
    events = sorted(
        [(s, 1) for s in ids] + [(s, 0) for s in oods], key=lambda e: -e[0]
    )
    n_id = len(ids)
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(events):
        j = i
        while j < len(events) and events[j][0] == events[i][0]:
            tp += events[j][1]
            fp += 1 - events[j][1]
            j += 1
        recall = tp / n_id
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return area


def fpr95(id_scores, ood_scores) -> float:
    """False-positive rate at 95% true-positive rate.

    The threshold is the largest t with at least ceil(0.95 * n) ID scores
    >= t, i.e. the ceil(0.95 n)-th largest ID score.
    """
    ids = sorted(_clean(id_scores), reverse=True)
    oods = _clean(ood_scores)
    k = (19 * len(ids) + 19) // 20  # ceil(0.95 n) in exact integer math
    t = ids[k - 1]
    return sum(1 for s in oods if s >= t) / len(oods)


def overlap(id_scores, ood_scores, bins: int = 50) -> float:
    """Histogram intersection of the two normalized score distributions
    over the union of their ranges."""
    ids = np.asarray(_clean(id_scores))
    oods = np.asarray(_clean(ood_scores))
    lo = min(ids.min(), oods.min())
    hi = max(ids.max(), oods.max())
    if lo == hi:
        return 1.0
    h_id, _ = np.histogram(ids, bins=bins, range=(lo, hi))
    h_ood, _ = np.histogram(oods, bins=bins, range=(lo, hi))
    p = h_id / h_id.sum()
    q = h_ood / h_ood.sum()
    return float(np.minimum(p, q).sum())


def metrics_dict(id_scores, ood_scores) -> dict:
    return {
        "auc": auc(id_scores, ood_scores),
        "aupr": aupr(id_scores, ood_scores),
        "fpr95": fpr95(id_scores, ood_scores),
        "overlap": overlap(id_scores, ood_scores),
        "n_id": len(id_scores),
        "n_ood": len(ood_scores),
    }


def write_metrics_json(metrics: dict, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
        fh.write("\n")


# -- score tables -----------------------------------------------------------

SCORE_COLUMNS = ["graph_id", "origin", "score", "md1", "md2"]


@dataclass
class ScoreRow:
    graph_id: str
    origin: str  # "ID" or "OOD"
    score: float
    md1: float
    md2: float


@dataclass
class ScoreTable:
    rows: list[ScoreRow]

    def origin_scores(self, origin) -> list[float]:
        return [r.score for r in self.rows if r.origin == origin]

    def metrics(self) -> dict:
        return metrics_dict(self.origin_scores("ID"), self.origin_scores("OOD"))

    def write_csv(self, path: str):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SCORE_COLUMNS)
            for r in self.rows:
                w.writerow([r.graph_id, r.origin, repr(r.score), repr(r.md1), repr(r.md2)])

    @classmethod
    def read_csv(cls, path: str) -> "ScoreTable":
        rows = []
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != SCORE_COLUMNS:
                raise ValueError(f"{path}: expected header {','.join(SCORE_COLUMNS)}")
            for rec in reader:
                if len(rec) != 5:
                    raise ValueError(f"{path}: malformed row {rec!r}")
                rows.append(ScoreRow(rec[0], rec[1], float(rec[2]), float(rec[3]), float(rec[4])))
        return cls(rows)
