"""Mean-threshold membership decision over pooled Dice scores, and its metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

SCORES_HEADER = ["sample_id", "guiding_class", "lambda_dummy", "dice", "true_member"]
ROC_HEADER = ["threshold", "fpr", "tpr"]

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "threshold", "accuracy", "precision", "recall", "auc", "roc", "counts", "flags", "n_records",
    ],
    "properties": {
        "threshold": {"type": "number"},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "precision": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "recall": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "auc": {"type": "number", "minimum": 0, "maximum": 1},
        "n_records": {"type": "integer", "minimum": 1},
        "counts": {
            "type": "object",
            "required": ["tp", "fp", "tn", "fn"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("tp", "fp", "tn", "fn")},
        },
        "roc": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "required": ["threshold", "fpr", "tpr"],
                "properties": {
                    "threshold": {"type": ["number", "string"]},
                    "fpr": {"type": "number", "minimum": 0, "maximum": 1},
                    "tpr": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "flags": {"type": "array", "items": {"type": "string"}},
    },
}


class ScoresFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    guiding_class: str
    lambda_dummy: float
    dice: float
    true_member: bool

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice score {self.dice} outside [0, 1]")


@dataclass
class AttackReport:
    threshold: float
    accuracy: float
    precision: float | None
    recall: float | None
    auc: float
    roc: list  # (threshold, fpr, tpr)
    counts: dict
    n_records: int
    flags: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["roc"] = [
            {"threshold": _json_threshold(t), "fpr": f, "tpr": r} for t, f, r in self.roc
        ]
        return d


def _json_threshold(t: float):
    if math.isinf(t):
        return "inf" if t > 0 else "-inf"
    return t


def pool_and_threshold(records: Sequence[ScoreRecord]) -> float:
    """Arithmetic mean of every score in the pool."""
    if not records:
        raise ValueError("cannot threshold an empty score pool")
    return math.fsum(r.dice for r in records) / len(records)


def classify(score: float, threshold: float) -> bool:
    """Member iff the score is strictly above the threshold."""
    return score > threshold


def roc_auc(records: Sequence[ScoreRecord]) -> tuple[float, list]:
    """Trapezoidal AUC over a sweep of every distinct score.

    Tied scores enter the positive set together, giving diagonal segments, so
    the area equals the Mann-Whitney statistic with ties counted one half.
    """
    pos = sum(1 for r in records if r.true_member)
    neg = len(records) - pos
    if pos == 0 or neg == 0:
        raise ValueError("roc_auc needs both member and non-member records")
    by_score: dict[float, list[int]] = {}
    for r in records:
        c = by_score.setdefault(r.dice, [0, 0])
        c[0 if r.true_member else 1] += 1
    tp = fp = 0
    points = [(math.inf, 0.0, 0.0)]
    area2 = 0  # twice the area, in units of 1 / (pos * neg)
    for s in sorted(by_score, reverse=True):
        dtp, dfp = by_score[s]
        area2 += dfp * (2 * tp + dtp)
        tp += dtp
        fp += dfp
        points.append((s, fp / neg, tp / pos))
    points.append((-math.inf, 1.0, 1.0))
    return area2 / (2 * pos * neg), points


def mann_whitney_auc(records: Sequence[ScoreRecord]) -> float:
    """Pairwise-comparison AUC (ties count one half)."""
    p = [r.dice for r in records if r.true_member]
    n = [r.dice for r in records if not r.true_member]
    twice = sum(2 if a > b else 1 if a == b else 0 for a in p for b in n)
    return twice / (2 * len(p) * len(n))


def evaluate(records: Sequence[ScoreRecord], threshold: float | None = None) -> AttackReport:
    if threshold is None:
        threshold = pool_and_threshold(records)
    tp = fp = tn = fn = 0
    for r in records:
        pred = classify(r.dice, threshold)
        if pred and r.true_member:
            tp += 1
        elif pred:
            fp += 1
        elif r.true_member:
            fn += 1
        else:
            tn += 1
    flags = []
    precision = tp / (tp + fp) if tp + fp else None
    if precision is None:
        flags.append("precision_undefined")
    recall = tp / (tp + fn) if tp + fn else None
    if recall is None:
        flags.append("recall_undefined")
    auc, roc = roc_auc(records)
    return AttackReport(
        threshold=threshold,
        accuracy=(tp + tn) / len(records),
        precision=precision,
        recall=recall,
        auc=auc,
        roc=roc,
        counts={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        n_records=len(records),
        flags=flags,
    )


# ---------------------------------------------------------------------------
# files


def write_scores(records: Sequence[ScoreRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORES_HEADER)
        for r in records:
            w.writerow([r.sample_id, r.guiding_class, repr(float(r.lambda_dummy)), repr(float(r.dice)), int(r.true_member)])


def read_scores(path) -> list[ScoreRecord]:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise ScoresFormatError(f"{path}:1: expected header {','.join(SCORES_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                sid, cls, lam, score, member = row
                if member not in ("0", "1", "true", "false", "True", "False"):
                    raise ValueError(f"bad true_member value {member!r}")
                records.append(
                    ScoreRecord(sid, cls, float(lam), float(score), member in ("1", "true", "True"))
                )
            except ValueError as exc:
                raise ScoresFormatError(f"{path}:{lineno}: {exc}") from None
    return records


def write_report(report: AttackReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def write_roc(report: AttackReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROC_HEADER)
        for t, f, r in report.roc:
            w.writerow([_json_threshold(t), repr(f), repr(r)])
