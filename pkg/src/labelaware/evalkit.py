"""Language-identification metrics and the overlap/non-overlap report.

Metrics: argmax accuracy, macro-F1 over classes with true trials, and
pooled one-vs-rest equal error rate. Each scored utterance contributes L
one-vs-rest trials (its posterior for every class, target iff that class
is the true label); the EER threshold sweep is linearly interpolated
between adjacent operating points. Reports break all three metrics down
overall and restricted to the overlap / non-overlap language subsets.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ScoredTrial:
    utterance_id: int
    true_label: int
    scores: np.ndarray  # (L,) softmax posteriors

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        s = self.scores
        if s.ndim != 1:
            raise ValueError(f"scores must be a vector, got shape {s.shape}")
        if abs(float(s.sum()) - 1.0) > 1e-6 or s.min() < 0.0 or s.max() > 1.0:
            raise ValueError("scores must be posteriors in [0, 1] summing to 1")


def predicted_label(trial: ScoredTrial) -> int:
    """Argmax with ties broken to the lowest class index."""
    return int(np.argmax(trial.scores))


def accuracy(trials: Sequence[ScoredTrial]) -> float:
    if not trials:
        raise ValueError("accuracy of an empty trial set")
    correct = sum(1 for t in trials if predicted_label(t) == t.true_label)
    return correct / len(trials)


def macro_f1(trials: Sequence[ScoredTrial]) -> float:
    """Unweighted mean F1 over classes that have at least one true trial.

    A class that is never predicted (or never predicted correctly) scores
    F1 = 0 and still counts in the mean.
    """
    if not trials:
        raise ValueError("macro_f1 of an empty trial set")
    num_classes = trials[0].scores.shape[0]
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    has_true = np.zeros(num_classes, dtype=bool)
    for t in trials:
        pred = predicted_label(t)
        has_true[t.true_label] = True
        if pred == t.true_label:
            tp[pred] += 1
        else:
            fp[pred] += 1
            fn[t.true_label] += 1
    f1 = np.zeros(num_classes)
    denom = 2 * tp + fp + fn
    np.divide(2 * tp, denom, out=f1, where=denom > 0)
    return float(f1[has_true].mean())


def eer_from_scores(target_scores: np.ndarray, nontarget_scores: np.ndarray) -> float:
    """EER of pooled scores: sweep every distinct score as the acceptance
    threshold (accept iff score >= threshold) and interpolate linearly
    between the adjacent operating points where FAR crosses FRR."""
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise ValueError("EER needs at least one target and one non-target trial")
    thresholds = np.unique(np.concatenate([tar, non]))
    # FAR: fraction of non-targets >= threshold; FRR: fraction of targets < it.
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    # Append the "reject everything" endpoint above the top score.
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    diff = far - frr  # starts >= 0, ends <= 0, non-increasing in threshold
    k = int(np.argmax(diff <= 0.0))
    if diff[k] == 0.0:
        return float(far[k])
    f1, m1 = far[k - 1], frr[k - 1]
    f2, m2 = far[k], frr[k]
    d1, d2 = f1 - m1, f2 - m2
    alpha = d1 / (d1 - d2)
    return float(f1 + alpha * (f2 - f1))


def pooled_trials(
    trials: Sequence[ScoredTrial], classes: Iterable[int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """One-vs-rest pooled (target, non-target) score arrays."""
    class_list = None if classes is None else sorted(classes)
    tar, non = [], []
    for t in trials:
        cols = range(t.scores.shape[0]) if class_list is None else class_list
        for c in cols:
            (tar if c == t.true_label else non).append(t.scores[c])
    return np.asarray(tar), np.asarray(non)


def eer(trials: Sequence[ScoredTrial]) -> float:
    tar, non = pooled_trials(trials)
    return eer_from_scores(tar, non)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubsetMetrics:
    name: str
    num_classes: int
    num_trials: int
    accuracy: float | None
    macro_f1: float | None
    eer: float | None


@dataclass(frozen=True)
class MetricsReport:
    overall: SubsetMetrics
    overlap: SubsetMetrics
    nonoverlap: SubsetMetrics
    per_class_f1: dict[int, float]

    def rows(self) -> list[dict]:
        out = []
        for sub in (self.overall, self.overlap, self.nonoverlap):
            out.append({
                "subset": sub.name,
                "num_classes": sub.num_classes,
                "num_trials": sub.num_trials,
                "accuracy": sub.accuracy,
                "macro_f1": sub.macro_f1,
                "eer": sub.eer,
            })
        return out


def _subset_metrics(name, trials, class_set) -> SubsetMetrics:
    if not trials:
        return SubsetMetrics(name, len(class_set), 0, None, None, None)
    return SubsetMetrics(
        name=name,
        num_classes=len(class_set),
        num_trials=len(trials),
        accuracy=accuracy(trials),
        macro_f1=macro_f1(trials),
        eer=eer(trials),
    )


def per_class_f1(trials: Sequence[ScoredTrial]) -> dict[int, float]:
    num_classes = trials[0].scores.shape[0]
    stats = {c: [0, 0, 0] for c in range(num_classes)}  # tp, fp, fn
    seen = set()
    for t in trials:
        pred = predicted_label(t)
        seen.add(t.true_label)
        if pred == t.true_label:
            stats[pred][0] += 1
        else:
            stats[pred][1] += 1
            stats[t.true_label][2] += 1
    out = {}
    for c in sorted(seen):
        tp, fp, fn = stats[c]
        denom = 2 * tp + fp + fn
        out[c] = 2 * tp / denom if denom else 0.0
    return out


def split_report(
    trials: Sequence[ScoredTrial],
    overlap_set: Iterable[int],
    nonoverlap_set: Iterable[int],
) -> MetricsReport:
    """All metrics overall plus restricted to each language subset.

    Subset rows keep the full L-way scores (a trial is wrong if the argmax
    lands outside the subset); empty subsets are reported as empty, not 0.
    """
    overlap_set = frozenset(overlap_set)
    nonoverlap_set = frozenset(nonoverlap_set)
    known = overlap_set | nonoverlap_set
    for t in trials:
        if t.true_label not in known:
            raise ValueError(f"trial label {t.true_label} outside the corpus language set")
    o_trials = [t for t in trials if t.true_label in overlap_set]
    n_trials = [t for t in trials if t.true_label in nonoverlap_set]
    return MetricsReport(
        overall=_subset_metrics("overall", list(trials), known),
        overlap=_subset_metrics("overlap", o_trials, overlap_set),
        nonoverlap=_subset_metrics("nonoverlap", n_trials, nonoverlap_set),
        per_class_f1=per_class_f1(list(trials)) if trials else {},
    )


# ---------------------------------------------------------------------------
# CSV / text I/O
# ---------------------------------------------------------------------------


def trials_to_csv(trials: Sequence[ScoredTrial], path: str | Path) -> None:
    num_classes = trials[0].scores.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["utterance_id", "true_label"] + [f"score_{c}" for c in range(num_classes)]
        )
        for t in trials:
            writer.writerow(
                [t.utterance_id, t.true_label] + [repr(float(s)) for s in t.scores]
            )


def trials_from_csv(path: str | Path) -> list[ScoredTrial]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_scores = len(header) - 2
        out = []
        for row in reader:
            out.append(ScoredTrial(
                utterance_id=int(row[0]),
                true_label=int(row[1]),
                scores=np.array([float(x) for x in row[2:2 + n_scores]]),
            ))
    return out


def report_to_csv(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["subset", "num_classes", "num_trials",
                            "accuracy", "macro_f1", "eer"]
        )
        writer.writeheader()
        for row in report.rows():
            writer.writerow(
                {k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                 for k, v in row.items()}
            )


def format_report(report: MetricsReport) -> str:
    """Human-readable fixed-width table."""
    buf = io.StringIO()
    buf.write(f"{'subset':<12}{'classes':>8}{'trials':>8}"
              f"{'accuracy':>11}{'macro_f1':>11}{'eer':>11}\n")
    for row in report.rows():
        def fmt(v):
            return "  (empty)" if v is None else f"{v:9.4f}"
        buf.write(
            f"{row['subset']:<12}{row['num_classes']:>8}{row['num_trials']:>8}"
            f"{fmt(row['accuracy']):>11}{fmt(row['macro_f1']):>11}{fmt(row['eer']):>11}\n"
        )
    return buf.getvalue()
