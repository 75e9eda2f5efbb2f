"""Ranking and threshold metrics: AUC (with tie handling), accuracy and F1
at the accuracy-optimal threshold, plus a brute-force AUC oracle.

The fast AUC uses midranks and must equal the O(n^2) pair count exactly:
both numerators are sums of halves (dyadic rationals), so the two
computations agree bit-for-bit, not just approximately.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class EvalResult:
    """AUC plus accuracy/F1 at the accuracy-maximizing threshold."""

    auc: float
    best_threshold: float
    accuracy_at_best: float
    f1_at_best: float
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "best_threshold": self.best_threshold,
            "accuracy_at_best": self.accuracy_at_best,
            "f1_at_best": self.f1_at_best,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _check_binary(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape[0] != labels.shape[0]:
        raise ValueError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if not (labels == 1).any() or not (labels == 0).any():
        raise ValueError("AUC undefined: need at least one positive and one negative")
    return scores, labels


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average rank of their run."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    i = 0
    n = scores.shape[0]
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        # Average of ranks i+1 .. j+1; sums of halves stay exact in binary.
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Rank-statistic AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    scores, labels = _check_binary(scores, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(scores.shape[0] - n_pos)
    ranks = _midranks(scores)
    numerator = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(numerator / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """Direct O(n^2) enumeration of the same pair statistic."""
    scores, labels = _check_binary(scores, labels)
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    numerator = 0.0
    for p in pos_scores:
        for q in neg_scores:
            if p > q:
                numerator += 1.0
            elif p == q:
                numerator += 0.5
    return float(numerator / (pos_scores.size * neg_scores.size))


def _f1(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def best_threshold_metrics(scores, labels) -> EvalResult:
    """Scan thresholds (midpoints of distinct scores plus +/-inf sentinels).

    Prediction is ``score >= threshold``.  The winner maximizes accuracy,
    breaking ties by higher F1, then by lower threshold.  The sentinels put
    the two trivial classifiers in the scan, so the best accuracy is never
    below the majority-class rate.
    """
    scores, labels = _check_binary(scores, labels)
    distinct = np.unique(scores)
    candidates = [-np.inf]
    candidates.extend((distinct[:-1] + distinct[1:]) / 2.0)
    candidates.append(np.inf)

    best: tuple[float, float, float] | None = None
    for thr in candidates:
        pred = scores >= thr
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        fn = int(np.sum(~pred & (labels == 1)))
        tn = int(np.sum(~pred & (labels == 0)))
        acc = (tp + tn) / scores.shape[0]
        f1 = _f1(tp, fp, fn)
        if (
            best is None
            or acc > best[1]
            or (acc == best[1] and f1 > best[2])
        ):
            best = (float(thr), acc, f1)
    assert best is not None
    return EvalResult(
        auc=auc(scores, labels),
        best_threshold=best[0],
        accuracy_at_best=best[1],
        f1_at_best=best[2],
        n_pos=int((labels == 1).sum()),
        n_neg=int((labels == 0).sum()),
    )


def macro_auc(score_matrix, labels) -> float:
    """Macro-averaged one-vs-rest AUC for C > 2 classes.

    Classes without both members and non-members in ``labels`` are skipped;
    if no class is scoreable the AUC is undefined.
    """
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if score_matrix.ndim != 2 or score_matrix.shape[0] != labels.shape[0]:
        raise ValueError("score matrix must be n_samples x n_classes")
    parts = []
    for c in range(score_matrix.shape[1]):
        onevsrest = (labels == c).astype(np.int64)
        if onevsrest.any() and not onevsrest.all():
            parts.append(auc(score_matrix[:, c], onevsrest))
    if not parts:
        raise ValueError("AUC undefined: no class has both members and non-members")
    return float(np.mean(parts))


def write_scores_csv(path: str | Path, rows: list[tuple[str, int, float]]) -> None:
    """Per-slide score export: slide_id, label, score."""
    lines = ["slide_id,label,score"]
    lines.extend(f"{sid},{label},{score!r}" for sid, label, score in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
