"""Multi-label evaluation: macro/micro AUC-ROC, macro/micro F1 and precision@k.

Conventions:

* AUC is the exact Mann-Whitney statistic with ties worth one half. A label
  whose gold column is all zeros or all ones has no AUC (``None``) and is
  left out of the macro average.
* Macro F1 averages over every label, a label with no predicted and no gold
  positives scoring 0.
* Top-k ties are broken by ascending label index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PredictionSet:
    scores: np.ndarray
    gold: np.ndarray

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.gold = np.atleast_2d(np.asarray(self.gold))
        if self.scores.shape != self.gold.shape:
            raise ValueError(f"scores {self.scores.shape} and gold {self.gold.shape} differ in shape")
        if not np.isin(self.gold, (0, 1)).all():
            raise ValueError("gold labels must be binary")
        self.gold = self.gold.astype(np.int8)

    @property
    def n_docs(self) -> int:
        return self.scores.shape[0]

    @property
    def n_labels(self) -> int:
        return self.scores.shape[1]


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    bounds = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [xs.size]])
    ranks = np.empty(x.size)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return ranks


def auc_binary(scores, labels) -> float | None:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_micro_auc(preds: PredictionSet) -> tuple[float | None, float | None]:
    per_label = [auc_binary(preds.scores[:, j], preds.gold[:, j]) for j in range(preds.n_labels)]
    defined = [a for a in per_label if a is not None]
    macro = float(np.mean(defined)) if defined else None
    micro = auc_binary(preds.scores.ravel(), preds.gold.ravel())
    return macro, micro


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def macro_micro_f1(preds: PredictionSet, threshold: float = 0.5) -> tuple[float, float]:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    pred = preds.scores >= threshold
    gold = preds.gold.astype(bool)
    tp = (pred & gold).sum(axis=0)
    fp = (pred & ~gold).sum(axis=0)
    fn = (~pred & gold).sum(axis=0)
    macro = float(_f1(tp, fp, fn).mean())
    micro = float(_f1(tp.sum(), fp.sum(), fn.sum()))
    return macro, micro


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best labels per row; equal scores go to the lower index."""
    scores = np.atleast_2d(scores)
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k must be in [1, {scores.shape[1]}], got {k}")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def precision_at_k(preds: PredictionSet, k: int) -> float:
    idx = top_k(preds.scores, k)
    hits = np.take_along_axis(preds.gold, idx, axis=1)
    return float(hits.sum(axis=1).mean() / k)


def evaluate(preds: PredictionSet, k: int = 5, threshold: float = 0.5) -> dict:
    """The JSON metrics report; undefined AUCs are ``None``."""
    macro_auc, micro_auc = macro_micro_auc(preds)
    macro_f1, micro_f1 = macro_micro_f1(preds, threshold)
    return {
        "macro_auc": macro_auc,
        "micro_auc": micro_auc,
        "macro_f1": macro_f1,
        "micro_f1": micro_f1,
        "p_at_k": precision_at_k(preds, k),
        "k": k,
        "n_docs": preds.n_docs,
        "n_labels": preds.n_labels,
    }
