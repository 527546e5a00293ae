"""Multi-label recommendation metrics, computed per patient and averaged."""

from __future__ import annotations

import json
import logging
from fractions import Fraction
from dataclasses import asdict, dataclass

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_ETA = 0.3


@dataclass(frozen=True)
class MetricReport:
    prauc: float
    f1: float
    jaccard: float
    ddi: float
    n_patients: int
    subset_label: str

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("prauc", "f1", "jaccard", "ddi"):
            out[k] = round(float(out[k]), 6)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def binarize(pred, eta: float = DEFAULT_ETA) -> np.ndarray:
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    return (np.asarray(pred, dtype=float) > eta).astype(int)


def _check(truths, preds):
    if len(truths) != len(preds):
        raise ValueError("truths and predictions differ in length")
    if len(truths) == 0:
        raise ValueError("cannot evaluate an empty patient list")


def _sets(y):
    return set(np.flatnonzero(np.asarray(y)).tolist())


# Jaccard and F1 are ratios of small integers, so they are averaged as exact
# fractions: the result is correctly rounded and independent of patient order.


def jaccard_metric(truths, preds) -> float:
    _check(truths, preds)
    total = Fraction(0)
    for y, yh in zip(truths, preds):
        Y, Yh = _sets(y), _sets(yh)
        union = len(Y | Yh)
        if union:
            total += Fraction(len(Y & Yh), union)
    return float(total / len(truths))


def f1_metric(truths, preds) -> float:
    _check(truths, preds)
    total = Fraction(0)
    for y, yh in zip(truths, preds):
        Y, Yh = _sets(y), _sets(yh)
        inter = len(Y & Yh)
        if inter:
            total += Fraction(2 * inter, len(Y) + len(Yh))
    return float(total / len(truths))


def average_precision(y, scores) -> float:
    """Sum over ranks of precision@k times the recall increment at k.

    Medications are ranked by descending score, ties by index.
    """
    y = np.asarray(y)
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    hits = y[order] > 0
    n_pos = int(hits.sum())
    ranks = np.flatnonzero(hits) + 1
    return float(np.sum(np.arange(1, n_pos + 1) / ranks) / n_pos)


def prauc_metric(truths, raw_preds) -> float:
    _check(truths, raw_preds)
    scores = [average_precision(y, s) for y, s in zip(truths, raw_preds) if np.any(np.asarray(y))]
    skipped = len(truths) - len(scores)
    if skipped:
        log.info("PRAUC: excluded %d patients without positive labels", skipped)
    if not scores:
        raise ValueError("no patient has a positive label")
    return float(np.mean(scores))


def ddi_rate(preds, ddi_edges) -> float:
    """Share of predicted unordered medication pairs that interact."""
    edges = {(min(a, b), max(a, b)) for a, b in ddi_edges}
    hit = total = 0
    for yh in preds:
        meds = sorted(_sets(yh))
        for i, a in enumerate(meds):
            for b in meds[i + 1:]:
                total += 1
                hit += (a, b) in edges
    return hit / total if total else 0.0


def evaluate_predictions(truths, probs, ddi_edges, eta=DEFAULT_ETA, subset_label="all") -> MetricReport:
    bins = [binarize(p, eta) for p in probs]
    return MetricReport(
        prauc=prauc_metric(truths, probs),
        f1=f1_metric(truths, bins),
        jaccard=jaccard_metric(truths, bins),
        ddi=ddi_rate(bins, ddi_edges),
        n_patients=len(truths),
        subset_label=subset_label,
    )
