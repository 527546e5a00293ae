"""Per-visit uncertainty scores, the uncertainty predictor and the
support-visit filter applied at meta-test time."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .ehr import nearest_rank
from .encoder import DTYPE, attention_block, encode_sets, init_block
from .errors import ConfigError, TrainingError
from .head import predict

UQ_METHODS = ("aux_error", "dropout", "ensemble", "none")


@dataclass(frozen=True)
class UncertaintyRecord:
    per_med_scores: np.ndarray
    visit_score: float
    visit_key: tuple


@dataclass(frozen=True)
class FilterThreshold:
    gamma: float
    beta: float


@dataclass(frozen=True)
class FilterResult:
    retained: tuple
    fallback: bool
    scores: tuple = ()


def _std(stack) -> np.ndarray:
    """Population std along axis 0. Shifting by the first row first makes
    identical rows give exactly zero."""
    x = np.asarray(stack, dtype=float)
    x = x - x[0]
    return np.sqrt(np.mean((x - x.mean(axis=0)) ** 2, axis=0))


def _visit_pred(record, visit, theta, phi, hidden_mask=None):
    with torch.no_grad():
        pe = encode_sets([record.all_codes()], theta, "patient")[0]
        ve = encode_sets([visit.codes], theta, "visit")[0]
        return predict(pe, ve, phi, hidden_mask).numpy()


def auxiliary_error_scores(labels, pred) -> np.ndarray:
    return np.abs(np.asarray(labels, dtype=float) - np.asarray(pred, dtype=float))


def dropout_masks(d: int, passes: int, rate: float, seed: int) -> np.ndarray:
    """Inverted-dropout masks for the head's hidden layer, (passes, d)."""
    if rate >= 1.0:
        raise ConfigError("dropout rate must be < 1")
    rng = np.random.default_rng(seed)
    keep = rng.random((passes, d)) >= rate
    return keep / (1.0 - rate)


def dropout_scores(record, visit, theta, phi, passes=10, rate=0.5, seed=0) -> np.ndarray:
    if passes < 2:
        raise ConfigError("dropout scoring needs at least 2 passes")
    d = phi["b1"].shape[0]
    masks = torch.as_tensor(dropout_masks(d, passes, rate, seed), dtype=DTYPE)
    with torch.no_grad():
        pe = encode_sets([record.all_codes()], theta, "patient")[0]
        ve = encode_sets([visit.codes], theta, "visit")[0]
        preds = predict(pe.expand(passes, -1), ve.expand(passes, -1), phi, masks).numpy()
    return _std(preds)


def ensemble_scores(record, visit, models) -> np.ndarray:
    """``models`` is a sequence of (theta, phi) pairs."""
    if len(models) < 2:
        raise ConfigError("an ensemble needs at least 2 models")
    return _std([_visit_pred(record, visit, th, ph) for th, ph in models])


def visit_uncertainty(S, pred) -> float:
    """Mean score over predicted-positive medications (all of them if none
    is predicted positive)."""
    S = np.asarray(S, dtype=float)
    positive = np.asarray(pred, dtype=float) > 0.5
    return float(S[positive].mean()) if positive.any() else float(S.mean())


def fit_threshold(values, beta: float = 20.0) -> FilterThreshold:
    if not 0.0 < beta < 100.0:
        raise ValueError("beta must lie in (0, 100)")
    if len(values) == 0:
        raise ValueError("fit_threshold needs at least one score")
    return FilterThreshold(float(nearest_rank(list(values), 100.0 - beta)), float(beta))


def _patient_head(record, theta, phi, index, meta):
    if meta is None:
        return phi
    from .meta import adapt_patient

    return adapt_patient(record, theta, phi, index, meta).phi2


def uncertainty_targets(params, cohort, method="aux_error", passes=10, rate=0.5, seed=0,
                        ensemble=None, index=None, meta=None) -> list[UncertaintyRecord]:
    """Score every support visit of every patient with the frozen model.

    With ``meta`` (and the peer ``index``) each patient's head is first
    adapted to that patient, so a visit scores high when it disagrees with
    the patient's own profile. Without it the global head is used.
    """
    if method not in ("aux_error", "dropout", "ensemble"):
        raise ConfigError(f"cannot compute uncertainty targets for method {method!r}")
    theta, phi = params.theta, params.phi
    out = []
    for i, rec in enumerate(cohort.patients):
        phi_i = _patient_head(rec, theta, phi, index, meta)
        members = None
        if method == "ensemble":
            members = [(th, _patient_head(rec, th, ph, index, meta)) for th, ph in ensemble]
        for v in rec.support_visits:
            pred = _visit_pred(rec, v, theta, phi_i)
            if method == "aux_error":
                S = auxiliary_error_scores(v.labels, pred)
            elif method == "dropout":
                S = dropout_scores(rec, v, theta, phi_i, passes, rate, seed=seed + 1000 * i + v.t)
            else:
                S = ensemble_scores(rec, v, members)
            out.append(UncertaintyRecord(S, visit_uncertainty(S, pred), (rec.patient_id, v.t)))
    return out


class UQPredictor:
    """Self-attention over a patient's support-visit embeddings with a
    softplus output, giving one non-negative score per visit."""

    def __init__(self, d: int, seed: int = 0, params=None):
        if params is None:
            gen = torch.Generator().manual_seed(int(seed))
            params = init_block(d, 2 * d, gen)
            params["w_out"] = (torch.rand(d, generator=gen, dtype=DTYPE) * 2 - 1) / math.sqrt(d)
            params["b_out"] = torch.zeros((), dtype=DTYPE)
        self.params = params

    def forward(self, seqs, mask, params=None):
        p = self.params if params is None else params
        h = attention_block(seqs, p, mask)
        return F.softplus(h @ p["w_out"] + p["b_out"])

    @staticmethod
    def visit_embeddings(records, theta):
        """Padded (P, S, d) support-visit embeddings and their mask."""
        with torch.no_grad():
            flat = [v.codes for r in records for v in r.support_visits]
            emb = encode_sets(flat, theta, "visit")
        S = max(r.num_visits - 1 for r in records)
        d = emb.shape[1]
        seqs = torch.zeros(len(records), S, d, dtype=DTYPE)
        mask = torch.zeros(len(records), S, dtype=torch.bool)
        pos = 0
        for i, r in enumerate(records):
            n = r.num_visits - 1
            seqs[i, :n] = emb[pos:pos + n]
            mask[i, :n] = True
            pos += n
        return seqs, mask

    def predict_visits(self, record, theta) -> np.ndarray:
        seqs, mask = self.visit_embeddings([record], theta)
        with torch.no_grad():
            return self.forward(seqs, mask)[0].numpy().copy()


def train_uq_predictor(params, cohort, targets=None, method="aux_error", epochs=300, lr=1e-2,
                       seed=0, weight_decay=0.0, **target_kwargs) -> UQPredictor:
    """Regress per-visit uncertainty targets (mean squared error) from
    support-visit embedding sequences. The base model stays frozen."""
    if len(cohort) == 0:
        raise TrainingError("cannot train the uncertainty predictor on an empty cohort")
    if targets is None:
        targets = uncertainty_targets(params, cohort, method, **target_kwargs)
    by_key = {r.visit_key: r.visit_score for r in targets}
    records = list(cohort.patients)
    seqs, mask = UQPredictor.visit_embeddings(records, params.theta)
    y = torch.zeros(mask.shape, dtype=DTYPE)
    for i, r in enumerate(records):
        for s, v in enumerate(r.support_visits):
            y[i, s] = by_key[(r.patient_id, v.t)]

    model = UQPredictor(params.d, seed)
    mean = float(y[mask].mean())
    # Start the output at the target mean: softplus^-1(m) = log(expm1(m)).
    model.params["b_out"] = torch.tensor(math.log(math.expm1(max(mean, 1e-6))), dtype=DTYPE)
    leaves = {k: v.clone().requires_grad_(True) for k, v in model.params.items()}
    opt = torch.optim.Adam(list(leaves.values()), lr=lr, weight_decay=weight_decay)
    w = mask.to(DTYPE)
    for _ in range(epochs):
        opt.zero_grad()
        loss = (((model.forward(seqs, mask, leaves) - y) ** 2) * w).sum() / w.sum()
        loss.backward()
        opt.step()
    model.params = {k: v.detach().clone() for k, v in leaves.items()}
    return model


class UncertaintyFilter:
    def __init__(self, predictor: UQPredictor, threshold: FilterThreshold):
        self.predictor = predictor
        self.threshold = threshold

    def retain(self, record, theta) -> FilterResult:
        return filter_support_visits(record, self.predictor, self.threshold, theta)


def filter_support_visits(record, uq_predictor, threshold, theta) -> FilterResult:
    """Keep support visits with predicted uncertainty <= gamma; if that
    would leave none, keep the single lowest-scoring visit."""
    scores = uq_predictor.predict_visits(record, theta)
    return retain_by_scores(scores, threshold.gamma)


def retain_by_scores(scores, gamma) -> FilterResult:
    scores = np.asarray(scores, dtype=float)
    kept = tuple(int(t) + 1 for t in np.flatnonzero(scores <= gamma))
    if kept:
        return FilterResult(kept, False, tuple(scores.tolist()))
    return FilterResult((int(np.argmin(scores)) + 1,), True, tuple(scores.tolist()))


def fit_uncertainty_filter(params, cohort, method="aux_error", beta=20.0, epochs=300, seed=0,
                           passes=10, rate=0.5, ensemble=None, index=None, meta=None):
    """Score, fit the threshold over raw training scores, fit the predictor.
    Returns (filter, targets)."""
    kw = {"passes": passes, "rate": rate, "seed": seed, "ensemble": ensemble,
          "index": index, "meta": meta}
    targets = uncertainty_targets(params, cohort, method, **kw)
    if not targets:
        raise TrainingError("no support visits to score")
    threshold = fit_threshold([t.visit_score for t in targets], beta)
    predictor = train_uq_predictor(params, cohort, targets, epochs=epochs, seed=seed)
    return UncertaintyFilter(predictor, threshold), targets
