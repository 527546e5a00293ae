"""Train/evaluate orchestration: model bundles, cold-start curves and the
ablation suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .ehr import cold_start_subset
from .meta import MetaConfig, MetaTrainer, ModelParams, adapt_and_predict
from .metrics import DEFAULT_ETA, MetricReport, evaluate_predictions
from .peers import build_index
from .uncertainty import fit_uncertainty_filter

log = logging.getLogger(__name__)

ABLATION_VARIANTS = {
    "full": ("MetaDrug", True, True, True),
    "wo_uf": ("MetaDrug w/o UF", True, True, False),
    "peer_only": ("Peer-Adaptation", False, True, False),
    "self_only": ("Self-Adaptation", True, False, False),
    "none": ("No Adaptation", False, False, False),
}


@dataclass
class UQSettings:
    method: str = "aux_error"
    beta: float = 20.0
    passes: int = 10
    dropout_rate: float = 0.5
    ensemble_size: int = 3
    epochs: int = 300


@dataclass
class ModelBundle:
    params: ModelParams
    index: object
    meta: MetaConfig
    uq_filter: object = None
    loss_log: list = field(default_factory=list)
    uq_scores: list = field(default_factory=list)


def _train_params(train, meta: MetaConfig, d: int, index, seed_offset=0):
    params = ModelParams.init(train.vocab_size, d, train.num_medications, meta.seed + seed_offset)
    trainer = MetaTrainer(params, index, replace(meta, seed=meta.seed + seed_offset))
    trainer.fit(train)
    return trainer.params, trainer.loss_log


def train_bundle(train, meta: MetaConfig, d: int, uq: UQSettings | None = None) -> ModelBundle:
    """Meta-train on ``train``, then fit the uncertainty filter on the
    frozen model (skipped when ``uq`` is None or its method is "none")."""
    index = build_index(train)
    params, loss_log = _train_params(train, meta, d, index)
    bundle = ModelBundle(params, index, meta, loss_log=loss_log)
    if uq is not None and uq.method != "none":
        ensemble = None
        if uq.method == "ensemble":
            ensemble = [(params.theta, params.phi)]
            for k in range(1, uq.ensemble_size):
                extra, _ = _train_params(train, meta, d, index, seed_offset=k)
                ensemble.append((extra.theta, extra.phi))
        bundle.uq_filter, targets = fit_uncertainty_filter(
            params, train, uq.method, uq.beta, epochs=uq.epochs, seed=meta.seed,
            passes=uq.passes, rate=uq.dropout_rate, ensemble=ensemble, index=index, meta=meta)
        bundle.uq_scores = [t.visit_score for t in targets]
    return bundle


def predict_patients(bundle: ModelBundle, patients, use_filter=True, use_self=None, use_peer=None):
    """Meta-test predictions, one patient at a time so results do not
    depend on which patients share a batch."""
    meta = replace(bundle.meta,
                   use_self=bundle.meta.use_self if use_self is None else use_self,
                   use_peer=bundle.meta.use_peer if use_peer is None else use_peer)
    theta, phi = bundle.params.theta, bundle.params.phi
    out = []
    for rec in patients:
        keep = None
        if use_filter and bundle.uq_filter is not None and meta.use_self:
            keep = list(bundle.uq_filter.retain(rec, theta).retained)
        out.append(adapt_and_predict(rec, theta, phi, bundle.index, meta, support_keep=keep))
    return out


def evaluate_patients(bundle, patients, ddi_edges, eta=DEFAULT_ETA, subset_label="all",
                      **flags) -> MetricReport:
    probs = predict_patients(bundle, patients, **flags)
    truths = [np.asarray(p.last_visit.labels) for p in patients]
    return evaluate_predictions(truths, probs, ddi_edges, eta, subset_label)


def evaluate_bundle(bundle, test, eta=DEFAULT_ETA, subset_label="all", **flags) -> MetricReport:
    return evaluate_patients(bundle, test.patients, test.ddi_edges, eta, subset_label, **flags)


def cold_start_curve(bundle, test, percentiles=(10, 20, 30, 40, 50), eta=DEFAULT_ETA,
                     **flags) -> list[MetricReport]:
    """Metrics on the cold-start subset at each percentile of code count."""
    probs = dict(zip(test.patient_ids, predict_patients(bundle, test.patients, **flags)))
    reports = []
    for p in percentiles:
        subset = cold_start_subset(test, p)
        if not subset:
            log.warning("percentile %s selects no patients; skipped", p)
            continue
        truths = [np.asarray(r.last_visit.labels) for r in subset]
        reports.append(evaluate_predictions(truths, [probs[r.patient_id] for r in subset],
                                            test.ddi_edges, eta, f"p{p:g}"))
    return reports


def train_variant(train, meta: MetaConfig, d: int, variant: str, uq: UQSettings | None = None):
    _, use_self, use_peer, use_filter = ABLATION_VARIANTS[variant]
    meta = replace(meta, use_self=use_self, use_peer=use_peer)
    return train_bundle(train, meta, d, uq if use_filter else None)


def ablation_suite(train, test, meta: MetaConfig, d: int, uq: UQSettings | None = None,
                   eta=DEFAULT_ETA, bundles=None) -> list[MetricReport]:
    """Five-row ablation under one seed. Full and w/o-UF share a trained
    model; they differ only in test-time filtering. Trained bundles are
    stored into ``bundles`` if a dict is passed."""
    bundles = {} if bundles is None else bundles
    uq = uq or UQSettings()
    full = train_variant(train, meta, d, "full", uq)
    bundles["full"] = bundles["wo_uf"] = full
    for key in ("peer_only", "self_only", "none"):
        bundles[key] = train_variant(train, meta, d, key)
    reports = []
    for key, (label, _, _, use_filter) in ABLATION_VARIANTS.items():
        reports.append(evaluate_bundle(bundles[key], test, eta, label, use_filter=use_filter))
    return reports
