"""Two-level inner adaptation (self, then peer) and the outer meta-update.

The batched core treats a meta-batch as B independent copies of the head.
Summing the per-patient support losses and differentiating with respect
to the stacked copies yields every patient's own inner gradient at once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import DTYPE, encode_sets, init_encoder
from .head import bce_loss, init_head, predict

log = logging.getLogger(__name__)


@dataclass
class MetaConfig:
    alpha: float = 0.01
    outer_lr: float | None = None
    lambda_peers: int = 3
    batch_size: int = 32
    epochs: int = 30
    first_order: bool = True
    seed: int = 0
    use_self: bool = True
    use_peer: bool = True
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lambda_peers < 1:
            raise ValueError("lambda_peers must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def meta_lr(self) -> float:
        return self.alpha if self.outer_lr is None else self.outer_lr


@dataclass
class ModelParams:
    theta: dict
    phi: dict

    @classmethod
    def init(cls, vocab_size: int, d: int, H: int, seed: int) -> "ModelParams":
        return cls(init_encoder(vocab_size, d, seed), init_head(d, H, seed + 7919))

    def clone(self) -> "ModelParams":
        return ModelParams({k: v.detach().clone() for k, v in self.theta.items()},
                           {k: v.detach().clone() for k, v in self.phi.items()})

    @property
    def d(self) -> int:
        return self.theta["embedding"].shape[1]

    @property
    def num_medications(self) -> int:
        return self.phi["b2"].shape[0]


@dataclass
class AdaptedHead:
    phi1: dict
    phi2: dict


# ---------------------------------------------------------------------------
# Episode batches


@dataclass
class EpisodeBatch:
    """Index structure for a batch of patients.

    All visit code sets (own support visits, own last visit, peer visits)
    are stored flat in ``visit_sets``; the ``*_idx`` tensors point into it.
    Weight tensors are 1 for an active slot and 0 for padding or filtered
    support visits.
    """

    patient_ids: list
    patient_sets: list
    visit_sets: list
    sup_idx: torch.Tensor
    sup_w: torch.Tensor
    sup_y: torch.Tensor
    peer_idx: torch.Tensor
    peer_w: torch.Tensor
    peer_y: torch.Tensor
    query_idx: torch.Tensor
    query_y: torch.Tensor

    def __len__(self):
        return len(self.patient_ids)


def build_batch(records, peers=None, support_keep=None) -> EpisodeBatch:
    """``peers[b]`` is a list of VisitRef; ``support_keep[b]`` lists the
    1-based support visit positions to use (default: all of them)."""
    B = len(records)
    H = len(records[0].last_visit.labels)
    S = max(r.num_visits - 1 for r in records)
    P = max((len(p) for p in peers), default=0) if peers is not None else 0
    P = max(P, 1)

    visit_sets = []
    sup_idx = torch.zeros(B, S, dtype=torch.long)
    sup_w = torch.zeros(B, S, dtype=DTYPE)
    sup_y = torch.zeros(B, S, H, dtype=DTYPE)
    peer_idx = torch.zeros(B, P, dtype=torch.long)
    peer_w = torch.zeros(B, P, dtype=DTYPE)
    peer_y = torch.zeros(B, P, H, dtype=DTYPE)
    query_idx = torch.zeros(B, dtype=torch.long)
    query_y = torch.zeros(B, H, dtype=DTYPE)

    for b, rec in enumerate(records):
        keep = set(range(1, rec.num_visits)) if support_keep is None else set(support_keep[b])
        for s, v in enumerate(rec.support_visits):
            sup_idx[b, s] = len(visit_sets)
            visit_sets.append(v.codes)
            sup_y[b, s] = torch.as_tensor(v.labels, dtype=DTYPE)
            sup_w[b, s] = 1.0 if v.t in keep else 0.0
        query_idx[b] = len(visit_sets)
        visit_sets.append(rec.last_visit.codes)
        query_y[b] = torch.as_tensor(rec.last_visit.labels, dtype=DTYPE)
        if peers is not None:
            for n, ref in enumerate(peers[b]):
                peer_idx[b, n] = len(visit_sets)
                visit_sets.append(tuple(sorted(ref.codes)))
                peer_y[b, n] = torch.as_tensor(ref.labels, dtype=DTYPE)
                peer_w[b, n] = 1.0

    return EpisodeBatch(
        [r.patient_id for r in records], [r.all_codes() for r in records], visit_sets,
        sup_idx, sup_w, sup_y, peer_idx, peer_w, peer_y, query_idx, query_y,
    )


def encode_batch(batch: EpisodeBatch, theta):
    """Patient embeddings (B, d) and flat visit embeddings (n_visits, d)."""
    return encode_sets(batch.patient_sets, theta, "patient"), encode_sets(batch.visit_sets, theta, "visit")


def _stack_heads(phi, B):
    return {k: v.unsqueeze(0).expand(B, *v.shape) for k, v in phi.items()}


def _per_slot(phi_b):
    return {k: v.unsqueeze(1) for k, v in phi_b.items()}


def support_losses(pe, ve, idx, y, w, phi_b):
    """Weighted mean BCE over the slots of each patient. Returns (B,)."""
    pred = predict(pe.unsqueeze(1), ve[idx], _per_slot(phi_b))
    return (bce_loss(pred, y) * w).sum(dim=1) / w.sum(dim=1)


def _inner_step(loss, phi_b, alpha, first_order):
    grads = torch.autograd.grad(loss.sum(), list(phi_b.values()),
                                create_graph=not first_order, retain_graph=True)
    out = {}
    for (k, p), g in zip(phi_b.items(), grads):
        out[k] = p - alpha * (g.detach() if first_order else g)
    return out


def adapt_heads(batch, pe, ve, phi_b, alpha, use_self=True, use_peer=True, first_order=True):
    """Self-adaptation then peer-adaptation. Returns (phi1_b, phi2_b)."""
    phi1 = phi_b
    if use_self:
        loss = support_losses(pe, ve, batch.sup_idx, batch.sup_y, batch.sup_w, phi_b)
        phi1 = _inner_step(loss, phi_b, alpha, first_order)
    phi2 = phi1
    if use_peer:
        if not bool((batch.peer_w.sum(dim=1) > 0).all()):
            raise ValueError("peer adaptation requested without peers for every patient")
        loss = support_losses(pe, ve, batch.peer_idx, batch.peer_y, batch.peer_w, phi1)
        phi2 = _inner_step(loss, phi1, alpha, first_order)
    return phi1, phi2


def query_losses(batch, pe, ve, phi2_b):
    pred = predict(pe, ve[batch.query_idx], phi2_b)
    return bce_loss(pred, batch.query_y)


def _peers_for(records, index, lam):
    return [index.top_similar(r.last_visit.codes, r.patient_id, lam) for r in records]


# ---------------------------------------------------------------------------
# Single-patient operations


def _leaf_heads(phi, B):
    """Per-patient head copies that autograd can differentiate."""
    return {k: v.detach().unsqueeze(0).expand(B, *v.shape).clone().requires_grad_(True)
            for k, v in phi.items()}


def _unstack(phi_b):
    return {k: v[0].detach().clone() for k, v in phi_b.items()}


def self_support_loss(record, theta, phi, support_keep=None) -> torch.Tensor:
    batch = build_batch([record], support_keep=None if support_keep is None else [support_keep])
    pe, ve = encode_batch(batch, theta)
    return support_losses(pe, ve, batch.sup_idx, batch.sup_y, batch.sup_w, _stack_heads(phi, 1))[0]


def self_adapt(record, theta, phi, alpha, support_keep=None) -> dict:
    """One gradient step of the head on the patient's own prior visits.
    The encoder is not touched."""
    batch = build_batch([record], support_keep=None if support_keep is None else [support_keep])
    with torch.no_grad():
        pe, ve = encode_batch(batch, theta)
    phi_b = _leaf_heads(phi, 1)
    phi1, _ = adapt_heads(batch, pe, ve, phi_b, alpha, use_self=True, use_peer=False)
    return _unstack(phi1)


def peer_support_loss(record, peers, theta, phi1) -> torch.Tensor:
    batch = build_batch([record], peers=[list(peers)])
    pe, ve = encode_batch(batch, theta)
    return support_losses(pe, ve, batch.peer_idx, batch.peer_y, batch.peer_w, _stack_heads(phi1, 1))[0]


def peer_adapt(record, peers, theta, phi1, alpha) -> dict:
    """One gradient step of the self-adapted head on retrieved peer visits,
    each paired with this patient's own embedding."""
    if not peers:
        from .errors import RetrievalError

        raise RetrievalError(f"no peers for patient {record.patient_id!r}")
    batch = build_batch([record], peers=[list(peers)])
    with torch.no_grad():
        pe, ve = encode_batch(batch, theta)
    phi_b = _leaf_heads(phi1, 1)
    _, phi2 = adapt_heads(batch, pe, ve, phi_b, alpha, use_self=False, use_peer=True)
    return _unstack(phi2)


def query_loss(record, theta, phi2) -> torch.Tensor:
    batch = build_batch([record])
    pe, ve = encode_batch(batch, theta)
    return query_losses(batch, pe, ve, _stack_heads(phi2, 1))[0]


def adapt_patient(record, theta, phi, index, config: MetaConfig, support_keep=None) -> AdaptedHead:
    peers = _peers_for([record], index, config.lambda_peers) if config.use_peer else None
    batch = build_batch([record], peers=peers,
                        support_keep=None if support_keep is None else [support_keep])
    with torch.no_grad():
        pe, ve = encode_batch(batch, theta)
    phi1, phi2 = adapt_heads(batch, pe, ve, _leaf_heads(phi, 1), config.alpha,
                             config.use_self, config.use_peer)
    return AdaptedHead(_unstack(phi1), _unstack(phi2))


# ---------------------------------------------------------------------------
# Outer loop


def meta_objective(records, theta, phi, index, config: MetaConfig, peers=None):
    """Mean query loss of a batch after inner adaptation, as a graph over
    ``theta`` and ``phi``."""
    if peers is None and config.use_peer:
        peers = _peers_for(records, index, config.lambda_peers)
    batch = build_batch(records, peers=peers if config.use_peer else None)
    pe, ve = encode_batch(batch, theta)
    phi_b = _stack_heads(phi, len(records))
    _, phi2 = adapt_heads(batch, pe, ve, phi_b, config.alpha, config.use_self, config.use_peer,
                          config.first_order)
    return query_losses(batch, pe, ve, phi2).mean()


def meta_gradients(records, theta, phi, index, config: MetaConfig, peers=None):
    """Returns (loss, theta_grads, phi_grads)."""
    theta = {k: v.detach().requires_grad_(True) for k, v in theta.items()}
    phi = {k: v.detach().requires_grad_(True) for k, v in phi.items()}
    loss = meta_objective(records, theta, phi, index, config, peers)
    names = list(theta) + list(phi)
    grads = torch.autograd.grad(loss, list(theta.values()) + list(phi.values()), allow_unused=True)
    gmap = {}
    for name, g, p in zip(names, grads, list(theta.values()) + list(phi.values())):
        gmap[name] = torch.zeros_like(p) if g is None else g
    return (float(loss.detach()), {k: gmap[k] for k in theta}, {k: gmap[k] for k in phi})


def meta_train_step(batch_records, theta, phi, index, config: MetaConfig, peers=None):
    """One plain gradient-descent outer step. Returns new (theta, phi)."""
    _, g_theta, g_phi = meta_gradients(batch_records, theta, phi, index, config, peers)
    lr = config.meta_lr
    new_theta = {k: (v.detach() - lr * g_theta[k]) for k, v in theta.items()}
    new_phi = {k: (v.detach() - lr * g_phi[k]) for k, v in phi.items()}
    return new_theta, new_phi


@dataclass
class MetaTrainer:
    """Runs meta-training epochs over a training cohort."""

    params: ModelParams
    index: object
    config: MetaConfig
    loss_log: list = field(default_factory=list)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.config.seed)
        self._peer_cache = {}
        self._opt = None
        if self.config.optimizer == "adam":
            self._leaves = [v.requires_grad_(False) for v in
                            list(self.params.theta.values()) + list(self.params.phi.values())]
            self._opt = torch.optim.Adam(self._leaves, lr=self.config.meta_lr)

    def _peers(self, records):
        missing = [r for r in records if r.patient_id not in self._peer_cache]
        for r, p in zip(missing, _peers_for(missing, self.index, self.config.lambda_peers)):
            self._peer_cache[r.patient_id] = p
        return [self._peer_cache[r.patient_id] for r in records]

    def step(self, records) -> float:
        peers = self._peers(records) if self.config.use_peer else None
        if self._opt is None:
            loss, g_theta, g_phi = meta_gradients(records, self.params.theta, self.params.phi,
                                                  self.index, self.config, peers)
            lr = self.config.meta_lr
            with torch.no_grad():
                for k in self.params.theta:
                    self.params.theta[k] = self.params.theta[k] - lr * g_theta[k]
                for k in self.params.phi:
                    self.params.phi[k] = self.params.phi[k] - lr * g_phi[k]
            return loss
        loss, g_theta, g_phi = meta_gradients(records, self.params.theta, self.params.phi,
                                              self.index, self.config, peers)
        grads = list(g_theta.values()) + list(g_phi.values())
        for p, g in zip(self._leaves, grads):
            p.grad = g
        self._opt.step()
        return loss

    def fit(self, train, epochs=None) -> list:
        """Train for ``epochs`` (default: config.epochs). Returns the
        per-step losses; per-epoch means are appended to ``loss_log``."""
        epochs = self.config.epochs if epochs is None else epochs
        patients = list(train.patients)
        step_losses = []
        for epoch in range(epochs):
            order = self._rng.permutation(len(patients))
            losses = []
            for start in range(0, len(order), self.config.batch_size):
                batch = [patients[i] for i in order[start:start + self.config.batch_size]]
                losses.append(self.step(batch))
            step_losses.extend(losses)
            self.loss_log.append(float(np.mean(losses)) if losses else float("nan"))
            log.info("epoch %d: mean query loss %.6f", epoch + 1, self.loss_log[-1])
        return step_losses


# ---------------------------------------------------------------------------
# Meta-testing


def adapt_and_predict(record, theta, phi, index, config: MetaConfig, support_keep=None,
                      return_hidden=False):
    """Adapt the head to one patient and predict the last visit.

    Global parameters are read, never written.
    """
    from .head import hidden

    peers = _peers_for([record], index, config.lambda_peers) if config.use_peer else None
    batch = build_batch([record], peers=peers,
                        support_keep=None if support_keep is None else [support_keep])
    with torch.no_grad():
        pe, ve = encode_batch(batch, theta)
    phi_b = _leaf_heads(phi, 1)
    _, phi2 = adapt_heads(batch, pe, ve, phi_b, config.alpha, config.use_self, config.use_peer)
    with torch.no_grad():
        pe, vq = _query_embeddings(record, theta)
        pred = predict(pe, vq, phi2)[0]
        if return_hidden:
            return pred.numpy().copy(), hidden(pe, vq, phi2)[0].numpy().copy()
    return pred.numpy().copy()


def meta_test_predict(record, theta, phi, index, uq_filter, config: MetaConfig):
    """Filter support visits by predicted uncertainty (if a filter is
    given), then self- and peer-adapt and predict the last visit."""
    keep = None
    if uq_filter is not None and config.use_self:
        keep = list(uq_filter.retain(record, theta).retained)
    return adapt_and_predict(record, theta, phi, index, config, support_keep=keep)


def _query_embeddings(record, theta):
    """Patient and last-visit embeddings, each encoded on its own so the
    result does not depend on which other visits were in a batch."""
    return (encode_sets([record.all_codes()], theta, "patient"),
            encode_sets([record.last_visit.codes], theta, "visit"))


def forward_predict(record, theta, phi):
    """Plain forward pass with the global head, no adaptation."""
    with torch.no_grad():
        pe, vq = _query_embeddings(record, theta)
        return predict(pe, vq, phi)[0].numpy().copy()
