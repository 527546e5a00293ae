"""Preference-gated prediction head (phi) and the summed BCE objective.

Every function broadcasts over leading batch dimensions, so the same code
serves a single patient and a batch of per-patient adapted heads.
"""

from __future__ import annotations

import math

import torch

from .encoder import DTYPE

EPS = 1e-7
HEAD_KEYS = ("w_g", "b_g", "w1", "b1", "w2", "b2")


def init_head(d: int, H: int, seed: int) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(int(seed))
    bound = 1.0 / math.sqrt(d)

    def mat(*shape):
        return (torch.rand(*shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound

    return {
        "w_g": mat(d, d),
        "b_g": torch.zeros(d, dtype=DTYPE),
        "w1": mat(d, 2 * d),
        "b1": torch.zeros(d, dtype=DTYPE),
        "w2": mat(H, d),
        "b2": torch.zeros(H, dtype=DTYPE),
    }


def _matvec(W, x):
    return (W @ x.unsqueeze(-1)).squeeze(-1)


def gate(patient_emb, phi) -> torch.Tensor:
    """g = sigmoid(w_g e + b_g), one scalar per row of w1."""
    return torch.sigmoid(_matvec(phi["w_g"], patient_emb) + phi["b_g"])


def personalize(g, w1) -> torch.Tensor:
    """diag(g) @ w1: scale row r of w1 by g[r]."""
    return g.unsqueeze(-1) * w1


def hidden(patient_emb, visit_emb, phi) -> torch.Tensor:
    """First predictive layer output, before the second layer."""
    w1_i = personalize(gate(patient_emb, phi), phi["w1"])
    x = torch.cat(torch.broadcast_tensors(patient_emb, visit_emb), dim=-1)
    return _matvec(w1_i, x) + phi["b1"]


def predict(patient_emb, visit_emb, phi, hidden_mask=None) -> torch.Tensor:
    """Medication probabilities clamped to [EPS, 1 - EPS].

    ``hidden_mask`` (optional) multiplies the hidden layer; the dropout
    uncertainty variant passes scaled Bernoulli masks through it.
    """
    h = hidden(patient_emb, visit_emb, phi)
    if hidden_mask is not None:
        h = h * hidden_mask
    logits = _matvec(phi["w2"], h) + phi["b2"]
    return torch.sigmoid(logits).clamp(EPS, 1 - EPS)


def bce_loss(pred, labels) -> torch.Tensor:
    """Binary cross entropy summed (not averaged) over medications."""
    labels = torch.as_tensor(labels, dtype=pred.dtype)
    if labels.shape[-1] != pred.shape[-1]:
        raise ValueError("prediction and label lengths differ")
    return -(labels * torch.log(pred) + (1 - labels) * torch.log1p(-pred)).sum(dim=-1)
