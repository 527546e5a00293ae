"""Code embeddings and the two single-head self-attention encoders.

Parameters are plain ``dict[str, torch.Tensor]`` so that adapted copies
and functional gradients are easy to take. The patient encoder weights
live under the ``patient.`` prefix, the visit encoder under ``visit.``.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

DTYPE = torch.float64
BLOCKS = ("patient", "visit")
LN_EPS = 1e-5

_BLOCK_MATRICES = ("wq", "wk", "wv", "wo")


def init_block(d: int, d_ff: int, gen: torch.Generator) -> dict[str, torch.Tensor]:
    bound = 1.0 / math.sqrt(d)

    def mat(*shape):
        return (torch.rand(*shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound

    block = {name: mat(d, d) for name in _BLOCK_MATRICES}
    block.update({f"b{name[1]}": torch.zeros(d, dtype=DTYPE) for name in _BLOCK_MATRICES})
    block["ln1_g"] = torch.ones(d, dtype=DTYPE)
    block["ln1_b"] = torch.zeros(d, dtype=DTYPE)
    block["ff_w1"] = mat(d_ff, d)
    block["ff_b1"] = torch.zeros(d_ff, dtype=DTYPE)
    block["ff_w2"] = mat(d, d_ff)
    block["ff_b2"] = torch.zeros(d, dtype=DTYPE)
    block["ln2_g"] = torch.ones(d, dtype=DTYPE)
    block["ln2_b"] = torch.zeros(d, dtype=DTYPE)
    return block


def init_encoder(vocab_size: int, d: int, seed: int, d_ff: int | None = None) -> dict[str, torch.Tensor]:
    """Fresh encoder parameters (theta): embedding table plus two blocks."""
    gen = torch.Generator().manual_seed(int(seed))
    d_ff = d_ff or 2 * d
    bound = 1.0 / math.sqrt(d)
    theta = {"embedding": (torch.rand(vocab_size, d, generator=gen, dtype=DTYPE) * 2 - 1) * bound}
    for prefix in BLOCKS:
        for name, value in init_block(d, d_ff, gen).items():
            theta[f"{prefix}.{name}"] = value
    return theta


def block_weights(theta, prefix: str) -> dict[str, torch.Tensor]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in theta.items() if k.startswith(head)}


def embed_codes(code_indices, theta) -> torch.Tensor:
    table = theta["embedding"]
    idx = torch.as_tensor(code_indices, dtype=torch.long)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= table.shape[0]):
        raise IndexError(f"code index out of range for vocabulary of {table.shape[0]}")
    return table[idx]


def attention_block(X: torch.Tensor, w: dict, mask: torch.Tensor) -> torch.Tensor:
    """One post-norm encoder block: single-head attention and a GELU MLP,
    each with a residual and layer norm.

    ``X`` is (..., n, d) and ``mask`` (..., n) with True for real positions.
    Masked positions are excluded as keys and their output rows are zero.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("attention mask needs at least one real position per sequence")
    d = X.shape[-1]
    q = X @ w["wq"].T + w["bq"]
    k = X @ w["wk"].T + w["bk"]
    v = X @ w["wv"].T + w["bv"]
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(d)
    scores = scores.masked_fill(~mask.unsqueeze(-2), float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    h = F.layer_norm(X + (attn @ v) @ w["wo"].T + w["bo"], (d,), w["ln1_g"], w["ln1_b"], LN_EPS)
    ff = F.gelu(h @ w["ff_w1"].T + w["ff_b1"]) @ w["ff_w2"].T + w["ff_b2"]
    out = F.layer_norm(h + ff, (d,), w["ln2_g"], w["ln2_b"], LN_EPS)
    return out * mask.unsqueeze(-1).to(out.dtype)


def encode_sets(code_sets, theta, prefix: str) -> torch.Tensor:
    """Encode a batch of code sets with one encoder and mean-pool over the
    codes. Returns (len(code_sets), d).

    Sets are grouped by size and each group runs unpadded, so a set's
    embedding never depends on how long the other sets in the batch are.
    """
    if not code_sets:
        return theta["embedding"].new_zeros((0, theta["embedding"].shape[1]))
    w = block_weights(theta, prefix)
    groups = {}
    for i, s in enumerate(code_sets):
        groups.setdefault(len(s), []).append(i)
    order, pooled = [], []
    for n in sorted(groups):
        members = groups[n]
        idx = torch.as_tensor([list(code_sets[i]) for i in members], dtype=torch.long)
        out = attention_block(embed_codes(idx, theta), w, torch.ones(idx.shape, dtype=torch.bool))
        pooled.append(out.mean(dim=-2))
        order.extend(members)
    inverse = torch.empty(len(order), dtype=torch.long)
    inverse[torch.as_tensor(order)] = torch.arange(len(order))
    return torch.cat(pooled)[inverse]


def patient_encode(record, theta) -> torch.Tensor:
    """Averaged patient embedding over every code of every visit."""
    return encode_sets([record.all_codes()], theta, "patient")[0]


def visit_encode(visit, theta) -> torch.Tensor:
    """Averaged embedding of a single visit's codes."""
    return encode_sets([visit.codes], theta, "visit")[0]
