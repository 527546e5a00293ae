import numpy as np
import pytest
import torch

from metadrug.ehr import PatientRecord, Visit
from metadrug.encoder import (attention_block, block_weights, embed_codes, encode_sets,
                              init_encoder, patient_encode, visit_encode)

import oracles


def _np(w):
    return {k: v.numpy() for k, v in w.items()}


@pytest.fixture
def theta():
    return init_encoder(vocab_size=10, d=4, seed=3)


def test_embed_lookup_and_repeats(theta):
    out = embed_codes([7, 7, 2], theta)
    assert torch.equal(out[0], theta["embedding"][7])
    assert torch.equal(out[0], out[1])
    assert torch.equal(out[2], theta["embedding"][2])


def test_embed_zero_table():
    theta = init_encoder(5, 4, 0)
    theta["embedding"] = torch.zeros_like(theta["embedding"])
    assert not embed_codes([0, 4], theta).any()


def test_embed_out_of_range(theta):
    with pytest.raises(IndexError):
        embed_codes([10], theta)


def test_singleton_attention_weight_is_one(theta):
    w = block_weights(theta, "patient")
    x = theta["embedding"][[5]]
    out = attention_block(x, w, torch.tensor([True]))
    ref = oracles.single_token_block(x[0].numpy(), _np(w))
    np.testing.assert_allclose(out[0].numpy(), ref, rtol=0, atol=1e-12)


def test_block_matches_row_by_row_oracle(theta, rng):
    w = block_weights(theta, "visit")
    X = torch.as_tensor(rng.normal(size=(5, 4)))
    out = attention_block(X, w, torch.ones(5, dtype=torch.bool))
    np.testing.assert_allclose(out.numpy(), oracles.attention_block(X.numpy(), _np(w)),
                               rtol=0, atol=1e-12)


def test_padding_never_changes_real_rows(theta, rng):
    w = block_weights(theta, "patient")
    X = torch.as_tensor(rng.normal(size=(6, 4)))
    mask = torch.tensor([True, True, True, False, False, False])
    padded = attention_block(X, w, mask)
    short = attention_block(X[:3], w, mask[:3])
    assert torch.max(torch.abs(padded[:3] - short)) < 1e-10
    assert not padded[3:].any()


def test_all_masked_row_is_rejected(theta):
    with pytest.raises(ValueError):
        attention_block(torch.zeros(2, 4, dtype=torch.float64), block_weights(theta, "visit"),
                        torch.tensor([False, False]))


def test_permutation_equivariance(theta, rng):
    w = block_weights(theta, "visit")
    X = torch.as_tensor(rng.normal(size=(5, 4)))
    perm = torch.as_tensor(rng.permutation(5))
    m = torch.ones(5, dtype=torch.bool)
    assert torch.allclose(attention_block(X, w, m)[perm], attention_block(X[perm], w, m),
                          atol=1e-12, rtol=0)


def test_patient_embedding_order_invariant(theta):
    a = PatientRecord("a", (Visit(1, (1, 2), (1,)), Visit(2, (3,), (1,))))
    b = PatientRecord("b", (Visit(1, (3,), (1,)), Visit(2, (2, 1), (1,))))
    ea, eb = patient_encode(a, theta), patient_encode(b, theta)
    assert ea.shape == (4,)
    assert torch.allclose(ea, eb, atol=1e-12, rtol=0)


def test_single_code_patient_matches_hand_forward(theta):
    rec = PatientRecord("a", (Visit(1, (6,), (1,)), Visit(2, (6,), (1,))))
    # two copies of the same code: both rows see identical keys, so each
    # output row equals the single-token pass
    e = patient_encode(rec, theta).numpy()
    ref = oracles.single_token_block(theta["embedding"][6].numpy(), _np(block_weights(theta, "patient")))
    np.testing.assert_allclose(e, ref, rtol=0, atol=1e-12)


def test_visit_encode_set_semantics_and_purity(theta):
    v1, v2 = Visit(1, (4, 8), (1,)), Visit(1, (8, 4), (1,))
    assert torch.equal(visit_encode(v1, theta), visit_encode(v2, theta))
    assert visit_encode(v1, theta).shape == (4,)


def test_batched_encoding_matches_one_at_a_time(theta):
    sets = [(1,), (2, 3, 4), (5, 6)]
    batch = encode_sets(sets, theta, "visit")
    for i, s in enumerate(sets):
        one = encode_sets([s], theta, "visit")[0]
        assert torch.max(torch.abs(batch[i] - one)) < 1e-12


def test_default_width():
    theta = init_encoder(3, 256, 0)
    rec = PatientRecord("a", (Visit(1, (0,), (1,)), Visit(2, (1,), (1,))))
    assert patient_encode(rec, theta).shape == (256,)


def test_encoder_gradients_match_finite_differences(rng):
    theta = init_encoder(8, 4, 1)
    sets = [(0, 3, 5), (2,), (1, 4, 6, 7)]
    probe = torch.as_tensor(rng.normal(size=(3, 4)))

    def f(th):
        return (encode_sets(sets, th, "patient") * probe).sum() + \
            (encode_sets(sets, th, "visit") ** 2).sum()

    leaves = {k: v.clone().requires_grad_(True) for k, v in theta.items()}
    grads = torch.autograd.grad(f(leaves), list(leaves.values()))
    eps = 1e-6
    for (k, v), g in zip(theta.items(), grads):
        num = torch.zeros_like(v)
        flat = v.reshape(-1)
        for i in range(flat.numel()):
            plus = {kk: vv.clone() for kk, vv in theta.items()}
            minus = {kk: vv.clone() for kk, vv in theta.items()}
            plus[k].reshape(-1)[i] += eps
            minus[k].reshape(-1)[i] -= eps
            num.reshape(-1)[i] = (f(plus) - f(minus)) / (2 * eps)
        denom = max(float(torch.linalg.norm(g)), float(torch.linalg.norm(num)), 1e-12)
        assert float(torch.linalg.norm(g - num)) / denom < 1e-4, k
