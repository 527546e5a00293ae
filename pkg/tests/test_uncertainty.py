import numpy as np
import pytest
import torch

from conftest import random_cohort, random_record
from metadrug.errors import ConfigError
from metadrug.meta import MetaConfig, ModelParams
from metadrug.peers import build_index
from metadrug.uncertainty import (UQPredictor, auxiliary_error_scores, dropout_masks, dropout_scores,
                                  ensemble_scores, fit_threshold, fit_uncertainty_filter,
                                  retain_by_scores, train_uq_predictor, uncertainty_targets,
                                  visit_uncertainty)

import oracles

H, V = 3, 12


def _p(seed=0, d=4):
    return ModelParams.init(V, d, H, seed)


def test_aux_error_examples():
    np.testing.assert_allclose(auxiliary_error_scores([1, 0, 1], [0.9, 0.2, 0.4]), [0.1, 0.2, 0.6],
                               rtol=0, atol=1e-15)
    assert not auxiliary_error_scores([1, 0], [1.0, 0.0]).any()


def test_dropout_rate_zero_gives_zero(rng):
    p = _p()
    rec = random_record(rng, "x", H, V)
    assert not dropout_scores(rec, rec.visits[0], p.theta, p.phi, passes=5, rate=0.0).any()


def test_dropout_seeded_and_hand_masks(rng):
    p = _p(1)
    rec = random_record(rng, "x", H, V)
    v = rec.visits[0]
    a = dropout_scores(rec, v, p.theta, p.phi, passes=3, rate=0.5, seed=4)
    assert np.array_equal(a, dropout_scores(rec, v, p.theta, p.phi, passes=3, rate=0.5, seed=4))
    # recompute by hand from the same masks
    from metadrug.encoder import encode_sets
    from metadrug.head import predict

    masks = torch.as_tensor(dropout_masks(4, 3, 0.5, 4))
    pe = encode_sets([rec.all_codes()], p.theta, "patient")[0]
    ve = encode_sets([v.codes], p.theta, "visit")[0]
    rows = [predict(pe, ve, p.phi, masks[k]).detach().numpy() for k in range(3)]
    np.testing.assert_allclose(a, oracles.population_std(rows), rtol=0, atol=1e-14)


def test_dropout_needs_two_passes(rng):
    p = _p()
    rec = random_record(rng, "x", H, V)
    with pytest.raises(ConfigError):
        dropout_scores(rec, rec.visits[0], p.theta, p.phi, passes=1)
    with pytest.raises(ConfigError):
        dropout_masks(4, 3, 1.0, 0)


def test_ensemble_examples(rng):
    p, q = _p(2), _p(3)
    rec = random_record(rng, "x", H, V)
    v = rec.visits[0]
    assert not ensemble_scores(rec, v, [(p.theta, p.phi)] * 3).any()
    from metadrug.uncertainty import _visit_pred

    a, b = _visit_pred(rec, v, p.theta, p.phi), _visit_pred(rec, v, q.theta, q.phi)
    np.testing.assert_allclose(ensemble_scores(rec, v, [(p.theta, p.phi), (q.theta, q.phi)]),
                               np.abs(a - b) / 2, rtol=0, atol=1e-15)
    with pytest.raises(ConfigError):
        ensemble_scores(rec, v, [(p.theta, p.phi)])


def test_visit_uncertainty_examples():
    assert visit_uncertainty([0.1, 0.5, 0.3], [0.9, 0.2, 0.7]) == pytest.approx(0.2, abs=1e-15)
    assert visit_uncertainty([0.1, 0.5, 0.3], [0.1, 0.2, 0.3]) == pytest.approx(0.3, abs=1e-15)
    assert visit_uncertainty([0.4], [0.5]) == 0.4  # 0.5 is not positive


def test_fit_threshold_examples_and_oracle(rng):
    assert fit_threshold(list(range(1, 11)), 20).gamma == 8
    assert fit_threshold([0.5], 20).gamma == 0.5
    with pytest.raises(ValueError):
        fit_threshold([1.0], 0)
    with pytest.raises(ValueError):
        fit_threshold([], 20)
    for _ in range(100):
        vals = rng.random(int(rng.integers(1, 40))).tolist()
        beta = float(rng.uniform(1, 99))
        assert fit_threshold(vals, beta).gamma == oracles.nearest_rank(vals, 100 - beta)


def test_retain_by_scores_rules():
    r = retain_by_scores([0.2, 0.9, 0.1], 0.5)
    assert r.retained == (1, 3) and not r.fallback
    r = retain_by_scores([0.7, 0.6, 0.9], 0.5)
    assert r.retained == (2,) and r.fallback
    assert retain_by_scores([0.2, 0.5], 0.5).retained == (1, 2)
    assert retain_by_scores([3.0, 1e9], float("inf")).retained == (1, 2)


def test_targets_cover_every_support_visit(rng):
    c = random_cohort(rng, 6, H=H, V=V)
    p = _p(4)
    t = uncertainty_targets(p, c, "aux_error")
    assert len(t) == sum(r.num_visits - 1 for r in c.patients)
    assert all(x.visit_score >= 0 for x in t)
    with pytest.raises(ConfigError):
        uncertainty_targets(p, c, "none")


def test_adapted_targets_differ_from_global(rng):
    c = random_cohort(rng, 6, H=H, V=V)
    p = _p(5)
    idx = build_index(c)
    g = uncertainty_targets(p, c, "aux_error")
    a = uncertainty_targets(p, c, "aux_error", index=idx, meta=MetaConfig(alpha=1.0))
    z = uncertainty_targets(p, c, "aux_error", index=idx, meta=MetaConfig(alpha=0.0))
    assert [x.visit_score for x in z] == [x.visit_score for x in g]
    assert [x.visit_score for x in a] != [x.visit_score for x in g]


def test_predictor_learns_constant_targets(rng):
    c = random_cohort(rng, 10, H=H, V=V)
    p = _p(6)
    snap = p.clone()
    from metadrug.uncertainty import UncertaintyRecord

    targets = [UncertaintyRecord(np.zeros(H), 0.3, (r.patient_id, v.t))
               for r in c.patients for v in r.support_visits]
    model = train_uq_predictor(p, c, targets, epochs=200)
    for r in c.patients:
        out = model.predict_visits(r, p.theta)
        assert out.shape == (r.num_visits - 1,)
        assert np.all(np.abs(out - 0.3) < 1e-2)
    assert all(torch.equal(p.theta[k], snap.theta[k]) for k in p.theta)
    assert all(torch.equal(p.phi[k], snap.phi[k]) for k in p.phi)


def test_predictor_outputs_are_nonnegative(rng):
    c = random_cohort(rng, 5, H=H, V=V)
    m = UQPredictor(4, seed=1)
    for r in c.patients:
        assert (m.predict_visits(r, _p().theta) >= 0).all()


def test_fit_filter_end_to_end(rng):
    c = random_cohort(rng, 12, H=H, V=V)
    p = _p(7)
    f, targets = fit_uncertainty_filter(p, c, beta=20, epochs=20)
    assert f.threshold.gamma == oracles.nearest_rank([t.visit_score for t in targets], 80)
    for r in c.patients:
        res = f.retain(r, p.theta)
        assert 1 <= len(res.retained) <= r.num_visits - 1


def test_documented_examples():
    np.testing.assert_allclose(auxiliary_error_scores([1, 0], [0.9, 0.1]), [0.1, 0.1], atol=1e-15)
    assert np.array_equal(auxiliary_error_scores([1, 0, 1], [0.5] * 3), [0.5] * 3)
    assert visit_uncertainty([0.2, 0.4, 0.6], [0.9, 0.8, 0.1]) == pytest.approx(0.3, abs=1e-15)
    assert visit_uncertainty([0.2, 0.4, 0.6], [0.1, 0.2, 0.3]) == pytest.approx(0.4, abs=1e-15)
    assert visit_uncertainty([0.2, 0.4, 0.6], [0.9, 0.9, 0.9]) == pytest.approx(0.4, abs=1e-15)
    g = fit_threshold([0.3] * 7, 20).gamma
    assert g == 0.3 and retain_by_scores([0.3] * 7, g).retained == tuple(range(1, 8))
    assert retain_by_scores([0.1, 0.9], 0.8).retained == (1,)
