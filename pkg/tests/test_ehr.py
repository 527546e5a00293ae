import json
import logging
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metadrug.ehr import (Cohort, GeneratorSpec, PatientRecord, Visit, _make_vocab,
                          cohort_to_lines, cold_start_subset, ddi_sidecar_path,
                          generate_synthetic_cohort, load_cohort, nearest_rank, save_cohort,
                          split_cohort)
from metadrug.errors import CohortParseError, ConfigError, SchemaError

import oracles


def _write(tmp_path, lines, name="c.jsonl"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return p


def _header(H=2, V=3):
    return json.dumps({"schema_version": 1, "H": H,
                       "code_vocab": [{"id": f"D{i}", "kind": "diagnosis"} for i in range(V)]})


def _patient(pid, T, H=2):
    return json.dumps({"patient_id": pid, "visits": [
        {"t": t, "codes": [t % 3], "labels": [1] + [0] * (H - 1)} for t in range(1, T + 1)]})


# --- data model -------------------------------------------------------------


def test_visit_rejects_empty_codes_and_nonbinary_labels():
    with pytest.raises(SchemaError):
        Visit(1, (), (1,))
    with pytest.raises(SchemaError):
        Visit(1, (0,), (2,))


def test_visit_codes_are_a_set():
    assert Visit(1, (3, 1, 3), (1,)).codes == (1, 3)


def test_record_requires_contiguous_positions():
    with pytest.raises(SchemaError):
        PatientRecord("p", (Visit(1, (0,), (1,)), Visit(3, (0,), (1,))))


def test_cohort_ddi_is_symmetric_without_diagonal():
    c = Cohort((), _make_vocab(3), 4, frozenset({(2, 0), (1, 3)}))
    adj = c.ddi_adjacency()
    assert (adj == adj.T).all() and not adj.diagonal().any()
    assert c.ddi_edges == {(0, 2), (1, 3)}
    with pytest.raises(SchemaError):
        Cohort((), _make_vocab(3), 4, frozenset({(1, 1)}))
    with pytest.raises(SchemaError):
        Cohort((), _make_vocab(3), 4, frozenset({(0, 4)}))


# --- load / save --------------------------------------------------------------


def test_load_drops_single_visit_patients(tmp_path, caplog):
    p = _write(tmp_path, [_header(), _patient("a", 2), _patient("b", 1), _patient("c", 3)])
    with caplog.at_level(logging.INFO, logger="metadrug.ehr"):
        c = load_cohort(p)
    assert c.patient_ids == ["a", "c"]
    assert "dropped 1" in caplog.text


def test_load_header_only_gives_empty_cohort(tmp_path):
    c = load_cohort(_write(tmp_path, [_header(H=7)]))
    assert len(c) == 0 and c.num_medications == 7


def test_malformed_line_names_its_number(tmp_path):
    p = _write(tmp_path, [_header(), _patient("a", 2), "{not json"])
    with pytest.raises(CohortParseError, match="line 3"):
        load_cohort(p)


def test_label_length_mismatch_is_schema_error(tmp_path):
    p = _write(tmp_path, [_header(H=3), _patient("a", 2, H=2)])
    with pytest.raises(SchemaError, match="label length"):
        load_cohort(p)


def test_bad_schema_version_and_unknown_keys(tmp_path):
    hdr = json.loads(_header())
    hdr["schema_version"] = 2
    with pytest.raises(SchemaError):
        load_cohort(_write(tmp_path, [json.dumps(hdr)]))
    bad = json.loads(_patient("a", 2))
    bad["extra"] = 1
    with pytest.raises(SchemaError, match="unknown patient keys"):
        load_cohort(_write(tmp_path, [_header(), json.dumps(bad)], "d.jsonl"))


def test_out_of_vocab_code_is_schema_error(tmp_path):
    bad = {"patient_id": "a", "visits": [{"t": 1, "codes": [9], "labels": [1, 0]},
                                         {"t": 2, "codes": [0], "labels": [1, 0]}]}
    with pytest.raises(SchemaError, match="outside vocabulary"):
        load_cohort(_write(tmp_path, [_header(), json.dumps(bad)]))


def test_round_trip_is_structurally_identical(tmp_path, small_spec):
    c = generate_synthetic_cohort(small_spec, 3)
    path = save_cohort(c, tmp_path / "cohort.jsonl")
    assert ddi_sidecar_path(path).exists()
    back = load_cohort(path)
    assert back == c
    # and the serialized form is a fixed point
    assert cohort_to_lines(back) == cohort_to_lines(c)


def test_sidecar_parse_error(tmp_path):
    p = _write(tmp_path, [_header(), _patient("a", 2)])
    ddi_sidecar_path(p).write_text("0 1\n0 x\n")
    with pytest.raises(CohortParseError, match="line 2"):
        load_cohort(p)


# --- generator --------------------------------------------------------------


def test_generator_is_deterministic(tmp_path):
    spec = GeneratorSpec(n_patients=300, num_medications=20, vocab_size=120, n_phenotypes=5)
    a = save_cohort(generate_synthetic_cohort(spec, 7), tmp_path / "a.jsonl")
    b = save_cohort(generate_synthetic_cohort(spec, 7), tmp_path / "b.jsonl")
    assert a.read_bytes() == b.read_bytes()
    assert ddi_sidecar_path(a).read_bytes() == ddi_sidecar_path(b).read_bytes()


def test_generator_cold_start_count_and_shape():
    spec = GeneratorSpec()
    c = generate_synthetic_cohort(spec, 7)
    assert sum(p.low_code for p in c.patients) == 60
    for p in c.patients:
        assert p.num_visits >= 2
        for v in p.visits:
            assert len(v.codes) >= 1 and sum(v.labels) >= 1
            assert len(v.labels) == 20


def test_cold_patients_sit_at_the_bottom_of_code_counts():
    c = generate_synthetic_cohort(GeneratorSpec(), 11)
    cold = [p.total_codes for p in c.patients if p.low_code]
    warm = [p.total_codes for p in c.patients if not p.low_code]
    assert np.median(cold) < np.percentile(warm, 10)


def test_within_phenotype_label_similarity_exceeds_between():
    # the phenotype is latent; the code blocks come from the generator's first
    # draw, and each patient is labelled by the block most of its codes fall in
    spec = GeneratorSpec(n_patients=120)
    seed = 5
    c = generate_synthetic_cohort(spec, seed)
    perm = np.random.default_rng(seed).permutation(spec.vocab_size)
    K = spec.n_phenotypes
    blocks = np.array_split(perm[spec.episodic_codes:], K)
    owner = {int(code): k for k, b in enumerate(blocks) for code in b}
    pheno = []
    for p in c.patients:
        counts = np.bincount([owner[x] for x in p.all_codes() if x in owner], minlength=K)
        pheno.append(int(np.argmax(counts)))
    labels = [{j for v in p.visits for j, y in enumerate(v.labels) if y} for p in c.patients]
    within, between = [], []
    for i, j in combinations(range(len(labels)), 2):
        (within if pheno[i] == pheno[j] else between).append(oracles.jaccard(labels[i], labels[j]))
    assert np.mean(within) > np.mean(between)


def test_infeasible_spec_is_config_error():
    with pytest.raises(ConfigError):
        generate_synthetic_cohort(GeneratorSpec(vocab_size=5, max_codes_per_visit=10,
                                                chronic_pool_size=1, chronic_conditions=1,
                                                n_phenotypes=1, episodic_codes=0), 0)
    with pytest.raises(ConfigError):
        GeneratorSpec(cold_start_fraction=1.5).validate()


def test_label_shuffling_corrupts_the_requested_share():
    clean = generate_synthetic_cohort(GeneratorSpec(n_patients=100), 2)
    noisy = generate_synthetic_cohort(GeneratorSpec(n_patients=100, label_noise_fraction=0.1), 2)
    slots = [(a, b) for pa, pb in zip(clean.patients, noisy.patients)
             for a, b in zip(pa.support_visits, pb.support_visits)]
    changed = sum(a.labels != b.labels for a, b in slots)
    assert all(a.codes == b.codes for a, b in slots)
    # a donor visit can carry identical labels by chance, so allow a few misses
    assert int(0.1 * len(slots)) - 5 <= changed <= int(0.1 * len(slots))
    for pa, pb in zip(clean.patients, noisy.patients):
        assert pa.last_visit == pb.last_visit


# --- splits and cold-start subsets ------------------------------------------


def _toy(counts):
    pats = []
    for i, n in enumerate(counts):
        v1 = Visit(1, tuple(range(n - 1)) if n > 1 else (0,), (1,))
        v2 = Visit(2, (0,), (1,))
        if n == 1:
            raise ValueError
        pats.append(PatientRecord(f"P{i}", (v1, v2)))
    return Cohort(tuple(pats), _make_vocab(40), 1)


def test_split_80_20_and_cover(rng):
    c = _toy([3] * 100)
    tr, te = split_cohort(c, 0.8, 4)
    assert (len(tr), len(te)) == (80, 20)
    assert set(tr.patient_ids).isdisjoint(te.patient_ids)
    assert set(tr.patient_ids) | set(te.patient_ids) == set(c.patient_ids)
    assert split_cohort(c, 0.8, 4) == (tr, te)
    with pytest.raises(ValueError):
        split_cohort(c, 1.0, 0)


def test_cold_start_subset_examples():
    c = _toy([3, 5, 8, 10, 20])
    assert [p.patient_id for p in cold_start_subset(c, 20)] == ["P0"]
    assert len(cold_start_subset(c, 100)) == 5
    tied = _toy([5, 3, 5, 5, 9])
    assert [p.patient_id for p in cold_start_subset(tied, 40)] == ["P1", "P0", "P2", "P3"]


def test_nearest_rank_examples():
    assert nearest_rank([3, 5, 8, 10, 20], 20) == 3
    assert nearest_rank(list(range(1, 11)), 80) == 8


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 30), min_size=1, max_size=25),
       st.floats(1, 100), st.floats(1, 100))
def test_cold_start_subsets_nest_and_match_oracle(counts, p1, p2):
    c = _toy(counts)
    lo, hi = sorted((p1, p2))
    a = {p.patient_id for p in cold_start_subset(c, lo)}
    b = {p.patient_id for p in cold_start_subset(c, hi)}
    assert a <= b
    cut = oracles.nearest_rank([p.total_codes for p in c.patients], lo)
    assert a == {p.patient_id for p in c.patients if p.total_codes <= cut}


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 10_000))
def test_split_is_a_disjoint_cover(n, frac, seed):
    c = _toy([3] * n)
    tr, te = split_cohort(c, frac, seed)
    assert sorted(tr.patient_ids + te.patient_ids) == sorted(c.patient_ids)
    assert set(tr.patient_ids).isdisjoint(te.patient_ids)
