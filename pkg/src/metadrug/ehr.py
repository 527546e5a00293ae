"""Longitudinal EHR records: data model, JSONL I/O, synthetic cohorts, splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import CohortParseError, ConfigError, SchemaError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CODE_KINDS = ("diagnosis", "procedure")


@dataclass(frozen=True)
class MedicalCode:
    id: str
    kind: str
    index: int


@dataclass(frozen=True)
class Visit:
    """One admission. ``codes`` is a sorted tuple of unique vocabulary indices."""

    t: int
    codes: tuple[int, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(sorted(set(int(c) for c in self.codes))))
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if not self.codes:
            raise SchemaError(f"visit {self.t} has no codes")
        if any(y not in (0, 1) for y in self.labels):
            raise SchemaError(f"visit {self.t} has non-binary labels")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]
    low_code: bool = False

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))
        for pos, v in enumerate(self.visits, start=1):
            if v.t != pos:
                raise SchemaError(
                    f"patient {self.patient_id}: visit positions must be 1..T contiguous"
                )

    @property
    def num_visits(self) -> int:
        return len(self.visits)

    @property
    def total_codes(self) -> int:
        return sum(len(v.codes) for v in self.visits)

    @property
    def support_visits(self) -> tuple[Visit, ...]:
        return self.visits[:-1]

    @property
    def last_visit(self) -> Visit:
        return self.visits[-1]

    def all_codes(self) -> list[int]:
        """Codes of every visit concatenated in visit order (repeats kept)."""
        return [c for v in self.visits for c in v.codes]


@dataclass(frozen=True)
class Cohort:
    patients: tuple[PatientRecord, ...]
    code_vocab: tuple[MedicalCode, ...]
    num_medications: int
    ddi_edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "code_vocab", tuple(self.code_vocab))
        edges = set()
        for a, b in self.ddi_edges:
            a, b = int(a), int(b)
            if a == b:
                raise SchemaError(f"DDI graph has a self-loop on medication {a}")
            if not (0 <= a < self.num_medications and 0 <= b < self.num_medications):
                raise SchemaError(f"DDI edge ({a}, {b}) outside medication range")
            edges.add((min(a, b), max(a, b)))
        object.__setattr__(self, "ddi_edges", frozenset(edges))

    def __len__(self):
        return len(self.patients)

    @property
    def vocab_size(self) -> int:
        return len(self.code_vocab)

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def with_patients(self, patients) -> "Cohort":
        return replace(self, patients=tuple(patients))

    def ddi_adjacency(self) -> np.ndarray:
        adj = np.zeros((self.num_medications, self.num_medications), dtype=bool)
        for a, b in self.ddi_edges:
            adj[a, b] = adj[b, a] = True
        return adj


# ---------------------------------------------------------------------------
# JSONL I/O


def ddi_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".ddi.txt")


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def cohort_to_lines(cohort: Cohort) -> list[str]:
    header = {
        "schema_version": SCHEMA_VERSION,
        "H": cohort.num_medications,
        "code_vocab": [{"id": c.id, "kind": c.kind} for c in cohort.code_vocab],
    }
    lines = [_dumps(header)]
    for p in cohort.patients:
        obj = {
            "patient_id": p.patient_id,
            "visits": [{"t": v.t, "codes": list(v.codes), "labels": list(v.labels)} for v in p.visits],
        }
        if p.low_code:
            obj["low_code"] = True
        lines.append(_dumps(obj))
    return lines


def save_cohort(cohort: Cohort, path) -> Path:
    """Write the cohort JSONL plus its DDI sidecar. Returns the JSONL path."""
    path = Path(path)
    path.write_text("\n".join(cohort_to_lines(cohort)) + "\n")
    edges = sorted(cohort.ddi_edges)
    ddi_sidecar_path(path).write_text("".join(f"{a} {b}\n" for a, b in edges))
    return path


def _read_ddi(path: Path, num_medications: int) -> frozenset:
    edges = set()
    if not path.exists():
        return frozenset()
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split()
        if len(parts) != 2:
            raise CohortParseError(n, f"DDI sidecar expects 'i j', got {raw!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise CohortParseError(n, f"DDI sidecar expects integers, got {raw!r}") from None
        edges.add((a, b))
    return frozenset(edges)


def _parse_patient(obj, line_no, H, V) -> PatientRecord:
    if not isinstance(obj, dict) or "patient_id" not in obj or "visits" not in obj:
        raise CohortParseError(line_no, "patient object needs 'patient_id' and 'visits'")
    extra = set(obj) - {"patient_id", "visits", "low_code"}
    if extra:
        raise SchemaError(f"line {line_no}: unknown patient keys {sorted(extra)}")
    visits = []
    for v in obj["visits"]:
        labels = v.get("labels")
        codes = v.get("codes")
        if labels is None or codes is None or "t" not in v:
            raise CohortParseError(line_no, "visit needs 't', 'codes' and 'labels'")
        if len(labels) != H:
            raise SchemaError(f"line {line_no}: label length {len(labels)} != H={H}")
        bad = [c for c in codes if not (0 <= int(c) < V)]
        if bad:
            raise SchemaError(f"line {line_no}: code indices {bad} outside vocabulary of {V}")
        try:
            visits.append(Visit(int(v["t"]), codes, labels))
        except SchemaError as e:
            raise SchemaError(f"line {line_no}: {e}") from None
    try:
        return PatientRecord(str(obj["patient_id"]), tuple(visits), bool(obj.get("low_code", False)))
    except SchemaError as e:
        raise SchemaError(f"line {line_no}: {e}") from None


def load_cohort(path, ddi_path=None) -> Cohort:
    """Read and validate a cohort JSONL file.

    Patients with fewer than two visits are dropped (they cannot be split
    into support and query visits). The DDI graph is read from the sidecar
    next to ``path`` unless ``ddi_path`` is given.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].strip():
        raise CohortParseError(1, "missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CohortParseError(1, f"invalid JSON: {e.msg}") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {header.get('schema_version')!r}")
    try:
        H = int(header["H"])
        vocab = tuple(
            MedicalCode(str(c["id"]), str(c["kind"]), i) for i, c in enumerate(header["code_vocab"])
        )
    except (KeyError, TypeError) as e:
        raise CohortParseError(1, f"bad header: {e}") from None
    kinds = {c.kind for c in vocab} - set(CODE_KINDS)
    if kinds:
        raise SchemaError(f"unknown code kinds {sorted(kinds)}")
    if len({c.id for c in vocab}) != len(vocab):
        raise SchemaError("duplicate code ids in vocabulary")

    patients, dropped = [], 0
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise CohortParseError(line_no, f"invalid JSON: {e.msg}") from None
        rec = _parse_patient(obj, line_no, H, len(vocab))
        if rec.num_visits < 2:
            dropped += 1
            continue
        patients.append(rec)
    if dropped:
        log.info("dropped %d patients with fewer than 2 visits", dropped)

    ddi = _read_ddi(Path(ddi_path) if ddi_path else ddi_sidecar_path(path), H)
    return Cohort(tuple(patients), vocab, H, ddi)


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for the latent-phenotype cohort generator.

    Every code has one medication it tends to trigger. Each patient belongs
    to a phenotype that biases which codes they get, and carries a few
    chronic conditions (drawn from a small per-phenotype pool) whose
    medications recur at every visit while the condition code itself is
    only recorded some of the time. A personal medication, unrelated to any
    code, also recurs. Occasionally a support visit is an episodic
    encounter: its codes come from a reserved block outside every phenotype
    and its medications are drawn at random, so it says nothing about the
    patient's profile.
    Low-code (cold-start) patients have two visits and sparse
    documentation: medications follow all of their conditions, but at most
    ``cold_max_codes_per_visit`` codes per visit are recorded.
    """

    n_patients: int = 300
    num_medications: int = 20
    vocab_size: int = 120
    n_phenotypes: int = 5
    mean_extra_visits: float = 1.5
    max_visits: int = 6
    mean_codes_per_visit: float = 3.0
    max_codes_per_visit: int = 10
    cold_start_fraction: float = 0.2
    cold_max_codes_per_visit: int = 2
    phenotype_affinity: float = 0.85
    chronic_pool_size: int = 5
    chronic_conditions: int = 3
    chronic_record_prob: float = 0.6
    chronic_visit_prob: float = 0.6
    acute_trigger_prob: float = 0.7
    personal_meds: int = 1
    noise_med_prob: float = 0.1
    episodic_codes: int = 10
    episodic_visit_prob: float = 0.0
    ddi_density: float = 0.1
    label_noise_fraction: float = 0.0

    def validate(self):
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if self.num_medications < 1 or self.vocab_size < 1 or self.n_phenotypes < 1:
            raise ConfigError("num_medications, vocab_size and n_phenotypes must be >= 1")
        widest = max(self.max_codes_per_visit, self.cold_max_codes_per_visit)
        if widest > self.vocab_size:
            raise ConfigError(
                f"codes per visit ({widest}) exceeds vocabulary size ({self.vocab_size})"
            )
        if self.chronic_conditions + self.max_codes_per_visit > self.vocab_size:
            raise ConfigError("chronic conditions plus codes per visit exceed the vocabulary")
        if self.n_phenotypes > self.vocab_size:
            raise ConfigError("more phenotypes than vocabulary codes")
        if self.personal_meds > self.num_medications:
            raise ConfigError("personal_meds exceeds num_medications")
        if self.chronic_conditions < 0 or self.personal_meds < 0:
            raise ConfigError("chronic_conditions and personal_meds must be >= 0")
        if self.chronic_conditions > self.chronic_pool_size:
            raise ConfigError("chronic_conditions exceeds chronic_pool_size")
        if self.episodic_codes < 0 or self.episodic_codes >= self.vocab_size:
            raise ConfigError("episodic_codes must lie in [0, vocab_size)")
        if self.episodic_visit_prob > 0 and self.episodic_codes == 0:
            raise ConfigError("episodic visits need at least one episodic code")
        if self.chronic_pool_size > (self.vocab_size - self.episodic_codes) // self.n_phenotypes:
            raise ConfigError("chronic_pool_size exceeds the codes available per phenotype")
        if self.max_visits < 2:
            raise ConfigError("max_visits must be >= 2")
        if self.max_codes_per_visit < 1 or self.cold_max_codes_per_visit < 1:
            raise ConfigError("codes per visit must be >= 1")
        if self.mean_codes_per_visit < 1 or self.mean_extra_visits < 0:
            raise ConfigError("mean_codes_per_visit must be >= 1 and mean_extra_visits >= 0")
        for name in ("cold_start_fraction", "phenotype_affinity", "chronic_record_prob",
                     "chronic_visit_prob", "acute_trigger_prob", "noise_med_prob", "episodic_visit_prob",
                     "ddi_density", "label_noise_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def _make_vocab(V: int) -> tuple[MedicalCode, ...]:
    n_diag = (2 * V + 2) // 3
    out = []
    for i in range(V):
        if i < n_diag:
            out.append(MedicalCode(f"D{i:04d}", "diagnosis", i))
        else:
            out.append(MedicalCode(f"P{i - n_diag:04d}", "procedure", i))
    return tuple(out)


def generate_synthetic_cohort(spec: GeneratorSpec, seed: int) -> Cohort:
    spec.validate()
    rng = np.random.default_rng(seed)
    V, H, K = spec.vocab_size, spec.num_medications, spec.n_phenotypes

    perm = rng.permutation(V)
    episodic, regular = perm[:spec.episodic_codes], perm[spec.episodic_codes:]
    blocks = np.array_split(regular, K)
    code_probs = np.zeros((K, V))
    code_probs[:, regular] = (1 - spec.phenotype_affinity) / len(regular)
    for k, block in enumerate(blocks):
        code_probs[k, block] += spec.phenotype_affinity / len(block)
    code_probs /= code_probs.sum(axis=1, keepdims=True)
    code_med = rng.integers(0, H, size=V)
    chronic_pools = [rng.choice(block, spec.chronic_pool_size, replace=False) for block in blocks]

    n_cold = math.floor(spec.cold_start_fraction * spec.n_patients)
    cold = np.zeros(spec.n_patients, dtype=bool)
    cold[rng.permutation(spec.n_patients)[:n_cold]] = True

    patients = []
    for i in range(spec.n_patients):
        k = int(rng.integers(K))
        chronic = rng.choice(chronic_pools[k], spec.chronic_conditions, replace=False)
        personal = rng.choice(H, spec.personal_meds, replace=False)
        acute_probs = code_probs[k].copy()
        acute_probs[chronic] = 0.0
        acute_probs /= acute_probs.sum()

        if cold[i]:
            T = 2
        else:
            T = 2 + min(int(rng.poisson(spec.mean_extra_visits)), spec.max_visits - 2)
        visits = []
        for t in range(1, T + 1):
            if t < T and rng.random() < spec.episodic_visit_prob:
                visits.append(_episodic_visit(t, episodic, H, rng))
                continue
            n_acute = int(np.clip(1 + rng.poisson(spec.mean_codes_per_visit - 1), 1,
                                  spec.max_codes_per_visit))
            acute = rng.choice(V, n_acute, replace=False, p=acute_probs)
            y = np.zeros(H, dtype=int)
            for c in chronic:
                if rng.random() < spec.chronic_visit_prob:
                    y[code_med[c]] = 1
            for m in personal:
                if rng.random() < spec.chronic_visit_prob:
                    y[m] = 1
            for c in acute:
                if rng.random() < spec.acute_trigger_prob:
                    y[code_med[c]] = 1
            if rng.random() < spec.noise_med_prob:
                y[rng.integers(H)] = 1
            if not y.any():
                y[code_med[acute[0]]] = 1

            recorded = list(acute) + [c for c in chronic if rng.random() < spec.chronic_record_prob]
            if cold[i]:
                n_kept = int(rng.integers(1, spec.cold_max_codes_per_visit + 1))
                recorded = [recorded[j] for j in rng.permutation(len(recorded))[:n_kept]]
            visits.append(Visit(t, tuple(int(c) for c in recorded), tuple(int(v) for v in y)))
        patients.append(PatientRecord(f"P{i:05d}", tuple(visits), bool(cold[i])))

    if spec.label_noise_fraction > 0 and patients:
        patients = _shuffle_support_labels(patients, spec.label_noise_fraction, rng)

    n_pairs = H * (H - 1) // 2
    pairs = [(a, b) for a in range(H) for b in range(a + 1, H)]
    n_edges = int(round(spec.ddi_density * n_pairs))
    chosen = rng.choice(n_pairs, n_edges, replace=False) if n_edges else []
    ddi = frozenset(pairs[int(j)] for j in chosen)

    return Cohort(tuple(patients), _make_vocab(V), H, ddi)


def _episodic_visit(t, episodic_codes, H, rng) -> Visit:
    codes = rng.choice(episodic_codes, int(rng.integers(1, min(3, len(episodic_codes)) + 1)),
                       replace=False)
    y = np.zeros(H, dtype=int)
    y[rng.choice(H, int(rng.integers(1, 3)), replace=False)] = 1
    return Visit(t, tuple(int(c) for c in codes), tuple(int(v) for v in y))


def _shuffle_support_labels(patients, fraction, rng):
    """Replace the labels of a fraction of support visits with labels taken
    from a random visit of another patient."""
    slots = [(pi, vi) for pi, p in enumerate(patients) for vi in range(p.num_visits - 1)]
    n_corrupt = math.floor(fraction * len(slots))
    if n_corrupt == 0 or len(patients) < 2:
        return patients
    visits = [list(p.visits) for p in patients]
    for s in rng.choice(len(slots), n_corrupt, replace=False):
        pi, vi = slots[int(s)]
        donor = int(rng.integers(len(patients) - 1))
        donor += donor >= pi
        dv = patients[donor].visits[int(rng.integers(patients[donor].num_visits))]
        visits[pi][vi] = Visit(visits[pi][vi].t, visits[pi][vi].codes, dv.labels)
    return [replace(p, visits=tuple(v)) for p, v in zip(patients, visits)]


# ---------------------------------------------------------------------------
# Splits and cold-start subsets


def split_cohort(cohort: Cohort, train_frac: float, seed: int) -> tuple[Cohort, Cohort]:
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    n = len(cohort)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_frac * n))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return (
        cohort.with_patients(cohort.patients[i] for i in train_idx),
        cohort.with_patients(cohort.patients[i] for i in test_idx),
    )


def nearest_rank(values, percentile: float):
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    if len(values) == 0:
        raise ValueError("nearest_rank of an empty sequence")
    if not 0.0 < percentile <= 100.0:
        raise ValueError("percentile must lie in (0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return ordered[rank - 1]


def cold_start_subset(cohort: Cohort, percentile: float) -> list[PatientRecord]:
    """Patients whose total code count is at or below the given percentile.

    Sorted by ascending count, ties broken by patient id. Everybody tied
    with the cutoff value is included.
    """
    if len(cohort) == 0:
        raise ValueError("cold_start_subset needs a non-empty cohort")
    cutoff = nearest_rank([p.total_codes for p in cohort.patients], percentile)
    chosen = [p for p in cohort.patients if p.total_codes <= cutoff]
    return sorted(chosen, key=lambda p: (p.total_codes, p.patient_id))
