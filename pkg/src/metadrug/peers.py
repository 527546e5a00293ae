"""Jaccard-similarity retrieval of peer support visits."""

from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .ehr import SCHEMA_VERSION, Cohort
from .errors import RetrievalError, SchemaError


@dataclass(frozen=True)
class VisitRef:
    patient_id: str
    visit_t: int
    codes: frozenset
    labels: tuple[int, ...]


def jaccard_sim(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


class PeerIndex:
    """Every non-final visit of every training patient, searchable by code set.

    The linear scan in :meth:`top_similar` is the reference path. Passing
    ``accelerated=True`` uses code postings and returns the same list.
    """

    def __init__(self, entries):
        self.entries = tuple(entries)
        self._postings = None
        # Global tie order: (patient_id, visit_t).
        self._order = sorted(range(len(self.entries)),
                             key=lambda i: (self.entries[i].patient_id, self.entries[i].visit_t))

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, PeerIndex) and self.entries == other.entries

    @property
    def postings(self):
        if self._postings is None:
            post = defaultdict(list)
            for i, e in enumerate(self.entries):
                for c in e.codes:
                    post[c].append(i)
            self._postings = dict(post)
        return self._postings

    def top_similar(self, query_codes, exclude_patient, lam: int, accelerated=False):
        if lam < 1:
            raise ValueError("lambda must be >= 1")
        query = frozenset(query_codes)
        if accelerated:
            return self._top_postings(query, exclude_patient, lam)
        scored = [
            (-jaccard_sim(query, e.codes), e.patient_id, e.visit_t, i)
            for i, e in enumerate(self.entries)
            if e.patient_id != exclude_patient
        ]
        if not scored:
            raise RetrievalError(f"no peer candidates outside patient {exclude_patient!r}")
        return [self.entries[s[3]] for s in heapq.nsmallest(lam, scored)]

    def _top_postings(self, query, exclude_patient, lam):
        overlap = defaultdict(int)
        for c in query:
            for i in self.postings.get(c, ()):
                overlap[i] += 1
        scored = []
        for i, inter in overlap.items():
            e = self.entries[i]
            if e.patient_id == exclude_patient:
                continue
            union = len(query) + len(e.codes) - inter
            scored.append((-(inter / union), e.patient_id, e.visit_t, i))
        best = heapq.nsmallest(lam, scored)
        if len(best) < lam:
            # Pad with zero-similarity candidates in tie order.
            for i in self._order:
                if len(best) == lam:
                    break
                e = self.entries[i]
                if i in overlap or e.patient_id == exclude_patient:
                    continue
                best.append((-0.0, e.patient_id, e.visit_t, i))
        if not best:
            raise RetrievalError(f"no peer candidates outside patient {exclude_patient!r}")
        return [self.entries[s[3]] for s in best]


def build_index(train: Cohort) -> PeerIndex:
    entries = [
        VisitRef(p.patient_id, v.t, frozenset(v.codes), v.labels)
        for p in train.patients
        for v in p.support_visits
    ]
    return PeerIndex(entries)


def top_similar(index: PeerIndex, query_codes, exclude_patient, lam: int, accelerated=False):
    return index.top_similar(query_codes, exclude_patient, lam, accelerated=accelerated)


def save_index(index: PeerIndex, path, num_medications: int):
    path = Path(path)
    lines = [json.dumps({"schema_version": SCHEMA_VERSION, "kind": "peer_index", "H": num_medications})]
    for e in index.entries:
        lines.append(json.dumps({"patient_id": e.patient_id, "visit_t": e.visit_t,
                                 "codes": sorted(e.codes), "labels": list(e.labels)}))
    path.write_text("\n".join(lines) + "\n")


def load_index(path, num_medications: int) -> PeerIndex:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION or header.get("kind") != "peer_index":
        raise SchemaError("peer index cache has an incompatible schema")
    if header.get("H") != num_medications:
        raise SchemaError("peer index cache was built for a different medication space")
    entries = []
    for raw in lines[1:]:
        if raw.strip():
            o = json.loads(raw)
            entries.append(VisitRef(o["patient_id"], int(o["visit_t"]), frozenset(o["codes"]),
                                    tuple(o["labels"])))
    return PeerIndex(entries)
