"""
A synthetic cohort, up close
============================

Generate the default synthetic EHR cohort and look at the structure the
model is meant to exploit: visit counts, code counts, the cold-start tail
and how strongly medications cluster by latent phenotype.
"""

# %%
import numpy as np

from metadrug.ehr import GeneratorSpec, cold_start_subset, generate_synthetic_cohort, split_cohort

spec = GeneratorSpec()
cohort = generate_synthetic_cohort(spec, seed=0)
print(f"{len(cohort)} patients, {cohort.vocab_size} codes, {cohort.num_medications} medications")
print(f"{len(cohort.ddi_edges)} interacting medication pairs")

# %%
# Visits per patient and codes per patient. Cold-start patients are
# generated with short, sparse histories.
visits = np.array([p.num_visits for p in cohort.patients])
codes = np.array([p.total_codes for p in cohort.patients])
print("visits per patient:", np.bincount(visits)[2:])
print("total codes: median %d, p10 %d, p90 %d" % (np.median(codes), np.percentile(codes, 10),
                                                  np.percentile(codes, 90)))

# %%
# The cold-start subsets nest: the 10th-percentile patients are a subset of
# the 20th-percentile ones, and so on.
train, test = split_cohort(cohort, 0.8, seed=0)
for p in (10, 20, 30, 40, 50):
    sub = cold_start_subset(test, p)
    print(f"p{p:<3d} {len(sub):3d} test patients, at most {max(r.total_codes for r in sub)} codes")

# %%
# One sparse patient, visit by visit.
sparse = min(cohort.patients, key=lambda r: (r.total_codes, r.patient_id))
for v in sparse.visits:
    meds = [j for j, y in enumerate(v.labels) if y]
    print(f"  t={v.t} codes={list(v.codes)} meds={meds}")
