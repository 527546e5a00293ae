"""
Filtering noisy support visits
==============================

Shuffle the medication labels of 10% of the support visits, then look at
what the uncertainty filter learns: per-visit scores from the adapted
head, the threshold gamma, and which visits it drops at test time.
"""

# %%
import numpy as np

from metadrug.ehr import GeneratorSpec, generate_synthetic_cohort, split_cohort
from metadrug.experiments import UQSettings, evaluate_bundle, train_bundle
from metadrug.meta import MetaConfig

clean = generate_synthetic_cohort(GeneratorSpec(), seed=3)
noisy = generate_synthetic_cohort(GeneratorSpec(label_noise_fraction=0.1), seed=3)
shuffled = {(a.patient_id, va.t) for a, b in zip(clean.patients, noisy.patients)
            for va, vb in zip(a.support_visits, b.support_visits) if va.labels != vb.labels}
train, test = split_cohort(noisy, 0.8, seed=3)
bundle = train_bundle(train, MetaConfig(epochs=10, seed=3), d=32, uq=UQSettings(beta=20))
print(f"{len(shuffled)} support visits carry shuffled labels")

# %%
# Training-set uncertainty: do shuffled visits score higher?
keys = [(r.patient_id, v.t) for r in train.patients for v in r.support_visits]
scores = np.array(bundle.uq_scores)
flag = np.array([k in shuffled for k in keys])
print(f"mean U, shuffled {scores[flag].mean():.3f} vs clean {scores[~flag].mean():.3f}")
print(f"gamma (80th percentile of U) = {bundle.uq_filter.threshold.gamma:.3f}")

# %%
# What the learned predictor keeps for a few test patients.
for rec in test.patients[:5]:
    res = bundle.uq_filter.retain(rec, bundle.params.theta)
    print(f"{rec.patient_id}: scores {np.round(res.scores, 3).tolist()} keep {list(res.retained)}"
          + (" (fallback)" if res.fallback else ""))

# %%
for use_filter in (True, False):
    r = evaluate_bundle(bundle, test, use_filter=use_filter)
    print(f"filter={use_filter!s:5s} jaccard {r.jaccard:.4f}")
