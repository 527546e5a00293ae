"""
Self- and peer-adaptation on one patient
========================================

Meta-train a small model, then follow a single cold-start test patient
through the two adaptation levels: the head is first tuned on the
patient's own earlier visits, then on the most similar visits of other
patients.
"""

# %%
import numpy as np

from metadrug.ehr import GeneratorSpec, cold_start_subset, generate_synthetic_cohort, split_cohort
from metadrug.experiments import evaluate_bundle, train_bundle
from metadrug.meta import MetaConfig, adapt_and_predict, adapt_patient, forward_predict

cohort = generate_synthetic_cohort(GeneratorSpec(), seed=1)
train, test = split_cohort(cohort, 0.8, seed=1)
meta = MetaConfig(epochs=10, seed=1)
bundle = train_bundle(train, meta, d=32)
print("epoch losses:", np.round(bundle.loss_log, 3))

# %%
# Pick the sparsest test patient and retrieve its peers by Jaccard
# similarity of the last visit's codes.
rec = cold_start_subset(test, 10)[0]
peers = bundle.index.top_similar(rec.last_visit.codes, rec.patient_id, meta.lambda_peers)
print("query codes:", rec.last_visit.codes)
for ref in peers:
    print(f"  peer {ref.patient_id} t={ref.visit_t} codes={sorted(ref.codes)}")

# %%
theta, phi = bundle.params.theta, bundle.params.phi
truth = np.flatnonzero(rec.last_visit.labels)
heads = adapt_patient(rec, theta, phi, bundle.index, meta)
drift = {k: float((heads.phi2[k] - phi[k]).norm()) for k in phi}
print("head drift after both steps:", {k: round(v, 5) for k, v in drift.items()})
print("true meds:        ", truth.tolist())
print("global head top-5:", np.argsort(-forward_predict(rec, theta, phi))[:5].tolist())
adapted = adapt_and_predict(rec, theta, phi, bundle.index, meta)
print("adapted top-5:    ", np.argsort(-adapted)[:5].tolist())

# %%
# Across the whole test split, with and without adaptation.
for label, flags in (("adapted", {}), ("no adaptation", {"use_self": False, "use_peer": False})):
    r = evaluate_bundle(bundle, test, use_filter=False, **flags)
    print(f"{label:14s} jaccard {r.jaccard:.4f}  f1 {r.f1:.4f}  prauc {r.prauc:.4f}")
