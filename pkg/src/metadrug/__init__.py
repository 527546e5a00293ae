"""Cold-start medication recommendation with two-level meta-adaptation
(self, then peer) and uncertainty-based filtering of support visits."""

__version__ = "0.1.0"

from .ehr import (Cohort, GeneratorSpec, MedicalCode, PatientRecord, Visit, cold_start_subset,
                  generate_synthetic_cohort, load_cohort, save_cohort, split_cohort)
from .errors import (CohortParseError, ConfigError, DataError, MetaDrugError, RetrievalError,
                     SchemaError, TrainingError)
from .experiments import (ABLATION_VARIANTS, ModelBundle, UQSettings, ablation_suite,
                          cold_start_curve, evaluate_bundle, train_bundle)
from .meta import MetaConfig, MetaTrainer, ModelParams, adapt_and_predict, meta_test_predict
from .metrics import MetricReport, evaluate_predictions
from .peers import PeerIndex, build_index

__all__ = [
    "ABLATION_VARIANTS", "Cohort", "CohortParseError", "ConfigError", "DataError",
    "GeneratorSpec", "MedicalCode", "MetaConfig", "MetaDrugError", "MetaTrainer",
    "MetricReport", "ModelBundle", "ModelParams", "PatientRecord", "PeerIndex",
    "RetrievalError", "SchemaError", "TrainingError", "UQSettings", "Visit",
    "ablation_suite", "adapt_and_predict", "build_index", "cold_start_curve",
    "cold_start_subset", "evaluate_bundle", "evaluate_predictions", "generate_synthetic_cohort",
    "load_cohort", "meta_test_predict", "save_cohort", "split_cohort", "train_bundle",
]
