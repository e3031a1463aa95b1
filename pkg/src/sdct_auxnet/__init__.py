"""A stain-deconvolution + DCT front-end CNN paired with a
confidence-gated RBF SVM, trained per subject-level fold and combined by
majority vote."""

__version__ = "0.1.0"

from .backbone import BackboneConfig, SdctNetModel, param_count, shape_trace
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, SyntheticConfig, generate_synthetic, load_image, load_manifest, synthesize
from .metrics import balanced_accuracy, f1_score, weighted_f1
from .pipeline import (
    EnsembleModel,
    TrainConfig,
    cross_validate,
    majority_vote,
    predict_gated,
    run_cross_validation,
    split_folds_by_subject,
)
from .svm import RbfSvmModel, svm_predict, svm_train

__all__ = [
    "BackboneConfig", "SdctNetModel", "param_count", "shape_trace",
    "load_checkpoint", "save_checkpoint",
    "DatasetManifest", "SyntheticConfig", "generate_synthetic", "load_image", "load_manifest", "synthesize",
    "balanced_accuracy", "f1_score", "weighted_f1",
    "EnsembleModel", "TrainConfig", "cross_validate", "majority_vote", "predict_gated",
    "run_cross_validation", "split_folds_by_subject",
    "RbfSvmModel", "svm_predict", "svm_train",
]
