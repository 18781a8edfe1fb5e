"""Two-stream tampered-face detection: noise-residual patch analysis fused with
a face-appearance classifier, plus the synthetic-splice data generator and
face-level ROC evaluation used to exercise the pipeline end to end."""

from .appearance import (
    AppearanceModel,
    ExternalScores,
    FaceCrop,
    crop_resize,
    forward_F,
    load_appearance,
    load_external_scores,
    save_appearance,
    train_appearance,
)
from .fusion_eval import FaceScore, RocCurve, calibrate_lambda, fuse, roc_auc
from .imagecore import (
    Image,
    PatchGrid,
    Rect,
    SpliceManifest,
    load_image,
    load_manifest,
    make_grid,
    save_manifest,
)
from .pipeline import PipelineConfig, derive_seed, detect
from .residuals import (
    FeatureConfig,
    ResidualFeature,
    ResidualFilter,
    default_filter_bank,
    extract_feature,
    extract_grid_features,
    read_features,
    write_features,
)
from .svmstream import FaceSvmProblem, LinearSvm, assemble_problem, face_score, score_map, solve
from .synthsplice import SpliceRecipe, SpliceResult, make_texture_pool, synthesize
from .tripletnet import TrainConfig, Triplet, TripletModel, load_model, sample_triplets, save_model
from .tripletnet import train as train_triplet

__version__ = "0.1.0"

__all__ = [
    "AppearanceModel",
    "ExternalScores",
    "FaceCrop",
    "FaceScore",
    "FaceSvmProblem",
    "FeatureConfig",
    "Image",
    "LinearSvm",
    "PatchGrid",
    "PipelineConfig",
    "Rect",
    "ResidualFeature",
    "ResidualFilter",
    "RocCurve",
    "SpliceManifest",
    "SpliceRecipe",
    "SpliceResult",
    "TrainConfig",
    "Triplet",
    "TripletModel",
    "assemble_problem",
    "calibrate_lambda",
    "crop_resize",
    "default_filter_bank",
    "derive_seed",
    "detect",
    "extract_feature",
    "extract_grid_features",
    "face_score",
    "forward_F",
    "fuse",
    "load_appearance",
    "load_external_scores",
    "load_image",
    "load_manifest",
    "load_model",
    "make_grid",
    "make_texture_pool",
    "read_features",
    "roc_auc",
    "sample_triplets",
    "save_appearance",
    "save_manifest",
    "save_model",
    "score_map",
    "solve",
    "synthesize",
    "train_appearance",
    "train_triplet",
    "write_features",
]
