"""Unsupervised spectral segmentation and concept discovery for
endoscopy-style image datasets built on precomputed patch features."""

from .data_model import (
    DatasetManifest,
    EigGapRule,
    ImageEntry,
    PatchFeatureTensor,
    PreprocessConfig,
    ProbeConfig,
    RunConfig,
    SemanticMask,
    load_manifest,
    read_features,
    write_features,
    write_run_artifact,
)
from .errors import ConfigError, DataError, EndosegError, NumericalError
from .features import CropRequest, FeatureSource, embed_crop, features_for
from .affinity import AffinityMatrix, ColorGraphParams, color_affinity, combine, \
    feature_affinity
from .spectral import SegmentMap, SpectralEmbedding, choose_segment_count, \
    discretize, laplacian, smallest_eigenpairs
from .segments import SegmentRecord, embed_segments
from .concepts import ClusterAssignment, ConceptModel, apply_labels, \
    assign_and_render, fit_concepts, fit_pca, kmeans
from .evaluation import EvalReport, ImageEmbedding, f1_scores, iou, knn_classify, \
    polyp_detection_report, train_linear_probe, two_fold_cv

__version__ = "0.1.0"
