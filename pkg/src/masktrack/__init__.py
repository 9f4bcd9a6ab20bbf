"""Guided per-frame video object segmentation toolkit.

Propagates a first-frame (or sparse) object annotation through a video one
frame at a time: the previous estimate is coarsened by disc dilation and
handed to a pluggable refiner together with the current frame; the
thresholded result seeds the next step. Includes the deformed-mask
training-set synthesis, optical-flow-magnitude score fusion, dense
spatio-temporal CRF post-processing, and the benchmark evaluation
protocol with the annotation-density experiment.
"""

from .core import (
    Annotation,
    BinaryMask,
    BoundingBox,
    DatasetManifest,
    DAVIS_PROTOCOL,
    EvalProtocol,
    FIRST_ONLY_PROTOCOL,
    Image,
    ManifestError,
    ScoreMap,
    VideoSequence,
    load_image,
    load_manifest,
    load_mask,
    mask_from_box,
    save_image,
    save_mask,
    tight_box,
)
from .crf import CrfParams, crf_exact_map, crf_refine, mean_field, postprocess_sequence
from .evaluation import (
    DensityPoint,
    QUANTILE_LEVELS,
    Report,
    SequenceScore,
    dataset_report,
    density_experiment,
    emit_density,
    emit_report,
    iou,
    score_sequence,
    stride_annotations,
)
from .flow import (
    FlowField,
    FlowFormatError,
    FusedScoreRefiner,
    branch_magnitudes,
    fuse_scores,
    magnitude_image,
    read_flo,
    write_flo,
)
from .propagation import (
    Direction,
    EmptyMaskPolicy,
    PropagationConfig,
    PropagationError,
    PropagationResult,
    copy_baseline,
    load_result,
    propagate,
    propagate_multi,
    save_result,
)
from .refiners import (
    ExternalRefiner,
    IdentityRefiner,
    OnlineColorModelRefiner,
    OnlineColorModelState,
    OracleRefiner,
    Refiner,
    RefinerError,
    RefinerRequest,
    fit_online,
    refine,
    threshold,
)
from .synthesis import (
    AugmentationParams,
    DeformationParams,
    TrainingSample,
    affine_deform,
    build_offline_corpus,
    build_online_set,
    dilate,
    manifest_image_pairs,
    synthesize_input_mask,
    tps_deform,
    tps_eval,
    tps_fit,
    warp_mask_tps,
)
from .synthetic import SceneSpec, default_scenes, generate_dataset

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
