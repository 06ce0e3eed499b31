"""Open-vocabulary 3D detection simulator: discovery, enrichment, and
cross-modal alignment over point-cloud scenes with pluggable semantics."""

from .errors import (
    BehindCameraError,
    ConfigurationError,
    EmptyObjectError,
    OV3DSimError,
    UnknownCategoryError,
)
from .geometry import (
    AABB2D,
    CameraModel,
    OrientedBox3D,
    contains,
    corners,
    iou2d,
    iou3d,
    project_box,
)
from .scene import (
    InsertConfig,
    NovelObjectSample,
    ObjectAnnotation,
    PointCloudScene,
    count_points_in_box,
    crop_region_2d,
    extract_object,
    insert_object,
)
from .semantic import (
    CategoryVocabulary,
    ClassProbabilities,
    Embedding,
    ToyOracle,
    classify,
    toy_oracle,
)
from .discovery import (
    DataPool,
    DiscoveryConfig,
    LabelPool,
    Proposal,
    discover,
    sample_enrichment,
    update_data_pool,
    update_label_pool,
)
from .alignment import (
    DetectorLossInputs,
    LossReport,
    LossWeights,
    MatchResult,
    ReferenceBoxes2D,
    bg_match,
    contrastive_loss,
    detector_loss,
    distill_loss,
    fg_match,
    hungarian_match,
    select_alignment_queries,
)
from .metrics import (
    DetectionResult,
    GroundTruth,
    MetricsReport,
    aggregate,
    average_precision,
    evaluate_detections,
    match_detections,
)
from .simulate import RoundLog, SimulationConfig, SimulationState, run_round, run_simulation

__version__ = "0.1.0"
