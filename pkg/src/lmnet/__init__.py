"""Frontal-view LiDAR multi-class 3D object detection on CPU."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    BACKGROUND,
    CLASS_NAMES,
    Box3D,
    FrontalViewMap,
    Point3,
    ProjectionConfig,
    decode_box,
    encode_box,
    encode_frontal_view,
    observation_angles,
    project,
    rotation,
)
from .network import (  # noqa: F401
    LMNetParams,
    TrainConfig,
    build,
    canonical_architecture,
    forward,
    load_weights,
    loss,
    save_weights,
    train,
)
from .postprocess import (  # noqa: F401
    Candidate,
    NmsConfig,
    bev_iou,
    evaluate,
    extract_candidates,
    nms,
    score_candidates,
)
