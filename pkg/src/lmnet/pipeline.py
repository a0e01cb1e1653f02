"""End-to-end orchestration shared by the CLI, the benchmark harness and
the tests: single-frame inference with per-stage timing, and training-set
preparation from a dataset directory."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import dataset as ds
from .config import AugmentConfig
from .geometry import FrontalViewMap, ProjectionConfig, encode_frontal_view
from .network import LMNetParams, TrainConfig, TrainSample, forward, train
from .postprocess import (
    Candidate,
    NmsConfig,
    extract_candidates,
    nms,
    score_candidates,
)


@dataclass
class FrameResult:
    detections: list[Candidate]
    objectness: np.ndarray
    fvmap: FrontalViewMap
    stage_seconds: dict[str, float]
    total_seconds: float


def run_frame(
    points: np.ndarray,
    params: LMNetParams,
    proj_cfg: ProjectionConfig,
    nms_cfg: NmsConfig,
    crop: bool = True,
) -> FrameResult:
    """Full single-frame pipeline: crop + encode, forward, postprocess."""
    t_start = time.perf_counter()
    if crop:
        points = ds.crop_range(points)
    fvmap = encode_frontal_view(points, proj_cfg)
    t_encoded = time.perf_counter()
    objectness, corners, _ = forward(params, fvmap.channels, training=False)
    t_forward = time.perf_counter()
    candidates = extract_candidates(objectness, corners, fvmap, nms_cfg)
    candidates = score_candidates(candidates, nms_cfg)
    detections = nms(candidates, nms_cfg, width=proj_cfg.width)
    t_post = time.perf_counter()
    return FrameResult(
        detections=detections,
        objectness=objectness,
        fvmap=fvmap,
        stage_seconds={
            "preprocess": t_encoded - t_start,
            "forward": t_forward - t_encoded,
            "postprocess": t_post - t_forward,
        },
        total_seconds=t_post - t_start,
    )


def augmented_scenes(
    scenes: list[ds.Scene], aug: AugmentConfig, seed: int
) -> list[ds.Scene]:
    """Original scenes plus ``replicas`` rotated copies each."""
    if not aug.enabled or aug.replicas == 0:
        return list(scenes)
    rng = np.random.default_rng(seed)
    limit = np.radians(aug.angle_limit_deg)
    out = list(scenes)
    for scene in scenes:
        for _ in range(aug.replicas):
            if aug.per_object:
                angles = rng.uniform(-limit, limit, size=len(scene.instances))
                out.append(ds.augment_rotate_z_per_object(scene, angles))
            else:
                out.append(ds.augment_rotate_z(scene, float(rng.uniform(-limit, limit))))
    return out


def prepare_training_set(
    scenes: list[ds.Scene],
    proj_cfg: ProjectionConfig,
    aug: AugmentConfig | None = None,
    seed: int = 0,
) -> tuple[list[TrainSample], np.ndarray]:
    """Rasterize scenes into training samples; returns (samples, per-class
    mean instance sizes)."""
    if aug is not None:
        scenes = augmented_scenes(scenes, aug, seed)
    sbar = ds.class_mean_sizes(scenes, proj_cfg)
    samples = []
    for scene in scenes:
        fvmap, maps = ds.rasterize_targets(scene, proj_cfg)
        samples.append(
            TrainSample(fvmap.channels, ds.make_loss_targets(maps, sbar))
        )
    return samples, sbar


def train_on_directory(
    params: LMNetParams,
    dataset_dir,
    proj_cfg: ProjectionConfig,
    train_cfg: TrainConfig,
    aug: AugmentConfig | None = None,
) -> tuple[LMNetParams, list[float]]:
    scenes = [ds.load_scene(dataset_dir, stem) for stem in ds.dataset_stems(dataset_dir)]
    samples, _ = prepare_training_set(scenes, proj_cfg, aug, seed=train_cfg.seed)
    return train(params, samples, train_cfg)
