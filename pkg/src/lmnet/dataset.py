"""Scene ingestion: KITTI-format point clouds, labels and calibration,
range cropping, target-map rasterization, z-axis augmentation and a
synthetic-scene generator for desk-scale training.

A dataset directory follows the KITTI layout::

    <root>/velodyne/<stem>.bin   float32le (x, y, z, reflectance) per point
    <root>/label_2/<stem>.txt    one object per line, camera-frame boxes
    <root>/calib/<stem>.txt      R0_rect and Tr_velo_to_cam matrices

The synthetic generator writes the same layout so every downstream tool
is format-agnostic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CalibError,
    CapacityError,
    FormatError,
    InvalidArgumentError,
)
from .geometry import (
    BACKGROUND,
    CLASS_NAMES,
    Box3D,
    FrontalViewMap,
    ProjectionConfig,
    encode_box,
    encode_frontal_view,
    rot_z,
)
from .network import LossTargets

# Retained sensor-frame volume, meters (closed intervals).
CROP_MIN = np.array([0.0, -40.0, -2.0])
CROP_MAX = np.array([70.0, 40.0, 2.0])

GROUND_Z = -1.7

KITTI_CLASS_IDS = {"Car": 1, "Pedestrian": 2, "Cyclist": 3}

# Idealized velodyne->camera axis permutation used for synthetic scenes:
# x_cam = -y_velo, y_cam = -z_velo, z_cam = x_velo.
IDEAL_TR_VELO_TO_CAM = np.array(
    [
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ]
)


@dataclass
class Scene:
    """Points plus labeled instances.

    ``point_instance`` holds, per point, an index into ``instances`` or
    -1 for background.
    """

    points: np.ndarray
    instances: list[Box3D] = field(default_factory=list)
    point_instance: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if self.point_instance is None:
            self.point_instance = np.full(len(self.points), -1, dtype=np.int64)
        else:
            self.point_instance = np.asarray(self.point_instance, dtype=np.int64)


def crop_range(points: np.ndarray) -> np.ndarray:
    """Keep points inside the training volume (bounds inclusive)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    xyz = points[:, :3]
    keep = np.all((xyz >= CROP_MIN) & (xyz <= CROP_MAX), axis=1)
    return points[keep]


# ---------------------------------------------------------------------------
# KITTI files


def read_kitti_bin(path) -> np.ndarray:
    """Velodyne scan: little-endian float32 (x, y, z, reflectance) rows."""
    try:
        raw = Path(path).read_bytes()
    except OSError:
        raise
    if len(raw) % 16:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of 16 bytes"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)


def write_kitti_bin(points: np.ndarray, path) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    Path(path).write_bytes(np.ascontiguousarray(points, dtype="<f4").tobytes())


def read_kitti_calib(path) -> dict[str, np.ndarray]:
    """Parse named matrix lines ('key: v0 v1 ...')."""
    matrices: dict[str, np.ndarray] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            values = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise FormatError(f"{path}: bad matrix line for {key!r}: {exc}") from exc
        matrices[key.strip()] = values
    return matrices


def _calib_cam_to_velo(calib: dict[str, np.ndarray], path) -> np.ndarray:
    """4x4 transform taking rectified-camera coordinates to the sensor
    frame."""
    try:
        tr = calib["Tr_velo_to_cam"].reshape(3, 4)
        r0 = calib["R0_rect"].reshape(3, 3)
    except KeyError as exc:
        raise CalibError(f"{path}: missing calibration matrix {exc}") from exc
    velo_to_cam = np.eye(4)
    velo_to_cam[:3, :] = tr
    rect = np.eye(4)
    rect[:3, :3] = r0
    return np.linalg.inv(rect @ velo_to_cam)


def _camera_frame_corners(h: float, w: float, l: float, loc, ry: float) -> np.ndarray:
    """Eight box corners in camera coordinates, in the package corner
    order. ``loc`` is the bottom-face center; camera y points down."""
    heading = np.array([math.cos(ry), 0.0, -math.sin(ry)])
    up = np.array([0.0, -1.0, 0.0])
    left = np.cross(up, heading)
    corners = np.empty((8, 3))
    for i in range(8):
        sf = 1.0 if i < 4 else -1.0
        st = 1.0 if (i % 4) < 2 else 0.0
        sl = 1.0 if (i % 2) == 0 else -1.0
        corners[i] = (
            np.asarray(loc)
            + sf * (l / 2.0) * heading
            + sl * (w / 2.0) * left
            + st * h * up
        )
    return corners


def read_kitti_label(label_path, calib_path) -> list[Box3D]:
    """Read camera-frame object labels and convert them to sensor-frame
    corner boxes. Types outside {Car, Pedestrian, Cyclist} are dropped."""
    cam_to_velo = _calib_cam_to_velo(read_kitti_calib(calib_path), calib_path)
    boxes: list[Box3D] = []
    for lineno, line in enumerate(Path(label_path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] not in KITTI_CLASS_IDS:
            continue
        if len(fields) < 15:
            raise FormatError(
                f"{label_path}: line {lineno}: expected >= 15 fields, got {len(fields)}"
            )
        try:
            values = [float(v) for v in fields[8:15]]
        except ValueError as exc:
            raise FormatError(f"{label_path}: line {lineno}: {exc}") from exc
        h, w, l, x, y, z, ry = values
        corners_cam = _camera_frame_corners(h, w, l, (x, y, z), ry)
        homo = np.hstack([corners_cam, np.ones((8, 1))])
        corners_velo = (cam_to_velo @ homo.T).T[:, :3]
        boxes.append(Box3D(corners_velo, KITTI_CLASS_IDS[fields[0]]))
    return boxes


def write_kitti_label(boxes: list[Box3D], path, scores=None) -> None:
    """Write sensor-frame boxes as camera-frame label lines under the
    idealized calibration. With ``scores`` the lines carry a trailing
    confidence, making this the KITTI-style detection writer as well."""
    names = {v: k for k, v in KITTI_CLASS_IDS.items()}
    lines = []
    for i, box in enumerate(boxes):
        dims, yaw = box.dims_yaw()
        l, w, h = dims
        bottom = box.center - np.array([0.0, 0.0, h / 2.0])
        loc_cam = IDEAL_TR_VELO_TO_CAM[:, :3] @ bottom
        ry = _wrap_angle(-yaw - math.pi / 2.0)
        alpha = _wrap_angle(ry - math.atan2(loc_cam[0], loc_cam[2]))
        line = (
            f"{names[box.label]} 0.00 0 {alpha:.6f} 0.00 0.00 0.00 0.00 "
            f"{h:.6f} {w:.6f} {l:.6f} "
            f"{loc_cam[0]:.6f} {loc_cam[1]:.6f} {loc_cam[2]:.6f} {ry:.6f}"
        )
        if scores is not None:
            line += f" {scores[i]:.6f}"
        lines.append(line)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_ideal_calib(path) -> None:
    tr = " ".join(f"{v:.1f}" for v in IDEAL_TR_VELO_TO_CAM.reshape(-1))
    r0 = " ".join(f"{v:.1f}" for v in np.eye(3).reshape(-1))
    Path(path).write_text(f"R0_rect: {r0}\nTr_velo_to_cam: {tr}\n")


def _wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


# ---------------------------------------------------------------------------
# Instance assignment and target rasterization


def assign_instances(
    points: np.ndarray, boxes: list[Box3D], eps: float = 0.05
) -> np.ndarray:
    """Label each point with the instance containing it (within ``eps``),
    or -1. Points inside several overlapping boxes take the instance
    whose center is nearer."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    n = len(points)
    assignment = np.full(n, -1, dtype=np.int64)
    best_dist = np.full(n, np.inf)
    xyz = points[:, :3]
    for idx, box in enumerate(boxes):
        dims, _ = box.dims_yaw()
        center = box.center
        c = box.corners
        axes = np.stack(
            [
                c[:4].mean(axis=0) - c[4:].mean(axis=0),
                c[[0, 2, 4, 6]].mean(axis=0) - c[[1, 3, 5, 7]].mean(axis=0),
                c[[0, 1, 4, 5]].mean(axis=0) - c[[2, 3, 6, 7]].mean(axis=0),
            ]
        )
        norms = np.linalg.norm(axes, axis=1)
        if np.any(norms == 0):
            continue
        axes /= norms[:, None]
        local = (xyz - center) @ axes.T
        inside = np.all(np.abs(local) <= dims / 2.0 + eps, axis=1)
        dist = np.linalg.norm(xyz - center, axis=1)
        take = inside & (dist < best_dist)
        assignment[take] = idx
        best_dist[take] = dist[take]
    return assignment


def in_view_mask(points: np.ndarray, cfg: ProjectionConfig) -> np.ndarray:
    """Which points project inside the map's field of view."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    rng_xy = np.hypot(x, y)
    with np.errstate(invalid="ignore"):
        theta = np.arctan2(y, x)
        phi = np.arctan2(z, rng_xy)
    at_origin = (x == 0) & (y == 0) & (z == 0)
    return (
        ~at_origin
        & (theta >= cfg.theta_min)
        & (theta <= cfg.theta_max)
        & (phi >= cfg.phi_min)
        & (phi <= cfg.phi_max)
    )


def instance_point_counts(scene: Scene, cfg: ProjectionConfig) -> np.ndarray:
    """In-view point count per instance (the object-size statistic)."""
    counts = np.zeros(len(scene.instances), dtype=np.int64)
    if len(scene.points) == 0:
        return counts
    visible = in_view_mask(scene.points, cfg)
    labeled = scene.point_instance >= 0
    use = visible & labeled
    if use.any():
        np.add.at(counts, scene.point_instance[use], 1)
    return counts


@dataclass
class TargetMaps:
    """Rasterized supervision for one scene.

    ``class_map``: -1 where no point landed, else class id (0 background).
    ``corner_targets``: corner-offset encodings on object pixels, zero
    elsewhere. ``size_map``: per-pixel instance size s(p).
    """

    class_map: np.ndarray
    corner_targets: np.ndarray
    size_map: np.ndarray
    instance_map: np.ndarray

    @property
    def num_object(self) -> int:
        return int((self.class_map > 0).sum())

    @property
    def num_background(self) -> int:
        return int((self.class_map == 0).sum())


def rasterize_targets(
    scene: Scene, cfg: ProjectionConfig
) -> tuple[FrontalViewMap, TargetMaps]:
    """Project a scene and derive its per-pixel training targets.

    Each valid cell takes the class of its winning point's instance;
    object cells additionally store the corner-offset encoding of that
    instance's box relative to the cell's (exact, float64) source point.
    Instances with zero projected points are excluded from size
    statistics with a warning.
    """
    fvmap = encode_frontal_view(scene.points, cfg)
    h, w = cfg.height, cfg.width
    class_map = np.full((h, w), -1, dtype=np.int64)
    corner_targets = np.zeros((24, h, w), dtype=np.float32)
    size_map = np.zeros((h, w), dtype=np.float32)
    instance_map = np.full((h, w), -1, dtype=np.int64)

    counts = instance_point_counts(scene, cfg)
    for idx, count in enumerate(counts):
        if count == 0:
            warnings.warn(
                f"instance {idx} ({CLASS_NAMES[scene.instances[idx].label]}) has no "
                "projected points; excluded from size statistics",
                stacklevel=2,
            )

    valid_rows, valid_cols = np.nonzero(fvmap.validity)
    src = fvmap.source_index[valid_rows, valid_cols]
    inst = scene.point_instance[src]
    class_map[valid_rows, valid_cols] = BACKGROUND
    for r, c, point_idx, inst_idx in zip(valid_rows, valid_cols, src, inst):
        if inst_idx < 0:
            continue
        box = scene.instances[inst_idx]
        class_map[r, c] = box.label
        instance_map[r, c] = inst_idx
        size_map[r, c] = counts[inst_idx]
        corner_targets[:, r, c] = encode_box(scene.points[point_idx], box)
    return fvmap, TargetMaps(class_map, corner_targets, size_map, instance_map)


def class_mean_sizes(
    scenes: list[Scene], cfg: ProjectionConfig
) -> np.ndarray:
    """Mean instance point count per class over a dataset, [4] float64.

    Index 0 (background) is unused and set to 1. Classes with no visible
    instances also fall back to 1 so weight maps stay finite.
    """
    sums = np.zeros(4)
    nums = np.zeros(4)
    for scene in scenes:
        counts = instance_point_counts(scene, cfg)
        for box, count in zip(scene.instances, counts):
            if count == 0:
                continue
            sums[box.label] += count
            nums[box.label] += 1
    sbar = np.ones(4)
    present = nums > 0
    sbar[present] = sums[present] / nums[present]
    return sbar


def make_loss_targets(maps: TargetMaps, sbar: np.ndarray) -> LossTargets:
    return LossTargets(
        class_map=maps.class_map,
        corner_targets=maps.corner_targets,
        size_map=maps.size_map,
        class_mean_sizes=np.asarray(sbar, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Augmentation


def augment_rotate_z(scene: Scene, angle: float) -> Scene:
    """Rotate the whole scene (points and boxes) about the sensor z axis."""
    if abs(angle) > math.pi:
        raise InvalidArgumentError(f"|angle| must be <= pi, got {angle}")
    r = rot_z(angle)
    points = scene.points.copy()
    points[:, :3] = points[:, :3] @ r.T
    boxes = [box.rotated_z(angle) for box in scene.instances]
    return Scene(points, boxes, scene.point_instance.copy())


def augment_rotate_z_per_object(scene: Scene, angles) -> Scene:
    """Rotate each instance (its points and box) about the sensor z axis
    by its own angle; background points stay put."""
    angles = np.asarray(angles, dtype=np.float64)
    if len(angles) != len(scene.instances):
        raise InvalidArgumentError("one angle per instance required")
    if np.any(np.abs(angles) > math.pi):
        raise InvalidArgumentError("|angle| must be <= pi")
    points = scene.points.copy()
    boxes = []
    for idx, box in enumerate(scene.instances):
        r = rot_z(float(angles[idx]))
        sel = scene.point_instance == idx
        points[sel, :3] = points[sel, :3] @ r.T
        boxes.append(box.rotated_z(float(angles[idx])))
    return Scene(points, boxes, scene.point_instance.copy())


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    """Distribution of desk-scale synthetic scenes.

    Dimension ranges are ((l_min, l_max), (w_min, w_max), (h_min, h_max))
    in meters. Surface density is points per square meter at
    ``reference_range``; it falls off with the inverse square of range.
    """

    cars: int = 2
    pedestrians: int = 2
    cyclists: int = 2
    car_dims: tuple = ((3.8, 4.6), (1.6, 1.9), (1.4, 1.6))
    pedestrian_dims: tuple = ((0.6, 0.8), (0.6, 0.8), (1.6, 1.85))
    cyclist_dims: tuple = ((1.6, 1.9), (0.5, 0.7), (1.5, 1.7))
    yaw_range: tuple = (-math.pi, math.pi)
    surface_density: float = 60.0
    reference_range: float = 10.0
    ground_density: float = 0.6
    azimuth_limits: tuple = (-0.68, 0.68)
    range_limits: tuple = (5.0, 22.0)
    seed: int = 0

    def __post_init__(self):
        if self.surface_density < 0 or self.ground_density < 0:
            raise InvalidArgumentError("densities must be non-negative")
        for dims in (self.car_dims, self.pedestrian_dims, self.cyclist_dims):
            for lo, hi in dims:
                if lo <= 0 or hi < lo:
                    raise InvalidArgumentError("dimension ranges must be positive")

    def class_plan(self) -> list[tuple[int, tuple]]:
        plan = []
        plan += [(1, self.car_dims)] * self.cars
        plan += [(2, self.pedestrian_dims)] * self.pedestrians
        plan += [(3, self.cyclist_dims)] * self.cyclists
        return plan


def _sample_face_points(rng, corner, edge_u, edge_v, count: int) -> np.ndarray:
    u = rng.random(count)[:, None]
    v = rng.random(count)[:, None]
    return corner + u * edge_u + v * edge_v


def _box_surface_points(rng, box: Box3D, cfg: SynthConfig) -> np.ndarray:
    """Sample the sensor-facing length face, width face and top face with
    range-dependent density."""
    c = box.corners
    center = box.center
    rng_dist = float(np.linalg.norm(center[:2]))
    density = cfg.surface_density * (cfg.reference_range / max(rng_dist, 1.0)) ** 2

    # Faces by corner indices (origin corner, +u corner, +v corner). Of
    # each opposite pair, the face whose center is nearer the sensor is
    # the visible one; the top face is always visible from above.
    def face_center(face):
        o, pu, pv = (c[i] for i in face)
        return o + 0.5 * (pu - o) + 0.5 * (pv - o)

    length_faces = [(0, 1, 2), (4, 5, 6)]   # front, rear
    width_faces = [(0, 4, 2), (1, 5, 3)]    # left, right
    faces = [
        min(length_faces, key=lambda f: np.linalg.norm(face_center(f))),
        min(width_faces, key=lambda f: np.linalg.norm(face_center(f))),
        (0, 1, 4),                           # top
    ]

    points = []
    for o_idx, u_idx, v_idx in faces:
        o, u, v = c[o_idx], c[u_idx] - c[o_idx], c[v_idx] - c[o_idx]
        area = float(np.linalg.norm(np.cross(u, v)))
        count = max(int(round(density * area)), 8)
        face_pts = _sample_face_points(rng, o, u, v, count)
        # nudge inside the surface so containment holds strictly
        face_pts += 1e-3 * (center - face_pts) / np.linalg.norm(
            center - face_pts, axis=1, keepdims=True
        )
        points.append(face_pts)
    xyz = np.vstack(points)
    refl = rng.uniform(0.3, 0.9, size=(len(xyz), 1))
    return np.hstack([xyz, refl])


def synth_scene(cfg: SynthConfig, seed: int | None = None) -> Scene:
    """Generate one labeled scene, deterministic per seed.

    Boxes sit on the ground plane, inside both the crop volume and the
    configured azimuth sector, and never overlap in the ground plane.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    boxes: list[Box3D] = []
    placed: list[tuple[np.ndarray, float]] = []  # (xy, clearance radius)
    for label, dim_ranges in cfg.class_plan():
        dims = np.array([rng.uniform(lo, hi) for lo, hi in dim_ranges])
        radius = 0.5 * math.hypot(dims[0], dims[1]) + 0.6
        for attempt in range(200):
            theta = rng.uniform(*cfg.azimuth_limits)
            dist = rng.uniform(*cfg.range_limits)
            xy = np.array([dist * math.cos(theta), dist * math.sin(theta)])
            if all(
                np.linalg.norm(xy - other_xy) > radius + other_r
                for other_xy, other_r in placed
            ):
                break
        else:
            raise CapacityError(
                f"could not place a {CLASS_NAMES[label]} after 200 attempts"
            )
        yaw = rng.uniform(*cfg.yaw_range)
        center = np.array([xy[0], xy[1], GROUND_Z + dims[2] / 2.0])
        boxes.append(Box3D.from_center_dims_yaw(center, dims, yaw, label))
        placed.append((xy, radius))

    chunks = []
    labels = []
    for idx, box in enumerate(boxes):
        pts = _box_surface_points(rng, box, cfg)
        chunks.append(pts)
        labels.append(np.full(len(pts), idx, dtype=np.int64))

    if cfg.ground_density > 0:
        t0, t1 = cfg.azimuth_limits
        r0, r1 = 2.0, cfg.range_limits[1] + 3.0
        area = 0.5 * (t1 - t0) * (r1 * r1 - r0 * r0)
        count = max(int(round(cfg.ground_density * area)), 1)
        theta = rng.uniform(t0, t1, count)
        # uniform over the sector area
        radius = np.sqrt(rng.uniform(r0 * r0, r1 * r1, count))
        gx = radius * np.cos(theta)
        gy = radius * np.sin(theta)
        gz = GROUND_Z + rng.normal(0.0, 0.02, count)
        refl = rng.uniform(0.05, 0.35, count)
        chunks.append(np.stack([gx, gy, gz, refl], axis=1))
        labels.append(np.full(count, -1, dtype=np.int64))

    points = np.vstack(chunks) if chunks else np.zeros((0, 4))
    point_instance = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    return Scene(points, boxes, point_instance)


# ---------------------------------------------------------------------------
# Dataset directories


def dataset_stems(root) -> list[str]:
    root = Path(root)
    return sorted(p.stem for p in (root / "velodyne").glob("*.bin"))


def write_scene(scene: Scene, root, stem: str) -> None:
    root = Path(root)
    for sub in ("velodyne", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_kitti_bin(scene.points, root / "velodyne" / f"{stem}.bin")
    write_kitti_label(scene.instances, root / "label_2" / f"{stem}.txt")
    write_ideal_calib(root / "calib" / f"{stem}.txt")


def load_scene(root, stem: str, crop: bool = True) -> Scene:
    root = Path(root)
    points = read_kitti_bin(root / "velodyne" / f"{stem}.bin")
    if crop:
        points = crop_range(points)
    label_path = root / "label_2" / f"{stem}.txt"
    calib_path = root / "calib" / f"{stem}.txt"
    boxes = read_kitti_label(label_path, calib_path) if label_path.exists() else []
    assignment = assign_instances(points, boxes)
    return Scene(points, boxes, assignment)
