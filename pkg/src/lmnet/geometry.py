"""Cylindrical frontal-view projection and the corner-offset box codec.

Coordinate conventions used throughout the package:

* Sensor frame: x forward, y left, z up, meters. A LiDAR return is
  (x, y, z, reflectance) with reflectance normalized to [0, 1].
* Map frame: row 0 is the highest elevation, column 0 the rightmost
  azimuth bound (theta_min). Azimuth grows with column index.
* Box corners: every 3D box is stored as 8 corners in a fixed order,
  nested front-before-rear, top-before-bottom, left-before-right:

      index 0  front-top-left        index 4  rear-top-left
      index 1  front-top-right       index 5  rear-top-right
      index 2  front-bottom-left     index 6  rear-bottom-left
      index 3  front-bottom-right    index 7  rear-bottom-right

  "Front" is the +heading face, "left" is +y in the box's local frame.
  Post-processing relies on corners 0 (front-top-left) and 7
  (rear-bottom-right) for its distance metric.

Geometry math runs in float64; only the map channels are float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError, UndefinedAngleError

CLASS_NAMES = ("background", "car", "pedestrian", "cyclist")
BACKGROUND = 0

# Local-frame sign of (length, width, height) for each corner, in the fixed
# corner order documented above.
_CORNER_SIGNS = np.array(
    [
        [+1, +1, +1],
        [+1, -1, +1],
        [+1, +1, -1],
        [+1, -1, -1],
        [-1, +1, +1],
        [-1, -1, +1],
        [-1, +1, -1],
        [-1, -1, -1],
    ],
    dtype=np.float64,
)

# Top-face corners (front-top-left, front-top-right, rear-top-right,
# rear-top-left) traverse the footprint boundary in order.
TOP_FACE = (0, 1, 5, 4)


class Point3(NamedTuple):
    """One LiDAR return in the sensor frame."""

    x: float
    y: float
    z: float
    reflectance: float = 0.0


@dataclass(frozen=True)
class ProjectionConfig:
    """Cylindrical map geometry.

    ``delta_theta``/``delta_phi`` are radians per column/row. ``theta_min``
    maps to column 0 and ``phi_min`` to the *bottom* row (row height-1);
    rows are flipped so row 0 holds the highest elevation. The field of
    view is closed at both boundaries: a point exactly on the upper bound
    falls into the last cell.
    """

    theta_min: float
    delta_theta: float
    phi_min: float
    delta_phi: float
    width: int = 512
    height: int = 64

    @property
    def theta_max(self) -> float:
        return self.theta_min + self.width * self.delta_theta

    @property
    def phi_max(self) -> float:
        return self.phi_min + self.height * self.delta_phi

    @classmethod
    def from_fov(
        cls,
        theta_min: float,
        theta_max: float,
        phi_min: float,
        phi_max: float,
        width: int = 512,
        height: int = 64,
    ) -> "ProjectionConfig":
        if theta_max <= theta_min or phi_max <= phi_min:
            raise InvalidArgumentError("field of view bounds must be increasing")
        return cls(
            theta_min=theta_min,
            delta_theta=(theta_max - theta_min) / width,
            phi_min=phi_min,
            delta_phi=(phi_max - phi_min) / height,
            width=width,
            height=height,
        )

    @classmethod
    def default(cls) -> "ProjectionConfig":
        # 90 deg azimuth around the boresight, elevation -25..+2 deg: a
        # 64-ring sensor geometry restricted to the frontal camera view.
        return cls.from_fov(
            theta_min=-math.pi / 4,
            theta_max=math.pi / 4,
            phi_min=math.radians(-25.0),
            phi_max=math.radians(2.0),
            width=512,
            height=64,
        )


@dataclass
class FrontalViewMap:
    """Five-channel cylindrical projection of one point cloud.

    ``channels`` is float32 [5, H, W] in order (reflection, range on the
    xy plane, forward = x, side = y, height = z). Cells no point landed in
    are zero in every channel, False in ``validity`` and -1 in
    ``source_index``. ``source_index`` refers into the point array the map
    was encoded from.
    """

    channels: np.ndarray
    validity: np.ndarray
    source_index: np.ndarray
    config: ProjectionConfig

    CHANNEL_NAMES = ("reflection", "range", "forward", "side", "height")

    @property
    def height(self) -> int:
        return int(self.channels.shape[1])

    @property
    def width(self) -> int:
        return int(self.channels.shape[2])

    def source_points(self) -> np.ndarray:
        """Per-cell (x, y, z) recovered from the forward/side/height
        channels, float64 [H, W, 3]. Valid cells only are meaningful."""
        return np.moveaxis(self.channels[2:5], 0, -1).astype(np.float64)


def observation_angles(p) -> tuple[float, float]:
    """Azimuth and elevation of a point: theta = atan2(y, x),
    phi = atan2(z, sqrt(x^2 + y^2))."""
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    if x == 0.0 and y == 0.0 and z == 0.0:
        raise UndefinedAngleError("observation angles are undefined at the origin")
    theta = math.atan2(y, x)
    phi = math.atan2(z, math.hypot(x, y))
    return theta, phi


def rot_z(angle: float) -> np.ndarray:
    """Right-handed rotation about the z axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation(theta: float, phi: float) -> np.ndarray:
    """Observation-frame rotation R = Rz(theta) @ Ry(phi).

    The y-axis rotation uses the convention that positive phi tilts +x
    toward +z, so R maps the unit x-axis onto the viewing ray with azimuth
    theta and elevation phi. R is orthonormal with det +1.
    """
    c, s = math.cos(phi), math.sin(phi)
    tilt = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    return rot_z(theta) @ tilt


def project(p, cfg: ProjectionConfig) -> tuple[int, int] | None:
    """Map a point to its (row, col) cell, or None when out of view.

    col = floor((theta - theta_min) / delta_theta); rows are computed the
    same way from elevation and then flipped so row 0 is the highest
    elevation. Both field-of-view boundaries are inclusive; the upper
    boundary folds into the last cell.
    """
    theta, phi = observation_angles(p)
    if not (cfg.theta_min <= theta <= cfg.theta_max):
        return None
    if not (cfg.phi_min <= phi <= cfg.phi_max):
        return None
    col = min(int((theta - cfg.theta_min) / cfg.delta_theta), cfg.width - 1)
    row_up = min(int((phi - cfg.phi_min) / cfg.delta_phi), cfg.height - 1)
    return cfg.height - 1 - row_up, col


def cell_center_angles(row: int, col: int, cfg: ProjectionConfig) -> tuple[float, float]:
    """Azimuth/elevation of a cell center (inverse of project up to
    quantization)."""
    theta = cfg.theta_min + (col + 0.5) * cfg.delta_theta
    phi = cfg.phi_min + (cfg.height - 1 - row + 0.5) * cfg.delta_phi
    return theta, phi


def encode_frontal_view(points: np.ndarray, cfg: ProjectionConfig) -> FrontalViewMap:
    """Scatter a point cloud into the five-channel frontal-view map.

    ``points`` is [N, 4] (x, y, z, reflectance). When several points land
    in one cell the nearest (smallest xy range) wins; ties go to the
    lowest point index. Callers are expected to range-crop beforehand.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    h, w = cfg.height, cfg.width
    channels = np.zeros((5, h, w), dtype=np.float32)
    validity = np.zeros((h, w), dtype=bool)
    source_index = np.full((h, w), -1, dtype=np.int64)
    if len(points) == 0:
        return FrontalViewMap(channels, validity, source_index, cfg)

    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    rng_xy = np.hypot(x, y)
    with np.errstate(invalid="ignore"):
        theta = np.arctan2(y, x)
        phi = np.arctan2(z, rng_xy)
    at_origin = (x == 0) & (y == 0) & (z == 0)
    in_view = (
        ~at_origin
        & (theta >= cfg.theta_min)
        & (theta <= cfg.theta_max)
        & (phi >= cfg.phi_min)
        & (phi <= cfg.phi_max)
    )
    idx = np.nonzero(in_view)[0]
    if idx.size == 0:
        return FrontalViewMap(channels, validity, source_index, cfg)

    col = np.minimum(
        ((theta[idx] - cfg.theta_min) / cfg.delta_theta).astype(np.int64), w - 1
    )
    row_up = np.minimum(
        ((phi[idx] - cfg.phi_min) / cfg.delta_phi).astype(np.int64), h - 1
    )
    row = h - 1 - row_up

    # Write farthest first so the nearest point in each cell lands last;
    # among equal ranges the lowest original index wins.
    order = np.lexsort((idx, rng_xy[idx]))[::-1]
    sel = idx[order]
    r, c = row[order], col[order]
    channels[0, r, c] = points[sel, 3]
    channels[1, r, c] = rng_xy[sel]
    channels[2, r, c] = x[sel]
    channels[3, r, c] = y[sel]
    channels[4, r, c] = z[sel]
    validity[r, c] = True
    source_index[r, c] = sel
    return FrontalViewMap(channels, validity, source_index, cfg)


@dataclass
class Box3D:
    """Oriented 3D box stored as its 8 corners (float64 [8, 3]) in the
    fixed corner order, plus a class label."""

    corners: np.ndarray
    label: int = BACKGROUND

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=np.float64).reshape(8, 3)

    @classmethod
    def from_center_dims_yaw(
        cls, center, dims, yaw: float, label: int = BACKGROUND
    ) -> "Box3D":
        """Build a box from center (x, y, z), dims (length, width,
        height) and heading yaw about z (heading = +x at yaw 0)."""
        center = np.asarray(center, dtype=np.float64)
        half = 0.5 * np.asarray(dims, dtype=np.float64)
        local = _CORNER_SIGNS * half
        return cls(local @ rot_z(yaw).T + center, label)

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    def footprint(self) -> np.ndarray:
        """Top-face corner xy coordinates, [4, 2], traversing the
        boundary in order."""
        return self.corners[list(TOP_FACE), :2]

    def dims_yaw(self) -> tuple[np.ndarray, float]:
        """Recover (length, width, height) and yaw from the corners.
        Exact for parallelepipeds; a least-squares summary otherwise."""
        c = self.corners
        front = c[:4].mean(axis=0)
        rear = c[4:].mean(axis=0)
        left = c[[0, 2, 4, 6]].mean(axis=0)
        right = c[[1, 3, 5, 7]].mean(axis=0)
        top = c[[0, 1, 4, 5]].mean(axis=0)
        bottom = c[[2, 3, 6, 7]].mean(axis=0)
        heading = front - rear
        dims = np.array(
            [
                float(np.linalg.norm(heading)),
                float(np.linalg.norm(left - right)),
                float(np.linalg.norm(top - bottom)),
            ]
        )
        return dims, math.atan2(heading[1], heading[0])

    def max_edge_asymmetry(self) -> float:
        """Largest mismatch between opposite edges; ~0 for a valid
        parallelepiped."""
        c = self.corners
        worst = 0.0
        # Edge pairs along each local axis; opposite edges must match.
        for a, b, a2, b2 in [
            (0, 4, 1, 5), (2, 6, 3, 7),  # length edges
            (0, 1, 2, 3), (4, 5, 6, 7),  # width edges
            (0, 2, 1, 3), (4, 6, 5, 7),  # height edges
        ]:
            d = np.linalg.norm((c[a] - c[b]) - (c[a2] - c[b2]))
            worst = max(worst, float(d))
        return worst

    def rotated_z(self, angle: float) -> "Box3D":
        return Box3D(self.corners @ rot_z(angle).T, self.label)

    def translated(self, offset) -> "Box3D":
        return Box3D(self.corners + np.asarray(offset, dtype=np.float64), self.label)


def encode_box(p, box: Box3D) -> np.ndarray:
    """Corner-offset encoding of a box relative to an observing point.

    Each corner offset is the corner position expressed in the point's
    observation frame: R^T (corner - p) with R = rotation(theta, phi) of
    the point. The eight offsets concatenate to a 24-vector in corner
    order. Because the frame turns with the viewing ray, the encoding is
    invariant under global rotations about z.
    """
    theta, phi = observation_angles(p)
    r = rotation(theta, phi)
    origin = np.asarray([p[0], p[1], p[2]], dtype=np.float64)
    return ((box.corners - origin) @ r).reshape(24)


def decode_box(p, encoding: np.ndarray, label: int = BACKGROUND) -> Box3D:
    """Inverse of encode_box: corners = R c' + p."""
    theta, phi = observation_angles(p)
    r = rotation(theta, phi)
    offsets = np.asarray(encoding, dtype=np.float64).reshape(8, 3)
    origin = np.asarray([p[0], p[1], p[2]], dtype=np.float64)
    return Box3D(offsets @ r.T + origin, label)
