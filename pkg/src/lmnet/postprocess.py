"""From network output maps to final detections.

Candidates are per-pixel decoded boxes. Each candidate is scored by
counting same-class candidates (itself included) whose corner distance

    d(i, j) = ||c1_i - c1_j|| + ||c8_i - c8_j||

falls strictly below the class's neighbor radius, where c1/c8 are the
front-top-left and rear-bottom-right corners. Suppression then discards
low-support candidates, sorts by descending score and greedily removes
everything within the class's suppression threshold of each kept box.
Classes never suppress each other.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .geometry import BACKGROUND, CLASS_NAMES, Box3D, FrontalViewMap

_DEFAULT_SUPPRESSION = {"car": 0.7, "pedestrian": 0.3, "cyclist": 0.3}


@dataclass(frozen=True)
class NmsConfig:
    """Per-class distance thresholds (meters) and the support cutoff.

    ``neighbor_radius`` bounds the scoring neighborhood; it defaults to
    twice the suppression threshold. Candidates scoring below
    ``min_score`` (self included) are discarded as outliers.
    """

    suppression: dict = field(default_factory=lambda: dict(_DEFAULT_SUPPRESSION))
    neighbor_radius: dict = field(
        default_factory=lambda: {k: 2.0 * v for k, v in _DEFAULT_SUPPRESSION.items()}
    )
    min_score: int = 5
    confidence_threshold: float = 0.5

    def __post_init__(self):
        if self.min_score < 1:
            raise InvalidArgumentError("min_score must be >= 1")
        for table in (self.suppression, self.neighbor_radius):
            for name, value in table.items():
                if value <= 0:
                    raise InvalidArgumentError(f"radius for {name!r} must be positive")

    def suppression_for(self, label: int) -> float:
        return float(self.suppression[CLASS_NAMES[label]])

    def radius_for(self, label: int) -> float:
        return float(self.neighbor_radius[CLASS_NAMES[label]])


@dataclass
class Candidate:
    """One decoded box candidate with its provenance pixel."""

    box: Box3D
    label: int
    confidence: float
    pixel: tuple[int, int]
    score: int = 0

    def pixel_flat(self, width: int) -> int:
        return self.pixel[0] * width + self.pixel[1]


def corner_distance(a: Box3D, b: Box3D) -> float:
    """Sum of euclidean distances between the two anchor corners."""
    d1 = np.linalg.norm(a.corners[0] - b.corners[0])
    d8 = np.linalg.norm(a.corners[7] - b.corners[7])
    return float(d1 + d8)


def extract_candidates(
    objectness: np.ndarray,
    corners: np.ndarray,
    fvmap: FrontalViewMap,
    cfg: NmsConfig,
) -> list[Candidate]:
    """Decode a box at every valid pixel whose argmax class is an object
    class with probability >= the confidence threshold."""
    labels = objectness.argmax(axis=0)
    confidence = objectness.max(axis=0)
    pick = (
        fvmap.validity
        & (labels != BACKGROUND)
        & (confidence >= cfg.confidence_threshold)
    )
    rows, cols = np.nonzero(pick)
    sources = fvmap.source_points()
    out: list[Candidate] = []
    for r, c in zip(rows, cols):
        label = int(labels[r, c])
        point = sources[r, c]
        rot = _rotation_at(point)
        offsets = corners[:, r, c].astype(np.float64).reshape(8, 3)
        box = Box3D(offsets @ rot.T + point, label)
        out.append(
            Candidate(box, label, float(confidence[r, c]), (int(r), int(c)))
        )
    return out


def _rotation_at(point: np.ndarray) -> np.ndarray:
    # Inline of geometry.rotation(observation_angles(p)) for the decode
    # hot loop.
    x, y, z = point
    theta = math.atan2(y, x)
    phi = math.atan2(z, math.hypot(x, y))
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(phi), math.sin(phi)
    return np.array(
        [
            [ct * cp, -st, -ct * sp],
            [st * cp, ct, -st * sp],
            [sp, 0.0, cp],
        ]
    )


def score_candidates(candidates: list[Candidate], cfg: NmsConfig) -> list[Candidate]:
    """Set each candidate's score to its same-class neighbor count
    (itself included) within the class's neighbor radius (strict)."""
    by_label: dict[int, list[int]] = {}
    for i, cand in enumerate(candidates):
        by_label.setdefault(cand.label, []).append(i)
    for label, idxs in by_label.items():
        radius = cfg.radius_for(label)
        c1 = np.array([candidates[i].box.corners[0] for i in idxs])
        c8 = np.array([candidates[i].box.corners[7] for i in idxs])
        d = np.linalg.norm(c1[:, None] - c1[None], axis=-1)
        d += np.linalg.norm(c8[:, None] - c8[None], axis=-1)
        counts = (d < radius).sum(axis=1)
        for i, count in zip(idxs, counts):
            candidates[i].score = int(count)
    return candidates


def nms(candidates: list[Candidate], cfg: NmsConfig, width: int = 512) -> list[Candidate]:
    """Greedy distance suppression over scored candidates, per class.

    Ordering is total — descending score, then descending confidence,
    then ascending flat pixel index — so the result is independent of
    the input order.
    """
    kept: list[Candidate] = []
    for label in sorted({c.label for c in candidates}):
        group = [c for c in candidates if c.label == label and c.score >= cfg.min_score]
        group.sort(key=lambda c: (-c.score, -c.confidence, c.pixel_flat(width)))
        threshold = cfg.suppression_for(label)
        alive = list(group)
        while alive:
            top = alive.pop(0)
            kept.append(top)
            alive = [c for c in alive if corner_distance(top.box, c.box) >= threshold]
    return kept


# ---------------------------------------------------------------------------
# Bird's-eye-view IoU


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject by a convex CCW clip
    polygon."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        if not output:
            break
        inputs = output
        output = []
        prev = inputs[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
        for curr in inputs:
            curr_in = edge[0] * (curr[1] - a[1]) - edge[1] * (curr[0] - a[0]) >= 0
            if curr_in != prev_in:
                d = curr - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                if denom != 0:
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    output.append(prev + t * d)
            if curr_in:
                output.append(curr)
            prev, prev_in = curr, curr_in
    return np.array(output) if output else np.zeros((0, 2))


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly if _polygon_area(poly) >= 0 else poly[::-1]


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection over union of the two boxes' ground-plane footprints
    via convex polygon clipping. Degenerate footprints give 0."""
    pa = _ccw(a.footprint())
    pb = _ccw(b.footprint())
    area_a = _polygon_area(pa)
    area_b = _polygon_area(pb)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter_poly = _clip_polygon(pa, pb)
    inter = abs(_polygon_area(inter_poly)) if len(inter_poly) >= 3 else 0.0
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(
    detections: dict[str, list[Candidate]],
    ground_truth: dict[str, list[Box3D]],
    iou_threshold: float = 0.5,
) -> dict[str, dict[str, float]]:
    """Greedy confidence-ordered matching per class across scenes.

    A detection matches the best still-unmatched ground-truth box of its
    class in its scene when their BEV IoU reaches the threshold. Returns
    per-class precision, recall and 11-point interpolated AP.
    """
    results: dict[str, dict[str, float]] = {}
    for label in (1, 2, 3):
        dets = []
        for scene_id in sorted(detections):
            for order, cand in enumerate(detections[scene_id]):
                if cand.label == label:
                    dets.append((-cand.confidence, scene_id, order, cand))
        dets.sort(key=lambda t: t[:3])
        gts = {
            scene_id: [b for b in boxes if b.label == label]
            for scene_id, boxes in ground_truth.items()
        }
        total_gt = sum(len(v) for v in gts.values())
        matched: dict[str, set[int]] = {k: set() for k in gts}

        tp_flags = []
        for _, scene_id, _, cand in dets:
            boxes = gts.get(scene_id, [])
            best_iou, best_idx = 0.0, -1
            for gi, gt_box in enumerate(boxes):
                if gi in matched.get(scene_id, set()):
                    continue
                iou = bev_iou(cand.box, gt_box)
                if iou > best_iou:
                    best_iou, best_idx = iou, gi
            if best_idx >= 0 and best_iou >= iou_threshold:
                matched[scene_id].add(best_idx)
                tp_flags.append(1)
            else:
                tp_flags.append(0)

        tp = np.cumsum(tp_flags) if tp_flags else np.zeros(0)
        fp = np.cumsum([1 - f for f in tp_flags]) if tp_flags else np.zeros(0)
        precisions = tp / np.maximum(tp + fp, 1)
        recalls = tp / total_gt if total_gt else np.zeros_like(tp)

        ap = 0.0
        if total_gt and len(tp_flags):
            for r in np.linspace(0.0, 1.0, 11):
                mask = recalls >= r
                ap += float(precisions[mask].max()) / 11.0 if mask.any() else 0.0
        results[CLASS_NAMES[label]] = {
            "precision": float(precisions[-1]) if len(tp_flags) else 0.0,
            "recall": float(recalls[-1]) if total_gt and len(tp_flags) else 0.0,
            "ap": ap,
            "ground_truth": float(total_gt),
            "detections": float(len(tp_flags)),
        }
    return results


# ---------------------------------------------------------------------------
# Detection files


def write_detections_jsonl(candidates: list[Candidate], path) -> None:
    """One JSON object per detection carrying the raw 8-corner box."""
    lines = []
    for cand in candidates:
        lines.append(
            json.dumps(
                {
                    "class": CLASS_NAMES[cand.label],
                    "confidence": round(float(cand.confidence), 6),
                    "score": int(cand.score),
                    "pixel": list(cand.pixel),
                    "corners": [[round(float(v), 6) for v in row] for row in cand.box.corners],
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_detections_jsonl(path) -> list[Candidate]:
    name_to_id = {name: i for i, name in enumerate(CLASS_NAMES)}
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        box = Box3D(np.array(obj["corners"]), name_to_id[obj["class"]])
        out.append(
            Candidate(
                box,
                name_to_id[obj["class"]],
                float(obj["confidence"]),
                tuple(obj.get("pixel", (0, 0))),
                int(obj.get("score", 0)),
            )
        )
    return out
