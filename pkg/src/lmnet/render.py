"""Grayscale / color renderings of maps and objectness as PGM/PPM files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import BACKGROUND, FrontalViewMap

CLASS_COLORS = {
    1: (230, 60, 60),    # car: red
    2: (60, 210, 60),    # pedestrian: green
    3: (80, 110, 240),   # cyclist: blue
}


def write_pgm(image: np.ndarray, path) -> None:
    """Binary PGM (P5) from a uint8 [H, W] image."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(image.tobytes())


def write_ppm(image: np.ndarray, path) -> None:
    """Binary PPM (P6) from a uint8 [H, W, 3] image."""
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(image.tobytes())


def channel_images(fvmap: FrontalViewMap) -> list[tuple[str, np.ndarray]]:
    """Per-channel grayscale images, min-max normalized over valid cells;
    invalid cells render black."""
    out = []
    valid = fvmap.validity
    for name, channel in zip(fvmap.CHANNEL_NAMES, fvmap.channels):
        img = np.zeros(channel.shape, dtype=np.uint8)
        if valid.any():
            values = channel[valid]
            lo, hi = float(values.min()), float(values.max())
            span = hi - lo if hi > lo else 1.0
            img[valid] = np.clip(
                255.0 * (channel[valid] - lo) / span, 0, 255
            ).astype(np.uint8)
        out.append((name, img))
    return out


def render_map(fvmap: FrontalViewMap, prefix) -> list[Path]:
    paths = []
    for name, img in channel_images(fvmap):
        path = Path(f"{prefix}.{name}.pgm")
        write_pgm(img, path)
        paths.append(path)
    return paths


def objectness_image(objectness: np.ndarray, validity: np.ndarray) -> np.ndarray:
    """Class-colored argmax map: background and invalid cells black."""
    labels = objectness.argmax(axis=0)
    img = np.zeros((*labels.shape, 3), dtype=np.uint8)
    for label, color in CLASS_COLORS.items():
        mask = validity & (labels == label)
        img[mask] = color
    return img


def render_objectness(objectness: np.ndarray, validity: np.ndarray, path) -> Path:
    path = Path(path)
    write_ppm(objectness_image(objectness, validity), path)
    return path
