"""Frontal-view map interchange format.

Layout (little-endian): magic "LMFV", u32 version, u32 height,
u32 width, then 5*H*W float32 channel data (channel-major, row-major
within a channel) and H*W u8 validity flags.

The file does not carry the projection geometry or source-point
indices; loading attaches the supplied (or default) projection config
and leaves ``source_index`` unset. Source coordinates remain available
through the forward/side/height channels.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import FrontalViewMap, ProjectionConfig

MAP_MAGIC = b"LMFV"
MAP_VERSION = 1


def save_map(fvmap: FrontalViewMap, path) -> None:
    h, w = fvmap.height, fvmap.width
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<III", MAP_VERSION, h, w))
        f.write(np.ascontiguousarray(fvmap.channels, dtype="<f4").tobytes())
        f.write(fvmap.validity.astype(np.uint8).tobytes())


def load_map(path, config: ProjectionConfig | None = None) -> FrontalViewMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: too short for a map file header")
    if raw[:4] != MAP_MAGIC:
        raise FormatError(f"{path}: bad magic: not a frontal-view map file")
    version, h, w = struct.unpack("<III", raw[4:16])
    if version != MAP_VERSION:
        raise FormatError(f"{path}: unsupported map version {version}")
    expected = 16 + 5 * h * w * 4 + h * w
    if len(raw) != expected:
        raise FormatError(
            f"{path}: size {len(raw)} does not match header ({expected} expected)"
        )
    channels = (
        np.frombuffer(raw, dtype="<f4", count=5 * h * w, offset=16)
        .reshape(5, h, w)
        .copy()
    )
    validity = (
        np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=16 + 5 * h * w * 4)
        .reshape(h, w)
        .astype(bool)
    )
    if config is None:
        base = ProjectionConfig.default()
        config = ProjectionConfig.from_fov(
            base.theta_min, base.theta_max, base.phi_min, base.phi_max, w, h
        )
    source_index = np.where(validity, 0, -1).astype(np.int64)
    return FrontalViewMap(channels, validity, source_index, config)
