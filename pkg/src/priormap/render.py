"""Label rasters to PPM (P6) images with a fixed palette."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import BACKGROUND, BOUNDARY, DIVIDER, PED_CROSSING, GridSpec, Polyline, rasterize_mask

PALETTE = np.zeros((4, 3), dtype=np.uint8)
PALETTE[DIVIDER] = (0, 255, 0)
PALETTE[PED_CROSSING] = (255, 0, 0)
PALETTE[BOUNDARY] = (0, 0, 255)
PALETTE[BACKGROUND] = (0, 0, 0)
SD_COLOR = np.array([255, 255, 255], dtype=np.uint8)


def colorize(labels: np.ndarray) -> np.ndarray:
    """``H x W`` labels -> ``H x W x 3`` uint8; row ``i`` of the raster is image row ``i``."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected a 2-D label map, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > BACKGROUND):
        raise ValueError("label values must lie in [0, 3]")
    return PALETTE[labels.astype(np.intp)]


def overlay_sd(image: np.ndarray, sd_polylines: Sequence[Polyline], grid: GridSpec) -> np.ndarray:
    """Paint SD centrelines (one cell wide) in white on top of ``image``."""
    out = image.copy()
    out[rasterize_mask(sd_polylines, grid, grid.resolution_m)] = SD_COLOR
    return out


def ppm_bytes(image: np.ndarray) -> bytes:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_ppm(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ppm_bytes(image))
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM (P6) file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
