"""BEV grid geometry, ego frames, polylines and rasterization.

Conventions used throughout the package:

* the ego vehicle sits at the centre of cell ``(rows // 2, cols // 2)`` and
  faces ``+x``;
* columns run along ``x`` (longitudinal, travel direction), rows along ``y``
  (lateral), so the centre of cell ``(i, j)`` is
  ``((j - cols/2) * res, (i - rows/2) * res)``;
* semantic channels are ``[divider, ped_crossing, boundary, background]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

DIVIDER = 0
PED_CROSSING = 1
BOUNDARY = 2
BACKGROUND = 3
NUM_CLASSES = 3
CLASS_NAMES = ("divider", "ped_crossing", "boundary")

# higher paints over lower
_PRIORITY = {BOUNDARY: 1, DIVIDER: 2, PED_CROSSING: 3}


@dataclass(frozen=True)
class GridSpec:
    range_forward_m: float
    range_lateral_m: float
    resolution_m: float
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0 or self.resolution_m <= 0:
            raise ValueError(f"degenerate grid: {self}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` coordinate vectors of column and row centres."""
        x = (np.arange(self.cols) - self.cols // 2) * self.resolution_m
        y = (np.arange(self.rows) - self.rows // 2) * self.resolution_m
        return x, y

    def extent(self) -> tuple[float, float, float, float]:
        """Closed clipping box ``(xmin, xmax, ymin, ymax)`` in metres."""
        hx, hy = self.range_forward_m / 2, self.range_lateral_m / 2
        return (-hx, hx, -hy, hy)

    def downsample(self, factor: int) -> "GridSpec":
        if self.rows % factor or self.cols % factor:
            raise ValueError(f"factor {factor} does not divide {self.rows}x{self.cols}")
        return GridSpec(self.range_forward_m, self.range_lateral_m,
                        self.resolution_m * factor, self.rows // factor, self.cols // factor)

    def to_dict(self) -> dict:
        return {"range_forward_m": self.range_forward_m, "range_lateral_m": self.range_lateral_m,
                "resolution_m": self.resolution_m}


def grid_for_range(range_forward_m: float, range_lateral_m: float,
                   resolution_m: float) -> GridSpec:
    """Build the grid covering an ego-centred window.

    >>> g = grid_for_range(60, 30, 0.15)
    >>> (g.rows, g.cols)
    (200, 400)
    """
    for name, v in (("range_forward_m", range_forward_m),
                    ("range_lateral_m", range_lateral_m),
                    ("resolution_m", resolution_m)):
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{name} must be positive, got {v}")
    cols = round(range_forward_m / resolution_m)
    rows = round(range_lateral_m / resolution_m)
    if abs(cols * resolution_m - range_forward_m) > 1e-6 or \
            abs(rows * resolution_m - range_lateral_m) > 1e-6:
        raise ValueError(f"ranges {range_forward_m}x{range_lateral_m} are not "
                         f"divisible by resolution {resolution_m}")
    return GridSpec(float(range_forward_m), float(range_lateral_m), float(resolution_m),
                    rows, cols)


@dataclass(frozen=True)
class EgoPose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "heading": self.heading}


def normalize_angle(a: float) -> float:
    """Wrap an angle into ``(-pi, pi]``."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


def world_to_ego(points, pose: EgoPose) -> np.ndarray:
    """Express world-frame points in the ego frame (ego faces +x)."""
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    dx = p[..., 0] - pose.x
    dy = p[..., 1] - pose.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def ego_to_world(points, pose: EgoPose) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    x = c * p[..., 0] - s * p[..., 1] + pose.x
    y = s * p[..., 0] + c * p[..., 1] + pose.y
    return np.stack([x, y], axis=-1)


@dataclass(frozen=True, eq=False)
class Polyline:
    """Ordered 2-D point sequence with a class id (and an optional OSM tag)."""

    points: np.ndarray
    class_id: int
    tag: str | None = None
    confidence: float | None = field(default=None, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError("a polyline needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline points must be finite")
        step = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(step <= 1e-9):
            raise ValueError("consecutive polyline points coincide")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def length(self) -> float:
        return float(np.hypot(*np.diff(self.points, axis=0).T).sum())

    def to_dict(self) -> dict:
        d = {"class": int(self.class_id), "points": self.points.tolist()}
        if self.tag is not None:
            d["category"] = self.tag
        if self.confidence is not None:
            d["confidence"] = float(self.confidence)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Polyline":
        return cls(np.asarray(d["points"], dtype=np.float64), int(d["class"]),
                   d.get("category"), d.get("confidence"))


def dedupe_points(points, tol: float = 1e-9) -> np.ndarray:
    """Drop consecutive points closer than ``tol``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return pts
    keep = [0]
    for i in range(1, len(pts)):
        if math.hypot(*(pts[i] - pts[keep[-1]])) > tol:
            keep.append(i)
    return pts[keep]


def polylines_to_json(polylines: Iterable[Polyline]) -> str:
    return json.dumps({"polylines": [p.to_dict() for p in polylines]}, sort_keys=True)


def polylines_from_json(text: str) -> list[Polyline]:
    doc = json.loads(text)
    return [Polyline.from_dict(d) for d in doc["polylines"]]


def save_polylines(path, polylines: Iterable[Polyline]) -> None:
    Path(path).write_text(polylines_to_json(polylines))


def load_polylines(path) -> list[Polyline]:
    return polylines_from_json(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class SemanticRaster:
    """Per-cell class scores on a grid, shape ``rows x cols x (Nc+1)``."""

    grid: GridSpec
    values: np.ndarray
    kind: str = "labels"

    def __post_init__(self):
        if self.kind not in ("labels", "logits", "probabilities"):
            raise ValueError(f"unknown raster kind {self.kind!r}")
        if self.values.shape != (self.grid.rows, self.grid.cols, NUM_CLASSES + 1):
            raise ShapeError(f"raster shape {self.values.shape} does not match grid "
                             f"{self.grid.rows}x{self.grid.cols}x{NUM_CLASSES + 1}")

    @classmethod
    def from_labels(cls, grid: GridSpec, labels: np.ndarray) -> "SemanticRaster":
        return cls(grid, one_hot(labels), "labels")

    def label_map(self) -> np.ndarray:
        return np.argmax(self.values, axis=-1).astype(np.int8)


def one_hot(labels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``(..., )`` integer labels to ``(..., Nc+1)`` one-hot."""
    return np.eye(NUM_CLASSES + 1, dtype=dtype)[np.asarray(labels, dtype=np.int64)]


def _segment_distance(px, py, a, b):
    """Distance from points ``(px, py)`` to segment ``a-b``."""
    dx, dy = b[0] - a[0], b[1] - a[1]
    vx, vy = px - a[0], py - a[1]
    ll = dx * dx + dy * dy
    t = np.clip((vx * dx + vy * dy) / ll, 0.0, 1.0) if ll > 0 else 0.0
    return np.hypot(vx - t * dx, vy - t * dy)


def rasterize_mask(polylines: Sequence[Polyline], grid: GridSpec,
                   thickness_m: float) -> np.ndarray:
    """Boolean mask of cells whose centre lies within ``thickness/2`` of any segment."""
    if thickness_m < 0:
        raise ValueError("thickness must be non-negative")
    mask = np.zeros(grid.shape, dtype=bool)
    res, h = grid.resolution_m, thickness_m / 2.0
    c0, r0 = grid.cols // 2, grid.rows // 2
    for pl in polylines:
        pts = pl.points
        for a, b in zip(pts[:-1], pts[1:]):
            j_lo = max(0, math.floor((min(a[0], b[0]) - h) / res) + c0 - 1)
            j_hi = min(grid.cols - 1, math.ceil((max(a[0], b[0]) + h) / res) + c0 + 1)
            i_lo = max(0, math.floor((min(a[1], b[1]) - h) / res) + r0 - 1)
            i_hi = min(grid.rows - 1, math.ceil((max(a[1], b[1]) + h) / res) + r0 + 1)
            if j_lo > j_hi or i_lo > i_hi:
                continue
            xs = (np.arange(j_lo, j_hi + 1) - c0) * res
            ys = (np.arange(i_lo, i_hi + 1) - r0) * res
            d = _segment_distance(xs[None, :], ys[:, None], a, b)
            mask[i_lo:i_hi + 1, j_lo:j_hi + 1] |= d <= h
    return mask


def rasterize_labels(polylines: Sequence[Polyline], grid: GridSpec,
                     thickness_m: float) -> np.ndarray:
    """Integer label map; overlaps resolved as ped_crossing > divider > boundary."""
    labels = np.full(grid.shape, BACKGROUND, dtype=np.int8)
    for cls in sorted(_PRIORITY, key=_PRIORITY.get):
        members = [p for p in polylines if p.class_id == cls]
        if members:
            labels[rasterize_mask(members, grid, thickness_m)] = cls
    return labels


def rasterize_polylines(polylines: Sequence[Polyline], grid: GridSpec,
                        thickness_m: float = 0.3) -> SemanticRaster:
    return SemanticRaster.from_labels(grid, rasterize_labels(polylines, grid, thickness_m))
