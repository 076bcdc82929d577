"""Turn per-cell class scores into vector polyline instances.

Pipeline per class: threshold the softmax probability, thin the mask to a
one-cell skeleton (Zhang-Suen), walk the skeleton graph into paths, convert
cell centres to metres and simplify with Ramer-Douglas-Peucker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import NUM_CLASSES, GridSpec, Polyline, dedupe_points, one_hot
from .nn.functional import softmax

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MapInstance:
    polyline: Polyline
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> dict:
        """Polyline JSON record with the ``confidence`` field set."""
        return {**self.polyline.to_dict(), "confidence": float(self.confidence)}

    @classmethod
    def from_dict(cls, d: dict) -> "MapInstance":
        cid = int(d["class"])
        return cls(Polyline(np.asarray(d["points"], dtype=float), cid), cid,
                   float(d["confidence"]))


def extract_class_mask(logits: np.ndarray, class_id: int, threshold: float = 0.5) -> np.ndarray:
    """Cells whose softmax probability for ``class_id`` exceeds ``threshold``."""
    if not 0 <= class_id < logits.shape[-1]:
        raise ValueError(f"class id {class_id} out of range")
    return softmax(np.asarray(logits, dtype=np.float64), axis=-1)[..., class_id] > threshold


def connected_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label foreground components; labels 1..n in row-major order of first cell."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = EIGHT if connectivity == 8 else ndimage.generate_binary_structure(2, 1)
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=structure)
    return labels, int(n)


def _neighbours(img: np.ndarray) -> list[np.ndarray]:
    """P2..P9 (N, NE, E, SE, S, SW, W, NW) as arrays aligned with ``img``."""
    p = np.pad(img, 1)
    h, w = img.shape
    offs = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
    return [p[1 + di:1 + di + h, 1 + dj:1 + dj + w] for di, dj in offs]


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning to a one-cell-wide skeleton."""
    img = np.asarray(mask, dtype=bool).copy()
    if not img.any():
        return img
    while True:
        changed = False
        for step in (0, 1):
            n = [x.astype(np.uint8) for x in _neighbours(img)]
            p2, p3, p4, p5, p6, p7, p8, p9 = n
            b = sum(n)
            seq = n + [p2]
            a = sum(((seq[k] == 0) & (seq[k + 1] == 1)).astype(np.uint8) for k in range(8))
            if step == 0:
                c1, c2 = p2 * p4 * p6, p4 * p6 * p8
            else:
                c1, c2 = p2 * p4 * p8, p2 * p6 * p8
            drop = img & (b >= 2) & (b <= 6) & (a == 1) & (c1 == 0) & (c2 == 0)
            if drop.any():
                img &= ~drop
                changed = True
        if not changed:
            return img


def skeleton_graph(skel: np.ndarray) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """8-neighbour adjacency over skeleton cells, without redundant diagonals.

    A diagonal link is dropped when the two cells already connect through a
    shared 4-neighbour, so staircase corners do not look like junctions.
    """
    cells = set(map(tuple, np.argwhere(skel).tolist()))
    adj: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i, j in sorted(cells):
        nb = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if (di or dj) and (i + di, j + dj) in cells:
                    if di and dj and ((i + di, j) in cells or (i, j + dj) in cells):
                        continue
                    nb.append((i + di, j + dj))
        adj[(i, j)] = nb
    return adj


def trace_cells(skel: np.ndarray) -> list[list[tuple[int, int]]]:
    """Split the skeleton into cell paths.

    Paths run between endpoints and junctions (cells whose degree is not 2);
    what remains afterwards are closed loops, which are returned with the
    first cell repeated at the end. Isolated single cells yield no path.
    """
    adj = skeleton_graph(skel)
    used: set[frozenset] = set()
    paths = []

    def walk(start, nxt):
        path = [start, nxt]
        used.add(frozenset((start, nxt)))
        prev, cur = start, nxt
        while len(adj[cur]) == 2:
            cand = [c for c in adj[cur] if frozenset((cur, c)) not in used]
            if not cand:
                break
            prev, cur = cur, cand[0]
            used.add(frozenset((prev, cur)))
            path.append(cur)
        return path

    for cell in adj:
        if len(adj[cell]) != 2:
            for nb in adj[cell]:
                if frozenset((cell, nb)) not in used:
                    paths.append(walk(cell, nb))
    for cell in adj:
        for nb in adj[cell]:
            if frozenset((cell, nb)) not in used:
                paths.append(walk(cell, nb))
    return paths


def cells_to_points(cells, grid: GridSpec) -> np.ndarray:
    idx = np.asarray(cells, dtype=np.intp).reshape(-1, 2)
    x, y = grid.cell_centers()
    return np.stack([x[idx[:, 1]], y[idx[:, 0]]], axis=1)


def trace_polylines(skel: np.ndarray, grid: GridSpec, class_id: int = 0) -> list[Polyline]:
    return [Polyline(cells_to_points(p, grid), class_id) for p in trace_cells(skel)]


def _point_segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    den = float(ab @ ab)
    if den == 0.0:
        return np.hypot(*(pts - a).T)
    t = np.clip((pts - a) @ ab / den, 0.0, 1.0)
    return np.hypot(*(pts - (a + t[:, None] * ab)).T)


def simplify_points(points: np.ndarray, epsilon_m: float = 0.2) -> np.ndarray:
    """Ramer-Douglas-Peucker; endpoints always kept."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        return pts.copy()
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _point_segment_distance(pts[lo + 1:hi], pts[lo], pts[hi])
        k = int(np.argmax(d))
        if d[k] > epsilon_m:
            mid = lo + 1 + k
            keep[mid] = True
            stack.extend([(lo, mid), (mid, hi)])
    return pts[keep]


def simplify(polyline: Polyline, epsilon_m: float = 0.2) -> Polyline:
    return Polyline(simplify_points(polyline.points, epsilon_m), polyline.class_id, polyline.tag,
                    polyline.confidence)


def vectorize_probs(probs: np.ndarray, grid: GridSpec, threshold: float = 0.5,
                    epsilon_m: float = 0.2, min_length_m: float = 1.0) -> list[MapInstance]:
    """Instances for every foreground class from an ``H x W x 4`` probability raster.

    Traced paths shorter than ``min_length_m`` (skeleton spurs) are discarded.
    """
    if probs.shape[:2] != grid.shape:
        raise ValueError(f"raster {probs.shape[:2]} does not match grid {grid.shape}")
    out = []
    for c in range(NUM_CLASSES):
        skel = skeletonize(probs[..., c] > threshold)
        for cells in trace_cells(skel):
            pts = dedupe_points(simplify_points(cells_to_points(cells, grid), epsilon_m))
            if len(pts) < 2:
                continue
            poly = Polyline(pts, c)
            if poly.length() < min_length_m:
                continue
            rc = np.asarray(cells)
            conf = float(np.clip(probs[rc[:, 0], rc[:, 1], c].mean(), 0.0, 1.0))
            out.append(MapInstance(Polyline(pts, c, confidence=conf), c, conf))
    return out


def vectorize(logits: np.ndarray, grid: GridSpec, **kw) -> list[MapInstance]:
    return vectorize_probs(softmax(np.asarray(logits, dtype=np.float64), axis=-1), grid, **kw)


def vectorize_labels(labels: np.ndarray, grid: GridSpec, **kw) -> list[MapInstance]:
    """Instances from a hard label map (confidence 1), e.g. ground truth."""
    return vectorize_probs(one_hot(labels, np.float64), grid, **kw)


def instances_to_json(instances) -> str:
    import json

    return json.dumps({"polylines": [i.to_dict() for i in instances]}, sort_keys=True)
