"""SD map ingestion: OSM subset parsing, projection, windowing and misalignment."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError
from .grid import (EgoPose, GridSpec, Polyline, dedupe_points, rasterize_mask,
                   world_to_ego)

EARTH_RADIUS_M = 6378137.0

# integer codes used for the "class" field when SD polylines are serialized
HIGHWAY_CODES = {
    "motorway": 0, "trunk": 1, "primary": 2, "secondary": 3, "tertiary": 4,
    "residential": 5, "service": 6, "unclassified": 7,
}
OTHER_HIGHWAY = 8


class OsmParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Way:
    way_id: str
    node_ids: tuple[str, ...]
    highway: str


@dataclass
class RoadGraph:
    nodes: dict[str, tuple[float, float]] = field(default_factory=dict)
    ways: list[Way] = field(default_factory=list)

    def __post_init__(self):
        for w in self.ways:
            if len(w.node_ids) < 2:
                raise DataError(f"way {w.way_id} has fewer than 2 nodes")
            missing = [n for n in w.node_ids if n not in self.nodes]
            if missing:
                raise DataError(f"way {w.way_id} references missing node {missing[0]}")


@dataclass
class SdMap:
    polylines: list[Polyline] = field(default_factory=list)
    source_categories: frozenset[str] = frozenset()

    def total_length_m(self) -> float:
        return sum(p.length() for p in self.polylines)


def parse_osm(text: str) -> RoadGraph:
    """Parse the node/way/tag subset of OSM XML.

    Only ways carrying a ``highway`` tag are kept; other elements are ignored.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise OsmParseError(str(exc), exc.position[0]) from None
    nodes: dict[str, tuple[float, float]] = {}
    ways: list[Way] = []
    for el in root:
        if el.tag == "node":
            try:
                nodes[el.attrib["id"]] = (float(el.attrib["lat"]), float(el.attrib["lon"]))
            except (KeyError, ValueError) as exc:
                raise OsmParseError(f"bad node element: {exc}") from None
        elif el.tag == "way":
            if "id" not in el.attrib:
                raise OsmParseError("way element without an id")
            highway = None
            refs = []
            for child in el:
                if child.tag == "nd":
                    if "ref" not in child.attrib:
                        raise OsmParseError(f"way {el.attrib['id']}: nd element without a ref")
                    refs.append(child.attrib["ref"])
                elif child.tag == "tag" and child.attrib.get("k") == "highway":
                    highway = child.attrib.get("v", "")
            if highway is not None:
                ways.append(Way(el.attrib["id"], tuple(refs), highway))
    for w in ways:
        for ref in w.node_ids:
            if ref not in nodes:
                raise DataError(f"way {w.way_id} references missing node {ref}")
    return RoadGraph(nodes, ways)


def serialize_osm(graph: RoadGraph) -> str:
    root = ET.Element("osm", version="0.6")
    for nid, (lat, lon) in graph.nodes.items():
        ET.SubElement(root, "node", id=nid, lat=repr(lat), lon=repr(lon))
    for w in graph.ways:
        el = ET.SubElement(root, "way", id=w.way_id)
        for ref in w.node_ids:
            ET.SubElement(el, "nd", ref=ref)
        ET.SubElement(el, "tag", k="highway", v=w.highway)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")


def filter_categories(graph: RoadGraph, include_service: bool = False) -> RoadGraph:
    """Drop ``highway=service`` ways unless ``include_service`` is set."""
    ways = [w for w in graph.ways if include_service or w.highway != "service"]
    return RoadGraph(dict(graph.nodes), ways)


def project_latlon(lat: float, lon: float, origin_lat: float,
                   origin_lon: float) -> tuple[float, float]:
    """Local equirectangular projection to metres east (x) / north (y) of the origin."""
    for la, lo in ((lat, lon), (origin_lat, origin_lon)):
        if not (abs(la) <= 90 and abs(lo) <= 180):
            raise ValueError(f"coordinate out of range: lat={la}, lon={lo}")
    x = EARTH_RADIUS_M * math.radians(lon - origin_lon) * math.cos(math.radians(origin_lat))
    y = EARTH_RADIUS_M * math.radians(lat - origin_lat)
    return x, y


def unproject_xy(x: float, y: float, origin_lat: float, origin_lon: float) -> tuple[float, float]:
    lat = origin_lat + math.degrees(y / EARTH_RADIUS_M)
    lon = origin_lon + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(origin_lat))))
    return lat, lon


def clip_segment(p0, p1, box) -> tuple[np.ndarray, np.ndarray] | None:
    """Liang-Barsky clipping of segment ``p0-p1`` to ``(xmin, xmax, ymin, ymax)``."""
    xmin, xmax, ymin, ymax = box
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, p0[0] - xmin), (dx, xmax - p0[0]),
                 (-dy, p0[1] - ymin), (dy, ymax - p0[1])):
        if p == 0:
            if q < 0:
                return None
            continue
        t = q / p
        if p < 0:
            if t > t1:
                return None
            t0 = max(t0, t)
        else:
            if t < t0:
                return None
            t1 = min(t1, t)
    a = np.array([p0[0] + t0 * dx, p0[1] + t0 * dy]) if t0 > 0 else np.array(p0, dtype=float)
    b = np.array([p0[0] + t1 * dx, p0[1] + t1 * dy]) if t1 < 1 else np.array(p1, dtype=float)
    return a, b


def clip_polyline(points, box) -> list[np.ndarray]:
    """Clip a point chain to a box; returns the inside pieces (each >= 2 points)."""
    pts = np.asarray(points, dtype=np.float64)
    pieces: list[list[np.ndarray]] = []
    current: list[np.ndarray] = []
    for p0, p1 in zip(pts[:-1], pts[1:]):
        seg = clip_segment(p0, p1, box)
        if seg is None:
            if current:
                pieces.append(current)
                current = []
            continue
        a, b = seg
        if current and np.array_equal(current[-1], a):
            current.append(b)
        else:
            if current:
                pieces.append(current)
            current = [a, b]
        if not np.array_equal(b, p1):
            pieces.append(current)
            current = []
    if current:
        pieces.append(current)
    out = []
    for piece in pieces:
        clean = dedupe_points(piece)
        if len(clean) >= 2:
            out.append(clean)
    return out


def extract_sd_window(graph: RoadGraph, pose: EgoPose, origin_latlon: tuple[float, float],
                      grid: GridSpec, margin_m: float = 0.0) -> SdMap:
    """Project ways, move them to the ego frame and clip to the grid box (+ margin)."""
    xmin, xmax, ymin, ymax = grid.extent()
    box = (xmin - margin_m, xmax + margin_m, ymin - margin_m, ymax + margin_m)
    olat, olon = origin_latlon
    polylines = []
    cats = set()
    for w in graph.ways:
        world = np.array([project_latlon(*graph.nodes[n], olat, olon) for n in w.node_ids])
        ego = world_to_ego(world, pose)
        for piece in clip_polyline(ego, box):
            polylines.append(Polyline(piece, HIGHWAY_CODES.get(w.highway, OTHER_HIGHWAY), w.highway))
            cats.add(w.highway)
    return SdMap(polylines, frozenset(cats))


def sdmap_from_world_polylines(polylines: Sequence[Polyline], pose: EgoPose, grid: GridSpec,
                               margin_m: float = 0.0) -> SdMap:
    """Same windowing as :func:`extract_sd_window` for polylines already in metres."""
    xmin, xmax, ymin, ymax = grid.extent()
    box = (xmin - margin_m, xmax + margin_m, ymin - margin_m, ymax + margin_m)
    out, cats = [], set()
    for pl in polylines:
        for piece in clip_polyline(world_to_ego(pl.points, pose), box):
            out.append(Polyline(piece, pl.class_id, pl.tag))
            cats.add(pl.tag)
    return SdMap(out, frozenset(c for c in cats if c is not None))


def perturb_alignment(sdmap: SdMap, sigma_translation_m: float, sigma_rotation_rad: float,
                      seed: int) -> SdMap:
    """Apply one random rigid transform (rotation about ego, then shift) to every polyline."""
    if sigma_translation_m < 0 or sigma_rotation_rad < 0:
        raise ValueError("sigmas must be non-negative")
    if sigma_translation_m == 0 and sigma_rotation_rad == 0:
        return SdMap(list(sdmap.polylines), sdmap.source_categories)
    rng = np.random.default_rng(seed)
    tx, ty = rng.normal(0.0, sigma_translation_m, size=2) if sigma_translation_m > 0 else (0.0, 0.0)
    theta = rng.normal(0.0, sigma_rotation_rad) if sigma_rotation_rad > 0 else 0.0
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    moved = []
    for pl in sdmap.polylines:
        pts = pl.points @ rot.T + np.array([tx, ty])
        moved.append(Polyline(pts, pl.class_id, pl.tag))
    return SdMap(moved, sdmap.source_categories)


def rasterize_sd(sdmap: SdMap, grid_small: GridSpec) -> np.ndarray:
    """One-cell-thick binary centreline occupancy, shape ``rows x cols x 1``."""
    mask = rasterize_mask(sdmap.polylines, grid_small, grid_small.resolution_m)
    return mask[..., None].astype(np.float32)


def graph_stats(graph: RoadGraph) -> dict:
    """Way count and total length (km) of a road graph, projected about its first node."""
    if not graph.ways:
        return {"way_count": 0, "total_length_km": 0.0}
    olat, olon = graph.nodes[graph.ways[0].node_ids[0]]
    total = 0.0
    for w in graph.ways:
        xy = np.array([project_latlon(*graph.nodes[n], olat, olon) for n in w.node_ids])
        total += float(np.hypot(*np.diff(xy, axis=0).T).sum())
    return {"way_count": len(graph.ways), "total_length_km": total / 1000.0}


def format_stats(stats: dict) -> str:
    return (f"way_count: {stats['way_count']}\n"
            f"total_length_km: {stats['total_length_km']:.3f}\n")
