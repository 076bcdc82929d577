"""Procedural road worlds, SD-map derivation, degraded BEV observations and datasets."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .grid import (BACKGROUND, BOUNDARY, DIVIDER, PED_CROSSING, EgoPose, GridSpec, Polyline,
                   dedupe_points, grid_for_range, rasterize_labels, world_to_ego)
from .nn.tensor_io import load_tensor, save_tensor
from .sdmap import (HIGHWAY_CODES, RoadGraph, SdMap, Way, perturb_alignment,
                    sdmap_from_world_polylines, unproject_xy)

LANE_CATEGORIES = {2: "residential", 3: "secondary", 4: "primary"}


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    extent_m: float = 600.0
    layout: str = "grid"
    intersection_spacing_m: float = 110.0
    jitter_m: float = 12.0
    edge_drop_prob: float = 0.25
    bend_amplitude_m: float = 4.0
    lane_width_m: float = 3.5
    lanes_min: int = 2
    lanes_max: int = 4
    crossing_width_m: float = 4.0
    crossing_setback_m: float = 1.5
    service_spurs: int = 0
    base_dropout: float = 0.05
    range_decay_per_m: float = 0.04
    blob_count: int = 2
    blob_size_m: tuple[float, float] = (4.0, 12.0)
    weather_multiplier: float = 1.0
    label_flip_fraction: float = 0.02
    line_thickness_m: float = 0.3

    def __post_init__(self):
        for name in ("edge_drop_prob", "base_dropout", "range_decay_per_m", "weather_multiplier",
                     "label_flip_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.layout not in ("grid", "straight", "cross"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if not 2 <= self.lanes_min <= self.lanes_max:
            raise ValueError("need 2 <= lanes_min <= lanes_max")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        if "blob_size_m" in d:
            d["blob_size_m"] = tuple(d["blob_size_m"])
        return cls(**d)


@dataclass
class Road:
    centerline: Polyline
    lanes: int
    category: str
    in_hdmap: bool = True


@dataclass
class World:
    spec: WorldSpec
    roads: list[Road]
    hd: list[Polyline]
    intersections: list[np.ndarray]
    crossings_per_intersection: list[int] = field(default_factory=list)


# geometry helpers ----------------------------------------------------------

def _cumlen(pts: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])


def point_at(pts: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Point and unit tangent at arc length ``s``."""
    cl = _cumlen(pts)
    s = min(max(s, 0.0), cl[-1])
    i = min(int(np.searchsorted(cl, s, side="right")) - 1, len(pts) - 2)
    seg = pts[i + 1] - pts[i]
    ln = np.hypot(*seg)
    t = (s - cl[i]) / ln
    return pts[i] + t * seg, seg / ln


def trim(pts: np.ndarray, start: float, end: float) -> np.ndarray | None:
    """Sub-chain from arc length ``start`` to ``length - end``; ``None`` if empty."""
    cl = _cumlen(pts)
    a, b = start, cl[-1] - end
    if b - a <= 1e-6:
        return None
    inner = pts[(cl > a) & (cl < b)]
    pa, _ = point_at(pts, a)
    pb, _ = point_at(pts, b)
    out = dedupe_points(np.vstack([pa, inner, pb]))
    return out if len(out) >= 2 else None


def offset(pts: np.ndarray, d: float) -> np.ndarray:
    """Offset a chain by ``d`` to its left using mitred vertex normals."""
    seg = np.diff(pts, axis=0)
    seg /= np.hypot(*seg.T)[:, None]
    nrm = np.stack([-seg[:, 1], seg[:, 0]], axis=1)
    vn = np.empty_like(pts)
    vn[0], vn[-1] = nrm[0], nrm[-1]
    if len(pts) > 2:
        avg = nrm[:-1] + nrm[1:]
        avg /= np.hypot(*avg.T)[:, None]
        cos_half = np.clip((avg * nrm[1:]).sum(axis=1), 0.5, 1.0)
        vn[1:-1] = avg / cos_half[:, None]
    return pts + d * vn


def road_elements(centerline: np.ndarray, lanes: int, lane_width: float,
                  cut_start: float = 0.0, cut_end: float = 0.0) -> list[Polyline]:
    """Two boundaries plus ``lanes - 1`` dividers along a (trimmed) centreline."""
    core = trim(centerline, cut_start, cut_end)
    if core is None:
        return []
    hw = lanes * lane_width / 2
    out = [Polyline(offset(core, hw), BOUNDARY), Polyline(offset(core, -hw), BOUNDARY)]
    for k in range(1, lanes):
        out.append(Polyline(offset(core, -hw + k * lane_width), DIVIDER))
    return out


def crossing(centerline: np.ndarray, s0: float, s1: float, half_width: float) -> Polyline:
    """Closed rectangular ped-crossing outline spanning the road between arc lengths."""
    c0, t0 = point_at(centerline, s0)
    c1, t1 = point_at(centerline, s1)
    n0 = np.array([-t0[1], t0[0]]) * half_width
    n1 = np.array([-t1[1], t1[0]]) * half_width
    return Polyline(np.array([c0 + n0, c1 + n1, c1 - n1, c0 - n0, c0 + n0]), PED_CROSSING)


def _bent_chain(a: np.ndarray, b: np.ndarray, amp: float, rng, step: float = 10.0) -> np.ndarray:
    ln = float(np.hypot(*(b - a)))
    k = max(2, int(math.ceil(ln / step)) + 1)
    t = np.linspace(0.0, 1.0, k)
    d = (b - a) / ln
    n = np.array([-d[1], d[0]])
    bend = rng.uniform(-amp, amp) * np.sin(np.pi * t)
    return a[None] + t[:, None] * (b - a)[None] + bend[:, None] * n[None]


# world generation --------------------------------------------------------------

def _layout_graph(spec: WorldSpec, rng):
    """Node positions and undirected edges for the requested layout."""
    e = spec.extent_m
    if spec.layout == "straight":
        return [np.array([0.0, e / 2]), np.array([e, e / 2])], [(0, 1)]
    if spec.layout == "cross":
        c = e / 2
        nodes = [np.array([c, c]), np.array([0.0, c]), np.array([e, c]),
                 np.array([c, 0.0]), np.array([c, e])]
        return nodes, [(0, 1), (0, 2), (0, 3), (0, 4)]
    n = max(2, int(e // spec.intersection_spacing_m) + 1)
    step = e / (n - 1)
    idx = {}
    nodes = []
    for i in range(n):
        for j in range(n):
            jit = rng.uniform(-spec.jitter_m, spec.jitter_m, size=2)
            if i in (0, n - 1):
                jit[0] = 0.0
            if j in (0, n - 1):
                jit[1] = 0.0
            idx[i, j] = len(nodes)
            nodes.append(np.array([i * step, j * step]) + jit)
    edges = []
    for i in range(n):
        for j in range(n):
            if i + 1 < n:
                edges.append((idx[i, j], idx[i + 1, j]))
            if j + 1 < n:
                edges.append((idx[i, j], idx[i, j + 1]))
    degree = np.zeros(len(nodes), dtype=int)
    for a, b in edges:
        degree[a] += 1
        degree[b] += 1
    kept = []
    for a, b in edges:
        if rng.random() < spec.edge_drop_prob and degree[a] > 2 and degree[b] > 2:
            degree[a] -= 1
            degree[b] -= 1
        else:
            kept.append((a, b))
    return nodes, kept


def _chains(num_nodes: int, edges: list[tuple[int, int]]) -> list[list[int]]:
    """Merge edges through degree-2 nodes into maximal node chains."""
    adj: dict[int, list[int]] = {i: [] for i in range(num_nodes)}
    for k, (a, b) in enumerate(edges):
        adj[a].append(k)
        adj[b].append(k)
    used = [False] * len(edges)
    chains = []

    def walk(start, k):
        chain = [start]
        node = start
        while True:
            used[k] = True
            a, b = edges[k]
            node = b if a == node else a
            chain.append(node)
            if len(adj[node]) != 2:
                return chain
            nxt = [e for e in adj[node] if not used[e]]
            if not nxt:
                return chain
            k = nxt[0]

    for node in range(num_nodes):
        if len(adj[node]) != 2:
            for k in adj[node]:
                if not used[k]:
                    chains.append(walk(node, k))
    for k in range(len(edges)):
        if not used[k]:
            chains.append(walk(edges[k][0], k))
    return chains


def gen_world(spec: WorldSpec) -> World:
    """Deterministic road world: centrelines, lane dividers, boundaries and crossings."""
    rng = np.random.default_rng(spec.seed)
    nodes, edges = _layout_graph(spec, rng)
    degree = np.zeros(len(nodes), dtype=int)
    for a, b in edges:
        degree[a] += 1
        degree[b] += 1

    roads: list[Road] = []
    chains = _chains(len(nodes), edges)
    for chain in chains:
        parts = [_bent_chain(nodes[a], nodes[b], spec.bend_amplitude_m, rng)
                 for a, b in zip(chain[:-1], chain[1:])]
        pts = dedupe_points(np.vstack(parts))
        lanes = int(rng.integers(spec.lanes_min, spec.lanes_max + 1))
        roads.append(Road(Polyline(pts, HIGHWAY_CODES[LANE_CATEGORIES.get(lanes, "primary")],
                                   LANE_CATEGORIES.get(lanes, "primary")), lanes,
                          LANE_CATEGORIES.get(lanes, "primary")))

    # roads meeting at each intersection node
    ends: dict[int, list[tuple[int, int]]] = {}
    for r, chain in enumerate(chains):
        ends.setdefault(chain[0], []).append((r, 0))
        ends.setdefault(chain[-1], []).append((r, 1))

    hd: list[Polyline] = []
    intersections = []
    crossings_count = []
    cuts = {r: [0.0, 0.0] for r in range(len(roads))}
    hw = [rd.lanes * spec.lane_width_m / 2 for rd in roads]
    for node, incident in ends.items():
        if degree[node] < 3:
            continue
        intersections.append(nodes[node])
        count = 0
        for r, side in incident:
            others = [hw[o] for o, _ in incident if o != r] or [hw[r]]
            s0 = max(others) + spec.crossing_setback_m
            s1 = s0 + spec.crossing_width_m
            pts = roads[r].centerline.points
            length = roads[r].centerline.length()
            if length <= s1:
                continue
            cuts[r][side] = s1
            if side == 0:
                hd.append(crossing(pts, s0, s1, hw[r]))
            else:
                hd.append(crossing(pts, length - s1, length - s0, hw[r]))
            count += 1
        crossings_count.append(count)

    for r, rd in enumerate(roads):
        hd.extend(road_elements(rd.centerline.points, rd.lanes, spec.lane_width_m, *cuts[r]))

    for _ in range(spec.service_spurs):
        # short spurs tagged as service roads, deliberately absent from the HD map
        base = roads[int(rng.integers(len(roads)))].centerline.points
        p, t = point_at(base, rng.uniform(0, _cumlen(base)[-1]))
        n = np.array([-t[1], t[0]]) * rng.choice([-1.0, 1.0])
        spur = np.array([p, p + n * rng.uniform(20.0, 50.0)])
        roads.append(Road(Polyline(spur, HIGHWAY_CODES["service"], "service"), 2, "service",
                          in_hdmap=False))
    return World(spec, roads, hd, intersections, crossings_count)


def derive_sdmap(world: World, include_service: bool = False) -> SdMap:
    """Road centrelines only (world frame), stripped of lane-level detail."""
    polys = [r.centerline for r in world.roads if include_service or r.category != "service"]
    return SdMap(list(polys), frozenset(p.tag for p in polys if p.tag))


def world_to_osm(world: World, origin_latlon: tuple[float, float]) -> RoadGraph:
    """Express the world's road centrelines as an OSM road graph."""
    nodes, ways = {}, []
    for r, road in enumerate(world.roads):
        ids = []
        for k, (x, y) in enumerate(road.centerline.points):
            nid = f"{r + 1}{k:04d}"
            nodes[nid] = unproject_xy(float(x), float(y), *origin_latlon)
            ids.append(nid)
        ways.append(Way(str(r + 1), tuple(ids), road.category))
    return RoadGraph(nodes, ways)


# observations -------------------------------------------------------------------

def keep_probability(distance_m: np.ndarray, spec: WorldSpec) -> np.ndarray:
    return (1.0 - spec.base_dropout) * np.exp(-spec.range_decay_per_m * distance_m) \
        * spec.weather_multiplier


def simulate_observation(gt: np.ndarray, grid: GridSpec, spec: WorldSpec,
                         seed: int) -> np.ndarray:
    """Degrade a GT label map: range-dependent dropout, occluder blobs, label flips."""
    rng = np.random.default_rng(seed)
    x, y = grid.cell_centers()
    dist = np.hypot(x[None, :], y[:, None])
    keep = rng.random(grid.shape) < keep_probability(dist, spec)
    res = grid.resolution_m
    lo, hi = spec.blob_size_m
    for _ in range(spec.blob_count):
        h = max(1, int(round(rng.uniform(lo, hi) / res)))
        w = max(1, int(round(rng.uniform(lo, hi) / res)))
        r0 = int(rng.integers(0, max(1, grid.rows - h + 1)))
        c0 = int(rng.integers(0, max(1, grid.cols - w + 1)))
        keep[r0:r0 + h, c0:c0 + w] = False
    obs = np.where(keep, gt, BACKGROUND).astype(np.int8)
    if spec.label_flip_fraction > 0:
        fg = np.flatnonzero(obs != BACKGROUND)
        flips = rng.random(fg.size) < spec.label_flip_fraction
        obs.reshape(-1)[fg[flips]] = BACKGROUND
    return obs


# datasets -----------------------------------------------------------------------

@dataclass
class Scene:
    gt: np.ndarray
    sd: SdMap
    obs: np.ndarray
    pose: EgoPose
    grid: GridSpec


def sample_pose(world: World, rng) -> EgoPose:
    roads = [r for r in world.roads if r.in_hdmap]
    if not roads:
        raise DataError("world has no roads to place the ego vehicle on")
    lengths = np.array([r.centerline.length() for r in roads])
    r = roads[int(rng.choice(len(roads), p=lengths / lengths.sum()))]
    p, t = point_at(r.centerline.points, rng.uniform(0, lengths.max()) % r.centerline.length())
    lane = int(rng.integers(r.lanes))
    hw = r.lanes * world.spec.lane_width_m / 2
    lateral = -hw + (lane + 0.5) * world.spec.lane_width_m
    pos = p + lateral * np.array([-t[1], t[0]])
    heading = math.atan2(t[1], t[0]) + (math.pi if rng.random() < 0.5 else 0.0)
    return EgoPose(float(pos[0]), float(pos[1]), heading)


def _near(polylines: Sequence[Polyline], pose: EgoPose, radius: float) -> list[Polyline]:
    c = np.array([pose.x, pose.y])
    out = []
    for p in polylines:
        lo, hi = p.points.min(axis=0), p.points.max(axis=0)
        if np.all(c >= lo - radius) and np.all(c <= hi + radius):
            out.append(p)
    return out


def scene_gt(world: World, pose: EgoPose, grid: GridSpec, thickness_m: float) -> np.ndarray:
    radius = math.hypot(grid.range_forward_m, grid.range_lateral_m) / 2 + thickness_m
    ego = [Polyline(world_to_ego(p.points, pose), p.class_id)
           for p in _near(world.hd, pose, radius)]
    return rasterize_labels(ego, grid, thickness_m)


def sample_dataset(world: World, n_scenes: int, grid: GridSpec, sigma_translation_m: float = 2.0,
                   sigma_rotation_rad: float = 0.02, seed: int = 0,
                   include_service: bool = False, sd_margin_m: float = 10.0) -> list[Scene]:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    rng = np.random.default_rng(seed)
    sd_world = derive_sdmap(world, include_service)
    radius = math.hypot(grid.range_forward_m, grid.range_lateral_m) / 2 + sd_margin_m
    scenes = []
    for _ in range(n_scenes):
        pose = sample_pose(world, rng)
        gt = scene_gt(world, pose, grid, world.spec.line_thickness_m)
        sd = sdmap_from_world_polylines(_near(sd_world.polylines, pose, radius), pose, grid,
                                        sd_margin_m)
        sd = perturb_alignment(sd, sigma_translation_m, sigma_rotation_rad,
                               int(rng.integers(2**31)))
        obs = simulate_observation(gt, grid, world.spec, int(rng.integers(2**31)))
        scenes.append(Scene(gt, sd, obs, pose, grid))
    return scenes


def save_dataset(directory, scenes: Sequence[Scene], spec: WorldSpec, extra: dict | None = None):
    from .grid import polylines_to_json

    d = Path(directory)
    for i, sc in enumerate(scenes):
        sd_dir = d / "scenes" / f"{i:04d}"
        sd_dir.mkdir(parents=True, exist_ok=True)
        save_tensor(sd_dir / "gt.pmtn", sc.gt.astype(np.float32))
        save_tensor(sd_dir / "obs.pmtn", sc.obs.astype(np.float32))
        (sd_dir / "sd.json").write_text(polylines_to_json(sc.sd.polylines))
        (sd_dir / "pose.json").write_text(json.dumps(sc.pose.to_dict(), sort_keys=True))
    manifest = {"world_spec": spec.to_dict(), "grid": scenes[0].grid.to_dict() if scenes else None,
                "num_scenes": len(scenes), **(extra or {})}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(directory) -> tuple[list[Scene], dict]:
    from .grid import polylines_from_json

    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no dataset manifest in {d}")
    manifest = json.loads(mf.read_text())
    g = manifest["grid"]
    grid = grid_for_range(g["range_forward_m"], g["range_lateral_m"], g["resolution_m"])
    scenes = []
    for i in range(manifest["num_scenes"]):
        sd_dir = d / "scenes" / f"{i:04d}"
        gt = load_tensor(sd_dir / "gt.pmtn").astype(np.int8)
        obs = load_tensor(sd_dir / "obs.pmtn").astype(np.int8)
        polys = polylines_from_json((sd_dir / "sd.json").read_text())
        pose = EgoPose(**json.loads((sd_dir / "pose.json").read_text()))
        scenes.append(Scene(gt, SdMap(polys, frozenset(p.tag for p in polys if p.tag)), obs,
                            pose, grid))
    return scenes, manifest
