"""Synthetic vascular trees, their voxelization and image synthesis.

Trees grow by recursive stochastic bifurcation.  Daughter radii obey
Murray's law ``r_p**g = r_l**g + r_r**g`` and the daughters leave the
parent axis at the angles given by the radius-only cosine formulas.  Each
segment is a cylinder with hemispherical caps.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from vesselkit.rng import substream
from vesselkit.volume import LabelVolume, Volume3D, write_volume

NODE_KINDS = ("root", "inter", "bifurcation", "leaf")


@dataclass(frozen=True)
class TreeNode:
    id: int
    position: tuple[float, float, float]
    kind: str

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")


@dataclass(frozen=True)
class VesselSegment:
    start: int
    end: int
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"segment radius must be > 0, got {self.radius}")


@dataclass
class VascularTree:
    nodes: list[TreeNode]
    segments: list[VesselSegment]
    domain_shape: tuple[int, int, int]
    gamma: float = 3.0

    def position(self, node_id: int) -> np.ndarray:
        return np.asarray(self.nodes[node_id].position, dtype=np.float64)

    def length(self, seg: VesselSegment) -> float:
        return float(np.linalg.norm(self.position(seg.end) - self.position(seg.start)))

    def children(self) -> dict[int, list[VesselSegment]]:
        out: dict[int, list[VesselSegment]] = {n.id: [] for n in self.nodes}
        for s in self.segments:
            out[s.start].append(s)
        return out

    def parent_segment(self) -> dict[int, VesselSegment]:
        return {s.end: s for s in self.segments}

    def bifurcations(self) -> list[TreeNode]:
        return [n for n in self.nodes if n.kind == "bifurcation"]

    def bifurcation_points(self) -> np.ndarray:
        pts = [n.position for n in self.bifurcations()]
        return np.asarray(pts, dtype=np.float64).reshape(-1, 3)

    def validate(self) -> None:
        """Raise ``ValueError`` if any structural invariant is broken."""
        if not self.nodes:
            if self.segments:
                raise ValueError("segments without nodes")
            return
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ValueError("node ids must be 0..n-1 in order")
        roots = [n for n in self.nodes if n.kind == "root"]
        if len(roots) != 1:
            raise ValueError(f"expected one root, found {len(roots)}")
        if len(self.segments) != len(self.nodes) - 1:
            raise ValueError("a tree needs exactly n-1 segments")
        parents = self.parent_segment()
        if len(parents) != len(self.segments) or roots[0].id in parents:
            raise ValueError("every non-root node needs exactly one parent")
        children = self.children()
        want = {"root": (1,), "inter": (1,), "bifurcation": (2,), "leaf": (0,)}
        hi = np.array(self.domain_shape, dtype=np.float64) - 1
        for n in self.nodes:
            if len(children[n.id]) not in want[n.kind]:
                raise ValueError(f"node {n.id} ({n.kind}) has {len(children[n.id])} children")
            p = np.asarray(n.position)
            if np.any(p < 0) or np.any(p > hi):
                raise ValueError(f"node {n.id} lies outside the domain")
        # reachability from the root rules out cycles given n-1 edges
        seen, stack = set(), [roots[0].id]
        while stack:
            i = stack.pop()
            seen.add(i)
            stack.extend(s.end for s in children[i])
        if len(seen) != len(self.nodes):
            raise ValueError("tree is not connected")
        for s in self.segments:
            if self.length(s) <= 0:
                raise ValueError(f"segment {s.start}->{s.end} has zero length")
            if s.start in parents and s.radius > parents[s.start].radius:
                raise ValueError(f"segment {s.start}->{s.end} is wider than its parent")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "domain_shape": list(self.domain_shape),
            "nodes": [{"id": n.id, "pos": list(n.position), "kind": n.kind} for n in self.nodes],
            "segments": [{"from": s.start, "to": s.end, "radius": s.radius} for s in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VascularTree":
        nodes = [TreeNode(int(n["id"]), tuple(float(c) for c in n["pos"]), n["kind"]) for n in d["nodes"]]
        segs = [VesselSegment(int(s["from"]), int(s["to"]), float(s["radius"])) for s in d["segments"]]
        return cls(nodes, segs, tuple(d["domain_shape"]), float(d.get("gamma", 3.0)))


def save_tree(tree: VascularTree, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(tree.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_tree(path) -> VascularTree:
    return VascularTree.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# bifurcation geometry
# ---------------------------------------------------------------------------


def murray_split(r_p: float, left_share: float, gamma: float = 3.0) -> tuple[float, float]:
    """Daughter radii with ``r_l**gamma == left_share * r_p**gamma``."""
    if not r_p > 0:
        raise ValueError(f"parent radius must be > 0, got {r_p}")
    if not 0.0 < left_share < 1.0:
        raise ValueError(f"left_share must lie in (0, 1), got {left_share}")
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return r_p * left_share ** (1.0 / gamma), r_p * (1.0 - left_share) ** (1.0 / gamma)


def murray_residual(r_p: float, r_l: float, r_r: float, gamma: float = 3.0) -> float:
    """Relative residual ``|r_p^g - r_l^g - r_r^g| / r_p^g``."""
    rp = r_p ** gamma
    return abs(rp - r_l ** gamma - r_r ** gamma) / rp


def bifurcation_angles(r_p: float, r_l: float, r_r: float) -> tuple[float, float]:
    """Angles (radians) between the parent axis and each daughter axis."""
    if min(r_p, r_l, r_r) <= 0:
        raise ValueError("radii must be positive")
    p2, l2, r2 = r_p * r_p, r_l * r_l, r_r * r_r
    cos_l = (p2 * p2 + l2 * l2 - r2 * r2) / (2 * p2 * l2)
    cos_r = (p2 * p2 + r2 * r2 - l2 * l2) / (2 * p2 * r2)
    tol = 1e-12
    for c in (cos_l, cos_r):
        if not -1 - tol <= c <= 1 + tol:
            raise ValueError(f"inconsistent radii: cosine {c} outside [-1, 1]")
    return (math.acos(min(1.0, max(-1.0, cos_l))),
            math.acos(min(1.0, max(-1.0, cos_r))))


def angle_between(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    # atan2 form stays accurate near 0 and pi
    return float(math.atan2(np.linalg.norm(np.cross(u, v)), float(np.dot(u, v))))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _perpendicular(d: np.ndarray, azimuth: float) -> np.ndarray:
    """Unit vector orthogonal to ``d`` at the given azimuth."""
    helper = np.eye(3)[int(np.argmin(np.abs(d)))]
    e1 = _unit(np.cross(d, helper))
    e2 = np.cross(d, e1)
    return math.cos(azimuth) * e1 + math.sin(azimuth) * e2


def _rotate_towards(d: np.ndarray, angle: float, azimuth: float) -> np.ndarray:
    u = _perpendicular(d, azimuth)
    return _unit(math.cos(angle) * d + math.sin(angle) * u)


# ---------------------------------------------------------------------------
# growth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GrowthConfig:
    """Growth parameters; lengths and radii are in voxels.

    The defaults target 128³ volumes; :meth:`for_shape` rescales lengths for
    other sizes.
    """

    domain_shape: tuple[int, int, int] = (128, 128, 128)
    root_radius: float = 3.5
    terminal_radius: float = 1.2
    gamma: float = 3.0
    segment_length_range: tuple[float, float] = (90.0, 120.0)
    radius_ratio_range: tuple[float, float] = (0.3, 0.7)
    max_depth: int = 8
    inter_nodes: int = 6
    tortuosity: float = 0.2
    wall_avoidance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        shape = tuple(int(s) for s in self.domain_shape)
        if len(shape) != 3 or any(s < 1 for s in shape):
            raise ValueError(f"bad domain shape {shape}")
        object.__setattr__(self, "domain_shape", shape)
        object.__setattr__(self, "segment_length_range", tuple(float(v) for v in self.segment_length_range))
        object.__setattr__(self, "radius_ratio_range", tuple(float(v) for v in self.radius_ratio_range))
        lo, hi = self.segment_length_range
        if not 0 < lo <= hi:
            raise ValueError("segment_length_range must satisfy 0 < min <= max")
        lo, hi = self.radius_ratio_range
        if not 0 < lo <= hi < 1:
            raise ValueError("radius_ratio_range must lie inside (0, 1)")
        if not self.root_radius > 0 or not self.terminal_radius > 0:
            raise ValueError("radii must be positive")
        if self.gamma <= 0 or self.max_depth < 0 or self.inter_nodes < 0 or self.tortuosity < 0 \
                or self.wall_avoidance < 0:
            raise ValueError("gamma must be > 0; max_depth, inter_nodes, tortuosity >= 0")

    def for_shape(self, shape) -> "GrowthConfig":
        """Same config on another domain, lengths scaled by the edge ratio."""
        shape = tuple(int(s) for s in shape)
        scale = min(shape) / min(self.domain_shape)
        lo, hi = self.segment_length_range
        return _replace(self, domain_shape=shape, segment_length_range=(lo * scale, hi * scale))

    def with_seed(self, seed: int) -> "GrowthConfig":
        return _replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _replace(cfg, **kw):
    d = asdict(cfg)
    d.update(kw)
    return type(cfg)(**d)


def _clip_to_box(start: np.ndarray, direction: np.ndarray, length: float, hi: np.ndarray):
    """Largest ``t <= length`` keeping ``start + t * direction`` in ``[0, hi]``."""
    t = length
    for ax in range(3):
        if direction[ax] > 0:
            t = min(t, (hi[ax] - start[ax]) / direction[ax])
        elif direction[ax] < 0:
            t = min(t, -start[ax] / direction[ax])
    return max(t, 0.0)


class _Builder:
    def __init__(self, cfg: GrowthConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.hi = np.array(cfg.domain_shape, dtype=np.float64) - 1
        self.positions: list[np.ndarray] = []
        self.kinds: list[str] = []
        self.segments: list[VesselSegment] = []

    def node(self, pos: np.ndarray, kind: str) -> int:
        self.positions.append(np.minimum(np.maximum(pos, 0.0), self.hi))
        self.kinds.append(kind)
        return len(self.positions) - 1

    def steer(self, pos: np.ndarray, d: np.ndarray, horizon: float) -> np.ndarray:
        """Bend ``d`` towards the domain centre if the wall is within ``horizon``."""
        if _clip_to_box(pos, d, horizon, self.hi) >= horizon:
            return d
        to_centre = self.hi / 2 - pos
        norm = np.linalg.norm(to_centre)
        if norm == 0:
            return d
        return _unit(d + self.cfg.wall_avoidance * to_centre / norm)

    def branch(self, start_id: int, direction: np.ndarray, radius: float, depth: int):
        """Grow one vessel from ``start_id``: inter nodes, then a bifurcation or a leaf."""
        cfg, rng = self.cfg, self.rng
        length = rng.uniform(*cfg.segment_length_range)
        pieces = cfg.inter_nodes + 1
        cur_id, d = start_id, direction
        for piece in range(pieces):
            if piece:
                d = _rotate_towards(d, rng.uniform(0, cfg.tortuosity), rng.uniform(0, 2 * math.pi))
                if cfg.wall_avoidance > 0:
                    d = self.steer(self.positions[cur_id], d, 2 * length / pieces)
            start = self.positions[cur_id]
            step = length / pieces
            t = _clip_to_box(start, d, step, self.hi)
            if t <= 1e-6:
                # already at the wall: the previous node ends the vessel
                self.kinds[cur_id] = "leaf" if cur_id != start_id else self.kinds[cur_id]
                return cur_id, d, t < step
            end_id = self.node(start + t * d, "inter")
            self.segments.append(VesselSegment(cur_id, end_id, radius))
            cur_id = end_id
            if t < step:
                self.kinds[cur_id] = "leaf"
                return cur_id, d, True
        return cur_id, d, False

    def grow(self, start_id: int, direction: np.ndarray, radius: float, depth: int):
        stack = [(start_id, direction, radius, depth)]
        while stack:
            sid, d, r, dep = stack.pop()
            end_id, d_end, truncated = self.branch(sid, d, r, dep)
            if end_id == sid:
                continue
            if truncated:
                continue
            if r <= self.cfg.terminal_radius or dep >= self.cfg.max_depth:
                self.kinds[end_id] = "leaf"
                continue
            share = self.rng.uniform(*self.cfg.radius_ratio_range)
            r_l, r_r = murray_split(r, share, self.cfg.gamma)
            phi_l, phi_r = bifurcation_angles(r, r_l, r_r)
            u = _perpendicular(d_end, self.rng.uniform(0, 2 * math.pi))
            d_l = _unit(math.cos(phi_l) * d_end + math.sin(phi_l) * u)
            d_r = _unit(math.cos(phi_r) * d_end - math.sin(phi_r) * u)
            p = self.positions[end_id]
            if min(_clip_to_box(p, d_l, 1.0, self.hi), _clip_to_box(p, d_r, 1.0, self.hi)) <= 1e-6:
                self.kinds[end_id] = "leaf"
                continue
            self.kinds[end_id] = "bifurcation"
            # right pushed first so the left subtree gets the lower node ids
            stack.append((end_id, d_r, r_r, dep + 1))
            stack.append((end_id, d_l, r_l, dep + 1))


def _root_placement(shape, rng: np.random.Generator):
    hi = np.array(shape, dtype=np.float64) - 1
    axis = int(rng.integers(3))
    side = int(rng.integers(2))
    pos = rng.uniform(0.25, 0.75, size=3) * hi
    pos[axis] = hi[axis] * side
    inward = np.zeros(3)
    inward[axis] = 1.0 if side == 0 else -1.0
    jitter = rng.normal(size=3)
    jitter[axis] = 0.0
    return pos, _unit(inward + 0.3 * jitter)


def grow_tree(cfg: GrowthConfig) -> VascularTree:
    """Grow one tree from a root on a random face of the domain."""
    if min(cfg.domain_shape) < 2:
        raise ValueError(f"domain {cfg.domain_shape} too small to place a root segment")
    rng = substream(cfg.seed, "growth")
    b = _Builder(cfg, rng)
    pos, d = _root_placement(cfg.domain_shape, rng)
    root = b.node(pos, "root")
    b.grow(root, d, cfg.root_radius, 0)
    b.kinds[root] = "root"
    nodes = [TreeNode(i, tuple(float(c) for c in p), k) for i, (p, k) in enumerate(zip(b.positions, b.kinds))]
    return VascularTree(nodes, b.segments, cfg.domain_shape, cfg.gamma)


def bifurcation_residuals(tree: VascularTree):
    """Per-bifurcation ``(murray_residual, max angle residual)``."""
    parents = tree.parent_segment()
    children = tree.children()
    out = []
    for n in tree.bifurcations():
        ps = parents[n.id]
        left, right = children[n.id]
        r_p, r_l, r_r = ps.radius, left.radius, right.radius
        phi_l, phi_r = bifurcation_angles(r_p, r_l, r_r)
        d_p = tree.position(n.id) - tree.position(ps.start)
        d_l = tree.position(left.end) - tree.position(n.id)
        d_r = tree.position(right.end) - tree.position(n.id)
        ang = max(abs(angle_between(d_p, d_l) - phi_l), abs(angle_between(d_p, d_r) - phi_r))
        out.append((murray_residual(r_p, r_l, r_r, tree.gamma), ang))
    return out


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    rel = points - a
    t = np.clip(rel @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(points))
    diff = rel - t[:, None] * ab
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def voxelize_tree(tree: VascularTree, shape=None) -> LabelVolume:
    """Vessel mask: voxel centres within ``radius`` of any segment axis.

    Centerline voxels are always included so thin vessels never vanish.
    """
    shape = tuple(tree.domain_shape if shape is None else shape)
    mask = np.zeros(shape, dtype=bool)
    hi = np.array(shape) - 1
    for s in tree.segments:
        a, b = tree.position(s.start), tree.position(s.end)
        lo_c = np.maximum(np.floor(np.minimum(a, b) - s.radius), 0).astype(int)
        hi_c = np.minimum(np.ceil(np.maximum(a, b) + s.radius), hi).astype(int)
        if np.any(hi_c < lo_c):
            continue
        grids = np.meshgrid(*(np.arange(l, h + 1) for l, h in zip(lo_c, hi_c)), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1).astype(np.float64)
        inside = _segment_distance(pts, a, b) <= s.radius
        sub = mask[lo_c[0]:hi_c[0] + 1, lo_c[1]:hi_c[1] + 1, lo_c[2]:hi_c[2] + 1]
        sub |= inside.reshape(sub.shape)
    mask |= rasterize_centerlines(tree, shape).data.astype(bool)
    return LabelVolume(mask, "vessel")


def bresenham3d(p0, p1) -> np.ndarray:
    """26-connected integer path from ``p0`` to ``p1`` (both included)."""
    p0 = np.asarray(p0, dtype=np.int64)
    p1 = np.asarray(p1, dtype=np.int64)
    delta = np.abs(p1 - p0)
    step = np.sign(p1 - p0)
    major = int(np.argmax(delta))
    n = int(delta[major])
    pts = [p0.copy()]
    cur = p0.copy()
    err = np.zeros(3, dtype=np.int64)
    for _ in range(n):
        cur[major] += step[major]
        for ax in range(3):
            if ax == major:
                continue
            err[ax] += 2 * delta[ax]
            if err[ax] > n:
                cur[ax] += step[ax]
                err[ax] -= 2 * n
        pts.append(cur.copy())
    return np.array(pts)


def _voxel_of(pos: np.ndarray, shape) -> np.ndarray:
    return np.clip(np.floor(pos + 0.5).astype(np.int64), 0, np.array(shape) - 1)


def rasterize_centerlines(tree: VascularTree, shape=None) -> LabelVolume:
    shape = tuple(tree.domain_shape if shape is None else shape)
    mask = np.zeros(shape, dtype=np.uint8)
    for s in tree.segments:
        path = bresenham3d(_voxel_of(tree.position(s.start), shape), _voxel_of(tree.position(s.end), shape))
        mask[path[:, 0], path[:, 1], path[:, 2]] = 1
    return LabelVolume(mask, "centerline")


def bifurcation_labels(tree: VascularTree, vessel_mask: LabelVolume, cube_half: int = 2) -> LabelVolume:
    """Cubes of edge ``2 * cube_half + 1`` around each bifurcation, within the vessel."""
    vessel = np.asarray(vessel_mask.data, dtype=bool)
    shape = vessel.shape
    cubes = np.zeros(shape, dtype=bool)
    for n in tree.bifurcations():
        c = _voxel_of(np.asarray(n.position), shape)
        lo = np.maximum(c - cube_half, 0)
        hi = np.minimum(c + cube_half + 1, shape)
        cubes[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return LabelVolume(cubes & vessel, "bifurcation", vessel_mask.spacing)


# ---------------------------------------------------------------------------
# intensities and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntensityConfig:
    vessel_range: tuple[float, float] = (128.0, 255.0)
    background_range: tuple[float, float] = (0.0, 100.0)
    noise_mean_range: tuple[float, float] = (-5.0, 5.0)
    noise_std_range: tuple[float, float] = (0.0, 30.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("vessel_range", "background_range", "noise_mean_range", "noise_std_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if lo > hi:
                raise ValueError(f"{name} must satisfy min <= max")
            object.__setattr__(self, name, (lo, hi))
        if self.noise_std_range[1] < 0:
            raise ValueError("noise_std_range admits no non-negative value")

    def with_seed(self, seed: int) -> "IntensityConfig":
        return _replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def sample_noise(cfg: IntensityConfig, rng: np.random.Generator) -> tuple[float, float]:
    """Per-volume noise ``(mean, std)``; negative std draws are redrawn."""
    mean = float(rng.uniform(*cfg.noise_mean_range))
    while True:
        std = float(rng.uniform(*cfg.noise_std_range))
        if std >= 0:
            return mean, std


def synthesize_intensities(vessel_mask, cfg: IntensityConfig, noise: Optional[tuple[float, float]] = None,
                           clamp: bool = True) -> Volume3D:
    """Uniform vessel/background intensities plus one Gaussian noise field.

    ``noise`` overrides the sampled ``(mean, std)``; ``clamp=False`` returns
    the unclamped field (useful to check the intensity ranges exactly).
    """
    mask = np.asarray(getattr(vessel_mask, "data", vessel_mask), dtype=bool)
    rng = substream(cfg.seed, "intensity")
    mean, std = sample_noise(cfg, rng) if noise is None else noise
    img = np.where(mask,
                   rng.uniform(*cfg.vessel_range, size=mask.shape),
                   rng.uniform(*cfg.background_range, size=mask.shape))
    if std > 0 or mean != 0:
        img = img + rng.normal(mean, std, size=mask.shape)
    if clamp:
        img = np.clip(img, 0.0, 255.0)
    return Volume3D(img.astype(np.float32), getattr(vessel_mask, "spacing", (1.0, 1.0, 1.0)))


@dataclass
class SyntheticSample:
    tree: VascularTree
    image: Volume3D
    vessel: LabelVolume
    centerline: LabelVolume
    bifurcation: LabelVolume

    def fractions(self) -> dict:
        return {k: getattr(self, k).fraction() for k in ("vessel", "centerline", "bifurcation")}


def synthesize_sample(growth: GrowthConfig, intensity: IntensityConfig) -> SyntheticSample:
    tree = grow_tree(growth)
    vessel = voxelize_tree(tree)
    return SyntheticSample(
        tree=tree,
        image=synthesize_intensities(vessel, intensity),
        vessel=vessel,
        centerline=rasterize_centerlines(tree),
        bifurcation=bifurcation_labels(tree, vessel),
    )


def volume_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th volume of a dataset."""
    return int(substream(seed, "volume", index).integers(2**31))


def generate_dataset(n: int, growth_cfg: GrowthConfig, intensity_cfg: IntensityConfig, out_dir,
                     seed: Optional[int] = None) -> dict:
    """Write ``n`` samples (image + three labels + tree) and a manifest.

    Volume ``i`` uses ``volume_seed(seed, i)`` for both growth and intensity
    sub-streams; ``seed`` defaults to ``growth_cfg.seed``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = growth_cfg.seed if seed is None else int(seed)
    entries = []
    for i in range(n):
        vs = volume_seed(base, i)
        sample = synthesize_sample(growth_cfg.with_seed(vs), intensity_cfg.with_seed(vs))
        stem = f"vol_{i:03d}"
        files = {}
        for key in ("image", "vessel", "centerline", "bifurcation"):
            write_volume(getattr(sample, key), out / f"{stem}_{key}")
            files[key] = f"{stem}_{key}"
        save_tree(sample.tree, out / f"{stem}_tree.json")
        files["tree"] = f"{stem}_tree.json"
        entries.append({
            "index": i,
            "seed": vs,
            "files": files,
            "fractions": sample.fractions(),
            "bifurcations": len(sample.tree.bifurcations()),
        })
    fr = {k: float(np.mean([e["fractions"][k] for e in entries])) for k in ("vessel", "centerline", "bifurcation")}
    manifest = {
        "n": n,
        "seed": base,
        "growth": growth_cfg.to_dict(),
        "intensity": intensity_cfg.to_dict(),
        "volumes": entries,
        "mean_fractions": fr,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())
