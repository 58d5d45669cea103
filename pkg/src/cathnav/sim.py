"""Deterministic 2D vascular phantom with a three-DoF catheter.

The phantom is a procedurally grown binary tree of vessel segments. The
catheter body always follows the centerlines of the segments it has entered
(its ``route``); at a bifurcation the child whose initial direction best
matches the steered tip heading is entered. Steering combines the knob bend
with base rotation, which swings the pre-shaped distal section in the image
plane.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .episode import Episode

PHANTOM_FORMAT_VERSION = 1


class UnreachableTarget(ValueError):
    pass


class EpisodeFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Kinematics:
    v_max: float = 10.0         # px/s
    omega_max: float = 0.5      # rad/s
    kappa_max: float = 1.0      # knob units/s
    dt: float = 0.1             # s
    goal_tolerance: float = 5.0  # px
    max_steps: int = 5000
    max_deflection: float = 0.8  # tip heading change (rad) at full steering
    twist_coupling: float = 0.5
    lateral_gain: float = 0.6   # tip offset at full steering, fraction of radius
    wall_margin: float = 0.5    # px kept between tip and wall


@dataclass(frozen=True)
class ExpertParams:
    lookahead: float = 30.0
    turn_steer: float = 0.8
    twist: float = 0.3
    knob_gain: float = 4.0      # proportional loops stay stable while gain * rate * dt < 2
    rotation_gain: float = 4.0
    slow_zone: float = 20.0
    approach_zone: float = 40.0
    commit_zone: float = 6.0
    ready_tolerance: float = 0.3


DEFAULT_KINEMATICS = Kinematics()
DEFAULT_EXPERT = ExpertParams()


def _wrap(angle):
    return (angle + math.pi) % (2 * math.pi) - math.pi


def _arc(start, heading, length, curvature):
    n = max(8, int(math.ceil(length / 2.0)))
    s = np.linspace(0.0, length, n + 1)
    if abs(curvature) < 1e-9:
        return start + s[:, None] * np.array([math.cos(heading), math.sin(heading)])
    theta = heading + curvature * s
    x = start[0] + (np.sin(theta) - math.sin(heading)) / curvature
    y = start[1] - (np.cos(theta) - math.cos(heading)) / curvature
    return np.stack([x, y], axis=1)


def _cumlen(points):
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def distances_to_polyline(points, polyline) -> np.ndarray:
    """Distance from each of ``points`` (K, 2) to a polyline (M, 2)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    a, b = polyline[:-1], polyline[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom > 0, denom, 1.0)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("kij,ij->ki", ap, ab) / denom, 0.0, 1.0)
    diff = ap - t[..., None] * ab[None]
    return np.sqrt(np.einsum("kij,kij->ki", diff, diff)).min(axis=1)


def distance_to_polyline(point, polyline) -> float:
    return float(distances_to_polyline(point, polyline)[0])


@dataclass(eq=False)
class VesselMap:
    """Vessel tree. Segment 0 is the trunk starting at ``entry_point``."""

    centerlines: list
    radii: list
    parents: list
    entry_point: np.ndarray
    targets: np.ndarray
    target_segments: list
    target_offsets: list
    world_size: float = 224.0
    seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.centerlines = [np.asarray(c, dtype=np.float64) for c in self.centerlines]
        self.radii = [float(r) for r in self.radii]
        self.parents = [int(p) for p in self.parents]
        self.entry_point = np.asarray(self.entry_point, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 2)
        self.target_segments = [int(s) for s in self.target_segments]
        self.target_offsets = [float(o) for o in self.target_offsets]
        self.lengths = [float(_cumlen(c)[-1]) for c in self.centerlines]
        self._arclen = [_cumlen(c) for c in self.centerlines]

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    @property
    def target_labels(self) -> list[str]:
        return [f"P{i + 1}" for i in range(self.n_targets)]

    @property
    def branch_graph(self) -> dict[int, list[int]]:
        graph = {i: [] for i in range(len(self.centerlines))}
        for child, parent in enumerate(self.parents):
            if parent >= 0:
                graph[parent].append(child)
        return graph

    def children(self, segment: int) -> list[int]:
        return [c for c, p in enumerate(self.parents) if p == segment]

    def route_to(self, segment: int) -> tuple[int, ...]:
        route = []
        seen = set()
        while segment >= 0:
            if segment in seen or segment >= len(self.parents):
                raise UnreachableTarget(f"segment {segment} is not in the tree")
            seen.add(segment)
            route.append(segment)
            segment = self.parents[segment]
        if route[-1] != 0:
            raise UnreachableTarget("route does not start at the trunk")
        return tuple(reversed(route))

    def route_starts(self, route) -> list[float]:
        starts, acc = [], 0.0
        for seg in route:
            starts.append(acc)
            acc += self.lengths[seg]
        return starts

    def route_length(self, route) -> float:
        return float(sum(self.lengths[s] for s in route))

    def point_on_segment(self, segment: int, s: float):
        """Return (point, tangent angle) at arclength ``s`` along a segment."""
        pts, cum = self.centerlines[segment], self._arclen[segment]
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(max(i, 0), len(pts) - 2)
        seg_len = cum[i + 1] - cum[i]
        t = (s - cum[i]) / seg_len if seg_len > 0 else 0.0
        d = pts[i + 1] - pts[i]
        return pts[i] + t * d, math.atan2(d[1], d[0])

    def route_point(self, route, s: float):
        """Point and tangent angle at arclength ``s`` along a route."""
        starts = self.route_starts(route)
        i = max(int(np.searchsorted(starts, s, side="right")) - 1, 0)
        return self.point_on_segment(route[i], s - starts[i])

    def start_heading(self, segment: int) -> float:
        d = self.centerlines[segment][1] - self.centerlines[segment][0]
        return math.atan2(d[1], d[0])

    def end_heading(self, segment: int) -> float:
        d = self.centerlines[segment][-1] - self.centerlines[segment][-2]
        return math.atan2(d[1], d[0])

    def lumen_distance(self, point) -> float:
        """Signed clearance: radius minus distance to the nearest centerline, maximised."""
        return max(r - distance_to_polyline(point, c)
                   for c, r in zip(self.centerlines, self.radii))

    def in_lumen(self, point) -> bool:
        return self.lumen_distance(point) >= 0.0

    def to_dict(self) -> dict:
        return {
            "format_version": PHANTOM_FORMAT_VERSION,
            "seed": self.seed,
            "world_size": self.world_size,
            "entry_point": self.entry_point.tolist(),
            "segments": [
                {"parent": p, "radius": r, "centerline": c.tolist()}
                for p, r, c in zip(self.parents, self.radii, self.centerlines)
            ],
            "targets": [
                {"label": lab, "segment": s, "offset": o, "point": t.tolist()}
                for lab, s, o, t in zip(self.target_labels, self.target_segments,
                                        self.target_offsets, self.targets)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VesselMap":
        if d.get("format_version") != PHANTOM_FORMAT_VERSION:
            raise ValueError(f"unsupported phantom format {d.get('format_version')!r}")
        segs, tgts = d["segments"], d["targets"]
        return cls(
            centerlines=[s["centerline"] for s in segs],
            radii=[s["radius"] for s in segs],
            parents=[s["parent"] for s in segs],
            entry_point=d["entry_point"],
            targets=[t["point"] for t in tgts],
            target_segments=[t["segment"] for t in tgts],
            target_offsets=[t["offset"] for t in tgts],
            world_size=d["world_size"],
            seed=d.get("seed"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "VesselMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _clearance(points, radius, others, world_size):
    """Smallest gap to the world border or to another vessel wall (negative = overlap)."""
    margin = radius + 2.0
    # leaving the frame is penalised harder than touching a neighbour
    slack = 10.0 * min(points.min() - margin, world_size - margin - points.max())
    for other_pts, other_r in others:
        d = distances_to_polyline(points[1:], other_pts).min()
        slack = min(slack, d - (radius + other_r + 2.0))
    return slack


def build_phantom(seed: int = 0, n_targets: int = 9, world_size: float = 224.0) -> VesselMap:
    """Grow a vessel tree with one target near the end of each leaf."""
    if n_targets < 1:
        raise ValueError("n_targets must be at least 1")
    rng = np.random.default_rng(seed)
    w = float(world_size)
    entry = np.array([w / 2 + rng.uniform(-0.04, 0.04) * w, 0.95 * w])
    trunk = _arc(entry, -math.pi / 2 + rng.uniform(-0.1, 0.1),
                 w * rng.uniform(0.24, 0.28), rng.uniform(-0.003, 0.003))
    centerlines, radii, parents, depth = [trunk], [0.04 * w], [-1], [0]
    leaves = [0]

    while len(leaves) < n_targets:
        shallowest = min(depth[i] for i in leaves)
        candidates = [i for i in leaves if depth[i] == shallowest]
        parent = candidates[int(rng.integers(len(candidates)))]
        p_pts = centerlines[parent]
        p_len = _cumlen(p_pts)[-1]
        end_h = math.atan2(*(p_pts[-1] - p_pts[-2])[::-1])
        radius = max(radii[parent] * 0.85, 0.02 * w)
        siblings = []
        for side in (-1.0, 1.0):
            others = [(centerlines[i], radii[i]) for i in range(len(centerlines))
                      if i != parent] + siblings
            length = max(p_len * rng.uniform(0.75, 0.9), 0.1 * w)
            best, best_slack = None, -math.inf
            for attempt in range(40):
                heading = end_h + side * rng.uniform(0.4, 0.6)
                # keep branches growing away from the entry
                heading = min(max(heading, -math.pi / 2 - 1.0), -math.pi / 2 + 1.0)
                curv = rng.uniform(-0.006, 0.006)
                cand = _arc(p_pts[-1], heading, length * (0.9 ** (attempt // 8)), curv)
                slack = _clearance(cand, radius, others, w)
                if slack > best_slack:
                    best, best_slack = cand, slack
                if slack >= 0:
                    break
            pts = best
            centerlines.append(pts)
            radii.append(radius)
            parents.append(parent)
            depth.append(depth[parent] + 1)
            siblings.append((pts, radius))
        leaves.remove(parent)
        leaves.extend([len(centerlines) - 2, len(centerlines) - 1])

    ends = {i: centerlines[i][-1] for i in leaves}
    ordered = sorted(leaves, key=lambda i: (round(ends[i][0], 6), round(ends[i][1], 6)))[:n_targets]
    target_segments, target_offsets, targets = [], [], []
    for seg in ordered:
        cum = _cumlen(centerlines[seg])
        off = 0.8 * cum[-1]
        i = int(np.searchsorted(cum, off, side="right")) - 1
        t = (off - cum[i]) / (cum[i + 1] - cum[i])
        targets.append(centerlines[seg][i] + t * (centerlines[seg][i + 1] - centerlines[seg][i]))
        target_segments.append(seg)
        target_offsets.append(off)
    return VesselMap(centerlines, radii, parents, entry, np.array(targets),
                     target_segments, target_offsets, w, seed)


@dataclass(frozen=True)
class CatheterState:
    insertion: float = 0.0
    base_angle: float = 0.0
    knob_bend: float = 0.0
    route: tuple = (0,)

    def steering(self, kin: Kinematics = DEFAULT_KINEMATICS) -> float:
        """In-plane tip steering in [-1, 1] from knob bend and base twist."""
        s = self.knob_bend * math.cos(self.base_angle) + kin.twist_coupling * math.sin(self.base_angle)
        return min(max(s, -1.0), 1.0)


def tip_pose(state: CatheterState, vmap: VesselMap,
             kin: Kinematics = DEFAULT_KINEMATICS) -> tuple[np.ndarray, float]:
    """Tip position and heading; the lateral offset is clamped inside the lumen."""
    seg, local = _locate(state, vmap)
    point, tangent = vmap.point_on_segment(seg, local)
    sigma = state.steering(kin)
    r = vmap.radii[seg]
    limit = max(r - kin.wall_margin, 0.0)
    lateral = min(max(sigma * kin.lateral_gain * r, -limit), limit)
    normal = np.array([-math.sin(tangent), math.cos(tangent)])
    return point + lateral * normal, _wrap(tangent + sigma * kin.max_deflection)


def _locate(state, vmap):
    return state.route[-1], state.insertion - vmap.route_starts(state.route)[-1]


def check_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"action must have 3 components, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite action {a}")
    if np.any(np.abs(a) > 1.0 + 1e-12):
        raise ValueError(f"action components must lie in [-1, 1], got {a}")
    return np.clip(a, -1.0, 1.0)


def step(state: CatheterState, action, vmap: VesselMap, dt: float | None = None,
         kin: Kinematics = DEFAULT_KINEMATICS) -> CatheterState:
    """Advance the catheter by one control interval."""
    a = check_action(action)
    dt = kin.dt if dt is None else float(dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    insertion = max(0.0, state.insertion + kin.v_max * a[0] * dt)
    base = state.base_angle + kin.omega_max * a[1] * dt
    knob = min(max(state.knob_bend + kin.kappa_max * a[2] * dt, -1.0), 1.0)
    route = list(state.route)
    starts = vmap.route_starts(route)
    while len(route) > 1 and insertion < starts[-1]:
        route.pop()
        starts.pop()
    sigma = CatheterState(insertion, base, knob, tuple(route)).steering(kin)
    while insertion > starts[-1] + vmap.lengths[route[-1]]:
        kids = vmap.children(route[-1])
        end = starts[-1] + vmap.lengths[route[-1]]
        if not kids:
            insertion = end  # leaf end: stop at the wall
            break
        heading = vmap.end_heading(route[-1]) + sigma * kin.max_deflection
        child = min(kids, key=lambda c: abs(_wrap(vmap.start_heading(c) - heading)))
        route.append(child)
        starts.append(end)
    return CatheterState(insertion, base, knob, tuple(route))


def _branch_steering(vmap, parent, child, kin, params):
    """Steering that aims the tip at ``child`` and away from its siblings."""
    end = vmap.end_heading(parent)
    turn = _wrap(vmap.start_heading(child) - end)
    others = [_wrap(vmap.start_heading(c) - end) for c in vmap.children(parent) if c != child]
    sigma = turn / kin.max_deflection
    if others:
        nearest = min(others, key=lambda o: abs(o - turn))
        sigma += 0.5 * math.copysign(1.0, turn - nearest)
    return min(max(sigma, -params.turn_steer), params.turn_steer)


def expert_policy(state: CatheterState, vmap: VesselMap, target_id: int,
                  kin: Kinematics = DEFAULT_KINEMATICS,
                  params: ExpertParams = DEFAULT_EXPERT) -> np.ndarray:
    """Scripted demonstrator steering toward ``vmap.targets[target_id]``."""
    if not 0 <= target_id < vmap.n_targets:
        raise IndexError(f"target {target_id} out of range")
    target_route = vmap.route_to(vmap.target_segments[target_id])
    tip, _ = tip_pose(state, vmap, kin)
    if np.linalg.norm(tip - vmap.targets[target_id]) <= kin.goal_tolerance:
        return np.zeros(3)

    route = state.route
    on_path = route == target_route[:len(route)]
    starts = vmap.route_starts(route)
    depth = len(route) - 1

    sigma_goal = 0.0
    d_ahead = d_behind = math.inf
    if on_path and depth < len(target_route) - 1:
        d_ahead = starts[-1] + vmap.lengths[route[-1]] - state.insertion
        if d_ahead < params.lookahead:
            sigma_goal = _branch_steering(vmap, route[-1], target_route[depth + 1], kin, params)
    if depth > 0:
        d_behind = state.insertion - starts[-1]

    base_goal = math.copysign(params.twist, sigma_goal) if sigma_goal else 0.0
    knob_goal = (sigma_goal - kin.twist_coupling * math.sin(base_goal)) / math.cos(base_goal)
    rotation = float(np.clip(params.rotation_gain * (base_goal - state.base_angle), -1, 1))
    knob = float(np.clip(params.knob_gain * (knob_goal - state.knob_bend), -1, 1))

    if not on_path:
        # wrong branch: pull back to the last shared junction
        return np.array([-1.0, rotation, knob])

    goal_arc = vmap.route_starts(target_route)[-1] + vmap.target_offsets[target_id]
    remaining = goal_arc - state.insertion
    speed = 0.4 + 0.6 * min(max(min(d_ahead, d_behind) / params.slow_zone, 0.0), 1.0)
    speed = min(speed, 0.25 + 0.75 * min(max(remaining / params.approach_zone, 0.0), 1.0))
    if d_ahead < params.commit_zone and abs(state.steering(kin) - sigma_goal) > params.ready_tolerance:
        speed = min(speed, 0.1)
    if remaining <= 0:
        speed = 0.0 if remaining > -kin.goal_tolerance else -0.3
    return np.array([speed, rotation, knob])


_BACKGROUND = (214, 210, 200)
_LUMEN = (150, 178, 205)
_CATHETER = (25, 25, 30)
_DOT = (220, 20, 20)


def _draw_polyline(draw, pts, width, fill):
    flat = [tuple(map(float, p)) for p in pts]
    draw.line(flat, fill=fill, width=width, joint="curve")
    if width > 2:
        r = width / 2.0
        for x, y in flat:
            draw.ellipse([x - r, y - r, x + r, y + r], fill=fill)


def _background(vmap, resolution, target_id):
    key = ("bg", resolution, target_id)
    if key not in vmap._cache:
        scale = resolution / vmap.world_size
        img = Image.new("RGB", (resolution, resolution), _BACKGROUND)
        draw = ImageDraw.Draw(img)
        for pts, r in zip(vmap.centerlines, vmap.radii):
            _draw_polyline(draw, pts * scale, max(1, int(round(2 * r * scale))), _LUMEN)
        dot = max(1.0, 3.0 * scale)
        marks = [vmap.entry_point]
        if target_id is not None:
            marks.append(vmap.targets[target_id])
        for x, y in (m * scale for m in marks):
            draw.ellipse([x - dot, y - dot, x + dot, y + dot], fill=_DOT)
        vmap._cache[key] = img
    return vmap._cache[key]


def catheter_body(state: CatheterState, vmap: VesselMap,
                  kin: Kinematics = DEFAULT_KINEMATICS, bend_length: float = 10.0) -> np.ndarray:
    """Polyline from the entry point to the tip along the entered segments."""
    bend_start = max(state.insertion - bend_length, 0.0)
    pts = [vmap.entry_point]
    for seg, start in zip(state.route, vmap.route_starts(state.route)):
        for p, s in zip(vmap.centerlines[seg][1:], vmap._arclen[seg][1:]):
            if start + s >= bend_start:
                break
            pts.append(p)
    pts.append(vmap.route_point(state.route, bend_start)[0])
    pts.append(tip_pose(state, vmap, kin)[0])
    return np.array(pts)


def render(vmap: VesselMap, state: CatheterState, resolution: int = 224,
           target_id: int | None = None, kin: Kinematics = DEFAULT_KINEMATICS) -> np.ndarray:
    """Top-view RGB frame (uint8, ``resolution x resolution x 3``)."""
    if resolution < 32:
        raise ValueError("resolution must be at least 32")
    scale = resolution / vmap.world_size
    img = _background(vmap, resolution, target_id).copy()
    draw = ImageDraw.Draw(img)
    body = catheter_body(state, vmap, kin) * scale
    _draw_polyline(draw, body, max(1, int(round(2.0 * scale))), _CATHETER)
    return np.asarray(img, dtype=np.uint8).copy()


def generate_episode(vmap: VesselMap, target_id: int, seed: int = 0, noise_scale: float = 0.0,
                     resolution: int = 224, repetition_id: int = 1,
                     kin: Kinematics = DEFAULT_KINEMATICS,
                     params: ExpertParams = DEFAULT_EXPERT) -> Episode:
    """Roll out the noisy expert from the entry point until the target is reached.

    The recorded state at each step is the applied (noisy, clipped) joystick
    command. Noise never flips the sign of a forward command, so demonstrations
    contain no retraction.
    """
    if noise_scale < 0:
        raise ValueError("noise_scale must be non-negative")
    rng = np.random.default_rng(seed)
    state = CatheterState()
    frames, actions, poses = [], [], []
    for _ in range(kin.max_steps):
        tip, heading = tip_pose(state, vmap, kin)
        frames.append(render(vmap, state, resolution, target_id, kin))
        poses.append((tip[0], tip[1], heading))
        clean = expert_policy(state, vmap, target_id, kin, params)
        if not clean.any() and np.linalg.norm(tip - vmap.targets[target_id]) <= kin.goal_tolerance:
            actions.append(clean)
            break
        applied = np.clip(clean + rng.normal(0.0, noise_scale, 3), -1.0, 1.0) if noise_scale else clean
        if clean[0] >= 0:
            applied[0] = max(applied[0], 0.0)
        actions.append(applied)
        state = step(state, applied, vmap, kin.dt, kin)
    else:
        raise EpisodeFailed(
            f"target {target_id} not reached within {kin.max_steps} steps (seed {seed})")
    return Episode(
        scenario_id=target_id + 1,
        repetition_id=repetition_id,
        frames=np.stack(frames),
        states=np.array(actions),
        tip_poses=np.array(poses),
        meta={"seed": int(seed), "noise_scale": float(noise_scale),
              "target": vmap.target_labels[target_id], "resolution": int(resolution)},
    )
