"""Deterministic synthetic driving worlds.

A segment is a 30 s log at 10 Hz on a four-way intersection: one AV plus
vehicles, pedestrians and cyclists, each driven by a behavior primitive
(straight, turns, u-turns, stop-and-go, crossings, weaving) integrated with a
bounded-acceleration kinematic model. Segments are a pure function of
``(seed, segment_id)``.

Examples are cut with a sliding window (5 s history, 11 s future, 1.5 s stride)
and expressed in the AV frame at the window's current time.
"""
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .motion_codec import TokenVocab, encode_batch

AV, VEHICLE, PEDESTRIAN, CYCLIST = 0, 1, 2, 3
AGENT_TYPES = ("av", "vehicle", "pedestrian", "cyclist")

BEHAVIORS = (
    "straight",
    "left_turn",
    "right_turn",
    "u_turn",
    "stop_and_go",
    "pedestrian_crossing",
    "cyclist_weaving",
)
VEHICLE_BEHAVIORS = BEHAVIORS[:5]
_BEHAVIOR_TYPE = {
    "pedestrian_crossing": PEDESTRIAN,
    "cyclist_weaving": CYCLIST,
}

# length, width, height per agent type
_EXTENTS = {
    AV: (4.8, 2.0, 1.7),
    VEHICLE: (4.5, 1.9, 1.6),
    PEDESTRIAN: (0.6, 0.6, 1.7),
    CYCLIST: (1.8, 0.7, 1.7),
}

METERS_PER_MILE = 1609.344
LANE_OFFSET = 1.85
ROAD_SEGMENT_LENGTH = 10.0
ROAD_EXTENT = 150.0

AGENT_FEATURES = 10  # x, y, z, heading, vx, vy, length, width, height, valid
ROAD_FEATURES = 7  # x, y, z, dir_x, dir_y, type, valid
LIGHT_FEATURES = 6  # x, y, z, state, confidence, valid


def _default_weights():
    return {
        "straight": 0.30,
        "left_turn": 0.12,
        "right_turn": 0.12,
        "u_turn": 0.04,
        "stop_and_go": 0.12,
        "pedestrian_crossing": 0.18,
        "cyclist_weaving": 0.12,
    }


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    num_segments: int = 100
    duration_s: float = 30.0
    sim_hz: int = 10
    num_context_agents: int = 16
    num_modeled: int = 8
    num_road_segments: int = 40
    num_traffic_lights: int = 4
    num_route_segments: int = 4
    behavior_weights: dict = field(default_factory=_default_weights)
    accel_bound: float = 3.0
    speed_noise: float = 0.05
    yaw_noise: float = 0.004
    obs_noise: float = 0.05
    clearance: float = 6.0

    def __post_init__(self):
        w = self.behavior_weights
        unknown = set(w) - set(BEHAVIORS)
        if unknown:
            raise ValueError(f"unknown behaviors {sorted(unknown)}")
        if any(v < 0 for v in w.values()) or not math.isclose(sum(w.values()), 1.0, abs_tol=1e-9):
            raise ValueError("behavior weights must be non-negative and sum to 1")
        if self.num_modeled > self.num_context_agents:
            raise ValueError("num_modeled must not exceed num_context_agents")
        if self.num_context_agents < 1 or self.num_modeled < 1:
            raise ValueError("need at least one agent")

    @property
    def num_steps(self) -> int:
        return int(round(self.duration_s * self.sim_hz)) + 1

    @property
    def dt(self) -> float:
        return 1.0 / self.sim_hz

    @property
    def scene_tokens(self) -> int:
        return self.num_context_agents + self.num_road_segments + self.num_traffic_lights + self.num_route_segments

    def weight_vector(self):
        return np.array([self.behavior_weights.get(b, 0.0) for b in BEHAVIORS])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class WindowSpec:
    history_s: float = 5.0
    future_s: float = 11.0
    stride_s: float = 1.5

    def samples(self, sim_hz, token_dt):
        """Integer sample counts ``(history, future, stride, token_step)``."""
        conv = [x * sim_hz for x in (self.history_s, self.future_s, self.stride_s, token_dt)]
        ints = [int(round(c)) for c in conv]
        if any(abs(c - i) > 1e-9 for c, i in zip(conv, ints)):
            raise ValueError("window lengths must be multiples of the sim period")
        if ints[0] % ints[3] or ints[1] % ints[3]:
            raise ValueError("history and future must be multiples of token_dt")
        return tuple(ints)

    def to_dict(self):
        return asdict(self)


@dataclass
class Segment:
    segment_id: int
    times: np.ndarray  # [K]
    positions: np.ndarray  # [S_a, K, 2]
    headings: np.ndarray  # [S_a, K]
    extents: np.ndarray  # [S_a, 3]
    types: np.ndarray  # [S_a]
    behaviors: list
    roadgraph: np.ndarray  # [R, 7] world frame
    traffic_lights: np.ndarray  # [L, 6] world frame
    route: np.ndarray  # [P, 2] AV route polyline
    dt: float

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def velocities(self):
        v = np.zeros_like(self.positions)
        v[:, 1:] = np.diff(self.positions, axis=1) / self.dt
        v[:, 0] = v[:, 1] if self.positions.shape[1] > 1 else 0.0
        return v

    def crop(self, duration_s):
        k = int(round(duration_s / self.dt)) + 1
        return replace(
            self,
            times=self.times[:k],
            positions=self.positions[:, :k],
            headings=self.headings[:, :k],
        )


# --------------------------------------------------------------------------
# map
# --------------------------------------------------------------------------


def build_roadgraph():
    """Lane centerlines of a four-way intersection plus four crosswalks, as 10 m segments."""
    rows = []
    edges = np.arange(-ROAD_EXTENT, ROAD_EXTENT, ROAD_SEGMENT_LENGTH)
    for sign in (1.0, -1.0):
        for s0 in edges:
            a = sign * s0
            # east-west lanes: +x on y=-offset, -x on y=+offset
            rows.append((a, -sign * LANE_OFFSET, 0.0, sign * ROAD_SEGMENT_LENGTH, 0.0, 1.0, 1.0))
            # north-south lanes: +y on x=+offset, -y on x=-offset
            rows.append((sign * LANE_OFFSET, a, 0.0, 0.0, sign * ROAD_SEGMENT_LENGTH, 1.0, 1.0))
    for cx, cy, dx, dy in ((-9.0, -6.0, 0.0, 12.0), (9.0, -6.0, 0.0, 12.0), (-6.0, 9.0, 12.0, 0.0), (-6.0, -9.0, 12.0, 0.0)):
        rows.append((cx, cy, 0.0, dx, dy, 2.0, 1.0))
    return np.array(rows, dtype=np.float64)


def _lane_pose(rng, lane, s):
    """Position and heading of arc coordinate ``s`` on one of the four lanes."""
    if lane == 0:
        return np.array([s, -LANE_OFFSET]), 0.0
    if lane == 1:
        return np.array([-s, LANE_OFFSET]), math.pi
    if lane == 2:
        return np.array([LANE_OFFSET, s]), math.pi / 2
    return np.array([-LANE_OFFSET, -s]), -math.pi / 2


# --------------------------------------------------------------------------
# behaviors
# --------------------------------------------------------------------------


def _smooth_noise(rng, steps, scale, corr=30):
    """Slowly varying zero-mean noise (moving average of white noise)."""
    raw = rng.standard_normal(steps + corr)
    kernel = np.ones(corr) / math.sqrt(corr)
    return scale * np.convolve(raw, kernel, mode="valid")[:steps]


def _behavior_controls(rng, behavior, agent_type, steps, dt, cfg):
    """Initial speed and per-step (target_speed, yaw_rate) for one agent."""
    t = np.arange(steps) * dt
    if agent_type == PEDESTRIAN:
        v0 = rng.uniform(1.0, 1.8)
    elif agent_type == CYCLIST:
        v0 = rng.uniform(3.0, 6.0)
    else:
        v0 = rng.uniform(5.0, 13.0)
    target = np.full(steps, v0)
    yaw = np.zeros(steps)
    dur = t[-1]

    if behavior in ("left_turn", "right_turn"):
        t0 = rng.uniform(2.0, max(2.5, dur - 10.0))
        turn = rng.uniform(3.0, 5.0)
        sign = 1.0 if behavior == "left_turn" else -1.0
        vt = min(v0, 6.0)
        target[(t >= t0 - 3.0) & (t < t0 + turn)] = vt
        yaw[(t >= t0) & (t < t0 + turn)] = sign * (math.pi / 2) / turn
    elif behavior == "u_turn":
        t0 = rng.uniform(2.0, max(2.5, dur - 14.0))
        turn = rng.uniform(6.0, 8.0)
        target[(t >= t0 - 3.0) & (t < t0 + turn)] = 3.0
        yaw[(t >= t0) & (t < t0 + turn)] = math.pi / turn
    elif behavior == "stop_and_go":
        t0 = rng.uniform(1.0, max(1.5, dur - 12.0))
        stop = rng.uniform(3.0, 8.0)
        target[(t >= t0) & (t < t0 + stop)] = 0.0
    elif behavior == "pedestrian_crossing":
        if rng.uniform() < 0.5:
            t0 = rng.uniform(2.0, max(2.5, dur - 6.0))
            target[(t >= t0) & (t < t0 + rng.uniform(2.0, 5.0))] = 0.0
    elif behavior == "cyclist_weaving":
        period = rng.uniform(4.0, 8.0)
        amp = rng.uniform(0.1, 0.25)
        yaw = amp * np.sin(2 * math.pi * t / period + rng.uniform(0, 2 * math.pi))

    if behavior != "stop_and_go":
        target = np.maximum(target * (1.0 + _smooth_noise(rng, steps, cfg.speed_noise)), 0.0)
    if behavior != "straight" or agent_type != AV:
        yaw = yaw + _smooth_noise(rng, steps, cfg.yaw_noise)
    if behavior == "straight":
        # keep total heading change small for straight drivers
        yaw = yaw - yaw.mean()
    return v0, target, yaw


def _initial_pose(rng, agent_type):
    if agent_type == PEDESTRIAN:
        side = rng.integers(4)
        along = rng.uniform(-25.0, 25.0)
        if side == 0:
            return np.array([along, -9.0 + rng.uniform(-1, 1)]), math.pi / 2
        if side == 1:
            return np.array([along, 9.0 + rng.uniform(-1, 1)]), -math.pi / 2
        if side == 2:
            return np.array([-9.0 + rng.uniform(-1, 1), along]), 0.0
        return np.array([9.0 + rng.uniform(-1, 1), along]), math.pi
    lane = int(rng.integers(4))
    s = rng.uniform(-70.0, 40.0)
    pos, heading = _lane_pose(rng, lane, s)
    if agent_type == CYCLIST:
        normal = np.array([math.sin(heading), -math.cos(heading)])
        pos = pos + 1.5 * normal
    return pos, heading


def _pick_behavior(rng, cfg, vehicle_only=False):
    w = cfg.weight_vector()
    if vehicle_only:
        w = w[: len(VEHICLE_BEHAVIORS)]
        if w.sum() <= 0:
            return "straight"
        w = w / w.sum()
    return BEHAVIORS[int(rng.choice(len(w), p=w))]


def generate_segment(cfg: WorldConfig, segment_id: int) -> Segment:
    """One logged scene; bit-identical for identical ``(cfg.seed, segment_id)``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(segment_id)]))
    steps, dt = cfg.num_steps, cfg.dt
    n = cfg.num_context_agents

    behaviors = [_pick_behavior(rng, cfg, vehicle_only=True)]
    types = [AV]
    for _ in range(n - 1):
        b = _pick_behavior(rng, cfg)
        behaviors.append(b)
        types.append(_BEHAVIOR_TYPE.get(b, VEHICLE))
    types = np.array(types, dtype=np.int64)

    p0 = np.zeros((n, 2))
    h0 = np.zeros(n)
    v0 = np.zeros(n)
    target = np.zeros((n, steps))
    yaw = np.zeros((n, steps))
    bound = np.where(types == PEDESTRIAN, 1.5, cfg.accel_bound).astype(np.float64)
    # AV starts west of the intersection heading east
    p0[0] = (rng.uniform(-60.0, -25.0), -LANE_OFFSET)
    v0[0], target[0], yaw[0] = _behavior_controls(rng, behaviors[0], AV, steps, dt, cfg)
    for i in range(1, n):
        p0[i], h0[i] = _initial_pose(rng, types[i])
        v0[i], target[i], yaw[i] = _behavior_controls(rng, behaviors[i], types[i], steps, dt, cfg)

    pos, head = kernels.integrate_controls(p0, h0, v0, target, yaw, bound, 0.8, dt)

    # keep other agents clear of the AV so logs are collision-free
    for i in range(1, n):
        for _ in range(20):
            gap = np.hypot(*(pos[i] - pos[0]).T).min()
            if gap >= cfg.clearance:
                break
            p_i, h_i = _initial_pose(rng, types[i])
            v_i, t_i, y_i = _behavior_controls(rng, behaviors[i], types[i], steps, dt, cfg)
            p_new, h_new = kernels.integrate_controls(
                p_i[None], np.array([h_i]), np.array([v_i]), t_i[None], y_i[None], bound[i : i + 1], 0.8, dt
            )
            pos[i], head[i] = p_new[0], h_new[0]
        else:
            pos[i] += np.array([0.0, 400.0])

    extents = np.array([_EXTENTS[int(t)] for t in types], dtype=np.float64)
    lights = np.zeros((cfg.num_traffic_lights, LIGHT_FEATURES))
    corners = np.array([(-12.0, -12.0), (12.0, -12.0), (12.0, 12.0), (-12.0, 12.0)])
    for j in range(cfg.num_traffic_lights):
        lights[j, :2] = corners[j % 4] * (1 + j // 4)
        lights[j, 2] = 5.0
        lights[j, 3] = float(rng.integers(1, 4))
        lights[j, 4] = rng.uniform(0.7, 1.0)
        lights[j, 5] = 1.0

    return Segment(
        segment_id=int(segment_id),
        times=np.arange(steps) * dt,
        positions=pos,
        headings=head,
        extents=extents,
        types=types,
        behaviors=behaviors,
        roadgraph=build_roadgraph(),
        traffic_lights=lights,
        route=route_from_track(pos[0]),
        dt=dt,
    )


def route_from_track(track, spacing=2.0, extension=30.0):
    """Resample an AV path at ``spacing`` meters and extend it along the final heading."""
    seg = np.diff(track, axis=0)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    if s[-1] < 1e-6:
        heading = np.array([1.0, 0.0])
        pts = track[:1]
    else:
        grid = np.arange(0.0, s[-1], spacing)
        grid = np.append(grid, s[-1])
        pts = np.stack([np.interp(grid, s, track[:, 0]), np.interp(grid, s, track[:, 1])], -1)
        last = track[-1] - track[np.searchsorted(s, max(0.0, s[-1] - 2.0))]
        norm = np.hypot(*last)
        heading = last / norm if norm > 1e-6 else np.array([1.0, 0.0])
    ext = pts[-1] + np.outer(np.arange(1, int(extension / spacing) + 1) * spacing, heading)
    return np.concatenate([pts, ext], axis=0)


# --------------------------------------------------------------------------
# examples
# --------------------------------------------------------------------------


def _to_frame(xy, origin, heading):
    c, s = math.cos(heading), math.sin(heading)
    d = xy - origin
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], -1)


def _rotate(v, heading):
    c, s = math.cos(heading), math.sin(heading)
    return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1]], -1)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def route_tokens(route_xy, origin, heading, count):
    """``count`` route segments ahead of ``origin`` in the local frame, roadgraph layout."""
    out = np.zeros((count, 1, ROAD_FEATURES))
    if count == 0 or route_xy is None or len(route_xy) < 2:
        return out
    local = _to_frame(route_xy, origin, heading)
    start = int(np.argmin(np.hypot(local[:, 0], local[:, 1])))
    pts = local[start:]
    stride = max(1, int(round(ROAD_SEGMENT_LENGTH / 2.0)))
    for j in range(count):
        a = j * stride
        b = a + stride
        if b >= len(pts):
            break
        out[j, 0, :2] = pts[a]
        out[j, 0, 3:5] = pts[b] - pts[a]
        out[j, 0, 5] = 3.0
        out[j, 0, 6] = 1.0
    return out


def scene_context(seg: Segment, cur, cfg: WorldConfig, hist_idx, av_pos=None, av_head=None, rng=None, with_route=False):
    """Scene tensors in the AV frame at sample index ``cur``.

    ``av_pos``/``av_head`` override the AV's logged history (closed-loop use).
    """
    positions = seg.positions
    headings = seg.headings
    if av_pos is not None:
        positions = positions.copy()
        headings = headings.copy()
        positions[0, : len(av_pos)] = av_pos
        headings[0, : len(av_head)] = av_head
    origin = positions[0, cur].copy()
    yaw0 = float(headings[0, cur])
    n = positions.shape[0]

    hp = positions[:, hist_idx]
    vel = np.zeros_like(hp)
    prev_idx = np.maximum(np.asarray(hist_idx) - 1, 0)
    vel[:] = (positions[:, hist_idx] - positions[:, prev_idx]) / seg.dt
    local = _to_frame(hp, origin, yaw0)
    if rng is not None and cfg.obs_noise > 0:
        noise = rng.normal(0.0, cfg.obs_noise, size=local.shape)
        noise[0] = 0.0  # the AV observes itself exactly
        local = local + noise
    agents = np.zeros((n, len(hist_idx), AGENT_FEATURES))
    agents[..., :2] = local
    agents[..., 3] = _wrap(headings[:, hist_idx] - yaw0)
    agents[..., 4:6] = _rotate(vel, yaw0)
    agents[..., 6:9] = seg.extents[:, None, :]
    agents[..., 9] = 1.0

    road = seg.roadgraph
    road_local = np.zeros((len(road), ROAD_FEATURES))
    road_local[:, :2] = _to_frame(road[:, :2], origin, yaw0)
    road_local[:, 3:5] = _rotate(road[:, 3:5], yaw0)
    road_local[:, 5:] = road[:, 5:]
    mid = road_local[:, :2] + 0.5 * road_local[:, 3:5]
    order = np.lexsort((np.arange(len(road)), np.hypot(mid[:, 0], mid[:, 1])))
    roadgraph = np.zeros((cfg.num_road_segments, 1, ROAD_FEATURES))
    keep = order[: cfg.num_road_segments]
    roadgraph[: len(keep), 0] = road_local[keep]

    lights = np.zeros((cfg.num_traffic_lights, len(hist_idx), LIGHT_FEATURES))
    tl = seg.traffic_lights.copy()
    tl[:, :2] = _to_frame(tl[:, :2], origin, yaw0)
    lights[:] = tl[:, None, :]

    route = np.zeros((cfg.num_route_segments, 1, ROAD_FEATURES))
    if with_route:
        route = route_tokens(seg.route, origin, yaw0, cfg.num_route_segments)
    return {
        "agents": agents,
        "roadgraph": roadgraph,
        "traffic_lights": lights,
        "route": route,
        "origin": origin,
        "yaw": yaw0,
    }


def window_starts(num_samples, spec: WindowSpec, sim_hz, token_dt):
    hist, fut, stride, _ = spec.samples(sim_hz, token_dt)
    span = hist + fut
    if num_samples - 1 < span:
        raise ValueError(f"segment shorter than {spec.history_s + spec.future_s} s")
    return list(range(0, num_samples - 1 - span + 1, stride))


def window_examples(seg: Segment, cfg: WorldConfig, vocab: TokenVocab, spec: WindowSpec = WindowSpec(), with_route=False):
    """Sliding-window training examples from one segment."""
    hist, fut, stride, tok = spec.samples(int(round(1.0 / seg.dt)), vocab.token_dt)
    starts = window_starts(len(seg.times), spec, int(round(1.0 / seg.dt)), vocab.token_dt)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(seg.segment_id), 7]))
    out = []
    for w, s0 in enumerate(starts):
        cur = s0 + hist
        hist_idx = np.arange(s0, cur + 1, tok)
        ctx = scene_context(seg, cur, cfg, hist_idx, rng=rng, with_route=with_route)
        origin, yaw0 = ctx["origin"], ctx["yaw"]
        track_idx = np.arange(cur - tok, cur + fut + 1, tok)
        tracks = _to_frame(seg.positions[:, track_idx], origin, yaw0)
        enc = encode_batch(tracks, vocab)
        dist = np.hypot(tracks[:, 1, 0], tracks[:, 1, 1])
        dist[0] = -1.0
        order = np.lexsort((np.arange(len(dist)), dist))
        seg_len = np.hypot(*np.diff(tracks[:, 1:], axis=1).transpose(2, 0, 1)).sum(-1)
        ex = {
            "scene_id": f"{cfg.seed}-{seg.segment_id}-{w}",
            "agents": ctx["agents"],
            "roadgraph": ctx["roadgraph"],
            "traffic_lights": ctx["traffic_lights"],
            "route": ctx["route"],
            "agent_types": seg.types.copy(),
            "order": order.astype(np.int64),
            "seeds": tracks[:, :2].copy(),
            "future": tracks[:, 2:].copy(),
            "tokens": enc.tokens,
            "clamps": enc.clamp_counts,
            "agent_miles": seg_len / METERS_PER_MILE,
        }
        ex["modeled"] = order[: cfg.num_modeled].copy()
        out.append(ex)
    return out


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

ARRAY_KEYS = ("agents", "roadgraph", "traffic_lights", "route", "agent_types", "order",
              "seeds", "future", "tokens", "clamps", "agent_miles", "modeled")


class Dataset:
    """Stacked examples; every array has a leading example axis."""

    def __init__(self, arrays, scene_ids, meta=None):
        self.arrays = arrays
        self.scene_ids = list(scene_ids)
        self.meta = dict(meta or {})
        self.dropped = int(self.meta.get("dropped", 0))

    def __len__(self):
        return len(self.scene_ids)

    def __getitem__(self, key):
        return self.arrays[key]

    @classmethod
    def from_examples(cls, examples, meta=None):
        if not examples:
            raise ValueError("no examples")
        arrays = {k: np.stack([ex[k] for ex in examples]) for k in ARRAY_KEYS}
        return cls(arrays, [ex["scene_id"] for ex in examples], meta)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset({k: v[idx] for k, v in self.arrays.items()}, [self.scene_ids[i] for i in idx], self.meta)

    def example(self, i):
        out = {k: v[i] for k, v in self.arrays.items()}
        out["scene_id"] = self.scene_ids[i]
        return out

    @property
    def num_modeled(self):
        return self.arrays["modeled"].shape[1]

    def modeled(self, key):
        """``key`` gathered at the modeled-agent slots, shape ``[N, M, ...]``."""
        idx = self.arrays["modeled"]
        arr = self.arrays[key]
        return np.take_along_axis(arr, idx.reshape(idx.shape + (1,) * (arr.ndim - 2)), axis=1)

    def miles(self) -> float:
        """Sum of modeled-agent future arc lengths, in miles."""
        return float(self.modeled("agent_miles").sum())

    def type_counts(self):
        types = self.modeled("agent_types")
        return {name: int((types == k).sum()) for k, name in enumerate(AGENT_TYPES)}

    def with_route(self, route):
        arrays = dict(self.arrays)
        arrays["route"] = route
        return Dataset(arrays, self.scene_ids, self.meta)


def generate_dataset(cfg: WorldConfig, vocab: TokenVocab = TokenVocab(), spec: WindowSpec = WindowSpec(),
                     segment_ids=None, with_route=False) -> Dataset:
    ids = range(cfg.num_segments) if segment_ids is None else segment_ids
    examples = []
    for sid in ids:
        examples.extend(window_examples(generate_segment(cfg, sid), cfg, vocab, spec, with_route))
    meta = {"world": cfg.to_dict(), "vocab": vocab.to_dict(), "window": spec.to_dict()}
    return Dataset.from_examples(examples, meta)


def exclude_agent(ds: Dataset, agent_type: int = AV) -> Dataset:
    """Re-select modeled slots skipping ``agent_type``; the agent stays in context.

    Scenes with fewer than ``M`` eligible agents are dropped and counted in
    ``dropped``.
    """
    M = ds.num_modeled
    types = ds["agent_types"]
    order = ds["order"]
    keep, modeled = [], []
    for i in range(len(ds)):
        eligible = [int(a) for a in order[i] if types[i, a] != agent_type]
        if len(eligible) < M:
            continue
        keep.append(i)
        modeled.append(eligible[:M])
    out = ds.subset(keep) if keep else None
    dropped = len(ds) - len(keep)
    if out is None:
        raise ValueError("every scene was dropped")
    out.arrays["modeled"] = np.array(modeled, dtype=np.int64)
    out.meta = dict(ds.meta, excluded_type=AGENT_TYPES[agent_type], dropped=ds.dropped + dropped)
    out.dropped = ds.dropped + dropped
    return out


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

DECIMALS = 4


def _fmt(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind in "iub":
        return arr.tolist()
    rounded = np.round(arr.astype(np.float64), DECIMALS) + 0.0  # drop negative zeros
    return json.loads(json.dumps(rounded.tolist()))


def example_to_json(ex) -> str:
    rec = {"scene_id": ex["scene_id"]}
    for k in ARRAY_KEYS:
        rec[k] = _fmt(ex[k])
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def save_jsonl(ds: Dataset, path):
    with open(path, "w") as fh:
        fh.write(json.dumps({"meta": ds.meta}, sort_keys=True) + "\n")
        for i in range(len(ds)):
            fh.write(example_to_json(ds.example(i)) + "\n")


def load_jsonl(path) -> Dataset:
    examples, meta = [], {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "meta" in rec:
                meta = rec["meta"]
                continue
            ex = {"scene_id": rec["scene_id"]}
            for k in ARRAY_KEYS:
                ex[k] = np.asarray(rec[k])
            for k in ("agent_types", "order", "tokens", "clamps", "modeled"):
                ex[k] = ex[k].astype(np.int64)
            examples.append(ex)
    return Dataset.from_examples(examples, meta)


def world_from_meta(meta):
    return WorldConfig.from_dict(meta["world"]), TokenVocab.from_dict(meta["vocab"]), WindowSpec(**meta["window"])
