"""Log-playback closed-loop simulation, plan selection and progress-bias calibration."""
import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from . import kernels
from .synth_world import (
    AV,
    Segment,
    WorldConfig,
    _to_frame,
    generate_segment,
    route_from_track,
    scene_context,
)

OUTCOMES = ("ok", "over_progress", "under_progress", "collision", "error")


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


def _route_arrays(route):
    route = np.asarray(route, dtype=np.float64)
    if route.ndim != 2 or route.shape[0] < 2:
        raise ValueError("route needs at least two points")
    seg = np.diff(route, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    if seg_len.sum() <= 0:
        raise ValueError("route must have positive length")
    s0 = np.concatenate([[0.0], np.cumsum(seg_len)])
    return route, seg, seg_len, s0


def project_points(points, route):
    """Arc-length coordinate of the route point nearest each of ``points [..., 2]``."""
    route, seg, seg_len, s0 = _route_arrays(route)
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    d = flat[:, None, :] - route[None, :-1, :]
    l2 = np.where(seg_len > 0, seg_len**2, 1.0)
    u = np.clip((d * seg[None]).sum(-1) / l2, 0.0, 1.0)
    u = np.where(seg_len > 0, u, 0.0)
    foot = route[None, :-1] + u[..., None] * seg[None]
    dist = np.hypot(*(flat[:, None, :] - foot).transpose(2, 0, 1))
    j = np.argmin(dist, axis=1)
    s = s0[j] + u[np.arange(len(flat)), j] * seg_len[j]
    return s.reshape(pts.shape[:-1])


def progress(track, route) -> float:
    """Route arc length at the projection of the trajectory endpoint."""
    track = np.asarray(track, dtype=np.float64)
    if track.ndim != 2 or track.shape[0] == 0:
        raise ValueError("empty trajectory")
    return float(project_points(track[-1], route))


def route_length(route) -> float:
    return float(_route_arrays(route)[3][-1])


def select_plan(rollouts, route, alpha):
    """Index of ``argmin_i mean_j ADE(y_i, y_j) - alpha (P(y_i) - mean P)``; ties to the lowest index."""
    trajs = np.asarray(rollouts, dtype=np.float64)
    if trajs.ndim != 3 or trajs.shape[0] < 1:
        raise ValueError("rollouts must be [R, T, 2] with R >= 1")
    ade = kernels.pairwise_ade(trajs).mean(axis=1)
    prog = project_points(trajs[:, -1], route)
    score = ade - alpha * (prog - prog.mean())
    return int(np.argmin(score)), score


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------


@dataclass
class Scenario:
    segment: Segment
    world: WorldConfig
    start: int = 50  # history samples before the first simulated step
    steps: int = 300
    scenario_id: str = ""

    def __post_init__(self):
        if self.segment.positions.shape[1] < self.start + self.steps + 1:
            raise ValueError("logged AV track does not cover the simulated duration")
        if not self.scenario_id:
            self.scenario_id = f"{self.world.seed}-{self.segment.segment_id}"
        _route_arrays(self.segment.route)

    @property
    def dt(self):
        return self.segment.dt

    @property
    def route(self):
        return self.segment.route

    @property
    def logged_av(self):
        return self.segment.positions[0, self.start : self.start + self.steps + 1]

    def logged_progress(self) -> float:
        log = self.logged_av
        return progress(log, self.route) - progress(log[:1], self.route)

    def to_dict(self):
        s = self.segment
        return {
            "scenario_id": self.scenario_id,
            "world": self.world.to_dict(),
            "start": self.start,
            "steps": self.steps,
            "segment": {
                "segment_id": s.segment_id,
                "dt": s.dt,
                "times": np.round(s.times, 6).tolist(),
                "positions": np.round(s.positions, 4).tolist(),
                "headings": np.round(s.headings, 6).tolist(),
                "extents": s.extents.tolist(),
                "types": s.types.tolist(),
                "behaviors": list(s.behaviors),
                "roadgraph": np.round(s.roadgraph, 4).tolist(),
                "traffic_lights": np.round(s.traffic_lights, 4).tolist(),
                "route": np.round(s.route, 4).tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d):
        g = d["segment"]
        seg = Segment(
            segment_id=int(g["segment_id"]),
            times=np.asarray(g["times"]),
            positions=np.asarray(g["positions"]),
            headings=np.asarray(g["headings"]),
            extents=np.asarray(g["extents"]),
            types=np.asarray(g["types"], dtype=np.int64),
            behaviors=list(g["behaviors"]),
            roadgraph=np.asarray(g["roadgraph"]),
            traffic_lights=np.asarray(g["traffic_lights"]),
            route=np.asarray(g["route"]),
            dt=float(g["dt"]),
        )
        return cls(seg, WorldConfig.from_dict(d["world"]), int(d["start"]), int(d["steps"]), d["scenario_id"])


def make_scenarios(world: WorldConfig, segment_ids, history_s=5.0, duration_s=30.0, route_extension=200.0):
    """Scenarios from freshly generated segments long enough for history plus simulation.

    The route runs ``route_extension`` meters past the logged endpoint so that
    over-progress stays measurable.
    """
    w = replace(world, duration_s=history_s + duration_s)
    start = int(round(history_s * w.sim_hz))
    steps = int(round(duration_s * w.sim_hz))
    out = []
    for i in segment_ids:
        seg = generate_segment(w, int(i))
        seg = replace(seg, route=route_from_track(seg.positions[0], extension=route_extension))
        out.append(Scenario(seg, w, start, steps))
    return out


def save_scenarios(scenarios, path):
    with open(path, "w") as fh:
        for s in scenarios:
            fh.write(json.dumps(s.to_dict()) + "\n")


def load_scenarios(path):
    with open(path) as fh:
        return [Scenario.from_dict(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------


@dataclass
class PlanRequest:
    """What a policy sees at one simulation step."""

    scenario: Scenario
    step: int  # simulated steps taken so far
    history: np.ndarray  # [start + step + 1, 2] AV positions (log then executed)
    headings: np.ndarray  # [start + step + 1]
    num_rollouts: int
    horizon: int  # plan points at token spacing
    token_dt: float
    rng: np.random.Generator

    @property
    def index(self):
        return self.scenario.start + self.step

    @property
    def position(self):
        return self.history[-1]

    def logged_future(self):
        """Logged AV positions at token spacing after the current time (clamped at log end)."""
        sc = self.scenario
        k = int(round(self.token_dt / sc.dt))
        idx = self.index + k * np.arange(1, self.horizon + 1)
        idx = np.minimum(idx, sc.segment.positions.shape[1] - 1)
        return sc.segment.positions[0, idx]


class OraclePolicy:
    """Every rollout replays the logged AV future."""

    def __call__(self, req: PlanRequest):
        fut = req.logged_future()
        return np.broadcast_to(fut, (req.num_rollouts,) + fut.shape).copy()


class StationaryPolicy:
    def __call__(self, req: PlanRequest):
        return np.broadcast_to(req.position, (req.num_rollouts, req.horizon, 2)).copy()


@dataclass
class ScaledLogPolicy:
    """Rollouts scale the logged displacement by a spread of speed factors.

    Rollout ``i`` uses ``bias(scenario) * scales[i]``, so a larger progress
    bias selects a faster rollout: the response to alpha is monotone.
    """

    scales: tuple = tuple(np.linspace(0.6, 1.4, 9))
    bias: object = None

    def __call__(self, req: PlanRequest):
        b = 1.0 if self.bias is None else float(self.bias(req.scenario))
        sc = req.scenario
        cur_log = sc.segment.positions[0, req.index]
        disp = req.logged_future() - cur_log
        s = np.resize(np.asarray(self.scales, dtype=np.float64), req.num_rollouts) * b
        return req.position + s[:, None, None] * disp[None]


@dataclass
class ModelPolicy:
    """Samples route-conditioned plans from an M=1 planner."""

    model: object
    vocab: object
    temperature: float = 1.0
    history_s: float = 5.0

    def __call__(self, req: PlanRequest):
        from .joint_model.sampling import sample_rollouts

        sc, w = req.scenario, req.scenario.world
        k = int(round(self.vocab.token_dt / sc.dt))
        cur = req.index
        hist = int(round(self.history_s / sc.dt))
        hist_idx = np.arange(cur - hist, cur + 1, k)
        ctx = scene_context(sc.segment, cur, w, hist_idx, av_pos=req.history, av_head=req.headings, with_route=True)
        origin, yaw = ctx["origin"], ctx["yaw"]
        seeds = _to_frame(req.history[[cur - k, cur]], origin, yaw)
        n = sc.segment.positions.shape[0]
        ex = {
            "agents": ctx["agents"],
            "roadgraph": ctx["roadgraph"],
            "traffic_lights": ctx["traffic_lights"],
            "route": ctx["route"],
            "agent_types": sc.segment.types,
            "modeled": np.array([AV], dtype=np.int64),
            "seeds": np.concatenate([seeds[None], np.zeros((n - 1, 2, 2))], axis=0),
        }
        seed = int(req.rng.integers(2**31))
        rs = sample_rollouts(self.model, ex, req.num_rollouts, self.vocab, self.temperature, seed=seed)
        local = rs.decoded[:, 0, : req.horizon]
        c, s = math.cos(yaw), math.sin(yaw)
        return np.stack([origin[0] + c * local[..., 0] - s * local[..., 1],
                         origin[1] + s * local[..., 0] + c * local[..., 1]], axis=-1)


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProgressThresholds:
    min_m: float = 5.0
    rel: float = 0.15

    def limit(self, logged):
        return max(self.min_m, self.rel * abs(logged))


@dataclass
class ScenarioResult:
    scenario_id: str
    outcome: str
    progress: float
    logged_progress: float
    collision_step: int = -1
    collision_agent: int = -1
    conditions: list = field(default_factory=list)
    diagnostic: str = ""
    track: np.ndarray | None = None

    def to_dict(self):
        d = {k: v for k, v in self.__dict__.items() if k != "track"}
        d["progress"] = round(float(self.progress), 6)
        d["logged_progress"] = round(float(self.logged_progress), 6)
        return d


def _ratio(over, under):
    if under == 0:
        return math.inf if over > 0 else math.nan
    return over / under


@dataclass
class FailureReport:
    results: list = field(default_factory=list)

    def count(self, outcome):
        return sum(r.outcome == outcome for r in self.results)

    @property
    def eta(self):
        return sum(r.outcome != "ok" for r in self.results)

    @property
    def over(self):
        return self.count("over_progress")

    @property
    def under(self):
        return self.count("under_progress")

    @property
    def ratio(self):
        """Over- to under-progress count; ``inf`` for n/0 and ``nan`` for 0/0."""
        return _ratio(self.over, self.under)

    def summary(self):
        return {
            "scenarios": len(self.results),
            "eta": self.eta,
            "over_progress": self.over,
            "under_progress": self.under,
            "collision": self.count("collision"),
            "error": self.count("error"),
            "ratio": self.ratio,
        }


def _plan_step(prev, cur, plan, token_dt, dt):
    """Position after ``dt`` along a cubic through the last position, the current one and the plan."""
    t = np.concatenate([[-token_dt, 0.0], token_dt * np.arange(1, len(plan) + 1)])
    pts = np.concatenate([prev[None], cur[None], plan], axis=0)
    return CubicSpline(t, pts, axis=0)(dt)


def _boxes(xy, head, extent):
    out = np.empty(xy.shape[:-1] + (5,))
    out[..., :2] = xy
    out[..., 2] = head
    out[..., 3] = extent[0]
    out[..., 4] = extent[1]
    return out


def simulate(policy, scenario: Scenario, num_rollouts=16, alpha=0.0, seed=0, horizon=22, token_dt=0.5,
             thresholds=ProgressThresholds(), keep_track=False) -> ScenarioResult:
    """Roll the AV forward 0.1 s at a time along the selected plan; others replay logs."""
    sc = scenario
    dt = sc.dt
    k = int(round(token_dt / dt))
    seg = sc.segment
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(seg.segment_id), 17]))
    hist = seg.positions[0, : sc.start + 1].copy()
    heads = seg.headings[0, : sc.start + 1].copy()
    pos = np.empty((sc.start + sc.steps + 1, 2))
    head = np.empty(sc.start + sc.steps + 1)
    pos[: sc.start + 1] = hist
    head[: sc.start + 1] = heads
    log_prog = sc.logged_progress()
    p_start = progress(pos[sc.start : sc.start + 1], sc.route)
    for step in range(sc.steps):
        i = sc.start + step
        req = PlanRequest(sc, step, pos[: i + 1], head[: i + 1], num_rollouts, horizon, token_dt, rng)
        rollouts = np.asarray(policy(req), dtype=np.float64)
        if not np.isfinite(rollouts).all():
            return ScenarioResult(sc.scenario_id, "error", math.nan, log_prog, diagnostic=f"non-finite plan at step {step}")
        choice, _ = select_plan(rollouts, sc.route, alpha)
        nxt = _plan_step(pos[i - k], pos[i], rollouts[choice], token_dt, dt)
        if not np.isfinite(nxt).all():
            return ScenarioResult(sc.scenario_id, "error", math.nan, log_prog, diagnostic=f"non-finite step at {step}")
        pos[i + 1] = nxt
        d = nxt - pos[i]
        head[i + 1] = math.atan2(d[1], d[0]) if np.hypot(*d) > 1e-3 else head[i]
    span = slice(sc.start + 1, sc.start + sc.steps + 1)
    ego = _boxes(pos[span], head[span], seg.extents[0])
    others = np.stack([_boxes(seg.positions[j, span], seg.headings[j, span], seg.extents[j])
                       for j in range(1, seg.positions.shape[0])])
    t_hit, agent = kernels.first_overlap(ego, others)
    prog = progress(pos[sc.start:], sc.route) - p_start
    gap = prog - log_prog
    lim = thresholds.limit(log_prog)
    conditions = []
    if gap > lim:
        conditions.append("over_progress")
    elif gap < -lim:
        conditions.append("under_progress")
    if t_hit >= 0:
        conditions.append("collision")
    # progress failures take precedence: replayed agents do not react, so a
    # stalled AV is often struck from behind by its logged follower
    outcome = conditions[0] if conditions else "ok"
    return ScenarioResult(sc.scenario_id, outcome, prog, log_prog,
                          int(t_hit) + 1 if t_hit >= 0 else -1, int(agent) + 1 if t_hit >= 0 else -1,
                          conditions, track=pos[sc.start:].copy() if keep_track else None)


def run_scenarios(policy, scenarios, num_rollouts=16, alpha=0.0, seed=0, **kw) -> FailureReport:
    return FailureReport([simulate(policy, s, num_rollouts, alpha, seed, **kw) for s in scenarios])


# --------------------------------------------------------------------------
# calibration and eta sweeps
# --------------------------------------------------------------------------


@dataclass
class Calibration:
    alpha: float
    ratio: float
    calibrated: bool
    iterations: int
    history: list = field(default_factory=list)


def _in_band(over, under, band):
    return under > 0 and band[0] <= over / under <= band[1]


def bisect_alpha(response, alpha_lo=0.0, alpha_max=10.0, band=(0.8, 1.25), max_iter=12) -> Calibration:
    """Bisection on a ratio assumed non-decreasing in alpha.

    ``response(alpha)`` returns ``(over, under)`` counts. If neither end of the
    range reaches the band the nearer boundary is returned flagged
    uncalibrated; a zero under-progress count never counts as calibrated.
    """
    hist = []

    def ev(a):
        o, u = response(a)
        hist.append((float(a), int(o), int(u)))
        return o, u

    def side(o, u):
        r = _ratio(o, u)
        if math.isnan(r):
            return 0  # balanced (no progress failures either way)
        return -1 if r < band[0] else (1 if r > band[1] else 0)

    o, u = ev(alpha_lo)
    if _in_band(o, u, band):
        return Calibration(alpha_lo, o / u, True, 1, hist)
    if side(o, u) >= 0:
        return Calibration(alpha_lo, _ratio(o, u), False, 1, hist)
    oh, uh = ev(alpha_max)
    if _in_band(oh, uh, band):
        return Calibration(alpha_max, oh / uh, True, 2, hist)
    if side(oh, uh) < 0:
        return Calibration(alpha_max, _ratio(oh, uh), False, 2, hist)
    lo, hi = alpha_lo, alpha_max
    best = (alpha_max, oh, uh)
    for it in range(max_iter):
        mid = 0.5 * (lo + hi)
        om, um = ev(mid)
        if _in_band(om, um, band):
            return Calibration(mid, om / um, True, it + 3, hist)
        if side(om, um) < 0:
            lo = mid
        else:
            hi = mid
            best = (mid, om, um)
    a, o, u = best
    return Calibration(a, _ratio(o, u), False, max_iter + 2, hist)


def calibrate_alpha(policy, scenarios, num_rollouts=16, seed=0, alpha_lo=0.0, alpha_max=10.0,
                    band=(0.8, 1.25), max_iter=12, **kw) -> Calibration:
    """Pick alpha so the over/under-progress ratio on ``scenarios`` lands in ``band``."""

    def response(a):
        rep = run_scenarios(policy, scenarios, num_rollouts, a, seed, **kw)
        return rep.over, rep.under

    return bisect_alpha(response, alpha_lo, alpha_max, band, max_iter)


@dataclass
class EtaRow:
    model: str
    C: float
    alpha: float
    eta: int
    ratio: float
    calibrated: bool
    scenarios: int


def eta_sweep(models, scenarios, calibration_scenarios=None, num_rollouts=16, seed=0, **kw):
    """``models``: iterable of ``(name, C, policy)`` or ``(name, C, policy, alpha)``.

    Policies without a fixed alpha are calibrated first on
    ``calibration_scenarios``, which must not overlap ``scenarios``.
    """
    eval_ids = {s.scenario_id for s in scenarios}
    if calibration_scenarios is not None:
        if eval_ids & {s.scenario_id for s in calibration_scenarios}:
            raise ValueError("calibration scenarios overlap the evaluation set")
    rows, reports = [], []
    for entry in models:
        name, C, policy = entry[:3]
        alpha = entry[3] if len(entry) > 3 else None
        calibrated = True
        if alpha is None:
            if calibration_scenarios is None:
                raise ValueError(f"model {name} needs calibration scenarios or a fixed alpha")
            cal = calibrate_alpha(policy, calibration_scenarios, num_rollouts, seed, **kw)
            alpha, calibrated = cal.alpha, cal.calibrated
        rep = run_scenarios(policy, scenarios, num_rollouts, alpha, seed)
        rows.append(EtaRow(str(name), float(C), float(alpha), rep.eta, rep.ratio, calibrated, len(scenarios)))
        reports.append(rep)
    return rows, reports


def write_outcomes_jsonl(report: FailureReport, path, model=""):
    with open(path, "w") as fh:
        for r in report.results:
            fh.write(json.dumps({"model": model, **r.to_dict()}, sort_keys=True) + "\n")


ETA_COLUMNS = ("model", "C", "alpha", "eta", "ratio", "calibrated", "scenarios")


def write_eta_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ETA_COLUMNS)
        for r in rows:
            w.writerow([r.model, f"{r.C:.6e}", f"{r.alpha:.6f}", r.eta, f"{r.ratio:.6f}", int(r.calibrated), r.scenarios])
