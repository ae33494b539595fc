"""Open-loop metrics, rollout aggregation and inference-compute sweeps."""
import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .compute_ledger import inference_flops
from .kernels import cross_ade, kmeans_trajectories, pairwise_ade

BUCKETS = (
    "straight",
    "straight_left",
    "straight_right",
    "left",
    "right",
    "left_u_turn",
    "right_u_turn",
    "stationary",
)


@dataclass
class ClusteredForecast:
    trajectories: np.ndarray  # [K, T, 2]
    probabilities: np.ndarray  # [K]

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.trajectories.ndim != 3 or self.trajectories.shape[-1] != 2:
            raise ValueError("trajectories must be [K, T, 2]")
        K = self.trajectories.shape[0]
        if K < 1 or self.probabilities.shape != (K,):
            raise ValueError("need K >= 1 and one probability per trajectory")
        if (self.probabilities < 0).any() or abs(self.probabilities.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")

    @property
    def horizon(self):
        return self.trajectories.shape[1]

    def to_dict(self):
        return {"trajectories": self.trajectories.tolist(), "probabilities": self.probabilities.tolist()}


@dataclass(frozen=True)
class MissThresholds:
    lateral: float = 1.0
    longitudinal: float = 2.0
    ref_horizon_s: float = 3.0
    low_speed: float = 1.4
    high_speed: float = 11.0
    low_factor: float = 0.5
    high_factor: float = 1.0

    def __post_init__(self):
        vals = (self.lateral, self.longitudinal, self.ref_horizon_s, self.low_factor, self.high_factor)
        if min(vals) <= 0 or self.low_speed < 0 or self.high_speed <= self.low_speed:
            raise ValueError("thresholds must be positive with low_speed < high_speed")

    def speed_factor(self, speed):
        return float(np.interp(speed, [self.low_speed, self.high_speed], [self.low_factor, self.high_factor]))

    def at(self, horizon_s, speed):
        """(lateral, longitudinal) tolerance at ``horizon_s`` for an agent moving at ``speed``."""
        s = (horizon_s / self.ref_horizon_s) * self.speed_factor(speed)
        return self.lateral * s, self.longitudinal * s


def _check_gt(forecast: ClusteredForecast, gt):
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim != 2 or gt.shape[0] == 0:
        raise ValueError("empty ground truth")
    if not np.isfinite(gt).all():
        raise ValueError("ground truth must be finite")
    if gt.shape[0] != forecast.horizon:
        raise ValueError(f"horizon mismatch: forecast {forecast.horizon} vs gt {gt.shape[0]}")
    return gt


def _ades(forecast, gt):
    return cross_ade(forecast.trajectories, gt[None])[:, 0]


def min_ade(forecast: ClusteredForecast, gt) -> float:
    gt = _check_gt(forecast, gt)
    return float(_ades(forecast, gt).min())


def w_ade(forecast: ClusteredForecast, gt) -> float:
    gt = _check_gt(forecast, gt)
    return float(forecast.probabilities @ _ades(forecast, gt))


def min_fde(forecast: ClusteredForecast, gt) -> float:
    gt = _check_gt(forecast, gt)
    return float(np.hypot(*(forecast.trajectories[:, -1] - gt[-1]).T).min())


def _final_heading(gt, fallback=0.0):
    for a, b in ((gt[-2], gt[-1]), (gt[0], gt[-1])):
        d = b - a
        if np.hypot(*d) > 1e-6:
            return math.atan2(d[1], d[0])
    return fallback


def hits(forecast: ClusteredForecast, gt, thresholds=MissThresholds(), dt=0.5, speed=0.0, heading=None):
    """Per-trajectory boolean: final point within lateral/longitudinal tolerance."""
    gt = _check_gt(forecast, gt)
    h = _final_heading(gt) if heading is None else heading
    lat_tol, lon_tol = thresholds.at(gt.shape[0] * dt, speed)
    d = forecast.trajectories[:, -1] - gt[-1]
    c, s = math.cos(h), math.sin(h)
    lon = np.abs(d[:, 0] * c + d[:, 1] * s)
    lat = np.abs(-d[:, 0] * s + d[:, 1] * c)
    return (lat <= lat_tol) & (lon <= lon_tol)


def _per_agent(values, n):
    if n == 0:
        raise ValueError("empty ground truth")
    return values if values is not None else [None] * n


def miss_rate(forecasts, gts, thresholds=MissThresholds(), dt=0.5, speeds=None, headings=None) -> float:
    """Fraction of agents none of whose trajectories lands within tolerance."""
    n = len(forecasts)
    if n != len(gts):
        raise ValueError("one ground truth per forecast")
    speeds = _per_agent(speeds, n)
    headings = _per_agent(headings, n)
    missed = 0
    for f, g, v, h in zip(forecasts, gts, speeds, headings):
        missed += not hits(f, g, thresholds, dt, 0.0 if v is None else v, h).any()
    return missed / n


def behavior_bucket(track, valid=None, heading0=None) -> str:
    """Classify a ground-truth track by net displacement and cumulative heading change."""
    xy = np.asarray(track, dtype=np.float64)
    if valid is not None:
        xy = xy[np.asarray(valid, dtype=bool)]
    if xy.shape[0] < 2:
        raise ValueError("track needs at least two valid points")
    if not np.isfinite(xy).all():
        raise ValueError("degenerate track")
    disp = xy[-1] - xy[0]
    if np.hypot(*disp) < 2.0:
        return "stationary"
    steps = np.diff(xy, axis=0)
    moving = np.hypot(steps[:, 0], steps[:, 1]) > 1e-3
    heads = np.arctan2(steps[moving, 1], steps[moving, 0])
    h0 = heads[0] if heading0 is None else heading0
    seq = np.concatenate([[h0], heads])
    dh = np.degrees(np.sum((np.diff(seq) + np.pi) % (2 * np.pi) - np.pi))
    if abs(dh) < 15.0:
        lateral = -disp[0] * math.sin(h0) + disp[1] * math.cos(h0)
        if lateral > 2.0:
            return "straight_left"
        if lateral < -2.0:
            return "straight_right"
        return "straight"
    if abs(dh) <= 135.0:
        return "left" if dh > 0 else "right"
    return "left_u_turn" if dh > 0 else "right_u_turn"


def average_precision(scores, is_tp, num_gt) -> float:
    """Trapezoid-rule area under the precision/recall curve, starting at (0, 1)."""
    if num_gt == 0:
        raise ValueError("no ground truth")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / num_gt
    r = np.concatenate([[0.0], rec])
    p = np.concatenate([[1.0], prec])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def map_metric(forecasts, gts, thresholds=MissThresholds(), dt=0.5, speeds=None, headings=None, buckets=None):
    """Mean over non-empty behavior buckets of per-bucket AP.

    Within an agent the highest-probability trajectory inside tolerance is a
    true positive; every other trajectory is a false positive.
    """
    n = len(forecasts)
    if n != len(gts):
        raise ValueError("one ground truth per forecast")
    speeds = _per_agent(speeds, n)
    headings = _per_agent(headings, n)
    buckets = buckets if buckets is not None else [behavior_bucket(g) for g in gts]
    per = {}
    for f, g, v, h, b in zip(forecasts, gts, speeds, headings, buckets):
        ok = hits(f, g, thresholds, dt, 0.0 if v is None else v, h)
        tp = np.zeros(len(ok), dtype=bool)
        if ok.any():
            cand = np.flatnonzero(ok)
            tp[cand[np.argmax(f.probabilities[cand])]] = True
        s, t, c = per.get(b, ([], [], 0))
        per[b] = (s + list(f.probabilities), t + list(tp), c + 1)
    aps = [average_precision(s, t, c) for s, t, c in per.values()]
    return float(np.mean(aps))


def _seeds(D, K, radius):
    """Density-first then farthest-first seeds that skip anything within ``radius`` of a seed."""
    R = D.shape[0]
    density = (D <= radius).sum(1)
    chosen = [int(np.argmax(density))]
    near = D[chosen[0]].copy()
    while len(chosen) < K:
        free = near > radius
        pool = free if free.any() else near > 0
        if not pool.any():
            pool = np.ones(R, dtype=bool)
            pool[chosen] = False
        score = np.where(pool, near, -np.inf)
        nxt = int(np.argmax(score))
        chosen.append(nxt)
        near = np.minimum(near, D[nxt])
    return chosen


def aggregate(rollouts, K, radius=None, thresholds=MissThresholds(), dt=0.5, max_iter=100) -> ClusteredForecast:
    """NMS-seeded K-means over ``R`` rollouts ``[R, T, 2]``; probabilities are member fractions."""
    trajs = np.asarray(rollouts, dtype=np.float64)
    R = trajs.shape[0]
    if K < 1 or R < K:
        raise ValueError(f"need 1 <= K <= R, got K={K}, R={R}")
    if radius is None:
        radius = thresholds.at(trajs.shape[1] * dt, thresholds.high_speed)[0]
    D = pairwise_ade(trajs)
    seeds = _seeds(D, K, radius)
    labels, cents = kmeans_trajectories(trajs, trajs[seeds], max_iter)
    probs = np.bincount(labels, minlength=K) / R
    return ClusteredForecast(cents, probs)


def evaluate_forecasts(forecasts, gts, thresholds=MissThresholds(), dt=0.5, speeds=None):
    """Mean per-agent metrics over all predicted agents."""
    if not forecasts:
        raise ValueError("empty ground truth")
    return {
        "min_ade": float(np.mean([min_ade(f, g) for f, g in zip(forecasts, gts)])),
        "w_ade": float(np.mean([w_ade(f, g) for f, g in zip(forecasts, gts)])),
        "min_fde": float(np.mean([min_fde(f, g) for f, g in zip(forecasts, gts)])),
        "miss_rate": miss_rate(forecasts, gts, thresholds, dt, speeds),
        "map": map_metric(forecasts, gts, thresholds, dt, speeds),
    }


# --------------------------------------------------------------------------
# inference sweeps
# --------------------------------------------------------------------------

SWEEP_COLUMNS = ("samples", "flops", "min_ade", "min_fde", "miss_rate", "map")


@dataclass
class SweepRow:
    samples: int
    flops: int
    min_ade: float
    min_fde: float
    miss_rate: float
    map: float


def default_sample_counts(lo=8, hi=1024):
    out, n = [], lo
    while n <= hi:
        out.append(n)
        n *= 2
    return out


def inference_sweep(model, dataset, vocab, sample_counts=None, K=6, seed=0, temperature=1.0,
                    thresholds=MissThresholds(), scenes=None):
    """One row per sample count.

    Each scene is sampled once at the largest count; smaller counts use the
    leading prefix of that draw, so rows differ only in how many samples are
    aggregated.
    """
    from .joint_model.sampling import sample_rollouts

    counts = sorted(set(sample_counts or default_sample_counts()))
    if counts[0] < K:
        raise ValueError("every sample count must be >= K")
    idx = range(len(dataset)) if scenes is None else scenes
    per_count = {n: ([], []) for n in counts}
    speeds = []
    dt = vocab.token_dt
    for i in idx:
        ex = dataset.example(i)
        rs = sample_rollouts(model, ex, counts[-1], vocab, temperature, seed=seed + int(i))
        modeled = ex["modeled"]
        gts = ex["future"][modeled]
        v = np.hypot(*(ex["seeds"][modeled, 1] - ex["seeds"][modeled, 0]).T) / dt
        speeds.extend(v.tolist())
        for n in counts:
            fs, gs = per_count[n]
            for m in range(len(modeled)):
                fs.append(aggregate(rs.decoded[:n, m], K, thresholds=thresholds, dt=dt))
                gs.append(gts[m])
    rows = []
    for n in counts:
        fs, gs = per_count[n]
        met = evaluate_forecasts(fs, gs, thresholds, dt, speeds)
        rows.append(SweepRow(n, inference_flops(model.cfg.shape, n), met["min_ade"], met["min_fde"],
                             met["miss_rate"], met["map"]))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r.samples, r.flops, f"{r.min_ade:.6f}", f"{r.min_fde:.6f}", f"{r.miss_rate:.6f}", f"{r.map:.6f}"])


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        return [
            SweepRow(int(r["samples"]), int(r["flops"]), float(r["min_ade"]), float(r["min_fde"]),
                     float(r["miss_rate"]), float(r["map"]))
            for r in csv.DictReader(fh)
        ]


def write_predictions_jsonl(records, path):
    """``records``: iterable of (scene_id, agent_id, ClusteredForecast, gt)."""
    with open(path, "w") as fh:
        for scene_id, agent_id, f, gt in records:
            row = {"scene_id": scene_id, "agent_id": int(agent_id), **f.to_dict(),
                   "gt": np.asarray(gt).tolist()}
            fh.write(json.dumps(row) + "\n")


def read_predictions_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            r = json.loads(line)
            out.append((r["scene_id"], r["agent_id"],
                        ClusteredForecast(r["trajectories"], r["probabilities"]), np.asarray(r["gt"])))
    return out


# --------------------------------------------------------------------------
# crossover frontier
# --------------------------------------------------------------------------


@dataclass
class FrontierSegment:
    lo_flops: float
    hi_flops: float
    model: str

    def to_dict(self):
        return asdict(self)


def _curve(table):
    if isinstance(table, (list, tuple)) and table and isinstance(table[0], SweepRow):
        x = [r.flops for r in table]
        y = [r.min_ade for r in table]
    else:
        x, y = table
    x = np.log10(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    o = np.argsort(x)
    return x[o], y[o]


def _interp(curve, x):
    cx, cy = curve
    if x < cx[0] or x > cx[-1]:
        return None
    return float(np.interp(x, cx, cy))


def crossover_frontier(tables, higher_is_better=False):
    """Lower envelope of metric-vs-log10(FLOPs) curves, attributed piecewise.

    ``tables`` maps model name to a list of :class:`SweepRow` (metric =
    minADE) or to an ``(flops, metric)`` pair. Curves are linear in
    log10(FLOPs) between points. Ties go to the model whose cheapest point
    uses fewer FLOPs.
    """
    if not tables:
        raise ValueError("no tables")
    sign = -1.0 if higher_is_better else 1.0
    curves = {k: _curve(v) for k, v in tables.items()}
    cost = {k: c[0][0] for k, c in curves.items()}
    names = sorted(curves, key=lambda k: (cost[k], k))
    xs = sorted({float(x) for c in curves.values() for x in c[0]})
    crit = set(xs)
    for lo, hi in zip(xs[:-1], xs[1:]):
        live = [k for k in names if _interp(curves[k], lo) is not None and _interp(curves[k], hi) is not None]
        for i, a in enumerate(live):
            for b in live[i + 1:]:
                da = _interp(curves[a], lo) - _interp(curves[b], lo)
                db = _interp(curves[a], hi) - _interp(curves[b], hi)
                if da * db < 0:
                    crit.add(lo + (hi - lo) * da / (da - db))
    crit = sorted(crit)
    segs = []
    for lo, hi in zip(crit[:-1], crit[1:]):
        mid = 0.5 * (lo + hi)
        best, best_v = None, math.inf
        for k in names:
            v = _interp(curves[k], mid)
            if v is not None and sign * v < best_v:
                best, best_v = k, sign * v
        if best is None:
            continue
        if segs and segs[-1][2] == best and segs[-1][1] == lo:
            segs[-1][1] = hi
        else:
            segs.append([lo, hi, best])
    if not segs:
        k = names[0]
        x0 = curves[k][0][0]
        return [FrontierSegment(10**x0, 10**x0, k)]
    return [FrontierSegment(10**lo, 10**hi, k) for lo, hi, k in segs]


def breakpoints(frontier):
    """FLOPs values where the frontier switches model."""
    return [a.hi_flops for a, b in zip(frontier[:-1], frontier[1:]) if a.model != b.model]
