"""Independent reference implementations shared by the unit and acceptance suites."""
import copy
import math

import numpy as np

from motionscale.joint_model import JointModel, ModelConfig
from motionscale.motion_codec import TokenVocab
from motionscale.rollout_eval import BUCKETS, MissThresholds
from motionscale.synth_world import WindowSpec, WorldConfig, generate_dataset


def randomized(model, seed=0, scale=0.3):
    """Break the zero-head init so logits depend on every input."""
    m = copy.deepcopy(model)
    r = np.random.default_rng(seed)
    for k, v in m.params.items():
        m.params[k] = (v + r.standard_normal(v.shape) * scale * (np.abs(v).mean() + 0.1)).astype(v.dtype)
    return m


def gradient_check_model():
    vocab = TokenVocab(3, 1.0, 0.5)
    world = WorldConfig(seed=2, num_context_agents=3, num_modeled=2, num_road_segments=3, num_traffic_lights=1,
                        num_route_segments=1)
    spec = WindowSpec(history_s=1.0, future_s=1.5, stride_s=1.5)
    ds = generate_dataset(world, vocab, spec, segment_ids=[0])
    mc = ModelConfig.for_world(world, vocab, spec, 4, 1, 1)
    m = randomized(JointModel(mc, dtype=np.float64), seed=0, scale=0.5)
    b = ds.subset(range(2)).arrays
    b["route"] = b["route"].copy()
    b["route"][0, 0, 0, :] = [3, 1, 0, 0.6, 0.8, 3, 1]
    return m, b


def bf_dist(p, q):
    return math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2)


def bf_ade(traj, gt):
    return sum(bf_dist(p, q) for p, q in zip(traj, gt)) / len(gt)


def bf_hit(traj, gt, th, dt, speed):
    """Final-point gate in the frame of the gt's last segment."""
    T = len(gt)
    if speed <= th.low_speed:
        f = th.low_factor
    elif speed >= th.high_speed:
        f = th.high_factor
    else:
        f = th.low_factor + (th.high_factor - th.low_factor) * (speed - th.low_speed) / (th.high_speed - th.low_speed)
    scale = T * dt / th.ref_horizon_s * f
    hx, hy = gt[-1][0] - gt[-2][0], gt[-1][1] - gt[-2][1]
    n = math.hypot(hx, hy)
    ux, uy = hx / n, hy / n
    dx, dy = traj[-1][0] - gt[-1][0], traj[-1][1] - gt[-1][1]
    lon = abs(dx * ux + dy * uy)
    lat = abs(-dx * uy + dy * ux)
    return lat <= th.lateral * scale and lon <= th.longitudinal * scale


def bf_ap(items, num_gt):
    """items: (score, tp) pairs; walk the ranked list and sum trapezoids."""
    ranked = sorted(enumerate(items), key=lambda e: (-e[1][0], e[0]))
    area, tp, r_prev, p_prev = 0.0, 0, 0.0, 1.0
    for k, (_, (_, is_tp)) in enumerate(ranked, start=1):
        tp += is_tp
        r, p = tp / num_gt, tp / k
        area += (r - r_prev) * (p + p_prev) / 2
        r_prev, p_prev = r, p
    return area


def bf_metrics(agents, th, dt):
    ades, wades, fdes, missed = [], [], [], 0
    per_bucket = {}
    for traj, probs, gt, speed, bucket in agents:
        a = [bf_ade(t, gt) for t in traj]
        ades.append(min(a))
        wades.append(sum(p * x for p, x in zip(probs, a)))
        fdes.append(min(bf_dist(t[-1], gt[-1]) for t in traj))
        h = [bf_hit(t, gt, th, dt, speed) for t in traj]
        missed += not any(h)
        best = max((k for k in range(len(traj)) if h[k]), key=lambda k: (probs[k], -k), default=None)
        items, n = per_bucket.get(bucket, ([], 0))
        per_bucket[bucket] = (items + [(probs[k], k == best) for k in range(len(traj))], n + 1)
    n = len(agents)
    aps = [bf_ap(items, c) for items, c in per_bucket.values()]
    return {"min_ade": sum(ades) / n, "w_ade": sum(wades) / n, "min_fde": sum(fdes) / n, "miss_rate": missed / n,
            "map": sum(aps) / len(aps)}


def random_instance(rng):
    n_agents = int(rng.integers(1, 9))
    T = int(rng.integers(2, 12))
    th = MissThresholds()
    agents = []
    for _ in range(n_agents):
        K = int(rng.integers(1, 7))
        v = rng.normal(0, 3, 2)
        gt = np.cumsum(np.tile(v, (T, 1)) + rng.normal(0, 0.3, (T, 2)), axis=0)
        traj = gt[None] + rng.normal(0, rng.choice([0.3, 1.5, 4.0]), (K, T, 2))
        p = rng.dirichlet(np.ones(K))
        agents.append((traj, p, gt, float(rng.uniform(0, 15)), BUCKETS[int(rng.integers(3))]))
    return agents, th
