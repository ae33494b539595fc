"""Raw scene tensors -> per-token feature vectors.

Each scene element becomes one encoder token: agents flatten their history,
road and route segments are single vectors, traffic lights flatten their state
history. There is no per-element index feature, so the encoder treats each
modality as a set.
"""
import numpy as np

POS_SCALE = 50.0
VEL_SCALE = 10.0
EXT_SCALE = 5.0
NUM_TYPES = 4

MODALITIES = ("agents", "roadgraph", "traffic_lights", "route")


def agent_step_features(agents):
    """``[..., T, 10]`` raw states -> ``[..., T, 6]`` normalized kinematics (invalid steps zeroed)."""
    valid = agents[..., 9:10] > 0
    f = np.concatenate(
        [
            agents[..., 0:2] / POS_SCALE,
            np.cos(agents[..., 3:4]),
            np.sin(agents[..., 3:4]),
            agents[..., 4:6] / VEL_SCALE,
        ],
        axis=-1,
    )
    return np.where(valid, f, 0.0)


def _onehot(idx, n):
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, np.clip(idx, 0, n - 1)[..., None], 1.0, axis=-1)
    return out


def agent_features(agents, types):
    """``[B, S, T, 10]`` -> ``[B, S, 6T + 7]`` and validity ``[B, S]``."""
    B, S, T, _ = agents.shape
    steps = agent_step_features(agents).reshape(B, S, T * 6)
    ext = agents[:, :, -1, 6:9] / EXT_SCALE
    f = np.concatenate([steps, ext, _onehot(types, NUM_TYPES)], axis=-1)
    return f, (agents[..., 9] > 0).any(-1)


def polyline_features(poly):
    """``[B, S, 1, 7]`` road/route segments -> ``[B, S, 7]`` and validity."""
    p = poly[:, :, 0]
    kind = p[..., 5].astype(np.int64) - 1
    f = np.concatenate([p[..., 0:2] / POS_SCALE, p[..., 3:5] / 10.0, _onehot(kind, 3)], axis=-1)
    valid = p[..., 6] > 0
    return np.where(valid[..., None], f, 0.0), valid


def light_features(lights):
    """``[B, S, T, 6]`` -> ``[B, S, 7T]`` and validity."""
    B, S, T, _ = lights.shape
    state = _onehot(lights[..., 3].astype(np.int64), 4)
    f = np.concatenate([lights[..., 0:2] / POS_SCALE, state, lights[..., 4:5]], axis=-1)
    valid_t = lights[..., 5:6] > 0
    f = np.where(valid_t, f, 0.0).reshape(B, S, T * 7)
    return f, valid_t[..., 0].any(-1)


def query_features(agents, types, modeled):
    """Current-state features of the modeled agents, ``[B, M, 13]``."""
    cur = np.take_along_axis(agents[:, :, -1, :], modeled[..., None], axis=1)
    kin = agent_step_features(cur)
    ext = cur[..., 6:9] / EXT_SCALE
    t = np.take_along_axis(types, modeled, axis=1)
    return np.concatenate([kin, ext, _onehot(t, NUM_TYPES)], axis=-1)


def feature_dims(history_steps):
    return {
        "agents": 6 * history_steps + 3 + NUM_TYPES,
        "roadgraph": 7,
        "traffic_lights": 7 * history_steps,
        "route": 7,
        "query": 6 + 3 + NUM_TYPES,
    }


def featurize(batch, dtype=np.float64):
    """Dict of encoder modality inputs plus decoder query features."""
    a_f, a_v = agent_features(batch["agents"], batch["agent_types"])
    r_f, r_v = polyline_features(batch["roadgraph"])
    l_f, l_v = light_features(batch["traffic_lights"])
    q_f, q_v = polyline_features(batch["route"])
    return {
        "agents": (a_f.astype(dtype), a_v),
        "roadgraph": (r_f.astype(dtype), r_v),
        "traffic_lights": (l_f.astype(dtype), l_v),
        "route": (q_f.astype(dtype), q_v),
        "query": query_features(batch["agents"], batch["agent_types"], batch["modeled"]).astype(dtype),
    }
