"""Hot trajectory kernels with a numba path and a numpy path.

Each public function dispatches on :data:`motionscale._accel.NUMBA_ENABLED`.
The ``_nb_*`` functions are explicit loops (compiled when numba is on); the
``_np_*`` functions are vectorized numpy. Both paths perform the same float
operations in the same order per element, so results agree to the last ulp
for the codec kernels and to summation-order rounding for the distance ones.
"""
import math

import numpy as np

from ._accel import NUMBA_ENABLED, njit

# --------------------------------------------------------------------------
# Verlet motion codec
# --------------------------------------------------------------------------


@njit
def _nb_verlet_encode(positions, bins, delta_max):
    n_agents, n_points, _ = positions.shape
    n_steps = n_points - 2
    step = 2.0 * delta_max / (bins - 1)
    tokens = np.empty((n_agents, n_steps), dtype=np.int64)
    decoded = np.empty((n_agents, n_steps, 2), dtype=np.float64)
    clamps = np.zeros(n_agents, dtype=np.int64)
    for a in range(n_agents):
        px = positions[a, 0, 0]
        py = positions[a, 0, 1]
        cx = positions[a, 1, 0]
        cy = positions[a, 1, 1]
        for t in range(n_steps):
            hx = 2.0 * cx - px
            hy = 2.0 * cy - py
            rx = positions[a, t + 2, 0] - hx
            ry = positions[a, t + 2, 1] - hy
            clamped = False
            if rx > delta_max:
                rx = delta_max
                clamped = True
            elif rx < -delta_max:
                rx = -delta_max
                clamped = True
            if ry > delta_max:
                ry = delta_max
                clamped = True
            elif ry < -delta_max:
                ry = -delta_max
                clamped = True
            if clamped:
                clamps[a] += 1
            ix = int(math.floor((rx + delta_max) / step + 0.5))
            iy = int(math.floor((ry + delta_max) / step + 0.5))
            ix = min(max(ix, 0), bins - 1)
            iy = min(max(iy, 0), bins - 1)
            tokens[a, t] = ix * bins + iy
            nx = hx + (-delta_max + ix * step)
            ny = hy + (-delta_max + iy * step)
            decoded[a, t, 0] = nx
            decoded[a, t, 1] = ny
            px = cx
            py = cy
            cx = nx
            cy = ny
    return tokens, decoded, clamps


def _np_verlet_encode(positions, bins, delta_max):
    n_agents, n_points, _ = positions.shape
    n_steps = n_points - 2
    step = 2.0 * delta_max / (bins - 1)
    tokens = np.empty((n_agents, n_steps), dtype=np.int64)
    decoded = np.empty((n_agents, n_steps, 2), dtype=np.float64)
    clamps = np.zeros(n_agents, dtype=np.int64)
    prev = positions[:, 0].copy()
    cur = positions[:, 1].copy()
    for t in range(n_steps):
        pred = 2.0 * cur - prev
        resid = positions[:, t + 2] - pred
        clamped = np.any(np.abs(resid) > delta_max, axis=1)
        clamps += clamped
        resid = np.clip(resid, -delta_max, delta_max)
        idx = np.floor((resid + delta_max) / step + 0.5).astype(np.int64)
        idx = np.clip(idx, 0, bins - 1)
        tokens[:, t] = idx[:, 0] * bins + idx[:, 1]
        new = pred + (-delta_max + idx * step)
        decoded[:, t] = new
        prev, cur = cur, new
    return tokens, decoded, clamps


@njit
def _nb_verlet_decode(tokens, seeds, bins, delta_max):
    n_agents, n_steps = tokens.shape
    step = 2.0 * delta_max / (bins - 1)
    out = np.empty((n_agents, n_steps, 2), dtype=np.float64)
    for a in range(n_agents):
        px = seeds[a, 0, 0]
        py = seeds[a, 0, 1]
        cx = seeds[a, 1, 0]
        cy = seeds[a, 1, 1]
        for t in range(n_steps):
            tok = tokens[a, t]
            ix = tok // bins
            iy = tok - ix * bins
            nx = (2.0 * cx - px) + (-delta_max + ix * step)
            ny = (2.0 * cy - py) + (-delta_max + iy * step)
            out[a, t, 0] = nx
            out[a, t, 1] = ny
            px = cx
            py = cy
            cx = nx
            cy = ny
    return out


def _np_verlet_decode(tokens, seeds, bins, delta_max):
    n_agents, n_steps = tokens.shape
    step = 2.0 * delta_max / (bins - 1)
    out = np.empty((n_agents, n_steps, 2), dtype=np.float64)
    offs = np.stack([tokens // bins, tokens % bins], axis=-1)
    offs = -delta_max + offs * step
    prev = seeds[:, 0].astype(np.float64)
    cur = seeds[:, 1].astype(np.float64)
    for t in range(n_steps):
        new = (2.0 * cur - prev) + offs[:, t]
        out[:, t] = new
        prev, cur = cur, new
    return out


def verlet_encode(positions, bins, delta_max):
    """Closed-loop Verlet tokenization of ``[A, T+2, 2]`` tracks.

    Returns ``(tokens [A, T], decoded [A, T, 2], clamp_counts [A])``.
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    if NUMBA_ENABLED:
        return _nb_verlet_encode(positions, int(bins), float(delta_max))
    return _np_verlet_encode(positions, int(bins), float(delta_max))


def verlet_decode(tokens, seeds, bins, delta_max):
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    seeds = np.ascontiguousarray(seeds, dtype=np.float64)
    if NUMBA_ENABLED:
        return _nb_verlet_decode(tokens, seeds, int(bins), float(delta_max))
    return _np_verlet_decode(tokens, seeds, int(bins), float(delta_max))


# --------------------------------------------------------------------------
# Trajectory distances
# --------------------------------------------------------------------------


@njit
def _nb_cross_ade(a, b):
    n, t_len, _ = a.shape
    k = b.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    for i in range(n):
        for j in range(k):
            acc = 0.0
            for t in range(t_len):
                dx = a[i, t, 0] - b[j, t, 0]
                dy = a[i, t, 1] - b[j, t, 1]
                acc += math.sqrt(dx * dx + dy * dy)
            out[i, j] = acc / t_len
    return out


def _np_cross_ade(a, b):
    diff = a[:, None, :, :] - b[None, :, :, :]
    return np.sqrt((diff**2).sum(-1)).mean(-1)


def cross_ade(a, b):
    """ADE between every trajectory of ``a [N, T, 2]`` and ``b [K, T, 2]``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if NUMBA_ENABLED:
        return _nb_cross_ade(a, b)
    return _np_cross_ade(a, b)


def pairwise_ade(trajs):
    """Symmetric ``[R, R]`` ADE matrix."""
    return cross_ade(trajs, trajs)


# --------------------------------------------------------------------------
# K-means over trajectories (ADE assignment, mean-trajectory centroids)
# --------------------------------------------------------------------------


@njit
def _nb_kmeans(trajs, centroids, max_iter):
    n = trajs.shape[0]
    k = centroids.shape[0]
    t_len = trajs.shape[1]
    labels = np.full(n, -1, dtype=np.int64)
    cents = centroids.copy()
    for _ in range(max_iter):
        dist = _nb_cross_ade(trajs, cents)
        changed = False
        for i in range(n):
            best = 0
            for j in range(1, k):
                if dist[i, j] < dist[i, best]:
                    best = j
            if best != labels[i]:
                labels[i] = best
                changed = True
        if not changed:
            break
        sums = np.zeros((k, t_len, 2))
        counts = np.zeros(k, dtype=np.int64)
        for i in range(n):
            counts[labels[i]] += 1
            sums[labels[i]] += trajs[i]
        for j in range(k):
            if counts[j] > 0:
                cents[j] = sums[j] / counts[j]
    return labels, cents


def _np_kmeans(trajs, centroids, max_iter):
    n = trajs.shape[0]
    k = centroids.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    cents = centroids.copy()
    for _ in range(max_iter):
        dist = _np_cross_ade(trajs, cents)
        new = np.argmin(dist, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                cents[j] = trajs[members].sum(0) / members.sum()
    return labels, cents


def kmeans_trajectories(trajs, centroids, max_iter=100):
    """Lloyd iterations; ties go to the lowest centroid index, empty clusters keep their centroid."""
    trajs = np.ascontiguousarray(trajs, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if NUMBA_ENABLED:
        return _nb_kmeans(trajs, centroids, int(max_iter))
    return _np_kmeans(trajs, centroids, int(max_iter))


# --------------------------------------------------------------------------
# Oriented bounding boxes (separating-axis test)
# --------------------------------------------------------------------------


@njit
def _nb_box_corners(x, y, heading, length, width):
    c = math.cos(heading)
    s = math.sin(heading)
    hl = 0.5 * length
    hw = 0.5 * width
    out = np.empty((4, 2))
    signs = ((1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0))
    for i in range(4):
        sl, sw = signs[i]
        out[i, 0] = x + sl * hl * c - sw * hw * s
        out[i, 1] = y + sl * hl * s + sw * hw * c
    return out


@njit
def _nb_boxes_overlap(a, b):
    # a, b: (x, y, heading, length, width)
    ca = _nb_box_corners(a[0], a[1], a[2], a[3], a[4])
    cb = _nb_box_corners(b[0], b[1], b[2], b[3], b[4])
    axes = np.empty((4, 2))
    axes[0, 0] = math.cos(a[2])
    axes[0, 1] = math.sin(a[2])
    axes[1, 0] = -math.sin(a[2])
    axes[1, 1] = math.cos(a[2])
    axes[2, 0] = math.cos(b[2])
    axes[2, 1] = math.sin(b[2])
    axes[3, 0] = -math.sin(b[2])
    axes[3, 1] = math.cos(b[2])
    for i in range(4):
        amin = 1e300
        amax = -1e300
        bmin = 1e300
        bmax = -1e300
        for j in range(4):
            pa = ca[j, 0] * axes[i, 0] + ca[j, 1] * axes[i, 1]
            pb = cb[j, 0] * axes[i, 0] + cb[j, 1] * axes[i, 1]
            amin = min(amin, pa)
            amax = max(amax, pa)
            bmin = min(bmin, pb)
            bmax = max(bmax, pb)
        if amax < bmin or bmax < amin:
            return False
    return True


@njit
def _nb_first_overlap(ego, others, valid):
    # ego [T, 5]; others [N, T, 5]; valid [N, T]
    n, t_len, _ = others.shape
    for t in range(t_len):
        for i in range(n):
            if valid[i, t] and _nb_boxes_overlap(ego[t], others[i, t]):
                return t, i
    return -1, -1


def _np_corners(boxes):
    x, y, h, length, width = (boxes[..., i] for i in range(5))
    c, s = np.cos(h), np.sin(h)
    sl = np.array([1.0, 1.0, -1.0, -1.0])
    sw = np.array([1.0, -1.0, -1.0, 1.0])
    hl = 0.5 * length[..., None]
    hw = 0.5 * width[..., None]
    cx = x[..., None] + sl * hl * c[..., None] - sw * hw * s[..., None]
    cy = y[..., None] + sl * hl * s[..., None] + sw * hw * c[..., None]
    return np.stack([cx, cy], axis=-1)


def _np_boxes_overlap(a, b):
    """Vectorized SAT over broadcast box arrays ``[..., 5]``."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    ca, cb = _np_corners(a), _np_corners(b)
    axes = np.stack(
        [
            np.stack([np.cos(a[..., 2]), np.sin(a[..., 2])], -1),
            np.stack([-np.sin(a[..., 2]), np.cos(a[..., 2])], -1),
            np.stack([np.cos(b[..., 2]), np.sin(b[..., 2])], -1),
            np.stack([-np.sin(b[..., 2]), np.cos(b[..., 2])], -1),
        ],
        axis=-2,
    )  # [..., 4 axes, 2]
    pa = np.einsum("...cj,...aj->...ac", ca, axes)
    pb = np.einsum("...cj,...aj->...ac", cb, axes)
    separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    return ~separated.any(-1)


def _np_first_overlap(ego, others, valid):
    hits = _np_boxes_overlap(ego[None], others) & valid
    if not hits.any():
        return -1, -1
    t_hit = np.where(hits.any(0))[0][0]
    return int(t_hit), int(np.where(hits[:, t_hit])[0][0])


def boxes_overlap(a, b):
    """SAT overlap of two boxes given as ``(x, y, heading, length, width)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if NUMBA_ENABLED:
        return bool(_nb_boxes_overlap(a, b))
    return bool(_np_boxes_overlap(a, b))


def first_overlap(ego, others, valid=None):
    """First ``(step, agent)`` where the ego box overlaps any valid other box, else ``(-1, -1)``."""
    ego = np.ascontiguousarray(ego, dtype=np.float64)
    others = np.ascontiguousarray(others, dtype=np.float64)
    if valid is None:
        valid = np.ones(others.shape[:2], dtype=np.bool_)
    valid = np.ascontiguousarray(valid, dtype=np.bool_)
    if others.shape[0] == 0:
        return -1, -1
    if NUMBA_ENABLED:
        t, i = _nb_first_overlap(ego, others, valid)
        return int(t), int(i)
    return _np_first_overlap(ego, others, valid)


def python_reference(name):
    """The loop implementation of kernel ``name`` run uncompiled (for cross-checks)."""
    fn = globals()["_nb_" + name]
    return getattr(fn, "py_func", fn)


def numpy_reference(name):
    return globals()["_np_" + name]


# --------------------------------------------------------------------------
# Kinematic integration for the synthetic world
# --------------------------------------------------------------------------


@njit
def _nb_integrate(p0, heading0, speed0, target_speed, yaw_rate, accel_bound, tau, dt):
    """Second-difference integration ``p[k+1] = 2 p[k] - p[k-1] + a[k] dt^2``.

    ``a`` combines a longitudinal speed-tracking term and a lateral ``v * omega``
    term, scaled down to ``accel_bound`` so the discrete acceleration never
    exceeds the bound.
    """
    n, steps = target_speed.shape
    pos = np.empty((n, steps, 2))
    head = np.empty((n, steps))
    for a in range(n):
        h = heading0[a]
        v = speed0[a]
        pos[a, 0, 0] = p0[a, 0]
        pos[a, 0, 1] = p0[a, 1]
        head[a, 0] = h
        # previous point consistent with the initial velocity
        qx = p0[a, 0] - v * math.cos(h) * dt
        qy = p0[a, 1] - v * math.sin(h) * dt
        for k in range(steps - 1):
            cx = pos[a, k, 0]
            cy = pos[a, k, 1]
            vx = (cx - qx) / dt
            vy = (cy - qy) / dt
            v = math.sqrt(vx * vx + vy * vy)
            if v > 1e-3:
                h = math.atan2(vy, vx)
            head[a, k] = h
            a_lon = (target_speed[a, k] - v) / tau
            a_lat = v * yaw_rate[a, k]
            mag = math.sqrt(a_lon * a_lon + a_lat * a_lat)
            if mag > accel_bound[a]:
                s = accel_bound[a] / mag
                a_lon *= s
                a_lat *= s
            c = math.cos(h)
            sn = math.sin(h)
            ax = a_lon * c - a_lat * sn
            ay = a_lon * sn + a_lat * c
            pos[a, k + 1, 0] = 2.0 * cx - qx + ax * dt * dt
            pos[a, k + 1, 1] = 2.0 * cy - qy + ay * dt * dt
            qx = cx
            qy = cy
        vx = (pos[a, steps - 1, 0] - qx) / dt
        vy = (pos[a, steps - 1, 1] - qy) / dt
        if math.sqrt(vx * vx + vy * vy) > 1e-3:
            h = math.atan2(vy, vx)
        head[a, steps - 1] = h
    return pos, head


def _np_integrate(p0, heading0, speed0, target_speed, yaw_rate, accel_bound, tau, dt):
    n, steps = target_speed.shape
    pos = np.empty((n, steps, 2))
    head = np.empty((n, steps))
    h = heading0.astype(np.float64).copy()
    v = speed0.astype(np.float64)
    pos[:, 0] = p0
    head[:, 0] = h
    q = p0 - (v * dt)[:, None] * np.stack([np.cos(h), np.sin(h)], -1)
    for k in range(steps - 1):
        cur = pos[:, k]
        vel = (cur - q) / dt
        v = np.sqrt(vel[:, 0] * vel[:, 0] + vel[:, 1] * vel[:, 1])
        moving = v > 1e-3
        h = np.where(moving, np.arctan2(vel[:, 1], vel[:, 0]), h)
        head[:, k] = h
        a_lon = (target_speed[:, k] - v) / tau
        a_lat = v * yaw_rate[:, k]
        mag = np.sqrt(a_lon * a_lon + a_lat * a_lat)
        s = np.where(mag > accel_bound, accel_bound / np.where(mag > 0, mag, 1.0), 1.0)
        a_lon = a_lon * s
        a_lat = a_lat * s
        c, sn = np.cos(h), np.sin(h)
        acc = np.stack([a_lon * c - a_lat * sn, a_lon * sn + a_lat * c], -1)
        pos[:, k + 1] = 2.0 * cur - q + acc * dt * dt
        q = cur
    vel = (pos[:, -1] - q) / dt
    moving = np.hypot(vel[:, 0], vel[:, 1]) > 1e-3
    head[:, -1] = np.where(moving, np.arctan2(vel[:, 1], vel[:, 0]), h)
    return pos, head


def integrate_controls(p0, heading0, speed0, target_speed, yaw_rate, accel_bound, tau, dt):
    args = (
        np.ascontiguousarray(p0, dtype=np.float64),
        np.ascontiguousarray(heading0, dtype=np.float64),
        np.ascontiguousarray(speed0, dtype=np.float64),
        np.ascontiguousarray(target_speed, dtype=np.float64),
        np.ascontiguousarray(yaw_rate, dtype=np.float64),
        np.ascontiguousarray(accel_bound, dtype=np.float64),
        float(tau),
        float(dt),
    )
    if NUMBA_ENABLED:
        return _nb_integrate(*args)
    return _np_integrate(*args)
