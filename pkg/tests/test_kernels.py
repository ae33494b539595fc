"""Compiled loops, vectorized numpy and the uncompiled loops must agree."""
import json
import os
import subprocess
import sys

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon

from motionscale import _accel, kernels


def both(name):
    return kernels.python_reference(name), kernels.numpy_reference(name), getattr(kernels, "_nb_" + name)


def test_flag_default_is_numba():
    assert _accel.NUMBA_ENABLED


def test_flag_disables_numba():
    code = ("import json, numpy as np; from motionscale import _accel, kernels;"
            "t, d, c = kernels.verlet_encode(np.cumsum(np.ones((2, 9, 2)), 1) ** 1.5, 13, 1.0);"
            "print(json.dumps([_accel.NUMBA_ENABLED, t.tolist()]))")
    env = dict(os.environ, MOTIONSCALE_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    enabled, tokens = json.loads(out.stdout)
    assert enabled is False
    t, _, _ = kernels.verlet_encode(np.cumsum(np.ones((2, 9, 2)), 1) ** 1.5, 13, 1.0)
    assert tokens == t.tolist()


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 25), st.sampled_from([3, 13]))
@settings(max_examples=60, deadline=None)
def test_codec_paths_agree(seed, A, T, V):
    rng = np.random.default_rng(seed)
    pos = np.cumsum(rng.normal(0, 1.0, (A, T + 2, 2)), axis=1)
    py, npy, nb = both("verlet_encode")
    ref = py(pos, V, 1.0)
    for fn in (npy, nb):
        got = fn(pos, V, 1.0)
        for r, g in zip(ref, got):
            np.testing.assert_array_equal(r, g)
    py, npy, nb = both("verlet_decode")
    seeds = pos[:, :2].copy()
    ref = py(ref[0], seeds, V, 1.0)
    np.testing.assert_array_equal(npy(got[0], seeds, V, 1.0), ref)
    np.testing.assert_array_equal(nb(got[0], seeds, V, 1.0), ref)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 7), st.integers(1, 15))
@settings(max_examples=60, deadline=None)
def test_distance_paths_agree(seed, n, k, T):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, T, 2)), rng.normal(size=(k, T, 2))
    py, npy, nb = both("cross_ade")
    ref = py(a, b)
    np.testing.assert_allclose(npy(a, b), ref, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(nb(a, b), ref, rtol=1e-13, atol=1e-14)
    brute = np.array([[np.mean(np.linalg.norm(a[i] - b[j], axis=1)) for j in range(k)] for i in range(n)])
    np.testing.assert_allclose(ref, brute, rtol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def test_kmeans_paths_agree(seed, n, k):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    trajs = rng.normal(size=(n, 6, 2)) + rng.integers(0, 3, size=(n, 1, 1)) * 5.0
    init = trajs[:k].copy()
    py, npy, nb = both("kmeans")
    lab, cen = npy(trajs, init, 100)
    lab2, cen2 = nb(trajs, init, 100)
    lab3, cen3 = py(trajs, init, 100)
    np.testing.assert_array_equal(lab, lab2)
    np.testing.assert_array_equal(lab, lab3)
    np.testing.assert_allclose(cen, cen2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(cen, cen3, rtol=1e-12, atol=1e-12)


def _poly(b):
    x, y, h, L, W = b
    c, s = np.cos(h), np.sin(h)
    pts = [(x + sl * L / 2 * c - sw * W / 2 * s, y + sl * L / 2 * s + sw * W / 2 * c)
           for sl, sw in ((1, 1), (1, -1), (-1, -1), (-1, 1))]
    return Polygon(pts)


boxes = st.tuples(st.floats(-6, 6), st.floats(-6, 6), st.floats(-np.pi, np.pi), st.floats(0.5, 5), st.floats(0.5, 3))


@given(boxes, boxes)
@settings(max_examples=400, deadline=None)
def test_box_overlap_matches_polygon_oracle(a, b):
    pa, pb = _poly(a), _poly(b)
    if 1e-9 < pa.distance(pb) or pa.intersection(pb).area > 1e-9:
        want = pa.intersects(pb)
        assert kernels.boxes_overlap(a, b) == want
        assert bool(kernels.numpy_reference("boxes_overlap")(np.array(a), np.array(b))) == want
    assert kernels.boxes_overlap(a, b) == kernels.boxes_overlap(b, a)


def test_first_overlap_paths(rng):
    ego = np.zeros((20, 5))
    ego[:, 0] = np.arange(20) * 1.0
    ego[:, 3:] = (4.5, 2.0)
    others = np.zeros((3, 20, 5))
    others[:, :, 3:] = (4.5, 2.0)
    others[:, :, 1] = 10.0
    others[1, 12:, :2] = (12.0, 0.5)
    valid = np.ones((3, 20), bool)
    assert kernels.first_overlap(ego, others, valid) == (12, 1)
    assert kernels.numpy_reference("first_overlap")(ego, others, valid) == (12, 1)
    valid[1, :14] = False
    assert kernels.first_overlap(ego, others, valid) == (14, 1)
    assert kernels.first_overlap(ego, others[:0]) == (-1, -1)


def test_integrate_paths_agree(rng):
    n, steps = 5, 80
    args = (rng.normal(size=(n, 2)) * 10, rng.uniform(-3, 3, n), rng.uniform(0, 10, n),
            rng.uniform(0, 12, (n, steps)), rng.normal(0, 0.2, (n, steps)), np.full(n, 3.0), 0.8, 0.1)
    py, npy, nb = both("integrate")
    ref = py(*args)
    for fn in (npy, nb):
        got = fn(*args)
        np.testing.assert_allclose(got[0], ref[0], rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(got[1], ref[1], rtol=1e-10, atol=1e-10)
    pos = ref[0]
    acc = (pos[:, 2:] - 2 * pos[:, 1:-1] + pos[:, :-2]) / 0.01
    assert np.linalg.norm(acc, axis=-1).max() <= 3.0 + 1e-9
