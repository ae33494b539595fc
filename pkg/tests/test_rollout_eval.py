
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionscale.compute_ledger import inference_flops
from oracles import bf_metrics, random_instance
from motionscale.rollout_eval import (
    ClusteredForecast,
    MissThresholds,
    SweepRow,
    aggregate,
    average_precision,
    behavior_bucket,
    breakpoints,
    crossover_frontier,
    default_sample_counts,
    evaluate_forecasts,
    hits,
    inference_sweep,
    map_metric,
    min_ade,
    min_fde,
    miss_rate,
    read_predictions_jsonl,
    read_sweep_csv,
    w_ade,
    write_predictions_jsonl,
    write_sweep_csv,
)

def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        agents, th = random_instance(rng)
        fs = [ClusteredForecast(t, p) for t, p, *_ in agents]
        gts = [g for _, _, g, _, _ in agents]
        speeds = [s for *_, s, _ in agents]
        buckets = [b for *_, b in agents]
        want = bf_metrics([(t.tolist(), p.tolist(), g.tolist(), s, b) for t, p, g, s, b in agents], th, 0.5)
        got = {
            "min_ade": np.mean([min_ade(f, g) for f, g in zip(fs, gts)]),
            "w_ade": np.mean([w_ade(f, g) for f, g in zip(fs, gts)]),
            "min_fde": np.mean([min_fde(f, g) for f, g in zip(fs, gts)]),
            "miss_rate": miss_rate(fs, gts, th, 0.5, speeds),
            "map": map_metric(fs, gts, th, 0.5, speeds, buckets=buckets),
        }
        for k in want:
            assert abs(got[k] - want[k]) <= 1e-9, k


# ------------------------------------------------------------------ hand cases


def line(T, v=(1.0, 0.0)):
    return np.arange(1, T + 1)[:, None] * np.asarray(v)[None]


def test_exact_match():
    gt = line(6)
    f = ClusteredForecast(gt[None], [1.0])
    assert min_ade(f, gt) == w_ade(f, gt) == min_fde(f, gt) == 0.0
    assert miss_rate([f], [gt]) == 0.0


def test_weighted_ade_hand_case():
    gt = line(4)
    f = ClusteredForecast(np.stack([gt, gt + [0.0, 2.0]]), [0.25, 0.75])
    assert w_ade(f, gt) == 1.5
    assert min_ade(f, gt) == 0.0


def test_constant_offset():
    gt = line(8)
    f = ClusteredForecast((gt + [1.0, 0.0])[None], [1.0])
    assert min_ade(f, gt) == 1.0 and min_fde(f, gt) == 1.0
    f = ClusteredForecast((gt + [3.0, 4.0])[None], [1.0])
    assert min_ade(f, gt) == 5.0 and min_fde(f, gt) == 5.0


def test_mixed_two_agent_case():
    th = MissThresholds()
    gt = line(6, (2.0, 0.0))  # 3 s horizon, heading +x
    lat_tol, _ = th.at(3.0, 11.0)
    hit = ClusteredForecast(np.stack([gt + [0, 0.2], gt + [0, 5.0]]), [0.6, 0.4])
    miss = ClusteredForecast((gt + [0, lat_tol + 0.5])[None], [1.0])
    assert miss_rate([hit, miss], [gt, gt], th, 0.5, [11.0, 11.0]) == 0.5
    # one bucket: ranked (0.6 TP, 0.4 FP, 1.0 FP) -> order 1.0 FP, 0.6 TP, 0.4 FP over 2 gts
    # PR points (0,1) -> (0,0) -> (0.5,0.5) -> (0.5,1/3); area = 0.5 * (0 + 0.5) / 2
    m = map_metric([hit, miss], [gt, gt], th, 0.5, [11.0, 11.0], buckets=["straight", "straight"])
    assert m == pytest.approx(0.125, abs=1e-12)


def test_error_cases():
    gt = line(4)
    f = ClusteredForecast(gt[None], [1.0])
    with pytest.raises(ValueError):
        min_ade(f, gt[:3])
    with pytest.raises(ValueError):
        min_ade(f, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        miss_rate([], [])
    with pytest.raises(ValueError):
        ClusteredForecast(gt[None], [0.9])
    with pytest.raises(ValueError):
        average_precision([1.0], [True], 0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_metric_invariants(seed):
    agents, th = random_instance(np.random.default_rng(seed))
    fs = [ClusteredForecast(t, p) for t, p, *_ in agents]
    gts = [g for _, _, g, _, _ in agents]
    m = evaluate_forecasts(fs, gts, th, 0.5, [s for *_, s, _ in agents])
    for f, g in zip(fs, gts):
        assert min_ade(f, g) <= w_ade(f, g) + 1e-12
    assert all(v >= 0 for v in m.values())
    assert 0 <= m["miss_rate"] <= 1 and 0 <= m["map"] <= 1


def test_threshold_scaling():
    th = MissThresholds()
    assert th.at(3.0, 11.0) == (1.0, 2.0)
    assert th.at(3.0, 0.5) == (0.5, 1.0)
    assert th.at(6.0, 20.0) == (2.0, 4.0)
    lat, lon = th.at(3.0, (1.4 + 11.0) / 2)
    assert lat == pytest.approx(0.75)
    with pytest.raises(ValueError):
        MissThresholds(lateral=0.0)


def test_hits_use_gt_heading_frame():
    th = MissThresholds()
    gt = line(6, (0.0, 2.0))  # heading +y
    f = ClusteredForecast(np.stack([gt + [0.0, 1.9], gt + [1.5, 0.0]]), [0.5, 0.5])
    assert hits(f, gt, th, 0.5, 11.0).tolist() == [True, False]


# ------------------------------------------------------------------ buckets


def arc(radius, sweep_deg, n=40, sign=1):
    a = np.radians(np.linspace(0, sweep_deg, n))
    return np.stack([radius * np.sin(a), sign * radius * (1 - np.cos(a))], -1)


def lane_change(offset, n=40):
    x = np.linspace(0, 60, n)
    return np.stack([x, offset / (1 + np.exp(-(x - 30) / 4))], -1)


@pytest.mark.parametrize(
    "track,want",
    [
        (np.zeros((10, 2)), "stationary"),
        (line(50), "straight"),
        (lane_change(3.5), "straight_left"),
        (lane_change(-3.5), "straight_right"),
        (arc(15, 90), "left"),
        (arc(15, 90, sign=-1), "right"),
        (arc(5, 170, sign=-1), "right_u_turn"),
        (arc(5, 170), "left_u_turn"),
    ],
)
def test_bucket_rules(track, want):
    assert behavior_bucket(track) == want


def test_bucket_rejects_degenerate():
    with pytest.raises(ValueError):
        behavior_bucket(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        behavior_bucket(np.zeros((5, 2)), valid=np.zeros(5, bool))


# ------------------------------------------------------------------ aggregation


def test_single_trajectory_copies():
    t = line(6)
    f = aggregate(np.repeat(t[None], 10, 0), 1)
    np.testing.assert_allclose(f.trajectories[0], t)
    assert f.probabilities.tolist() == [1.0]


def test_two_symmetric_bundles(rng):
    a = line(8) + rng.normal(0, 0.05, (32, 8, 2))
    b = line(8) + [0.0, 20.0] + rng.normal(0, 0.05, (32, 8, 2))
    f = aggregate(np.concatenate([a, b]), 2)
    assert sorted(f.probabilities.tolist()) == [0.5, 0.5]
    order = np.argsort(f.trajectories[:, 0, 1])
    np.testing.assert_allclose(f.trajectories[order[0]], a.mean(0), atol=1e-12)
    np.testing.assert_allclose(f.trajectories[order[1]], b.mean(0), atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(6, 24), st.integers(1, 6))
@settings(max_examples=100, deadline=None)
def test_kmeans_fixed_point(seed, R, K):
    rng = np.random.default_rng(seed)
    trajs = np.cumsum(rng.normal(0, 1, (R, 8, 2)), axis=1)
    f = aggregate(trajs, K)
    assert abs(f.probabilities.sum() - 1.0) <= 1e-9
    D = np.array([[np.mean(np.linalg.norm(t - c, axis=1)) for c in f.trajectories] for t in trajs])
    own = D.argmin(1)
    for i in range(R):
        assert D[i, own[i]] <= D[i].min() + 1e-12
    # members per centroid reproduce the probabilities and centroids are member means
    for k in range(K):
        if (own == k).any():
            np.testing.assert_allclose(f.trajectories[k], trajs[own == k].mean(0), atol=1e-9)
    np.testing.assert_allclose(np.bincount(own, minlength=K) / R, f.probabilities)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate(np.zeros((3, 4, 2)), 4)


def test_aggregate_deterministic(rng):
    trajs = np.cumsum(rng.normal(0, 1, (64, 8, 2)), axis=1)
    a, b = aggregate(trajs, 12), aggregate(trajs, 12)
    np.testing.assert_array_equal(a.trajectories, b.trajectories)


# ------------------------------------------------------------------ frontier


def test_single_model_frontier():
    fr = crossover_frontier({"a": ([1e3, 1e4, 1e5], [3.0, 2.0, 1.0])})
    assert len(fr) == 1 and fr[0].model == "a"
    assert fr[0].lo_flops == pytest.approx(1e3) and fr[0].hi_flops == pytest.approx(1e5)


def test_two_curves_cross_at_constructed_point():
    x = np.array([3.0, 4.5, 6.0])
    small = (10**x, 3.0 - 0.25 * x)
    large = (10**x, 4.0 - 0.5 * x)
    fr = crossover_frontier({"small": small, "large": large})
    assert [s.model for s in fr] == ["small", "large"]
    bp = breakpoints(fr)
    assert len(bp) == 1
    assert bp[0] == pytest.approx(1e4, rel=1e-12)


def test_dominated_model_absent():
    x = 10.0 ** np.array([3, 4, 5])
    fr = crossover_frontier({"good": (x, [2.0, 1.5, 1.0]), "bad": (x, [3.0, 2.5, 2.0])})
    assert {s.model for s in fr} == {"good"}


def test_tie_goes_to_cheaper_model():
    fr = crossover_frontier({"late": ([1e4, 1e5], [1.0, 1.0]), "early": ([1e3, 1e5], [1.0, 1.0])})
    assert {s.model for s in fr} == {"early"}


def test_frontier_requires_input():
    with pytest.raises(ValueError):
        crossover_frontier({})


# ------------------------------------------------------------------ sweeps and IO


@pytest.fixture(scope="module")
def tiny_model(small_world, vocab, short_window):
    from motionscale.joint_model import JointModel, ModelConfig

    cfg = ModelConfig.for_world(small_world, vocab, short_window, d=8, n_enc=1, n_dec=1)
    m = JointModel(cfg, seed=1)
    m.params["out_w"] = np.random.default_rng(0).normal(0, 0.5, m.params["out_w"].shape).astype(np.float32)
    return m


def test_single_count_sweep(tiny_model, small_dataset, vocab):
    rows = inference_sweep(tiny_model, small_dataset, vocab, [8], K=6, scenes=range(2))
    assert len(rows) == 1 and rows[0].samples == 8
    assert rows[0].flops == inference_flops(tiny_model.cfg.shape, 8)


def test_sweep_deterministic_and_monotone(tiny_model, small_dataset, vocab):
    a = inference_sweep(tiny_model, small_dataset, vocab, [8, 64], K=6, seed=3, scenes=range(3))
    b = inference_sweep(tiny_model, small_dataset, vocab, [8, 64], K=6, seed=3, scenes=range(3))
    assert a == b
    with pytest.raises(ValueError):
        inference_sweep(tiny_model, small_dataset, vocab, [4], K=6)


def test_default_counts():
    assert default_sample_counts() == [8, 16, 32, 64, 128, 256, 512, 1024]


def test_io_round_trip(tmp_path):
    rows = [SweepRow(8, 100, 1.25, 2.5, 0.5, 0.25), SweepRow(16, 200, 1.0, 2.0, 0.25, 0.5)]
    write_sweep_csv(rows, tmp_path / "s.csv")
    assert read_sweep_csv(tmp_path / "s.csv") == rows
    gt = line(4)
    f = ClusteredForecast(np.stack([gt, gt + 1]), [0.25, 0.75])
    write_predictions_jsonl([("s0", 3, f, gt)], tmp_path / "p.jsonl")
    (sid, aid, f2, g2), = read_predictions_jsonl(tmp_path / "p.jsonl")
    assert (sid, aid) == ("s0", 3)
    np.testing.assert_array_equal(f2.trajectories, f.trajectories)
    np.testing.assert_array_equal(g2, gt)
