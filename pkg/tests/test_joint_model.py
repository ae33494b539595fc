import math

import numpy as np
import pytest

from motionscale.compute_ledger import forward_flops, param_count, train_flops
from motionscale.joint_model import (
    JointModel,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    batch_order,
    finetune_planner,
    lr_at,
    load_checkpoint,
    planner_from,
    planner_view,
    sample_rollouts,
    sample_tokens,
    save_checkpoint,
    train,
    without_route,
)
from motionscale.joint_model.layers import cross_entropy, log_softmax
from motionscale.joint_model.model import batch_targets
from motionscale.motion_codec import decode_batch
from motionscale.synth_world import generate_dataset

from oracles import gradient_check_model, randomized

LN169 = math.log(169)


@pytest.fixture(scope="module")
def cfg(small_world, vocab, short_window):
    return ModelConfig.for_world(small_world, vocab, short_window, d=16, n_enc=1, n_dec=1)


@pytest.fixture(scope="module")
def trained(cfg, small_dataset):
    tc = TrainConfig(model=cfg, batch_examples=8, total_steps=60, warmup_steps=6, peak_lr=3e-3, final_lr=3e-4)
    model, rec = train(small_dataset, tc)
    return model, rec


# ------------------------------------------------------------------ loss & gradients


def test_initial_loss_is_uniform(cfg, small_dataset):
    loss, _, info = JointModel(cfg).loss(small_dataset.subset(range(8)).arrays)
    assert abs(loss - LN169) < 1e-3
    assert set(info["per_type"]) <= {"av", "vehicle", "pedestrian", "cyclist"}


def test_loss_matches_recompute_from_logits(cfg, small_dataset):
    m = randomized(JointModel(cfg, dtype=np.float64))
    b = small_dataset.subset(range(5)).arrays
    loss, _, info = m.loss(b)
    z = info["logits"]
    tg = batch_targets(b)
    lse = np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1)) + z.max(-1)
    ref = np.mean(lse - np.take_along_axis(z, tg[..., None], -1)[..., 0])
    assert abs(loss - ref) < 1e-6


def test_large_margin_loss_goes_to_zero():
    tg = np.array([[3, 1, 0]])
    z = np.full((1, 3, 5), -40.0)
    np.put_along_axis(z, tg[..., None], 40.0, axis=-1)
    loss, _, _ = cross_entropy(z, tg, np.ones(tg.shape))
    assert loss < 1e-30


def test_gradient_check():
    m, b = gradient_check_model()
    assert sum(v.size for v in m.params.values()) <= 1000
    _, g, _ = m.loss(b, with_grad=True)
    h = 1e-6
    worst = 0.0
    for k, v in m.params.items():
        for i in range(v.size):
            old = v.flat[i]
            v.flat[i] = old + h
            lp = m.loss(b)[0]
            v.flat[i] = old - h
            lm = m.loss(b)[0]
            v.flat[i] = old
            num = (lp - lm) / (2 * h)
            an = g[k].flat[i]
            if num != an:
                worst = max(worst, abs(num - an) / max(abs(num), abs(an)))
    assert worst < 1e-3


def test_all_invalid_inputs(cfg, small_dataset):
    m = randomized(JointModel(cfg))
    b = {k: v.copy() for k, v in small_dataset.subset(range(3)).arrays.items()}
    for key, col in (("agents", 9), ("roadgraph", 6), ("traffic_lights", 5), ("route", 6)):
        b[key][..., col] = 0.0
    feats = m.featurize(b)
    mem, valid, _ = m.encode_scene(feats)
    assert not valid.any()
    assert mem.shape == (3, cfg.scene_tokens, cfg.d)
    loss, _, _ = m.loss(b)
    assert math.isfinite(loss)
    # every scene collapses to the same learned null state
    np.testing.assert_allclose(mem[0], mem[1], atol=1e-6)
    np.testing.assert_allclose(mem[0], mem[2], atol=1e-6)


def test_roadgraph_permutation_invariance(cfg, small_dataset):
    m = randomized(JointModel(cfg, dtype=np.float64))
    b = small_dataset.subset(range(4)).arrays
    perm = np.random.default_rng(3).permutation(b["roadgraph"].shape[1])
    b2 = dict(b, roadgraph=b["roadgraph"][:, perm])
    f1, f2 = m.featurize(b), m.featurize(b2)
    mem1, _, _ = m.encode_scene(f1)
    mem2, _, _ = m.encode_scene(f2)
    off = cfg.num_agents
    np.testing.assert_allclose(mem2[:, off:off + cfg.num_road], mem1[:, off:off + cfg.num_road][:, perm], atol=1e-5)
    assert abs(m.loss(b)[0] - m.loss(b2)[0]) < 1e-5


def test_context_agent_permutation_invariance(cfg, small_dataset):
    m = randomized(JointModel(cfg, dtype=np.float64))
    b = small_dataset.subset(range(4)).arrays
    S = b["agents"].shape[1]
    out = {k: v.copy() for k, v in b.items()}
    for i in range(4):
        rest = [a for a in range(S) if a not in set(b["modeled"][i])]
        perm = np.arange(S)
        perm[rest] = np.random.default_rng(i).permutation(rest)
        for k in ("agents", "agent_types", "tokens"):
            out[k][i] = b[k][i][perm]
    assert abs(m.loss(b)[0] - m.loss(out)[0]) < 1e-5


def test_symmetric_agents_get_identical_logits(cfg, small_dataset):
    m = randomized(JointModel(cfg, dtype=np.float64))
    b = {k: v.copy() for k, v in small_dataset.subset([0]).arrays.items()}
    a0, a1 = b["modeled"][0, 1], b["modeled"][0, 2]
    for k in ("agents", "agent_types", "tokens"):
        b[k][0, a1] = b[k][0, a0]
    logits, _ = m.forward(b)
    np.testing.assert_allclose(logits[0, 1], logits[0, 2], atol=1e-5)
    pre = np.random.default_rng(0).integers(0, 169, size=(1, cfg.num_modeled, 2))
    pre[0, 2] = pre[0, 1]
    nl = m.next_token_logits(b, pre)
    np.testing.assert_allclose(nl[0, 1], nl[0, 2], atol=1e-5)


def test_causal_no_leakage(cfg, small_dataset):
    m = randomized(JointModel(cfg))
    rng = np.random.default_rng(0)
    base = small_dataset.subset(range(2)).arrays
    T = cfg.future_tokens
    logits, _ = m.forward(base)
    for _ in range(100):
        t_q = int(rng.integers(0, T - 1))
        t_mod = int(rng.integers(t_q, T))
        b = {k: v.copy() for k, v in base.items()}
        i = int(rng.integers(2))
        a = b["modeled"][i, rng.integers(cfg.num_modeled)]
        b["tokens"][i, a, t_mod] = (b["tokens"][i, a, t_mod] + rng.integers(1, 169)) % 169
        new, _ = m.forward(b)
        # logits at step t only see targets before t
        assert np.array_equal(new[:, :, : t_mod + 1], logits[:, :, : t_mod + 1])
        pre = rng.integers(0, 169, size=(2, cfg.num_modeled, t_q + 1))
        l1 = m.next_token_logits(base, pre[..., :t_q])
        pre2 = pre.copy()
        pre2[..., t_q] = (pre2[..., t_q] + 1) % 169
        full1, _ = m.decode(*m.encode_scene(m.featurize(base))[:2], m.featurize(base)["query"],
                            _tin(pre, cfg))
        full2, _ = m.decode(*m.encode_scene(m.featurize(base))[:2], m.featurize(base)["query"],
                            _tin(pre2, cfg))
        assert np.array_equal(full1[:, : t_q + 1], full2[:, : t_q + 1])
        # a shorter sequence changes matmul blocking, so this cross-length check is not bitwise
        np.testing.assert_allclose(l1, full1[:, t_q], atol=1e-6)


def _tin(prefix, cfg):
    from motionscale.joint_model.model import shift_right

    B, M, t = prefix.shape
    full = np.zeros((B, M, t + 1), dtype=np.int64)
    full[..., :t] = prefix
    return shift_right(full, cfg.vocab_size)


def test_softmax_normalized(cfg, small_dataset):
    m = randomized(JointModel(cfg))
    z = m.next_token_logits(small_dataset.subset([0]).arrays, np.zeros((1, cfg.num_modeled, 1), dtype=np.int64))
    assert z.shape == (1, cfg.num_modeled, 169)
    np.testing.assert_allclose(np.exp(log_softmax(z.astype(np.float64))).sum(-1), 1.0, atol=1e-6)


def test_prefix_too_long(cfg, small_dataset):
    m = JointModel(cfg)
    with pytest.raises(ValueError):
        m.next_token_logits(small_dataset.subset([0]).arrays, np.zeros((1, cfg.num_modeled, cfg.future_tokens), int))


def test_non_finite_loss_aborts(cfg, small_dataset):
    m = JointModel(cfg)
    m.params["out_b"][:] = np.nan
    with pytest.raises(FloatingPointError):
        m.loss(small_dataset.subset([0]).arrays)
    tc = TrainConfig(model=cfg, batch_examples=4, total_steps=3, warmup_steps=1)
    with pytest.raises(TrainingDiverged):
        train(small_dataset, tc, model=m)


# ------------------------------------------------------------------ sampling


def test_kv_decoding_matches_full_forward(trained, small_dataset):
    m = trained[0]
    b = small_dataset.subset([0, 1]).arrays
    logits, _ = m.forward(b)
    f = m.featurize(b)
    mem, valid, _ = m.encode_scene(f)
    st = m.start_decoding(mem, valid, f["query"])
    tg = batch_targets(b)
    prev = np.full(tg.shape[:2], m.cfg.vocab_size)
    for t in range(m.cfg.future_tokens):
        step = m.decode_step(st, prev)
        np.testing.assert_allclose(step, logits[:, :, t], atol=1e-4)
        prev = tg[:, :, t]


def test_sampling_determinism(trained, small_dataset, vocab):
    m = trained[0]
    ex = small_dataset.example(3)
    a = sample_rollouts(m, ex, 16, vocab, seed=5)
    b = sample_rollouts(m, ex, 16, vocab, seed=5)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.decoded, b.decoded)
    c = sample_rollouts(m, ex, 16, vocab, seed=6)
    assert not np.array_equal(a.tokens, c.tokens)
    assert (a.log_probs <= 0).all() and (a.tokens < 169).all()
    seeds = ex["seeds"][ex["modeled"]]
    np.testing.assert_array_equal(a.decoded[2], decode_batch(a.tokens[2], seeds, vocab))


def test_greedy_rollouts_identical(trained, small_dataset, vocab):
    g = sample_rollouts(trained[0], small_dataset.example(0), 8, vocab, temperature=0.0)
    assert (g.tokens == g.tokens[0]).all()


def test_sampled_frequencies_match_softmax(cfg, small_dataset):
    m = JointModel(cfg, dtype=np.float64)
    rng = np.random.default_rng(42)
    m.params["out_b"] = rng.normal(0, 1.0, 169)
    p = np.exp(log_softmax(m.params["out_b"]))
    M = cfg.num_modeled
    R = -(-100_000 // M)
    toks, logp = sample_tokens(m, small_dataset.example(0), R, seed=0)
    first = toks[:, :, 0].ravel()
    n = first.size
    counts = np.bincount(first, minlength=169)
    sigma = np.sqrt(n * p * (1 - p))
    assert (np.abs(counts - n * p) <= 3 * sigma + 1).mean() >= 0.99
    # chi-square goodness of fit at the 0.1% level
    from scipy import stats

    chi2 = ((counts - n * p) ** 2 / (n * p)).sum()
    assert stats.chi2.sf(chi2, 168) > 1e-3
    np.testing.assert_allclose(logp[:, :, 0], np.log(p)[toks[:, :, 0]], rtol=1e-9)


# ------------------------------------------------------------------ training


def test_schedule_endpoints(cfg):
    tc = TrainConfig(model=cfg, total_steps=1000, warmup_steps=100, peak_lr=2e-3, final_lr=2e-4)
    assert lr_at(0, tc) == 0.0
    assert lr_at(100, tc) == 2e-3
    assert lr_at(1000, tc) == 2e-4
    assert lr_at(550, tc) == pytest.approx(1.1e-3)
    lrs = [lr_at(s, tc) for s in range(100, 1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("kw", [dict(warmup_steps=1000), dict(peak_lr=1e-4, final_lr=2e-4), dict(final_lr=0.0)])
def test_train_config_validation(cfg, kw):
    base = dict(model=cfg, total_steps=1000, warmup_steps=100, peak_lr=2e-3, final_lr=2e-4)
    base.update(kw)
    with pytest.raises(ValueError):
        TrainConfig(**base)


def test_batch_order_is_seeded():
    a = batch_order(10, 4, 7, seed=3)
    np.testing.assert_array_equal(a, batch_order(10, 4, 7, seed=3))
    assert not np.array_equal(a, batch_order(10, 4, 7, seed=4))
    # every epoch is a permutation
    flat = a.ravel()
    assert sorted(flat[:10]) == list(range(10)) and sorted(flat[10:20]) == list(range(10))


def test_run_record_accounting(trained, cfg):
    _, rec = trained
    assert rec.N == param_count(cfg.shape)
    assert rec.D == 60 * 8
    assert rec.C == train_flops(cfg.shape, rec.D) == forward_flops(cfg.shape) * rec.D
    assert rec.eval_loss < LN169 and rec.miles > 0


def test_training_is_deterministic(cfg, small_dataset):
    tc = TrainConfig(model=cfg, batch_examples=4, total_steps=5, warmup_steps=1)
    m1, r1 = train(small_dataset, tc)
    m2, r2 = train(small_dataset, tc)
    assert r1.to_dict() == r2.to_dict()
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])


def test_memorizes_ten_examples(small_world, vocab, short_window, small_dataset):
    mc = ModelConfig.for_world(small_world, vocab, short_window, d=16, n_enc=1, n_dec=1)
    ten = small_dataset.subset(range(10))
    tc = TrainConfig(model=mc, batch_examples=10, total_steps=2000, warmup_steps=50, peak_lr=3e-3, final_lr=3e-4,
                     weight_decay=0.0)
    _, rec = train(ten, tc)
    assert rec.train_loss < LN169 / 2


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(tmp_path, trained, small_dataset, vocab):
    m = trained[0]
    save_checkpoint(tmp_path / "ck", m, vocab, step=60, seed=0)
    m2, v2, man = load_checkpoint(tmp_path / "ck")
    assert v2 == vocab and man["step"] == 60 and man["shape"] == m.cfg.shape.to_dict()
    b = small_dataset.subset(range(4)).arrays
    assert m.loss(b)[0] == m2.loss(b)[0]


# ------------------------------------------------------------------ planner


def test_planner_without_route_matches_restricted_pretrain(trained, small_dataset):
    m = trained[0]
    view = without_route(planner_view(small_dataset))
    pretrain = m.loss(view.arrays)[0]
    planner, info = finetune_planner(m, without_route(small_dataset), budget_flops=0)
    assert info["steps"] == 0
    assert planner.loss(view.arrays)[0] == pytest.approx(pretrain, rel=0.02)
    fpe = forward_flops(planner.cfg.shape)
    planner, info = finetune_planner(m, without_route(small_dataset), budget_flops=fpe * 16 * 3)
    assert info["steps"] == 3
    assert planner.loss(view.arrays)[0] == pytest.approx(pretrain, rel=0.02)


@pytest.mark.parametrize("budget", [0, 1e6, 3.3e8, 1e9])
def test_planner_budget(trained, small_dataset, budget):
    planner, info = finetune_planner(trained[0], small_dataset, budget_flops=budget)
    assert info["consumed_flops"] <= budget
    assert planner.cfg.num_modeled == 1 and planner.cfg.vocab_size == 169


def test_finetuned_planner_beats_zero_shot(small_world, vocab, short_window):
    from motionscale.rollout_eval import min_ade, ClusteredForecast

    train_ds = generate_dataset(small_world, vocab, short_window, segment_ids=range(12), with_route=True)
    held = generate_dataset(small_world, vocab, short_window, segment_ids=range(500, 503), with_route=True)
    mc = ModelConfig.for_world(small_world, vocab, short_window, d=16, n_enc=1, n_dec=1)
    tc = TrainConfig(model=mc, batch_examples=16, total_steps=80, warmup_steps=8, peak_lr=3e-3, final_lr=3e-4)
    pre, _ = train(without_route(train_ds), tc)
    tuned, info = finetune_planner(pre, train_ds, budget_flops=forward_flops(mc.with_modeled(1).shape) * 16 * 150,
                                   peak_lr=2e-3, final_lr=2e-4)
    zero = planner_from(pre)

    def av_min_ade(model):
        view = planner_view(held)
        out = []
        for i in range(len(view)):
            ex = view.example(i)
            rs = sample_rollouts(model, ex, 16, vocab, seed=i)
            traj = rs.decoded[:, 0]
            fc = ClusteredForecast(traj, np.full(len(traj), 1 / len(traj)))
            out.append(min_ade(fc, ex["future"][ex["modeled"][0]]))
        return float(np.mean(out))

    assert av_min_ade(tuned) <= av_min_ade(zero)
