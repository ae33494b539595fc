"""Job execution: training, open-loop eval, inference sweeps and closed-loop runs."""
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..motion_codec import TokenVocab
from ..records import RunRecord
from ..synth_world import WindowSpec, WorldConfig, exclude_agent, generate_dataset
from .store import Store, canonical, content_hash

log = logging.getLogger(__name__)

_DATA_CACHE = {}


def data_spec(cfg):
    from .config import vocab_config, window_config, world_config

    d = cfg["data"]
    return {
        "world": world_config(cfg).to_dict(),
        "vocab": vocab_config(cfg).to_dict(),
        "window": window_config(cfg).to_dict(),
        "train": [0, int(d["train_segments"])],
        "eval": [int(d["eval_offset"]), int(d["eval_offset"]) + int(d["eval_segments"])],
    }


def _objects(data):
    return WorldConfig.from_dict(data["world"]), TokenVocab.from_dict(data["vocab"]), WindowSpec(**data["window"])


def dataset(data, split, with_route=False):
    key = canonical({"data": data, "split": split, "route": with_route})
    if key not in _DATA_CACHE:
        world, vocab, window = _objects(data)
        lo, hi = data[split]
        _DATA_CACHE[key] = generate_dataset(world, vocab, window, range(lo, hi), with_route=with_route)
    return _DATA_CACHE[key]


def model_config(data, shape, num_modeled=None):
    from ..joint_model import ModelConfig

    world, vocab, window = _objects(data)
    mc = ModelConfig.for_world(world, vocab, window, d=shape["d"], n_enc=shape["n_enc"], n_dec=shape["n_dec"])
    return mc if num_modeled is None else mc.with_modeled(num_modeled)


def ckpt_dir(artifacts, job_id):
    return Path(artifacts) / "ckpt" / job_id


def run_train_job(job, artifacts):
    """Train one job; returns the store row (never raises)."""
    from ..joint_model import TrainConfig, save_checkpoint, train

    spec = job["spec"]
    try:
        data = spec["data"]
        train_ds = dataset(data, "train")
        if spec["variant"] == "exclude_av":
            train_ds = exclude_agent(train_ds)
        eval_ds = dataset(data, "eval")
        mc = model_config(data, spec["shape"])
        t = spec["train"]
        steps = spec["steps"]
        tc = TrainConfig(
            model=mc,
            batch_examples=spec["batch_examples"],
            total_steps=steps,
            warmup_steps=min(int(t.get("warmup_steps", 0)), steps // 5),
            peak_lr=t.get("peak_lr", 3e-3),
            final_lr=t.get("final_lr", 3e-4),
            weight_decay=t.get("weight_decay", 0.01),
            seed=spec["seed"],
        )
        model, rec = train(train_ds, tc, eval_set=eval_ds)
        rec.job_id = job["job_id"]
        rec.tags = {"variant": spec["variant"], "budget": spec["budget"], "epoch_reuse": spec["epoch_reuse"]}
        save_checkpoint(ckpt_dir(artifacts, job["job_id"]), model, TokenVocab.from_dict(data["vocab"]), steps, spec["seed"])
        return {"kind": "run", "job_id": job["job_id"], "status": "ok", "job": spec, "record": rec.to_dict()}
    except Exception as exc:  # recorded, sweep continues
        return {"kind": "run", "job_id": job["job_id"], "status": "failed", "job": spec,
                "diagnostic": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc(limit=3)}


def _call(args):
    fn, job, artifacts = args
    return fn(job, artifacts)


def run_jobs(fn, jobs, store: Store, artifacts, max_parallel=1, limit=None, kind="run"):
    """Run ``jobs`` not yet completed in ``store``; rows are appended in job order."""
    done = store.completed(kind)
    todo = [j for j in jobs if j["job_id"] not in done]
    if limit is not None:
        todo = todo[:limit]
    stats = {"planned": len(jobs), "skipped": len(jobs) - len([j for j in jobs if j["job_id"] not in done]),
             "ran": 0, "failed": 0}
    if max_parallel > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=max_parallel) as pool:
            results = pool.map(_call, [(fn, j, artifacts) for j in todo])
            for row in results:
                _record(store, row, stats)
    else:
        for j in todo:
            _record(store, fn(j, artifacts), stats)
    return stats


def _record(store, row, stats):
    store.append(row)
    stats["ran"] += 1
    if row.get("status") != "ok":
        stats["failed"] += 1
        log.error("job %s failed: %s", row["job_id"], row.get("diagnostic"))


def run_records(store: Store, variant="joint", budgeted=True, trained_only=False):
    out = []
    for row in store.rows("run"):
        if row.get("status") != "ok" or row["job"]["variant"] != variant:
            continue
        if budgeted != (row["job"]["budget"] is not None):
            continue
        if trained_only and "data" not in row["job"]:
            continue
        out.append(row)
    return out


def select_runs(store: Store, mode="band_optima", trained_only=False):
    rows = run_records(store, trained_only=trained_only)
    if not rows:
        return []
    if mode == "all":
        return rows
    if mode == "best":
        return [min(rows, key=lambda r: (r["record"]["eval_loss"], r["job_id"]))]
    if mode != "band_optima":
        raise ValueError(f"unknown model selection {mode!r}")
    best = {}
    for r in rows:
        b = r["job"]["budget"]
        if b not in best or (r["record"]["eval_loss"], r["job_id"]) < (best[b]["record"]["eval_loss"], best[b]["job_id"]):
            best[b] = r
    return [best[b] for b in sorted(best)]


# --------------------------------------------------------------------------
# open-loop metrics
# --------------------------------------------------------------------------


def run_eval_job(job, artifacts):
    from ..joint_model import load_checkpoint
    from ..joint_model.sampling import sample_rollouts
    from ..rollout_eval import aggregate, evaluate_forecasts

    spec = job["spec"]
    try:
        model, vocab, _ = load_checkpoint(ckpt_dir(artifacts, spec["run_id"]))
        ds = dataset(spec["data"], "eval")
        fs, gs, speeds = [], [], []
        for i in range(min(spec["scenes"], len(ds))):
            ex = ds.example(i)
            rs = sample_rollouts(model, ex, spec["num_samples"], vocab, seed=spec["seed"] + i)
            mod = ex["modeled"]
            v = np.hypot(*(ex["seeds"][mod, 1] - ex["seeds"][mod, 0]).T) / vocab.token_dt
            for m in range(len(mod)):
                fs.append(aggregate(rs.decoded[:, m], spec["K"], dt=vocab.token_dt))
                gs.append(ex["future"][mod[m]])
                speeds.append(float(v[m]))
        metrics = evaluate_forecasts(fs, gs, dt=vocab.token_dt, speeds=speeds)
        return {"kind": "metrics", "job_id": job["job_id"], "status": "ok", "job": spec, "metrics": metrics}
    except Exception as exc:
        return {"kind": "metrics", "job_id": job["job_id"], "status": "failed", "job": spec,
                "diagnostic": f"{type(exc).__name__}: {exc}"}


def eval_jobs(cfg, store):
    e = cfg["eval"]
    jobs = []
    for r in run_records(store, trained_only=True):
        spec = {"run_id": r["job_id"], "data": r["job"]["data"], "num_samples": int(e["num_samples"]),
                "K": int(e["K"]), "scenes": int(e["scenes"]), "seed": int(cfg["seed"])}
        jobs.append({"job_id": content_hash({"kind": "metrics", **spec}), "spec": spec})
    return jobs


# --------------------------------------------------------------------------
# inference sweeps
# --------------------------------------------------------------------------


def run_inference_job(job, artifacts):
    from ..joint_model import load_checkpoint
    from ..rollout_eval import inference_sweep

    spec = job["spec"]
    try:
        model, vocab, _ = load_checkpoint(ckpt_dir(artifacts, spec["run_id"]))
        ds = dataset(spec["data"], "eval")
        scenes = range(min(spec["scenes"], len(ds)))
        rows = inference_sweep(model, ds, vocab, spec["sample_counts"], K=spec["K"], seed=spec["seed"], scenes=scenes)
        return {"kind": "inference", "job_id": job["job_id"], "status": "ok", "job": spec,
                "rows": [r.__dict__ for r in rows]}
    except Exception as exc:
        return {"kind": "inference", "job_id": job["job_id"], "status": "failed", "job": spec,
                "diagnostic": f"{type(exc).__name__}: {exc}"}


def inference_jobs(cfg, store):
    c = cfg["inference"]
    jobs = []
    for r in select_runs(store, c["models"], trained_only=True):
        spec = {"run_id": r["job_id"], "data": r["job"]["data"], "sample_counts": sorted(c["sample_counts"]),
                "K": int(c["K"]), "scenes": int(c["scenes"]), "seed": int(cfg["seed"]),
                "C": r["record"]["C"], "N": r["record"]["N"]}
        jobs.append({"job_id": content_hash({"kind": "inference", **spec}), "spec": spec})
    return jobs


# --------------------------------------------------------------------------
# closed loop
# --------------------------------------------------------------------------


def run_closed_loop_job(job, artifacts):
    from ..closed_loop import ModelPolicy, calibrate_alpha, make_scenarios, run_scenarios
    from ..joint_model import finetune_planner, load_checkpoint

    spec = job["spec"]
    try:
        model, vocab, _ = load_checkpoint(ckpt_dir(artifacts, spec["run_id"]))
        data = spec["data"]
        route_ds = dataset(data, "train", with_route=True)
        planner, info = finetune_planner(model, route_ds, spec["budget_flops"], seed=spec["seed"])
        world = WorldConfig.from_dict(data["world"])
        lo = spec["scenario_offset"]
        n_cal, n_eval = spec["calibration_scenarios"], spec["scenarios"]
        cal = make_scenarios(world, range(lo, lo + n_cal), duration_s=spec["duration_s"])
        ev = make_scenarios(world, range(lo + n_cal, lo + n_cal + n_eval), duration_s=spec["duration_s"])
        policy = ModelPolicy(planner, vocab)
        c = calibrate_alpha(policy, cal, spec["num_rollouts"], spec["seed"], alpha_max=spec["alpha_max"],
                            max_iter=spec["max_iter"])
        rep = run_scenarios(policy, ev, spec["num_rollouts"], c.alpha, spec["seed"])
        return {"kind": "eta", "job_id": job["job_id"], "status": "ok", "job": spec,
                "result": {"C": spec["C"], "alpha": c.alpha, "calibrated": c.calibrated,
                           "finetune_flops": info["consumed_flops"], **rep.summary(),
                           "outcomes": [r.to_dict() for r in rep.results]}}
    except Exception as exc:
        return {"kind": "eta", "job_id": job["job_id"], "status": "failed", "job": spec,
                "diagnostic": f"{type(exc).__name__}: {exc}"}


def closed_loop_jobs(cfg, store):
    c = cfg["closed_loop"]
    jobs = []
    for r in select_runs(store, c["models"], trained_only=True):
        spec = {"run_id": r["job_id"], "data": r["job"]["data"], "C": r["record"]["C"],
                "budget_flops": int(c["budget_fraction"] * r["record"]["C"]),
                "scenarios": int(c["scenarios"]), "calibration_scenarios": int(c["calibration_scenarios"]),
                "scenario_offset": int(c["scenario_offset"]), "duration_s": float(c["duration_s"]),
                "num_rollouts": int(c["num_rollouts"]), "alpha_max": float(c["alpha_max"]),
                "max_iter": int(c["max_iter"]), "seed": int(cfg["seed"])}
        jobs.append({"job_id": content_hash({"kind": "eta", **spec}), "spec": spec})
    return jobs


def records_from_rows(rows):
    return [RunRecord.from_dict(r["record"]) for r in rows]
