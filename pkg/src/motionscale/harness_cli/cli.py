"""``motionscale`` command line."""
import argparse
import json
import logging
import sys
from pathlib import Path

from .. import scaling_fit as sf
from . import jobs as J
from .config import artifacts_dir, config_hash, load_config, store_path
from .plan import cross_agent_jobs, family_shapes, plan_sweep
from .report import fit_only, known_surface_rows, report
from .store import Store

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_JOB_FAILED = 3
EXIT_DEGENERATE = 4

log = logging.getLogger("motionscale")


def _context_sizes(cfg):
    mc = J.model_config(J.data_spec(cfg), {"d": 16, "n_enc": 1, "n_dec": 1})
    return mc.shape.E, mc.shape.D_q


def _dataset_examples(cfg):
    from ..synth_world import window_starts

    world, vocab, window = J._objects(J.data_spec(cfg))
    per_segment = len(window_starts(world.num_steps, window, world.sim_hz, vocab.token_dt))
    return int(cfg["data"]["train_segments"]) * per_segment


def _train_spec(cfg):
    sw = cfg["sweep"]
    return {k: sw[k] for k in ("warmup_steps", "peak_lr", "final_lr", "weight_decay")}


def build_plan(cfg):
    sw = cfg["sweep"]
    E, D_q = _context_sizes(cfg)
    if sw["shapes"]:
        shapes = [{"E": E, "D_q": D_q, **s} for s in sw["shapes"]]
    else:
        shapes = family_shapes(sw["ratio"], sw["layers"], E, D_q)
    plan = plan_sweep(sw["budgets"], shapes, sw["batch_examples"], dataset_examples=_dataset_examples(cfg),
                      rel_tol=sw["rel_tol"], min_steps=sw["min_steps"], min_shapes=sw["min_shapes"],
                      allow_epoch_reuse=sw["allow_epoch_reuse"], train=_train_spec(cfg), data=J.data_spec(cfg),
                      seeds=sw["seeds"])
    return plan


def _jobs(plan_jobs):
    return [j.to_dict() for j in plan_jobs]


def _finish(stats, what):
    print(json.dumps({what: stats}, sort_keys=True))
    return EXIT_JOB_FAILED if stats["failed"] else EXIT_OK


def cmd_plan(args, cfg, store):
    plan = build_plan(cfg)
    text = json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args, cfg, store):
    jobs = _jobs(build_plan(cfg).jobs)
    ca = cfg["cross_agent"]
    if ca["enabled"]:
        E, D_q = _context_sizes(cfg)
        shape = family_shapes(ca["ratio"], [ca["layers"]], E, D_q)[0]
        jobs += _jobs(cross_agent_jobs(shape, ca["steps"], cfg["sweep"]["batch_examples"], _train_spec(cfg),
                                       J.data_spec(cfg), seed=cfg["seed"]))
    stats = J.run_jobs(J.run_train_job, jobs, store, artifacts_dir(store.path), cfg["max_parallel"], args.limit)
    return _finish(stats, "sweep")


def cmd_eval(args, cfg, store):
    stats = J.run_jobs(J.run_eval_job, J.eval_jobs(cfg, store), store, artifacts_dir(store.path),
                       cfg["max_parallel"], args.limit, kind="metrics")
    return _finish(stats, "eval")


def cmd_inference(args, cfg, store):
    stats = J.run_jobs(J.run_inference_job, J.inference_jobs(cfg, store), store, artifacts_dir(store.path),
                       cfg["max_parallel"], args.limit, kind="inference")
    return _finish(stats, "inference-sweep")


def cmd_closedloop(args, cfg, store):
    stats = J.run_jobs(J.run_closed_loop_job, J.closed_loop_jobs(cfg, store), store, artifacts_dir(store.path),
                       cfg["max_parallel"], args.limit, kind="eta")
    return _finish(stats, "closedloop")


def cmd_fit(args, cfg, store):
    try:
        res = fit_only(store, cfg)
    except sf.DegenerateFit as exc:
        print(f"degenerate fit: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    text = json.dumps(res, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args, cfg, store):
    out = args.out or "report"
    summary = report(store, cfg, out, config_hash(cfg))
    opt = summary["sections"].get("optimal", {})
    if opt.get("available"):
        print(f"n_opt exponent {opt['n_exponent'][0]:.4f} +- {opt['n_exponent'][1]:.4f}")
        print(f"d_opt exponent {opt['d_exponent'][0]:.4f} +- {opt['d_exponent'][1]:.4f}")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_synth(args, cfg, store):
    if args.known_surface:
        rows = known_surface_rows(seed=cfg["seed"])
        done = store.completed("run")
        new = [r for r in rows if r["job_id"] not in done]
        for r in new:
            store.append(r)
        print(f"{len(new)} fixture rows appended to {store.path}")
        return EXIT_OK
    from ..closed_loop import make_scenarios, save_scenarios
    from ..synth_world import save_jsonl

    out = Path(args.out or "synth")
    out.mkdir(parents=True, exist_ok=True)
    data = J.data_spec(cfg)
    for split in ("train", "eval"):
        save_jsonl(J.dataset(data, split), out / f"{split}.jsonl")
    world = J._objects(data)[0]
    c = cfg["closed_loop"]
    lo = int(c["scenario_offset"])
    n = int(c["calibration_scenarios"]) + int(c["scenarios"])
    save_scenarios(make_scenarios(world, range(lo, lo + n), duration_s=float(c["duration_s"])), out / "scenarios.jsonl")
    print(f"datasets and scenarios written to {out}")
    return EXIT_OK


COMMANDS = {
    "plan": cmd_plan,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "inference-sweep": cmd_inference,
    "closedloop": cmd_closedloop,
    "fit": cmd_fit,
    "report": cmd_report,
    "synth": cmd_synth,
}


def build_parser():
    p = argparse.ArgumentParser(prog="motionscale", description="Desk-scale scaling study for joint motion models.")
    p.add_argument("verb", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON study config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. sweep.budgets=[1e10,2e10]")
    p.add_argument("--store", help="result store (JSONL); defaults to $MOTIONSCALE_STORE")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--limit", type=int, help="run at most this many pending jobs")
    p.add_argument("--known-surface", action="store_true", help="synth: write the known-surface fixture runs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        store = Store(store_path(cfg, args.store))
        return COMMANDS[args.verb](args, cfg, store)
    except ValueError as exc:  # ConfigError, PlanError and unusable stores
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
