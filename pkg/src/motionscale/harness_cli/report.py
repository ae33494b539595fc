"""Scaling analysis over a store: fits, plot-data CSVs and a JSON summary."""
import csv
import json
import math
from pathlib import Path

import numpy as np

from .. import scaling_fit as sf
from ..rollout_eval import MissThresholds, SweepRow, breakpoints, crossover_frontier
from ..synth_world import AGENT_TYPES
from .jobs import records_from_rows, run_records, select_runs
from .store import Store, content_hash


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6e}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _grid(lo, hi, n=25):
    return np.geomspace(lo, hi, n)


def _unavailable(reason):
    return {"available": False, "reason": reason}


def _fit_pair(x, y, weights=None):
    """Pure and +constant power fits where the point count allows."""
    out = {}
    if len(x) >= 3:
        out["power"] = sf.fit_power(x, y, weights=weights)
    if len(x) >= 4:
        out["power+const"] = sf.fit_power(x, y, with_constant=True, weights=weights)
    return out


def _isoflop(rows, out, rel_tol):
    recs = records_from_rows(rows)
    budgets = sorted({r["job"]["budget"] for r in rows})
    bands = sf.band_runs(recs, budgets, rel_tol)
    table = []
    for b in budgets:
        for r in sorted(bands.bands[b], key=lambda r: (r.N, r.D, r.seed, r.job_id)):
            table.append((b, r.N, r.D, r.C, r.eval_loss))
    write_csv(out / "isoflop_runs.csv", ("budget", "N", "D", "C", "eval_loss"), table)
    curves, fits = [], {}
    for b in budgets:
        recs_b = bands.bands[b]
        if len({r.N for r in recs_b}) < 3:
            continue
        try:
            f = sf.fit_parabola([r.N for r in recs_b], [r.eval_loss for r in recs_b])
        except sf.DegenerateFit as exc:
            fits[str(b)] = {"degenerate": str(exc)}
            continue
        fits[str(b)] = f.to_dict()
        lo, hi = f.meta["x_range"]
        for x, y, l, h in sf.band_table(f, _grid(lo, hi)):
            curves.append((b, x, y, l, h))
    write_csv(out / "isoflop_fits.csv", ("budget", "N", "fit", "lo3", "hi3"), curves)
    return bands, {"available": True, "budgets": budgets, "unassigned": len(bands.unassigned),
                   "empty_bands": bands.empty, "parabolas": fits}


def _optimal(bands, out):
    res = sf.optimal_scaling(bands)
    write_csv(out / "optimal_points.csv",
              ("budget", "n_opt", "n_log_sigma", "d_opt", "d_log_sigma", "l_opt", "l_sigma"),
              [(o.budget, o.n_opt, o.n_log_sigma, o.d_opt, o.d_log_sigma, o.l_opt, o.l_sigma) for o in res.optima])
    C = _grid(res.optima[0].budget, res.optima[-1].budget)
    cols = [C]
    header = ["C"]
    for name, f in (("n_opt", res.n_fit), ("d_opt", res.d_fit), ("l_opt", res.l_fit), ("l_opt_const", res.l_fit_const)):
        if f is None:
            continue
        y, lo, hi = sf.band(f, C)
        cols += [y, lo, hi]
        header += [name, name + "_lo3", name + "_hi3"]
    write_csv(out / "optimal_fits.csv", header, zip(*cols))
    summary = res.to_dict()
    summary["available"] = True
    summary["n_exponent"] = [res.n_fit["b"], res.n_fit.stderr("b")]
    summary["d_exponent"] = [res.d_fit["b"], res.d_fit.stderr("b")]
    return summary


def _per_type(rows, out):
    table = []
    best = {}
    for r in rows:
        rec = r["record"]
        pt = rec["per_type_losses"]
        b = r["job"]["budget"]
        table.append([b, rec["N"], rec["D"], rec["C"]] + [pt.get(t, math.nan) for t in AGENT_TYPES])
        for t, v in pt.items():
            if v < best.get((b, t), math.inf):
                best[(b, t)] = v
    table.sort(key=lambda r: (r[0], r[1], r[2]))
    write_csv(out / "per_type_losses.csv", ("budget", "N", "D", "C") + AGENT_TYPES, table)
    fits = {}
    for t in AGENT_TYPES:
        pts = sorted((b, v) for (b, tt), v in best.items() if tt == t)
        if len(pts) >= 3:
            fits[t] = sf.fit_power([p[0] for p in pts], [p[1] for p in pts]).to_dict()
    return {"available": True, "fits": fits}


def _surface(rows):
    recs = records_from_rows(rows)
    fit = sf.fit_surface(recs)
    return {"available": True, **fit.to_dict()}


def _metrics(store, out):
    rows = [r for r in store.rows("metrics") if r.get("status") == "ok"]
    if not rows:
        return _unavailable("no metrics rows")
    runs = {r["job_id"]: r for r in run_records(store)}
    table = []
    for r in rows:
        run = runs.get(r["job"]["run_id"])
        if run is None:
            continue
        rec, m = run["record"], r["metrics"]
        table.append((run["job"]["budget"], rec["N"], rec["D"], rec["C"], rec["eval_loss"], m["min_ade"], m["w_ade"],
                      m["min_fde"], m["miss_rate"], m["map"], run["job_id"]))
    table.sort(key=lambda t: (t[0], t[1], t[2], t[10]))
    write_csv(out / "metrics_vs_compute.csv",
              ("budget", "N", "D", "C", "eval_loss", "min_ade", "w_ade", "min_fde", "miss_rate", "map", "job_id"), table)
    best = {}
    for t in table:
        if t[0] not in best or t[4] < best[t[0]][4]:
            best[t[0]] = t
    pts = [best[b] for b in sorted(best)]
    fits = {}
    for col, name in ((5, "min_ade"), (6, "w_ade")):
        try:
            pair = _fit_pair([p[3] for p in pts], [p[col] for p in pts])
            fits[name] = {k: v.to_dict() for k, v in pair.items()}
        except ValueError as exc:
            fits[name] = {"error": str(exc)}
    return {"available": True, "miss_thresholds": MissThresholds().__dict__, "fits": fits}


def _closed_loop(store, out):
    rows = [r for r in store.rows("eta") if r.get("status") == "ok"]
    if not rows:
        return _unavailable("no closed-loop rows")
    table = sorted((r["result"]["C"], r["result"]["alpha"], r["result"]["eta"], r["result"]["ratio"],
                    r["result"]["calibrated"], r["job"]["run_id"]) for r in rows)
    write_csv(out / "eta.csv", ("C", "alpha", "eta", "ratio", "calibrated", "run_id"), table)
    C = [t[0] for t in table]
    eta = [float(t[2]) for t in table]
    fits = {}
    if len(C) >= 4:
        fits["power+const"] = sf.fit_power(C, eta, with_constant=True).to_dict()
    elif len(C) >= 3 and min(eta) > 0:
        fits["power"] = sf.fit_power(C, eta).to_dict()
    return {"available": True, "rows": len(table), "fits": fits}


def _inference(store, out):
    rows = [r for r in store.rows("inference") if r.get("status") == "ok"]
    if not rows:
        return _unavailable("no inference rows")
    tables = {}
    for r in sorted(rows, key=lambda r: r["job"]["run_id"]):
        sweep = [SweepRow(**x) for x in r["rows"]]
        name = r["job"]["run_id"]
        tables[name] = sweep
        write_csv(out / f"inference_{name}.csv", ("samples", "flops", "min_ade", "min_fde", "miss_rate", "map"),
                  [(s.samples, s.flops, s.min_ade, s.min_fde, s.miss_rate, s.map) for s in sweep])
    frontier = crossover_frontier(tables)
    write_csv(out / "inference_frontier.csv", ("lo_flops", "hi_flops", "model"),
              [(f.lo_flops, f.hi_flops, f.model) for f in frontier])
    return {"available": True, "models": sorted(tables), "breakpoints": breakpoints(frontier)}


def _iso_loss(store, out):
    with_av = [r for r in run_records(store, "joint", budgeted=False)]
    without = [r for r in run_records(store, "exclude_av", budgeted=False)]
    if len(with_av) < 4 or len(without) < 4:
        return _unavailable("needs >= 4 cross-agent runs per variant")

    def fit(rows):
        pts = sorted((r["record"]["miles"], r["record"]["per_type_losses"]["av"]) for r in rows)
        return sf.fit_power([p[0] for p in pts], [p[1] for p in pts], with_constant=True), pts

    f_obs, p_obs = fit(without)
    f_dem, p_dem = fit(with_av)
    write_csv(out / "cross_agent_losses.csv", ("variant", "miles", "av_loss"),
              [("exclude_av",) + p for p in p_obs] + [("joint",) + p for p in p_dem])
    iso = sf.iso_loss_equivalence(f_obs, f_dem)
    write_csv(out / "iso_loss.csv", ("loss", "ratio", "lo3", "hi3"), zip(iso.loss, iso.ratio, iso.lo, iso.hi))
    return {"available": True, "fit_observed": f_obs.to_dict(), "fit_demonstrated": f_dem.to_dict(),
            "ratio_range": [float(iso.ratio.min()), float(iso.ratio.max())], "reference": iso.reference}


def report(store: Store, cfg, out_dir, config_hash):
    """Write every available section; returns the summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_records(store)
    summary = {"config_hash": config_hash, "reference": sf.REFERENCE, "sections": {}}
    sec = summary["sections"]
    if not rows and not store.rows():
        raise ValueError("store is empty")
    bands = None
    if rows:
        try:
            bands, sec["isoflop"] = _isoflop(rows, out, cfg["sweep"]["rel_tol"])
        except (ValueError, np.linalg.LinAlgError) as exc:
            sec["isoflop"] = _unavailable(str(exc))
        try:
            sec["per_type"] = _per_type(rows, out)
        except ValueError as exc:
            sec["per_type"] = _unavailable(str(exc))
        try:
            sec["surface"] = _surface(rows)
        except (ValueError, np.linalg.LinAlgError) as exc:
            sec["surface"] = _unavailable(str(exc))
    else:
        for k in ("isoflop", "per_type", "surface"):
            sec[k] = _unavailable("no budgeted runs")
    if bands is not None:
        try:
            sec["optimal"] = _optimal(bands, out)
        except (ValueError, np.linalg.LinAlgError) as exc:
            sec["optimal"] = {**_unavailable(str(exc)), "degenerate": isinstance(exc, sf.DegenerateFit)}
    else:
        sec["optimal"] = _unavailable("no bands")
    for name, fn in (("metrics", _metrics), ("closed_loop", _closed_loop), ("inference", _inference),
                     ("iso_loss", _iso_loss)):
        try:
            sec[name] = fn(store, out)
        except (ValueError, np.linalg.LinAlgError) as exc:
            sec[name] = _unavailable(str(exc))
    summary["selected_models"] = [r["job_id"] for r in select_runs(store)] if rows else []
    clean = _clean(summary)
    (out / "summary.json").write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n")
    return clean


def fit_only(store: Store, cfg):
    """Band, parabola and exponent fits only; raises DegenerateFit."""
    rows = run_records(store)
    if not rows:
        raise ValueError("store has no budgeted runs")
    recs = records_from_rows(rows)
    budgets = sorted({r["job"]["budget"] for r in rows})
    bands = sf.band_runs(recs, budgets, cfg["sweep"]["rel_tol"])
    return _clean(sf.optimal_scaling(bands).to_dict())


def known_surface_rows(budgets=None, per_band=12, E=1.0, A=2.0, alpha=0.5, B=3.0, beta=0.5, sigma=0.01, seed=0,
                       span=30.0, flops_per_nd=6):
    """Store rows sampled from ``E + A/N^alpha + B/D^beta`` along iso-FLOP lines ``C = 6 N D``.

    Each band spans ``span``-fold in N centred on the analytic optimum.
    """
    budgets = budgets or [10.0**k for k in np.arange(5, 8.01, 0.5)]
    rng = np.random.default_rng(seed)
    rows = []
    for C in budgets:
        # optimum of A N^-a + B (k N / C)^b for a, b > 0
        n_star = _analytic_n_opt(C, A, alpha, B, beta, flops_per_nd)
        for N in np.geomspace(n_star / math.sqrt(span), n_star * math.sqrt(span), per_band):
            Ni = int(round(N))
            Di = max(1, int(round(C / (flops_per_nd * Ni))))
            L = E + A / Ni**alpha + B / Di**beta + rng.normal(0.0, sigma)
            rec = {"N": Ni, "D": Di, "C": flops_per_nd * Ni * Di, "eval_loss": float(L), "per_type_losses": {},
                   "metrics": {}, "miles": 0.0, "job_id": "", "shape": None, "steps": 0, "batch": 0, "seed": seed,
                   "train_loss": float("nan"), "tags": {"fixture": "known-surface"}}
            job = {"budget": float(C), "variant": "joint", "N": Ni, "D": Di, "fixture": "known-surface"}
            jid = content_hash({"kind": "fixture", **job})
            rec["job_id"] = jid
            rows.append({"kind": "run", "job_id": jid, "status": "ok", "job": job, "record": rec})
    return rows


def _analytic_n_opt(C, A, alpha, B, beta, k):
    # d/dN [A N^-a + B (k N / C)^b] = 0  =>  N^(a+b) = a A C^b / (b B k^b)
    return (alpha * A * C**beta / (beta * B * k**beta)) ** (1.0 / (alpha + beta))
