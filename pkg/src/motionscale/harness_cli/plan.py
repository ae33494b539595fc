"""Iso-FLOP sweep planning."""
import math
from dataclasses import dataclass, field

from ..compute_ledger import ModelShape, forward_flops
from .store import content_hash


class PlanError(ValueError):
    pass


@dataclass
class Job:
    kind: str
    spec: dict

    @property
    def job_id(self):
        return content_hash({"kind": self.kind, **self.spec})

    def to_dict(self):
        return {"job_id": self.job_id, "kind": self.kind, "spec": self.spec}


@dataclass
class SweepPlan:
    budgets: list
    jobs: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    def to_dict(self):
        return {"budgets": self.budgets, "jobs": [j.to_dict() for j in self.jobs], "rejected": self.rejected}


def steps_for(budget, shape: ModelShape, batch):
    """Optimizer steps so that steps * batch * flops_per_example is closest to ``budget``."""
    return budget / (forward_flops(shape) * batch)


def plan_sweep(budgets, shapes, batch_examples, dataset_examples=None, rel_tol=0.05, min_steps=1, min_shapes=1,
               allow_epoch_reuse=True, train=None, data=None, seeds=(0,)):
    """One training job per (budget, shape, seed).

    ``shapes`` are dicts with ``d``, ``n_enc``, ``n_dec`` plus the ModelShape
    context sizes under ``E`` and ``D_q``. Steps are rounded to an integer and
    the shape is kept only if the realized compute stays inside the band.
    """
    budgets = [float(b) for b in budgets]
    if not budgets:
        raise PlanError("no budgets")
    if budgets != sorted(budgets):
        raise PlanError("budgets must be ascending")
    plan = SweepPlan(budgets)
    lim = math.log1p(rel_tol)
    for budget in budgets:
        kept = 0
        for sh in shapes:
            shape = ModelShape(n=sh["n_enc"], m=sh["n_dec"], d=sh["d"], E=sh["E"], D_q=sh["D_q"])
            exact = steps_for(budget, shape, batch_examples)
            steps = int(round(exact))
            reason = None
            if steps < max(1, min_steps):
                reason = f"needs {exact:.2f} steps (< {max(1, min_steps)})"
            else:
                realized = steps * batch_examples * forward_flops(shape)
                if abs(math.log(realized / budget)) > lim:
                    reason = "rounded steps leave the band"
            examples = steps * batch_examples
            reuse = dataset_examples is not None and examples > dataset_examples
            if reason is None and reuse and not allow_epoch_reuse:
                reason = f"needs {examples} examples, dataset has {dataset_examples}"
            if reason:
                plan.rejected.append({"budget": budget, "shape": sh, "reason": reason})
                continue
            kept += 1
            for seed in seeds:
                spec = {
                    "budget": budget,
                    "shape": {k: sh[k] for k in ("d", "n_enc", "n_dec")},
                    "steps": steps,
                    "batch_examples": batch_examples,
                    "examples": examples,
                    "epoch_reuse": bool(reuse),
                    "seed": int(seed),
                    "variant": "joint",
                    "train": dict(train or {}),
                    "data": dict(data or {}),
                }
                plan.jobs.append(Job("train", spec))
        if kept < min_shapes:
            raise PlanError(f"budget {budget:.3g}: only {kept} feasible shapes (need {min_shapes})")
    return plan


def family_shapes(ratio, layers, E, D_q):
    return [{"d": ratio * L, "n_enc": L, "n_dec": L, "E": E, "D_q": D_q} for L in layers]


def cross_agent_jobs(shape, steps_list, batch_examples, train, data, seed=0):
    """Paired with/without-AV runs at one shape over several data sizes."""
    jobs = []
    for variant in ("joint", "exclude_av"):
        for steps in steps_list:
            spec = {
                "budget": None,
                "shape": {k: shape[k] for k in ("d", "n_enc", "n_dec")},
                "steps": int(steps),
                "batch_examples": batch_examples,
                "examples": int(steps) * batch_examples,
                "epoch_reuse": False,
                "seed": int(seed),
                "variant": variant,
                "train": dict(train),
                "data": dict(data),
            }
            jobs.append(Job("train", spec))
    return jobs


__all__ = ["Job", "SweepPlan", "PlanError", "plan_sweep", "steps_for", "family_shapes", "cross_agent_jobs"]
