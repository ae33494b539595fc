"""Route-conditioned single-agent planner fine-tune."""
import numpy as np

from ..compute_ledger import forward_flops
from .model import JointModel
from .train import TrainConfig, train


def planner_view(dataset):
    """Same scenes with only the AV modeled (the AV is always first in ``order``)."""
    out = dataset.subset(np.arange(len(dataset)))
    out.arrays["modeled"] = np.ascontiguousarray(dataset["order"][:, :1]).astype(np.int64)
    return out


def without_route(dataset):
    route = dataset["route"].copy()
    route[..., 6] = 0.0
    return dataset.with_route(route)


def planner_from(model: JointModel) -> JointModel:
    """M=1 copy of ``model``; weights shared in value, not in memory."""
    params = {k: v.copy() for k, v in model.params.items()}
    return JointModel(model.cfg.with_modeled(1), params=params, dtype=model.dtype)


def finetune_planner(model: JointModel, dataset, budget_flops, batch_examples=16, peak_lr=5e-4,
                     final_lr=5e-5, warmup_steps=10, weight_decay=0.01, seed=0):
    """Fine-tune an M=1 planner within ``budget_flops``.

    Returns ``(planner, info)`` where ``info`` reports steps taken and FLOPs
    consumed. A budget too small for one step returns the untouched copy.
    """
    if budget_flops < 0:
        raise ValueError("budget must be non-negative")
    planner = planner_from(model)
    data = planner_view(dataset)
    per_step = forward_flops(planner.cfg.shape) * batch_examples
    steps = int(budget_flops // per_step)
    info = {"steps": steps, "consumed_flops": steps * per_step, "budget_flops": int(budget_flops)}
    if steps == 0:
        return planner, info
    cfg = TrainConfig(
        model=planner.cfg,
        batch_examples=batch_examples,
        total_steps=steps,
        warmup_steps=min(warmup_steps, steps // 10),
        peak_lr=peak_lr,
        final_lr=final_lr,
        weight_decay=weight_decay,
        seed=seed,
    )
    planner, rec = train(data, cfg, model=planner)
    info["record"] = rec
    return planner, info
