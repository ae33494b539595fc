"""AdamW training with linear warmup and cosine decay."""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..compute_ledger import param_count, train_flops
from ..records import RunRecord
from .model import JointModel, ModelConfig

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    batch_examples: int = 32
    total_steps: int = 1000
    warmup_steps: int = 100
    peak_lr: float = 2e-3
    final_lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if not self.peak_lr > self.final_lr > 0:
            raise ValueError("need peak_lr > final_lr > 0")
        if self.batch_examples < 1:
            raise ValueError("batch_examples must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["model"] = ModelConfig.from_dict(data["model"])
        return cls(**data)


def lr_at(step, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to ``final_lr`` at ``total_steps``."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    frac = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    if frac == 1.0:
        return cfg.final_lr
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * frac))


def _decays(name, value):
    return value.ndim == 2 and name not in ("tok_emb", "time_emb")


class AdamW:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise TrainingDiverged("non-finite gradient norm")
        scale = min(1.0, c.grad_clip / norm) if c.grad_clip > 0 and norm > 0 else 1.0
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for k, p in params.items():
            g = grads[k] * scale
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.weight_decay and _decays(k, p):
                p -= lr * c.weight_decay * p
            p -= (lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)).astype(p.dtype)
        return norm


def batch_order(n, batch, steps, seed):
    """Deterministic example indices per step: seeded reshuffle every epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    need = batch * steps
    chunks, have = [], 0
    while have < need:
        chunks.append(rng.permutation(n))
        have += n
    return np.concatenate(chunks)[:need].reshape(steps, batch)


def evaluate(model: JointModel, dataset, batch=64):
    """Teacher-forced mean loss and per-type losses over ``dataset``."""
    total, count = 0.0, 0
    by_type = {}
    for s in range(0, len(dataset), batch):
        sub = dataset.subset(range(s, min(s + batch, len(dataset))))
        loss, _, info = model.loss(sub.arrays)
        n = info["nll"].size
        total += loss * n
        count += n
        types = np.take_along_axis(sub["agent_types"], sub["modeled"], axis=1)
        nll = info["nll"]
        for name, k in zip(("av", "vehicle", "pedestrian", "cyclist"), range(4)):
            sel = types == k
            if sel.any():
                a, c = by_type.get(name, (0.0, 0))
                by_type[name] = (a + float(nll[sel].sum()), c + int(sel.sum()) * nll.shape[-1])
    return total / count, {k: a / c for k, (a, c) in by_type.items()}


def train(dataset, cfg: TrainConfig, eval_set=None, model: JointModel | None = None, log_every=0):
    """Run ``total_steps`` AdamW updates; returns ``(model, RunRecord)``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = model or JointModel(cfg.model, seed=cfg.seed)
    opt = AdamW(model.params, cfg)
    order = batch_order(len(dataset), cfg.batch_examples, cfg.total_steps, cfg.seed)
    train_loss = float("nan")
    for step in range(cfg.total_steps):
        lr = lr_at(step, cfg)
        batch = dataset.subset(order[step]).arrays
        try:
            loss, grads, _ = model.loss(batch, with_grad=True)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        opt.step(model.params, grads, lr)
        train_loss = loss if step == 0 else 0.95 * train_loss + 0.05 * loss
        if log_every and step % log_every == 0:
            log.info("step %d lr %.2e loss %.4f", step, lr, loss)
    eval_loss, per_type = evaluate(model, eval_set if eval_set is not None else dataset)
    shape = cfg.model.shape
    examples = cfg.total_steps * cfg.batch_examples
    miles_per_example = dataset.miles() / len(dataset)
    rec = RunRecord(
        N=param_count(shape),
        D=examples,
        C=train_flops(shape, examples),
        eval_loss=float(eval_loss),
        per_type_losses=per_type,
        miles=miles_per_example * examples,
        shape=shape.to_dict(),
        steps=cfg.total_steps,
        batch=cfg.batch_examples,
        seed=cfg.seed,
        train_loss=float(train_loss),
    )
    return model, rec
