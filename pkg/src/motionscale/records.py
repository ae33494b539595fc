"""RunRecord: one training run's row in a scaling study."""
import math
from dataclasses import asdict, dataclass, field

from .compute_ledger import ModelShape, forward_flops


@dataclass
class RunRecord:
    N: int
    D: int
    C: int
    eval_loss: float
    per_type_losses: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    miles: float = 0.0
    job_id: str = ""
    shape: dict | None = None
    steps: int = 0
    batch: int = 0
    seed: int = 0
    train_loss: float = float("nan")
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.eval_loss) and self.eval_loss > 0):
            raise ValueError(f"eval_loss must be finite and positive, got {self.eval_loss}")
        for k, v in self.per_type_losses.items():
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"per-type loss {k} must be finite and positive")
        if self.shape is not None:
            fpe = forward_flops(ModelShape.from_dict(self.shape))
            if fpe * self.D != self.C:
                raise ValueError("C must equal flops_per_example * D")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})
