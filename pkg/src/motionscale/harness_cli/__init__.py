"""Study orchestration: planning, job execution, result store and reports."""
from .config import ConfigError, load_config
from .plan import Job, PlanError, SweepPlan, plan_sweep
from .report import report
from .store import Store

__all__ = ["ConfigError", "load_config", "Job", "PlanError", "SweepPlan", "plan_sweep", "report", "Store"]
