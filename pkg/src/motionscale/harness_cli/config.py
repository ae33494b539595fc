"""Study configuration: JSON file plus dotted CLI overrides."""
import copy
import hashlib
import json
import os
from pathlib import Path

STORE_ENV = "MOTIONSCALE_STORE"
DEFAULT_STORE = "motionscale-store.jsonl"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "world": {},
    "vocab": {},
    "window": {},
    "data": {"train_segments": 120, "eval_segments": 10, "eval_offset": 100000},
    "sweep": {
        "budgets": [1.0e10, 2.0e10, 4.0e10],
        "ratio": 8,
        "layers": [1, 2, 3, 4],
        "shapes": None,
        "batch_examples": 16,
        "warmup_steps": 20,
        "peak_lr": 3.0e-3,
        "final_lr": 3.0e-4,
        "weight_decay": 0.01,
        "rel_tol": 0.05,
        "min_steps": 10,
        "min_shapes": 4,
        "seeds": [0],
        "allow_epoch_reuse": True,
    },
    "eval": {"num_samples": 64, "K": 12, "scenes": 10},
    "inference": {"sample_counts": [8, 16, 32, 64, 128, 256, 512, 1024], "K": 6, "scenes": 20, "models": "band_optima"},
    "closed_loop": {
        "scenarios": 10,
        "calibration_scenarios": 6,
        "scenario_offset": 200000,
        "duration_s": 30.0,
        "num_rollouts": 16,
        "budget_fraction": 0.001,
        "alpha_max": 10.0,
        "max_iter": 6,
        "models": "band_optima",
    },
    "cross_agent": {"enabled": False, "layers": 1, "ratio": 16, "steps": [20, 40, 80, 160, 320]},
    "max_parallel": 1,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, overrides):
    """``overrides``: ``["sweep.budgets=[1e9,2e9]", "seed=3", ...]``."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, val = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        node[parts[-1]] = _parse_value(val)
    return cfg


def validate(cfg):
    unknown = set(cfg) - set(DEFAULTS) - {"store"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    sw = cfg["sweep"]
    b = sw["budgets"]
    if not b or any(x <= 0 for x in b) or list(b) != sorted(b):
        raise ConfigError("sweep.budgets must be positive and ascending")
    if sw["batch_examples"] < 1:
        raise ConfigError("sweep.batch_examples must be >= 1")
    if not sw["seeds"]:
        raise ConfigError("sweep.seeds must be non-empty")
    if cfg["max_parallel"] < 1:
        raise ConfigError("max_parallel must be >= 1")
    try:
        world_config(cfg)
        vocab_config(cfg)
        window_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path=None, overrides=()):
    user = {}
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, user)
    return validate(apply_overrides(cfg, overrides))


def config_hash(cfg) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k != "store"}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def store_path(cfg=None, cli=None) -> Path:
    if cli:
        return Path(cli)
    if os.environ.get(STORE_ENV):
        return Path(os.environ[STORE_ENV])
    if cfg and cfg.get("store"):
        return Path(cfg["store"])
    return Path(DEFAULT_STORE)


def artifacts_dir(store: Path) -> Path:
    return store.with_name(store.stem + "-artifacts")


def world_config(cfg):
    from ..synth_world import WorldConfig

    w = dict(cfg["world"])
    w.setdefault("seed", cfg["seed"])
    return WorldConfig(**w)


def vocab_config(cfg):
    from ..motion_codec import TokenVocab

    return TokenVocab(**cfg["vocab"])


def window_config(cfg):
    from ..synth_world import WindowSpec

    return WindowSpec(**cfg["window"])
