"""Checkpoints: ``weights.npz`` plus ``manifest.json``."""
import json
from pathlib import Path

import numpy as np

from ..motion_codec import TokenVocab
from .model import JointModel, ModelConfig

FORMAT_VERSION = 1


def save_checkpoint(directory, model: JointModel, vocab: TokenVocab, step=0, seed=0):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savez(d / "weights.npz", **model.params)
    manifest = {
        "format_version": FORMAT_VERSION,
        "shape": model.cfg.shape.to_dict(),
        "model": model.cfg.to_dict(),
        "vocab": vocab.to_dict(),
        "step": int(step),
        "seed": int(seed),
        "dtype": np.dtype(model.dtype).name,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_checkpoint(directory):
    """Returns ``(model, vocab, manifest)``."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    cfg = ModelConfig.from_dict(manifest["model"])
    if cfg.shape.to_dict() != manifest["shape"]:
        raise ValueError("manifest shape disagrees with model config")
    with np.load(d / "weights.npz") as z:
        params = {k: z[k] for k in z.files}
    model = JointModel(cfg, params=params, dtype=np.dtype(manifest["dtype"]).type)
    return model, TokenVocab.from_dict(manifest["vocab"]), manifest
