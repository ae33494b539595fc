"""Autoregressive joint sampling."""
from dataclasses import dataclass

import numpy as np

from ..motion_codec import TokenVocab, decode_batch
from .layers import log_softmax
from .model import JointModel


@dataclass
class JointRollout:
    tokens: np.ndarray  # [M, T]
    log_probs: np.ndarray  # [M, T]
    decoded: np.ndarray  # [M, T, 2]


@dataclass
class RolloutSet:
    """``R`` joint rollouts for one scene, stacked on the leading axis."""

    tokens: np.ndarray  # [R, M, T]
    log_probs: np.ndarray  # [R, M, T]
    decoded: np.ndarray  # [R, M, T, 2]

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, i):
        return JointRollout(self.tokens[i], self.log_probs[i], self.decoded[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _draw(logits, temperature, rng):
    logp = log_softmax(logits.astype(np.float64))
    if temperature <= 0:
        tok = np.argmax(logp, axis=-1)
    else:
        probs = np.exp(log_softmax(logp / temperature))
        cdf = np.cumsum(probs, axis=-1)
        u = rng.random(cdf.shape[:-1])[..., None] * cdf[..., -1:]
        tok = np.minimum((cdf <= u).sum(-1), cdf.shape[-1] - 1)
    return tok, np.take_along_axis(logp, tok[..., None], -1)[..., 0]


def sample_tokens(model: JointModel, example, num_samples, temperature=1.0, seed=0):
    """Tokens and log-probs ``[R, M, T]`` for one scene (``example`` arrays without batch axis)."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    batch = {k: np.asarray(v)[None] for k, v in example.items() if k != "scene_id"}
    feats = model.featurize(batch)
    mem, valid, _ = model.encode_scene(feats)
    state = model.start_decoding(mem, valid, feats["query"])
    cfg = model.cfg
    M = batch["modeled"].shape[1]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    prev = np.full((num_samples, M), cfg.vocab_size, dtype=np.int64)
    toks = np.empty((num_samples, M, cfg.future_tokens), dtype=np.int64)
    lps = np.empty((num_samples, M, cfg.future_tokens))
    for t in range(cfg.future_tokens):
        logits = model.decode_step(state, prev)
        tok, lp = _draw(logits, temperature, rng)
        toks[:, :, t] = tok
        lps[:, :, t] = lp
        prev = tok
    return toks, lps


def sample_rollouts(model: JointModel, example, num_samples, vocab: TokenVocab, temperature=1.0, seed=0) -> RolloutSet:
    toks, lps = sample_tokens(model, example, num_samples, temperature, seed)
    modeled = np.asarray(example["modeled"])
    seeds = np.asarray(example["seeds"])[modeled]  # [M, 2, 2]
    R, M, T = toks.shape
    seeds_r = np.broadcast_to(seeds, (R, M, 2, 2)).reshape(R * M, 2, 2)
    decoded = decode_batch(toks.reshape(R * M, T), seeds_r, vocab).reshape(R, M, T, 2)
    return RolloutSet(toks, lps, decoded)
