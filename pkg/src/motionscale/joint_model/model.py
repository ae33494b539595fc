"""Encoder-decoder transformer over discrete motion tokens, in plain numpy.

The encoder fuses every scene element (agents, road segments, traffic lights,
route segments) into one token set and runs pre-norm self-attention blocks.
The decoder consumes the flattened ``T x M`` grid of motion tokens in
time-major order; a query at time ``t`` sees every agent at times ``<= t`` and
cross-attends to all valid scene tokens. Input at ``(t, m)`` is the agent's
token from ``t - 1`` (BOS at ``t = 0``), so the logits at ``t`` depend only on
tokens strictly before ``t``: agents are conditionally independent within a
step.

Attention and feed-forward layers carry no biases, so their weights are
exactly the ``(12 n + 16 m) d^2`` non-embedding parameters.
"""
from dataclasses import asdict, dataclass

import numpy as np

from ..compute_ledger import ModelShape
from ..motion_codec import TokenVocab
from . import layers as L
from .features import MODALITIES, feature_dims, featurize

CORE_SUFFIXES = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_enc: int = 2
    n_dec: int = 2
    heads: int = 0  # 0 -> d // 16 (at least 1)
    num_modeled: int = 8
    future_tokens: int = 22
    history_steps: int = 11
    num_agents: int = 16
    num_road: int = 40
    num_lights: int = 4
    num_route: int = 4
    bins_per_axis: int = 13

    def __post_init__(self):
        if self.d % self.num_heads:
            raise ValueError("d must be divisible by the head count")

    @property
    def num_heads(self) -> int:
        return self.heads if self.heads > 0 else max(1, self.d // 16)

    @property
    def vocab_size(self) -> int:
        return self.bins_per_axis**2

    @property
    def scene_tokens(self) -> int:
        return self.num_agents + self.num_road + self.num_lights + self.num_route

    @property
    def shape(self) -> ModelShape:
        return ModelShape(
            n=self.n_enc, m=self.n_dec, d=self.d, E=self.scene_tokens, D_q=self.num_modeled * self.future_tokens
        )

    def with_modeled(self, m):
        kw = asdict(self)
        kw["num_modeled"] = m
        return ModelConfig(**kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: int(v) for k, v in data.items()})

    @classmethod
    def for_world(cls, world, vocab: TokenVocab, window, d, n_enc, n_dec, heads=0):
        hist = int(round(window.history_s / vocab.token_dt)) + 1
        fut = int(round(window.future_s / vocab.token_dt))
        return cls(
            d=d,
            n_enc=n_enc,
            n_dec=n_dec,
            heads=heads,
            num_modeled=world.num_modeled,
            future_tokens=fut,
            history_steps=hist,
            num_agents=world.num_context_agents,
            num_road=world.num_road_segments,
            num_lights=world.num_traffic_lights,
            num_route=world.num_route_segments,
            bins_per_axis=vocab.bins_per_axis,
        )


def init_params(cfg: ModelConfig, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    d, V = cfg.d, cfg.vocab_size
    dims = feature_dims(cfg.history_steps)
    p = {}

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(dtype)

    for mod in MODALITIES:
        p[f"in_{mod}_w"] = normal((dims[mod], d), 1.0 / np.sqrt(dims[mod]))
        p[f"in_{mod}_b"] = np.zeros(d, dtype)
        p[f"null_{mod}"] = normal((d,), 0.1)

    def ln(name):
        p[name + "_g"] = np.ones(d, dtype)
        p[name + "_b"] = np.zeros(d, dtype)

    def attn(prefix, depth):
        for k in ("wq", "wk", "wv"):
            p[prefix + k] = normal((d, d), 1.0 / np.sqrt(d))
        p[prefix + "wo"] = normal((d, d), 1.0 / np.sqrt(d) / np.sqrt(2 * max(depth, 1)))

    def ffn(prefix, depth):
        p[prefix + "w1"] = normal((d, 4 * d), 1.0 / np.sqrt(d))
        p[prefix + "w2"] = normal((4 * d, d), 1.0 / np.sqrt(4 * d) / np.sqrt(2 * max(depth, 1)))

    for l in range(cfg.n_enc):
        ln(f"enc{l}_ln1")
        attn(f"enc{l}_", cfg.n_enc)
        ln(f"enc{l}_ln2")
        ffn(f"enc{l}_", cfg.n_enc)
    ln("enc_lnf")

    p["tok_emb"] = normal((V + 1, d), 0.1)
    p["time_emb"] = normal((cfg.future_tokens, d), 0.1)
    p["query_w"] = normal((dims["query"], d), 1.0 / np.sqrt(dims["query"]))
    p["query_b"] = np.zeros(d, dtype)
    for l in range(cfg.n_dec):
        ln(f"dec{l}_ln1")
        attn(f"dec{l}_self_", cfg.n_dec)
        ln(f"dec{l}_ln2")
        attn(f"dec{l}_cross_", cfg.n_dec)
        ln(f"dec{l}_ln3")
        ffn(f"dec{l}_", cfg.n_dec)
    ln("dec_lnf")
    # zero head -> uniform next-token distribution before training
    p["out_w"] = np.zeros((d, V), dtype)
    p["out_b"] = np.zeros(V, dtype)
    return p


def is_core(name: str) -> bool:
    return name.endswith(CORE_SUFFIXES) and (name.startswith("enc") or name.startswith("dec"))


def core_param_count(params) -> int:
    return int(sum(v.size for k, v in params.items() if is_core(k)))


def batch_targets(batch):
    """Target tokens at the modeled slots, ``[B, M, T]``."""
    idx = batch["modeled"]
    return np.take_along_axis(batch["tokens"], idx[..., None], axis=1)


def modeled_types(batch):
    return np.take_along_axis(batch["agent_types"], batch["modeled"], axis=1)


def shift_right(targets, bos):
    """Decoder inputs: BOS then targets[:, :, :-1]; returned time-major ``[B, T, M]``."""
    B, M, T = targets.shape
    inp = np.empty((B, T, M), dtype=np.int64)
    inp[:, 0] = bos
    inp[:, 1:] = targets.transpose(0, 2, 1)[:, :-1]
    return inp


class JointModel:
    def __init__(self, cfg: ModelConfig, params=None, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params = init_params(cfg, seed, dtype) if params is None else params

    # ------------------------------------------------------------ encoder

    def encode_scene(self, feats):
        """Scene embedding ``[B, E, d]``, validity ``[B, E]`` and a backward cache."""
        p, cfg = self.params, self.cfg
        xs, valids, in_caches = [], [], []
        for mod in MODALITIES:
            f, v = feats[mod]
            emb, c = L.linear_fwd(f, p[f"in_{mod}_w"], p[f"in_{mod}_b"], tag="embed")
            xs.append(np.where(v[..., None], emb, p[f"null_{mod}"]))
            valids.append(v)
            in_caches.append((c, v))
        x = np.concatenate(xs, axis=1)
        valid = np.concatenate(valids, axis=1)
        kmask = valid[:, None, None, :]
        blocks = []
        for l in range(cfg.n_enc):
            pre = f"enc{l}_"
            h, c1 = L.layernorm_fwd(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            a, ca = L.attention_fwd(h, h, p, pre, cfg.num_heads, kmask)
            x = x + a
            h2, c2 = L.layernorm_fwd(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            f, cf = L.ffn_fwd(h2, p, pre)
            x = x + f
            blocks.append((c1, ca, c2, cf))
        mem, cl = L.layernorm_fwd(x, p["enc_lnf_g"], p["enc_lnf_b"])
        return mem, valid, (in_caches, blocks, cl, [x.shape[1] for x in xs], mem.shape)

    def encode_scene_bwd(self, dmem, cache, grads):
        p, cfg = self.params, self.cfg
        in_caches, blocks, cl, sizes, _ = cache
        dx, dg, db = L.layernorm_bwd(dmem, cl)
        grads["enc_lnf_g"] += dg
        grads["enc_lnf_b"] += db
        for l in reversed(range(cfg.n_enc)):
            pre = f"enc{l}_"
            c1, ca, c2, cf = blocks[l]
            dh2 = L.ffn_bwd(dx, cf, p, pre, grads)
            dxx, dg, db = L.layernorm_bwd(dh2, c2)
            grads[pre + "ln2_g"] += dg
            grads[pre + "ln2_b"] += db
            dx = dx + dxx
            dq, dkv = L.attention_bwd(dx, ca, p, pre, cfg.num_heads, grads)
            dxx, dg, db = L.layernorm_bwd(dq + dkv, c1)
            grads[pre + "ln1_g"] += dg
            grads[pre + "ln1_b"] += db
            dx = dx + dxx
        start = 0
        for mod, (c, v), size in zip(MODALITIES, in_caches, sizes):
            dpart = dx[:, start : start + size]
            start += size
            vm = v[..., None]
            demb = np.where(vm, dpart, 0.0)
            grads[f"null_{mod}"] += np.where(vm, 0.0, dpart).reshape(-1, dpart.shape[-1]).sum(0)
            _, dw, db = L.linear_bwd(demb, c, p[f"in_{mod}_w"], has_bias=True)
            grads[f"in_{mod}_w"] += dw
            grads[f"in_{mod}_b"] += db

    # ------------------------------------------------------------ decoder

    def _query_embed(self, query_f):
        p = self.params
        return L.linear_fwd(query_f, p["query_w"], p["query_b"], tag="embed")

    def decode(self, mem, mem_valid, query_f, tokens_in):
        """Teacher-forced decoder pass. ``tokens_in`` is time-major ``[B, T, M]``.

        Returns logits ``[B, T, M, V]`` and a cache.
        """
        p, cfg = self.params, self.cfg
        B, T, M = tokens_in.shape
        qe, cq = self._query_embed(query_f)  # [B, M, d]
        x = p["tok_emb"][tokens_in] + p["time_emb"][:T][None, :, None, :] + qe[:, None, :, :]
        x = x.reshape(B, T * M, -1)
        tpos = np.arange(T * M) // M
        smask = (tpos[None, :] <= tpos[:, None])[None, None]
        cmask = mem_valid[:, None, None, :]
        blocks = []
        for l in range(cfg.n_dec):
            pre = f"dec{l}_"
            h, c1 = L.layernorm_fwd(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            a, ca = L.attention_fwd(h, h, p, pre + "self_", cfg.num_heads, smask)
            x = x + a
            h2, c2 = L.layernorm_fwd(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            a2, cc = L.attention_fwd(h2, mem, p, pre + "cross_", cfg.num_heads, cmask)
            x = x + a2
            h3, c3 = L.layernorm_fwd(x, p[pre + "ln3_g"], p[pre + "ln3_b"])
            f, cf = L.ffn_fwd(h3, p, pre)
            x = x + f
            blocks.append((c1, ca, c2, cc, c3, cf))
        h, cl = L.layernorm_fwd(x, p["dec_lnf_g"], p["dec_lnf_b"])
        logits, co = L.linear_fwd(h, p["out_w"], p["out_b"], tag="head")
        return logits.reshape(B, T, M, -1), (tokens_in, cq, blocks, cl, co)

    def decode_bwd(self, dlogits, cache, grads):
        """Returns the gradient w.r.t. the scene embedding."""
        p, cfg = self.params, self.cfg
        tokens_in, cq, blocks, cl, co = cache
        B, T, M = tokens_in.shape
        dlogits = dlogits.reshape(B, T * M, -1)
        dh, dw, db = L.linear_bwd(dlogits, co, p["out_w"], has_bias=True)
        grads["out_w"] += dw
        grads["out_b"] += db
        dx, dg, db = L.layernorm_bwd(dh, cl)
        grads["dec_lnf_g"] += dg
        grads["dec_lnf_b"] += db
        dmem = None
        for l in reversed(range(cfg.n_dec)):
            pre = f"dec{l}_"
            c1, ca, c2, cc, c3, cf = blocks[l]
            dh3 = L.ffn_bwd(dx, cf, p, pre, grads)
            dxx, dg, db = L.layernorm_bwd(dh3, c3)
            grads[pre + "ln3_g"] += dg
            grads[pre + "ln3_b"] += db
            dx = dx + dxx
            dq, dm = L.attention_bwd(dx, cc, p, pre + "cross_", cfg.num_heads, grads)
            dmem = dm if dmem is None else dmem + dm
            dxx, dg, db = L.layernorm_bwd(dq, c2)
            grads[pre + "ln2_g"] += dg
            grads[pre + "ln2_b"] += db
            dx = dx + dxx
            dq, dkv = L.attention_bwd(dx, ca, p, pre + "self_", cfg.num_heads, grads)
            dxx, dg, db = L.layernorm_bwd(dq + dkv, c1)
            grads[pre + "ln1_g"] += dg
            grads[pre + "ln1_b"] += db
            dx = dx + dxx
        dx = dx.reshape(B, T, M, -1)
        np.add.at(grads["tok_emb"], tokens_in, dx)
        grads["time_emb"][:T] += dx.sum(axis=(0, 2))
        dqe = dx.sum(axis=1)
        _, dw, db = L.linear_bwd(dqe, cq, p["query_w"], has_bias=True)
        grads["query_w"] += dw
        grads["query_b"] += db
        return dmem

    # ------------------------------------------------------------ full passes

    def featurize(self, batch):
        return featurize(batch, self.dtype)

    def forward(self, batch, feats=None):
        """Teacher-forced logits ``[B, M, T, V]`` plus cache for :meth:`backward`."""
        feats = self.featurize(batch) if feats is None else feats
        targets = batch_targets(batch)
        mem, valid, ce = self.encode_scene(feats)
        tokens_in = shift_right(targets, self.cfg.vocab_size)
        logits, cd = self.decode(mem, valid, feats["query"], tokens_in)
        return logits.transpose(0, 2, 1, 3), (ce, cd)

    def backward(self, dlogits, cache):
        ce, cd = cache
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dmem = self.decode_bwd(dlogits.transpose(0, 2, 1, 3), cd, grads)
        if dmem is None:
            dmem = np.zeros(ce[4], dtype=self.dtype)
        self.encode_scene_bwd(dmem, ce, grads)
        return grads

    def loss(self, batch, with_grad=False):
        """Mean teacher-forced cross-entropy; per-type partial losses in ``info``."""
        logits, cache = self.forward(batch)
        targets = batch_targets(batch)
        weights = np.ones(targets.shape, dtype=np.float64)
        loss, nll, dlogits = L.cross_entropy(logits.astype(np.float64), targets, weights)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite loss")
        info = {"per_type": per_type_losses(nll, modeled_types(batch)), "nll": nll, "logits": logits}
        grads = self.backward(dlogits.astype(self.dtype), cache) if with_grad else None
        return loss, grads, info

    def next_token_logits(self, batch, prefix):
        """Logits ``[B, M, V]`` for step ``t = prefix.shape[-1]`` given ``prefix [B, M, t]``."""
        prefix = np.asarray(prefix, dtype=np.int64)
        B, M, t = prefix.shape
        if t >= self.cfg.future_tokens:
            raise ValueError("prefix already spans the full horizon")
        feats = self.featurize(batch)
        mem, valid, _ = self.encode_scene(feats)
        full = np.zeros((B, M, t + 1), dtype=np.int64)
        full[..., :t] = prefix
        tokens_in = shift_right(full, self.cfg.vocab_size)
        logits, _ = self.decode(mem, valid, feats["query"], tokens_in)
        return logits[:, t]

    # ------------------------------------------------------------ incremental decoding

    def start_decoding(self, mem, mem_valid, query_f):
        """Cache state for step-by-step decoding (cross-attention K/V precomputed)."""
        p, cfg = self.params, self.cfg
        h = cfg.num_heads
        cross = []
        for l in range(cfg.n_dec):
            pre = f"dec{l}_cross_"
            k = L._split(mem @ p[pre + "wk"], h)
            v = L._split(mem @ p[pre + "wv"], h)
            cross.append((k, v))
        qe, _ = self._query_embed(query_f)
        return {
            "t": 0,
            "qe": qe,
            "cross": cross,
            "cmask": mem_valid[:, None, None, :],
            "self": [(None, None) for _ in range(cfg.n_dec)],
        }

    def decode_step(self, state, prev_tokens):
        """Feed tokens from step ``t - 1`` (``[B, M]``; BOS at ``t = 0``), return logits ``[B, M, V]``."""
        p, cfg = self.params, self.cfg
        h = cfg.num_heads
        t = state["t"]
        x = p["tok_emb"][prev_tokens] + p["time_emb"][t] + state["qe"]
        B = x.shape[0]
        for l in range(cfg.n_dec):
            pre = f"dec{l}_"
            hh, _ = L.layernorm_fwd(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = L._split(hh @ p[pre + "self_wq"], h)
            k = L._split(hh @ p[pre + "self_wk"], h)
            v = L._split(hh @ p[pre + "self_wv"], h)
            kc, vc = state["self"][l]
            if kc is not None:
                if kc.shape[0] != B:
                    kc = np.broadcast_to(kc, (B,) + kc.shape[1:])
                    vc = np.broadcast_to(vc, (B,) + vc.shape[1:])
                k = np.concatenate([kc, k], axis=2)
                v = np.concatenate([vc, v], axis=2)
            state["self"][l] = (k, v)
            scale = 1.0 / np.sqrt(q.shape[-1])
            P = L.masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, None)
            x = x + L._merge(P @ v) @ p[pre + "self_wo"]
            hh, _ = L.layernorm_fwd(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            q = L._split(hh @ p[pre + "cross_wq"], h)
            kx, vx = state["cross"][l]
            P = L.masked_softmax((q @ kx.transpose(0, 1, 3, 2)) * scale, state["cmask"])
            x = x + L._merge(P @ vx) @ p[pre + "cross_wo"]
            hh, _ = L.layernorm_fwd(x, p[pre + "ln3_g"], p[pre + "ln3_b"])
            a, _ = L.gelu_fwd(hh @ p[pre + "w1"])
            x = x + a @ p[pre + "w2"]
        hh, _ = L.layernorm_fwd(x, p["dec_lnf_g"], p["dec_lnf_b"])
        state["t"] = t + 1
        return hh @ p["out_w"] + p["out_b"]

    def num_core_params(self):
        return core_param_count(self.params)


def per_type_losses(nll, types):
    """Mean NLL per agent type over the positions of that type (absent types omitted)."""
    from ..synth_world import AGENT_TYPES

    out = {}
    for k, name in enumerate(AGENT_TYPES):
        sel = types == k
        if sel.any():
            out[name] = float(nll[sel].mean())
    return out
