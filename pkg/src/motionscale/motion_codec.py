"""Verlet-wrapped displacement tokens.

A token encodes the residual between the next position and the constant
velocity extrapolation ``2 p_t - p_{t-1}``, quantized per axis on a ``V x V``
grid of centers spanning ``[-delta_max, delta_max]``. Encoding is closed-loop:
the extrapolation uses the already-quantized past, so decoding a teacher
target reproduces exactly the positions the encoder saw.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class TokenVocab:
    bins_per_axis: int = 13
    delta_max: float = 1.0
    token_dt: float = 0.5

    def __post_init__(self):
        if self.bins_per_axis < 3 or self.bins_per_axis % 2 == 0:
            raise ValueError("bins_per_axis must be odd and >= 3")
        if not self.delta_max > 0:
            raise ValueError("delta_max must be positive")
        if not self.token_dt > 0:
            raise ValueError("token_dt must be positive")

    @property
    def vocab_size(self) -> int:
        return self.bins_per_axis**2

    @property
    def center_token(self) -> int:
        return (self.vocab_size - 1) // 2

    @property
    def bin_width(self) -> float:
        return 2.0 * self.delta_max / (self.bins_per_axis - 1)

    @property
    def centers(self) -> np.ndarray:
        i = np.arange(self.bins_per_axis)
        return -self.delta_max + i * self.bin_width

    def token_offsets(self) -> np.ndarray:
        """``[V^2, 2]`` residual vector for every token."""
        c = self.centers
        ix, iy = np.divmod(np.arange(self.vocab_size), self.bins_per_axis)
        return np.stack([c[ix], c[iy]], axis=-1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["bins_per_axis"]), float(data["delta_max"]), float(data["token_dt"]))


@dataclass
class AgentTrack:
    positions: np.ndarray  # [T, 2]
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(len(self.positions), dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)

    def __len__(self):
        return len(self.positions)


@dataclass
class EncodedTracks:
    tokens: np.ndarray  # [A, T] int64
    decoded: np.ndarray  # [A, T, 2]
    clamp_counts: np.ndarray  # [A]


def encode_batch(positions, vocab: TokenVocab) -> EncodedTracks:
    """Encode ``[A, T+2, 2]`` tracks (two seed points then T targets)."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[-1] != 2:
        raise ValueError(f"expected [A, T+2, 2], got {positions.shape}")
    if positions.shape[1] < 2:
        raise ValueError("a track needs at least two seed points")
    if not np.isfinite(positions).all():
        raise ValueError("track contains non-finite positions")
    tokens, decoded, clamps = kernels.verlet_encode(positions, vocab.bins_per_axis, vocab.delta_max)
    return EncodedTracks(tokens, decoded, clamps)


def encode(track, vocab: TokenVocab) -> np.ndarray:
    """Tokens for a single ``T+2``-point track."""
    pos = track.positions if isinstance(track, AgentTrack) else np.asarray(track, dtype=np.float64)
    if isinstance(track, AgentTrack) and not track.valid.all():
        raise ValueError("cannot encode a track with invalid steps")
    if len(pos) < 2:
        raise ValueError("a track needs at least two seed points")
    return encode_batch(pos[None], vocab).tokens[0]


def decode_batch(tokens, seeds, vocab: TokenVocab) -> np.ndarray:
    """``[A, T]`` tokens with ``[A, 2, 2]`` seeds -> ``[A, T, 2]`` positions."""
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab.vocab_size):
        raise ValueError(f"token out of range [0, {vocab.vocab_size})")
    return kernels.verlet_decode(tokens.astype(np.int64), seeds, vocab.bins_per_axis, vocab.delta_max)


def decode(tokens, seed, vocab: TokenVocab) -> AgentTrack:
    """Single-track decode; the result excludes the two seed points."""
    tokens = np.asarray(tokens)
    seed = np.asarray(seed, dtype=np.float64).reshape(1, 2, 2)
    return AgentTrack(decode_batch(tokens[None], seed, vocab)[0])


def quantization_bound(vocab: TokenVocab, steps: int) -> float:
    """Loose per-axis round-trip bound ``T * delta_max / (V - 1)``."""
    return steps * vocab.delta_max / (vocab.bins_per_axis - 1)
