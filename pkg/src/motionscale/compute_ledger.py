"""Parameter and FLOPs accounting for the encoder-decoder model.

Only einsums inside attention and feed-forward blocks are counted; embeddings,
normalization and the output head are excluded. A multiply-add is two FLOPs.
Training compute is the forward cost times the number of examples (no backward
multiplier), so exponents stay comparable with the reference accounting.
"""
from dataclasses import asdict, dataclass

INT64_MAX = 2**63 - 1
FFN_MULT = 4


class FlopsOverflowError(OverflowError):
    """A count no longer fits a signed 64-bit integer."""


def _checked(value: int, what: str) -> int:
    if value > INT64_MAX:
        raise FlopsOverflowError(f"{what} = {value} exceeds int64")
    return value


@dataclass(frozen=True)
class ModelShape:
    n: int  # encoder layers
    m: int  # decoder layers
    d: int  # hidden width
    E: int  # scene tokens
    D_q: int  # decoder query tokens (modeled agents x future tokens)
    ffn_mult: int = FFN_MULT

    def __post_init__(self):
        for name in ("n", "m", "d", "E", "D_q", "ffn_mult"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise TypeError(f"{name} must be int, got {type(v).__name__}")
        if self.n < 0 or self.m < 0:
            raise ValueError("layer counts must be >= 0")
        if self.d < 1 or self.E < 1 or self.D_q < 1:
            raise ValueError("d, E and D_q must be >= 1")
        if self.ffn_mult != FFN_MULT:
            raise ValueError("feed-forward width is fixed at 4d")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: int(v) for k, v in data.items()})


@dataclass(frozen=True)
class ComputeBudget:
    flops_per_example: int
    examples: int

    @property
    def total_flops(self) -> int:
        return _checked(self.flops_per_example * self.examples, "total_flops")


def param_count(shape: ModelShape) -> int:
    return _checked((12 * shape.n + 16 * shape.m) * shape.d**2, "param_count")


def encoder_layer_flops(shape: ModelShape) -> int:
    E, d = shape.E, shape.d
    return 24 * E * d * d + 4 * d * E * E


def decoder_layer_flops(shape: ModelShape, queries: int | None = None) -> int:
    Dq = shape.D_q if queries is None else queries
    E, d = shape.E, shape.d
    return 28 * Dq * d * d + 4 * d * Dq * Dq + 4 * E * d * d + 4 * d * Dq * E


def flops_breakdown(shape: ModelShape) -> dict:
    """Per-example forward FLOPs split by block, mirroring the accounting table."""
    E, Dq, d = shape.E, shape.D_q, shape.d
    return {
        "encoder_self_attention": shape.n * (8 * E * d * d + 4 * d * E * E),
        "encoder_feed_forward": shape.n * 16 * E * d * d,
        "decoder_self_attention": shape.m * (8 * Dq * d * d + 4 * d * Dq * Dq),
        "decoder_cross_attention": shape.m * (4 * Dq * d * d + 4 * E * d * d + 4 * E * Dq * d),
        "decoder_feed_forward": shape.m * 16 * Dq * d * d,
    }


def forward_flops(shape: ModelShape) -> int:
    total = shape.n * encoder_layer_flops(shape) + shape.m * decoder_layer_flops(shape)
    return _checked(total, "forward_flops")


flops_per_example = forward_flops


def train_flops(shape: ModelShape, examples: int) -> int:
    if examples < 0:
        raise ValueError("examples must be >= 0")
    return ComputeBudget(forward_flops(shape), int(examples)).total_flops


def inference_flops(shape: ModelShape, num_samples: int) -> int:
    """Encoder once, full-sequence decoder once per sample (no cache discount)."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    enc = shape.n * encoder_layer_flops(shape)
    dec = shape.m * decoder_layer_flops(shape)
    return _checked(enc + num_samples * dec, "inference_flops")


def symmetric_shape(layers: int, ratio: int, E: int, D_q: int) -> ModelShape:
    """Equal encoder/decoder depth with width = ratio * depth."""
    return ModelShape(n=layers, m=layers, d=ratio * layers, E=E, D_q=D_q)


def family_flops_per_example(ratio: float, E: int, D_q: int):
    """Continuous relaxation N -> forward FLOPs for a symmetric family with d = ratio * L.

    N = 28 * ratio^2 * L^3, so L is recovered from N and plugged into the
    layer formulas with real-valued depth and width.
    """

    def fpe(N):
        L = (N / (28.0 * ratio**2)) ** (1.0 / 3.0)
        d = ratio * L
        enc = 24 * E * d * d + 4 * d * E * E
        dec = 28 * D_q * d * d + 4 * d * D_q * D_q + 4 * E * d * d + 4 * d * D_q * E
        return L * (enc + dec)

    return fpe
