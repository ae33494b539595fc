import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from motionscale.compute_ledger import (
    FlopsOverflowError,
    ModelShape,
    decoder_layer_flops,
    family_flops_per_example,
    flops_breakdown,
    forward_flops,
    inference_flops,
    param_count,
    symmetric_shape,
    train_flops,
)
from motionscale.joint_model import JointModel, ModelConfig
from motionscale.joint_model.layers import count_macs

# independent symbolic evaluation of the accounting formulas
n_, m_, d_, E_, D_ = sp.symbols("n m d E D", integer=True, nonnegative=True)
PARAMS = (12 * n_ + 16 * m_) * d_**2
ENC = 24 * E_ * d_**2 + 4 * d_ * E_**2
DEC = 28 * D_ * d_**2 + 4 * d_ * D_**2 + 4 * E_ * d_**2 + 4 * d_ * D_ * E_


def sym(expr, s):
    return int(expr.subs({n_: s.n, m_: s.m, d_: s.d, E_: s.E, D_: s.D_q}))


shapes = st.builds(ModelShape, n=st.integers(0, 6), m=st.integers(0, 6), d=st.integers(1, 512),
                   E=st.integers(1, 700), D_q=st.integers(1, 300))


def test_empty_model_has_no_params():
    assert param_count(ModelShape(0, 0, 64, 1, 1)) == 0


def test_param_count_reference_shape():
    s = ModelShape(2, 2, 128, 64, 176)
    assert param_count(s) == sym(PARAMS, s) == 917_504


def test_decoder_share_is_four_sevenths():
    for d in (8, 64, 333):
        s = ModelShape(2, 2, d, 5, 5)
        dec = param_count(ModelShape(0, 2, d, 5, 5))
        assert sp.Rational(dec, param_count(s)) == sp.Rational(4, 7)


def test_hand_flops_examples():
    assert forward_flops(ModelShape(1, 0, 1, 2, 3)) == 64
    assert forward_flops(ModelShape(0, 1, 1, 2, 3)) == 152
    assert forward_flops(ModelShape(1, 1, 1, 2, 3)) == 216


def test_breakdown_sums_to_total():
    s = ModelShape(3, 2, 48, 40, 88)
    assert sum(flops_breakdown(s).values()) == forward_flops(s)


@given(shapes)
@settings(max_examples=200, deadline=None)
def test_formulas_match_symbolic(s):
    assert param_count(s) == sym(PARAMS, s)
    assert forward_flops(s) == s.n * sym(ENC, s) + s.m * sym(DEC, s)


@given(shapes, st.integers(0, 10**6), st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_train_flops_linear(s, a, b):
    assert train_flops(s, a + b) == train_flops(s, a) + train_flops(s, b)


def test_inference_flops():
    s = ModelShape(2, 2, 128, 64, 176)
    assert inference_flops(s, 1) == forward_flops(s)
    dec_only = ModelShape(0, 2, 32, 10, 20)
    assert inference_flops(dec_only, 2) == 2 * forward_flops(dec_only)
    assert inference_flops(s, 64) == 2 * sym(ENC, s) + 64 * 2 * sym(DEC, s)
    assert inference_flops(s, 64) == 13_694_402_560


@given(shapes, st.integers(1, 2000))
@settings(max_examples=100, deadline=None)
def test_inference_affine(s, r):
    step = inference_flops(s, r + 1) - inference_flops(s, r)
    assert step == s.m * decoder_layer_flops(s)


def test_overflow_reported():
    s = ModelShape(10**6, 10**6, 10**6, 10**6, 10**6)
    with pytest.raises(FlopsOverflowError):
        forward_flops(s)
    with pytest.raises(FlopsOverflowError):
        train_flops(ModelShape(2, 2, 128, 64, 176), 2**62)


@pytest.mark.parametrize("bad", [dict(n=-1), dict(d=0), dict(E=0), dict(D_q=0), dict(ffn_mult=2)])
def test_shape_validation(bad):
    kw = dict(n=1, m=1, d=8, E=4, D_q=4)
    kw.update(bad)
    with pytest.raises(ValueError):
        ModelShape(**kw)


def test_family_relaxation_matches_integer_shapes():
    fpe = family_flops_per_example(8, 60, 176)
    for L in (1, 2, 3):
        s = symmetric_shape(L, 8, 60, 176)
        assert fpe(param_count(s)) == pytest.approx(forward_flops(s), rel=1e-12)


MODEL_SHAPES = [(8, 1, 1), (16, 2, 1), (16, 1, 2), (32, 2, 2), (24, 3, 0)]


@pytest.mark.parametrize("d,n,m", MODEL_SHAPES)
def test_model_matches_accounting(d, n, m, small_world, vocab, short_window, small_dataset):
    cfg = ModelConfig.for_world(small_world, vocab, short_window, d=d, n_enc=n, n_dec=m)
    model = JointModel(cfg)
    assert model.num_core_params() == param_count(cfg.shape)
    batch = small_dataset.subset([0, 1, 2]).arrays
    with count_macs() as c:
        model.forward(batch)
    assert 2 * c.core == 3 * forward_flops(cfg.shape)
