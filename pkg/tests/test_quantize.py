import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TOY
from esesim.errors import FormatOverflowError, ValidationError
from esesim.model import LayerConfig, synthetic_params, zero_params
from esesim.quantize import (
    INPUT_FORMAT,
    LUT_FORMAT,
    FixedFormat,
    QuantizationPlan,
    QuantizedState,
    analyze_range,
    build_lut,
    default_luts,
    derive_format,
    derive_plan,
    dump_lut_csv,
    integer_bits,
    load_quantized,
    lut_eval,
    lut_eval_float,
    quantize_params,
    quantize_tensor,
    quantize_values,
    quantized_lstm_gates,
    quantized_lstm_step,
    rescale,
    save_quantized,
    shift_round,
)
from oracles import INDEXED, RANGE_TABLE, FixedOracle

WIDTHS = (16, 12, 8)


@pytest.mark.parametrize("layer,name,lo,hi,ibits,decimals", RANGE_TABLE)
def test_reference_range_formats(layer, name, lo, hi, ibits, decimals):
    max_abs = max(abs(lo), abs(hi))
    assert integer_bits(max_abs) == ibits
    for width, want in zip(WIDTHS, decimals):
        assert derive_format(max_abs, width, name in INDEXED).frac == want


def test_format_examples():
    assert derive_format(5.7196, 12, True) == FixedFormat(8, 4)
    assert derive_format(0.9584, 12, False).frac == 11
    assert derive_format(1.8009, 12, False).frac == 10
    assert derive_format(1.0947, 8, True).frac == 2
    with pytest.raises(FormatOverflowError):
        derive_format(5.7196, 4, True)
    with pytest.raises(ValidationError):
        derive_format(0.0, 12, False)


def test_power_of_two_edge():
    fmt = derive_format(2.0, 12, False)
    assert integer_bits(2.0) == 2 and fmt.frac == 10
    assert quantize_values(2.0, fmt) == fmt.max_int


def test_analyze_range(rng):
    assert analyze_range(np.zeros((3, 3))) == (0.0, 0.0)
    m = rng.normal(size=(20, 20))
    m[3, 4], m[7, 1] = -4.9285, 5.7196
    assert analyze_range(m) == (-4.9285, 5.7196)
    with pytest.raises(ValidationError):
        analyze_range(np.zeros((0,)))


def test_quantize_basics(rng):
    assert quantize_values(0.0, FixedFormat(12, 7)) == 0
    q = quantize_tensor(np.array([0.5]), FixedFormat(12, 4))
    assert q.values[0] == 8 and q.dequantize()[0] == 0.5
    assert quantize_values([2.5 / 16, -2.5 / 16], FixedFormat(12, 4)).tolist() == [3, -3]
    assert quantize_values([1e6, -1e6], FixedFormat(8, 2)).tolist() == [127, -128]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32))
def test_half_ulp_error(frac, seed):
    fmt = FixedFormat(16, frac)
    lo, hi = fmt.range
    v = np.random.default_rng(seed).uniform(lo, hi, 200)
    err = np.abs(v - quantize_tensor(v, fmt).dequantize())
    assert err.max() <= 2.0 ** (-frac - 1)


def test_shift_round_half_away():
    assert shift_round(np.array([3, -3, 5, -5, 4]), 1).tolist() == [2, -2, 3, -3, 2]
    assert shift_round(np.array([3]), -2).tolist() == [12]
    assert rescale(np.array([1 << 30]), 8, 0).tolist() == [32767]


def test_lut_construction():
    s, t = build_lut("sigmoid"), build_lut("tanh")
    assert s.step == 0.0625 and t.step == 0.125
    assert len(s.entries) == len(t.entries) == 2048
    assert s.entries[1024] == 16384 and t.entries[1024] == 0
    for lut in (s, t):
        assert np.all(np.diff(lut.entries) >= 0)
        assert np.abs(lut.entries).max() <= 2**15 - 1
    assert s.entries.min() >= 0 and s.entries.max() < 2**15
    assert t.entries.min() > -(2**15) and t.entries.max() < 2**15
    with pytest.raises(ValidationError):
        build_lut("sigmoid", n_points=1)


def test_lut_eval_points_and_clamp():
    s = build_lut("sigmoid")
    x = quantize_values(s.sample_x(np.arange(0, 2048, 37)), FixedFormat(16, 8))
    np.testing.assert_array_equal(lut_eval(s, x, 8), s.entries[np.arange(0, 2048, 37)])
    big = lut_eval(s, np.array([32767, -32768]), 8)
    assert big.tolist() == [s.entries[-1], s.entries[0]]
    assert s.entries[-1] == 2**15 - 1


def test_lut_error_bound(rng):
    s, t = build_lut("sigmoid"), build_lut("tanh")
    x = rng.uniform(-8, 8, 10_000)
    xq = quantize_values(x, FixedFormat(32, 8)) / 256.0
    # interpolation error step^2/8 * max|f''| plus output rounding (half LSB, twice)
    bound_s = s.step**2 / 8 * 0.0963 + 2.0**-15
    bound_t = t.step**2 / 8 * 0.7699 + 2.0**-15
    sig = 1 / (1 + np.exp(-xq))
    assert np.abs(lut_eval_float(s, x) - sig).max() <= bound_s
    assert np.abs(lut_eval_float(t, x) - np.tanh(xq)).max() <= bound_t


def test_sigmoid_symmetry(rng):
    s = build_lut("sigmoid")
    x = rng.integers(-16384, 16384, 5000)
    total = lut_eval(s, x, 8) + lut_eval(s, -x, 8)
    assert np.abs(total - (1 << 15)).max() <= 2


def test_lut_grid_alignment():
    s = build_lut("sigmoid")
    assert s.grid(8) == (-16384, 16)
    with pytest.raises(ValidationError):
        s.grid(2)


def test_lut_csv():
    import io

    buf = io.StringIO()
    dump_lut_csv(build_lut("tanh"), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "index,x,entry" and len(lines) == 2049
    assert lines[1025] == "1024,0.0,0"


def test_zero_model_step():
    cfg = LayerConfig(3, 4, 2)
    p = zero_params(cfg)
    qp = quantize_params(p, derive_plan(p, 12))
    v = quantized_lstm_gates(qp, default_luts(), np.array([100, -5, 7]), QuantizedState.zeros(cfg))
    for g in "ifo":
        assert (v[g] == 16384).all()
    assert not v["y"].any()


def test_matches_big_integer_oracle(rng):
    """1000 random steps across several toy models, bit for bit."""
    luts = default_luts()
    steps = 0
    for seed in range(10):
        p = synthetic_params(TOY, seed)
        for width in (12, 16):
            qp = quantize_params(p, derive_plan(p, width))
            oracle = FixedOracle({k: v.tolist() for k, v in p.tensors().items()}, width)
            state = QuantizedState.zeros(TOY)
            c, y = [0] * 4, [0] * 2
            for _ in range(50):
                x = quantize_values(rng.normal(0, 3, 3), INPUT_FORMAT)
                y_p, state = quantized_lstm_step(qp, luts, x, state)
                y, c = oracle.step([int(v) for v in x], c, y)
                assert y_p.tolist() == y and state.c.tolist() == c
                steps += 1
    assert steps == 1000


def test_full_size_bounded(rng):
    cfg = LayerConfig()
    p = synthetic_params(cfg, 0)
    qp = quantize_params(p, derive_plan(p, 12))
    luts = default_luts()
    state = QuantizedState.zeros(cfg)
    for _ in range(3):
        y, state = quantized_lstm_step(qp, luts, quantize_values(rng.normal(size=153), INPUT_FORMAT), state)
    assert y.shape == (512,) and np.abs(y).max() <= 2**15


def test_plan_and_file_round_trip(tmp_path, toy_params):
    plan = derive_plan(toy_params, 12)
    assert QuantizationPlan.from_dict(plan.to_dict()) == plan
    d = plan.to_dict()
    assert d["input"] == {"width": 16, "frac": 11} and d["intermediate"] == {"width": 16, "frac": 8}
    assert set(d["tensors"]["W_ix"]) == {"width", "frac", "carries_index"}
    qp = quantize_params(toy_params, plan)
    (back,) = load_quantized(save_quantized(qp, tmp_path / "q.json"))
    assert back.plan == plan
    for k, v in qp.tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v)
    assert LUT_FORMAT == FixedFormat(16, 15)
