import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TOY
from esesim.container import blob_path, read_manifest
from esesim.errors import ChecksumError, ContainerIOError, NumericError, ShapeError, ValidationError
from esesim.model import (
    Activations,
    LayerConfig,
    LstmParams,
    LstmState,
    lstm_gates,
    lstm_sequence,
    lstm_stack,
    lstm_step,
    load_model,
    save_model,
    synthetic_params,
    zero_params,
)
from oracles import scalar_lstm_step


def _lists(p: LstmParams) -> dict:
    return {k: v.tolist() for k, v in p.tensors().items()}


def test_matches_scalar_loop_oracle(toy_params, rng):
    t = _lists(toy_params)
    state = LstmState.zeros(TOY)
    c_o, y_o = [0.0] * 4, [0.0] * 2
    for _ in range(10):
        x = rng.normal(size=3)
        y, state = lstm_step(toy_params, x, state)
        y_o, c_o = scalar_lstm_step(t, x.tolist(), c_o, y_o)
        np.testing.assert_allclose(y, y_o, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(state.c, c_o, rtol=1e-12, atol=1e-15)


def test_sigmoid_cell_input_switch(toy_params, rng):
    sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
    x = rng.normal(size=3)
    y, st_ = lstm_step(toy_params, x, LstmState.zeros(TOY), Activations(g="sigmoid"))
    y_o, c_o = scalar_lstm_step(_lists(toy_params), x.tolist(), [0.0] * 4, [0.0] * 2, g_fn=sig)
    np.testing.assert_allclose(y, y_o, rtol=1e-12)


def test_zero_model_halves_cell():
    cfg = LayerConfig(5, 6, 4)
    c_prev = np.arange(6, dtype=float) - 2.5
    v = lstm_gates(zero_params(cfg), np.ones(5), LstmState(c_prev, np.ones(4)))
    for g in "ifo":
        assert np.all(v[g] == 0.5)
    assert np.all(v["g"] == 0)
    np.testing.assert_array_equal(v["c"], 0.5 * c_prev)
    np.testing.assert_array_equal(v["y"], np.zeros(4))


def test_full_size_shapes():
    cfg = LayerConfig()
    v = lstm_gates(synthetic_params(cfg, 0), np.zeros(153), LstmState.zeros(cfg))
    for k in "ifgcom":
        assert v[k].shape == (1024,)
    assert v["y"].shape == (512,)


def test_no_projection_no_peephole(rng):
    cfg = LayerConfig(3, 4, 4, has_peephole=False, has_projection=False)
    p = synthetic_params(cfg, 1)
    x = rng.normal(size=3)
    y, s = lstm_step(p, x, LstmState.zeros(cfg))
    y_o, _ = scalar_lstm_step(_lists(p), x.tolist(), [0.0] * 4, [0.0] * 4, peep=False, proj=False)
    np.testing.assert_allclose(y, y_o, rtol=1e-12)


def test_forget_saturated_adds_gated_input(rng):
    p = synthetic_params(TOY, 3)
    p = p.replace(W_fx=np.zeros((4, 3)), W_fr=np.zeros((4, 2)), W_fc=np.zeros(4), b_f=np.full(4, 800.0))
    c_prev = rng.normal(size=4)
    v = lstm_gates(p, rng.normal(size=3), LstmState(c_prev, rng.normal(size=2)))
    assert np.all(v["f"] == 1.0)
    np.testing.assert_array_equal(v["c"], c_prev + v["g"] * v["i"])


def test_sequence_fold(toy_params, rng):
    xs = rng.normal(size=(5, 3))
    assert lstm_sequence(toy_params, []) == []
    out = lstm_sequence(toy_params, xs)
    state = LstmState.zeros(TOY)
    for t, x in enumerate(xs):
        y, state = lstm_step(toy_params, x, state)
        np.testing.assert_array_equal(out[t], y)
    assert len(lstm_stack([toy_params], xs)) == 5


def test_input_errors(toy_params):
    with pytest.raises(ShapeError):
        lstm_step(toy_params, np.zeros(4), LstmState.zeros(TOY))
    with pytest.raises(NumericError):
        lstm_step(toy_params, np.array([0.0, np.nan, 0.0]), LstmState.zeros(TOY))
    with pytest.raises(ShapeError):
        toy_params.replace(W_ix=np.zeros((4, 4)))
    with pytest.raises(ValidationError):
        LayerConfig(3, 4, 8)
    with pytest.raises(ValidationError):
        Activations(g="relu")


def test_save_load_bitwise(tmp_path, toy_params):
    path = save_model([toy_params, synthetic_params(TOY, 8)], tmp_path / "m.json")
    man = read_manifest(path)
    for key in ("layers", "tensors"):
        assert key in man
    entry = man["tensors"]["0/W_ix"]
    assert set(entry) == {"dims", "dtype", "offset", "byte_len", "sha256"}
    a, b = load_model(path)
    for k, v in toy_params.tensors().items():
        assert getattr(a, k).tobytes() == v.tobytes()
    assert a.config == TOY and b.config == TOY


def test_shape_mismatch_in_manifest(tmp_path):
    import json

    cfg = LayerConfig()
    path = save_model(synthetic_params(cfg, 0), tmp_path / "m.json")
    man = json.loads(path.read_text())
    man["tensors"]["0/W_ix"]["dims"] = [1024, 152]
    path.write_text(json.dumps(man))
    with pytest.raises(ShapeError):
        load_model(path)


def test_truncated_blob_names_offset(tmp_path, toy_params):
    path = save_model(toy_params, tmp_path / "m.json")
    blob = blob_path(path)
    data = blob.read_bytes()
    blob.write_bytes(data[:100])
    with pytest.raises(ContainerIOError, match="offset 100"):
        load_model(path)
    blob.unlink()
    with pytest.raises(ContainerIOError):
        load_model(path)


def test_checksum_failure(tmp_path, toy_params):
    path = save_model(toy_params, tmp_path / "m.json")
    blob = blob_path(path)
    data = bytearray(blob.read_bytes())
    data[3] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_model(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.permutations(["i", "f", "c", "o"]))
def test_gate_order_irrelevant(seed, order):
    from esesim.model import sigmoid

    p = synthetic_params(TOY, seed % 1000)
    r = np.random.default_rng(seed)
    x, c0, y0 = r.normal(size=3), r.normal(size=4), r.normal(size=2)
    ref = lstm_gates(p, x, LstmState(c0, y0))
    pre = {}
    for g in order:
        pre[g] = getattr(p, f"W_{g}x") @ x + getattr(p, f"W_{g}r") @ y0 + getattr(p, f"b_{g}")
    c = sigmoid(pre["f"] + p.W_fc * c0) * c0 + np.tanh(pre["c"]) * sigmoid(pre["i"] + p.W_ic * c0)
    m = sigmoid(pre["o"] + p.W_oc * c) * np.tanh(c)
    np.testing.assert_array_equal(ref["c"], c)
    np.testing.assert_array_equal(ref["y"], p.W_ym @ m)
