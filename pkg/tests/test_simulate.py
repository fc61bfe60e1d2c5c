import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TOY
from esesim.compress import PePartition, prune_magnitude
from esesim.encode import encode_csc
from esesim.errors import ValidationError
from esesim.model import LayerConfig, zero_params
from esesim.quantize import FixedFormat, QuantizedTensor
from esesim.schedule import build_schedule
from esesim.simulate import (
    SimConfig,
    SimReport,
    compute_lower_bound,
    pe_balance_bound,
    simulate_lstm,
    simulate_spmv,
    spmv_makespan,
    throughput_report,
)
from esesim.workloads import DEPLOYED_CONFIG, encode_params, deployed_model
from helpers import balanced_w_ix


@pytest.fixture(scope="module")
def model():
    return deployed_model(0)


def test_8x6_column_times():
    assert spmv_makespan(np.array([[5], [3], [3], [1]]), 1) == 5
    assert spmv_makespan(np.array([[3], [3], [3], [3]]), 1) == 3


def test_perfectly_balanced_full_utilization():
    work = np.full((8, 20), 3)
    for depth in (1, 4, 16):
        assert spmv_makespan(work, depth) == 60
    t = simulate_spmv(balanced_w_ix(), 1)
    assert t.utilization == 1.0 and t.useful_utilization == 1.0


def test_w_ix_lower_bound():
    e = balanced_w_ix()
    t = simulate_spmv(e, 8)
    assert t.cycles == compute_lower_bound(e) == 572
    assert t.cycles / 200e6 * 1e6 == pytest.approx(2.86)


@pytest.mark.parametrize("width,fmem,fpe,want", [(512, 200e6, 200e6, 32), (256, 200e6, 200e6, 16),
                                                 (512, 100e6, 200e6, 16)])
def test_pe_balance_bound(width, fmem, fpe, want):
    assert pe_balance_bound(SimConfig(mem_width_bits=width, freq_mem=fmem, freq_pe=fpe)) == want


def test_gops_identity(model):
    tp = throughput_report(82.7e-6, model)
    assert tp["dense_ops"] == 2 * 3248128 * 32
    assert tp["dense_ops"] / 1e9 == pytest.approx(0.2079, rel=5e-3)
    assert 2510 <= tp["equivalent_gops"] <= 2530
    # the deployed stored word count gives 0.0233 GOP and 282 GOPS
    assert 2 * (728640 // 2) * 32 / 1e9 == pytest.approx(0.0233, abs=1e-4)
    assert 2 * (728640 // 2) * 32 / 82.7e-6 / 1e9 == pytest.approx(282, abs=0.5)


def test_zero_weight_model():
    cfg = LayerConfig(3, 4, 2)
    enc = encode_params(zero_params(cfg), 0.5, n_pe=2)
    empty = {n: encode_csc(QuantizedTensor(np.zeros((e.rows, e.cols), np.int64), e.format),
                           np.zeros((e.rows, e.cols), bool), 2)[0] for n, e in enc.items()}
    sched = build_schedule(cfg)
    r = simulate_lstm(empty, sched, SimConfig(n_pe=2))
    elem_phases = sum(any(op.lane == "elem" for op in ph) for _, _, ph in sched.phases())
    assert elem_phases == 16
    assert r.total_cycles == elem_phases * SimConfig().elem_cycles(4)  # pipeline overheads only
    assert r.utilization == 1.0 and r.throughput["sparse_gops"] == 0


def test_deployed_report(model):
    r = simulate_lstm(model, build_schedule(DEPLOYED_CONFIG))
    assert 0 < r.utilization <= 1
    assert r.latency_s == r.total_cycles / 200e6
    assert sum(r.per_pe_busy) == sum(e.total_words for e in model.values())
    cfg = SimConfig()
    fetch = [cfg.fetch_cycles(e.total_words) for e in model.values()]
    for name, e in model.items():
        assert r.total_cycles >= max(compute_lower_bound(e), cfg.fetch_cycles(e.total_words))
    assert r.total_cycles >= sum(fetch)
    back = SimReport.from_dict(json.loads(json.dumps(r.to_dict())))
    assert back.to_dict() == r.to_dict()


def test_determinism(model):
    s = build_schedule(DEPLOYED_CONFIG)
    a = json.dumps(simulate_lstm(model, s).to_dict(), sort_keys=True)
    b = json.dumps(simulate_lstm(deployed_model(0), s).to_dict(), sort_keys=True)
    assert a == b


def test_latency_monotone_in_memory_width(model):
    s = build_schedule(DEPLOYED_CONFIG)
    lat = [simulate_lstm(model, s, SimConfig(mem_width_bits=w)).total_cycles for w in (64, 128, 256, 512, 1024)]
    assert all(a >= b for a, b in zip(lat, lat[1:]))
    narrow = simulate_lstm(model, s, SimConfig(mem_width_bits=64))
    assert narrow.fetch_bound_states


def test_refetch_per_channel_is_slower(model):
    s = build_schedule(DEPLOYED_CONFIG)
    a = simulate_lstm(model, s).total_cycles
    b = simulate_lstm(model, s, SimConfig(weight_broadcast=False)).total_cycles
    assert b > a


def test_pe_mismatch_rejected(model):
    with pytest.raises(ValidationError):
        simulate_lstm(model, build_schedule(DEPLOYED_CONFIG), SimConfig(n_pe=16))
    with pytest.raises(ValidationError):
        SimConfig(fifo_depth=0)


def test_unbalanced_depth_gain():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(1024, 512))
    q = QuantizedTensor(np.zeros((1024, 512), np.int64), FixedFormat(12, 7))
    e, _ = encode_csc(q, prune_magnitude(m, 0.11), 32)
    u1, u8 = simulate_spmv(e, 1).utilization, simulate_spmv(e, 8).utilization
    assert u1 < u8 and u8 >= 0.9


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 2**32), st.sampled_from(["broadcast", "independent"]))
def test_spmv_properties(n_pe, cols, seed, mode):
    work = np.random.default_rng(seed).integers(0, 6, size=(n_pe, cols))
    spans = [spmv_makespan(work, d, mode) for d in (1, 2, 4, 8, 64)]
    assert all(a >= b for a, b in zip(spans, spans[1:]))
    if work.any():
        assert spans[-1] >= work.sum(axis=1).max()
        assert spans[0] <= work.max(axis=0).sum() + cols
        assert work.sum() / (n_pe * spans[-1]) <= 1
    else:
        assert spans == [0] * 5
