"""Reference numbers for the deployed LSTM and synthetic stand-ins for it.

``DEPLOYED`` lists, per weight matrix of the 1024-cell / 512-projection layer
that ran on the FPGA, its shape, stored density (padding included),
compressed bytes and the theoretical and measured compute times in µs.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .compress import PePartition, prune_load_balanced, prune_magnitude
from .encode import EncodedSparseMatrix, encode_csc
from .model import SPARSE_MATRICES, LayerConfig, LstmParams, synthetic_params
from .quantize import derive_plan, quantize_tensor
from .schedule import build_schedule
from .simulate import SimConfig, simulate_lstm

DEPLOYED_CONFIG = LayerConfig(input_dim=153, hidden_dim=1024, proj_dim=512)

# name: (rows, cols, stored density %, compressed bytes, theoretical µs, real µs)
DEPLOYED = {
    "W_ix": (1024, 153, 11.7, 36608, 2.9, 5.36),
    "W_fx": (1024, 153, 11.7, 36544, 2.9, 5.36),
    "W_cx": (1024, 153, 11.8, 37120, 2.9, 5.36),
    "W_ox": (1024, 153, 11.5, 35968, 2.8, 5.36),
    "W_ir": (1024, 512, 11.3, 118720, 9.3, 10.31),
    "W_fr": (1024, 512, 11.5, 120832, 9.4, 10.01),
    "W_cr": (1024, 512, 11.2, 117760, 9.2, 9.89),
    "W_or": (1024, 512, 11.5, 120256, 9.4, 10.04),
    "W_ym": (512, 1024, 10.0, 104832, 8.2, 15.66),
}
DEPLOYED_TOTAL_ELEMENTS = 3248128
DEPLOYED_TOTAL_BYTES = 728640
DEPLOYED_LATENCY_US = 82.7
DEPLOYED_SPARSE_GOPS = 282.2
DEPLOYED_EQUIVALENT_GOPS = 2515.7


def prune_matrix(m: np.ndarray, density: float, n_pe: int, balanced: bool):
    if balanced:
        return prune_load_balanced(m, density, PePartition(n_pe))
    return prune_magnitude(m, density)


def encode_params(
    params: LstmParams,
    density: float,
    n_pe: int = 32,
    balanced: bool = True,
    width: int = 16,
) -> dict[str, EncodedSparseMatrix]:
    """Prune, quantize and encode every sparse matrix of ``params``."""
    plan = derive_plan(params, width)
    tensors = params.tensors()
    out = {}
    for name in SPARSE_MATRICES:
        if name not in tensors:
            continue
        m = tensors[name]
        mask = prune_matrix(m, density, n_pe, balanced)
        out[name], _ = encode_csc(quantize_tensor(m, plan.format_of(name)), mask, n_pe)
    return out


def deployed_model(seed: int = 0, density: float = 0.1, n_pe: int = 32,
                   balanced: bool = True) -> dict[str, EncodedSparseMatrix]:
    return encode_params(synthetic_params(DEPLOYED_CONFIG, seed), density, n_pe, balanced)


@dataclass
class SweepPoint:
    density: float
    balanced_cycles: float
    unbalanced_cycles: float
    balanced_speedup: float = 1.0
    unbalanced_speedup: float = 1.0


def _sweep_point(args) -> tuple[float, float, float]:
    config, params, density, cfg = args
    sched = build_schedule(config)
    lat = []
    for balanced in (True, False):
        enc = encode_params(params, density, cfg.n_pe, balanced)
        lat.append(simulate_lstm(enc, sched, cfg).total_cycles)
    return density, lat[0], lat[1]


def sparsity_sweep(
    densities,
    config: LayerConfig = DEPLOYED_CONFIG,
    cfg: SimConfig = SimConfig(),
    seed: int = 0,
    jobs: int = 1,
) -> list[SweepPoint]:
    """Latency of load-balanced and plain magnitude masks relative to the dense model."""
    densities = [float(d) for d in densities]
    for d in densities:
        if not 0.0 < d <= 1.0:
            raise ValueError(f"density must lie in (0, 1], got {d}")
    params = synthetic_params(config, seed)
    points = sorted(set(densities) | {1.0}, reverse=True)
    work = [(config, params, d, cfg) for d in points]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, work))
    else:
        rows = [_sweep_point(w) for w in work]
    by_density = {d: (b, u) for d, b, u in rows}
    dense = by_density[1.0][0]
    out = []
    for d in densities:
        b, u = by_density[d]
        out.append(SweepPoint(d, b, u, dense / b, dense / u))
    return out


def fifo_sweep(
    depths,
    seeds=range(10),
    density: float = 0.11,
    balanced: bool = False,
    n_pe: int = 32,
    push_mode: str = "broadcast",
) -> dict[int, list[float]]:
    """Aggregate SpMV utilization of the deployed matrix set per FIFO depth, one value per seed."""
    from .simulate import simulate_spmv

    out: dict[int, list[float]] = {int(d): [] for d in depths}
    for seed in seeds:
        model = deployed_model(seed, density, n_pe, balanced)
        for d in out:
            busy = slots = 0
            for e in model.values():
                t = simulate_spmv(e, d, push_mode)
                busy += int(t.busy.sum())
                slots += t.n_pe * t.cycles
            out[d].append(busy / slots if slots else 1.0)
    return out
