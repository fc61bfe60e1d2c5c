"""Cycle-approximate timing model of one accelerator channel.

The SpMV unit is modelled column by column. Activation element ``j`` is
pushed into every PE's FIFO once all FIFOs have room, at most one element
per cycle. A PE pops element ``j`` as soon as it has finished column
``j - 1`` and then spends one cycle per stored word (padding included) of
column ``j``. Popping frees the FIFO slot.

The LSTM timestep walks the schedule phase by phase. Sparse weights stream
from one DRAM over a serialized lane. A matrix may be prefetched while the
previous phase computes, up to one ping-pong buffer (``spmat_buffer_words``
per PE). The remainder streams while its SpMV runs. Pointer, bias and
vector fetches use the second DRAM and are assumed hidden.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .encode import EncodedSparseMatrix
from .errors import ValidationError
from .schedule import Schedule, check_schedule

WORD_BITS = 16


@dataclass(frozen=True)
class SimConfig:
    n_channels: int = 32
    n_pe: int = 32
    fifo_depth: int = 8
    freq_pe: float = 200e6
    freq_mem: float = 200e6
    mem_width_bits: int = 512
    elemmul_units: int = 16
    pipeline_latency: int = 16
    spmat_buffer_words: int = 512
    push_mode: str = "broadcast"  # or "independent"
    weight_broadcast: bool = True  # channels share one weight stream

    def __post_init__(self) -> None:
        for name in ("n_channels", "n_pe", "fifo_depth", "mem_width_bits",
                     "elemmul_units", "spmat_buffer_words"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.pipeline_latency < 0:
            raise ValidationError("pipeline_latency must be >= 0")
        if self.freq_pe <= 0 or self.freq_mem <= 0:
            raise ValidationError("frequencies must be positive")
        if self.push_mode not in ("broadcast", "independent"):
            raise ValidationError(f"unknown push_mode {self.push_mode!r}")

    @property
    def words_per_mem_cycle(self) -> float:
        return self.mem_width_bits / WORD_BITS

    def fetch_cycles(self, words: int) -> float:
        """PE cycles needed to stream ``words`` weight words from DRAM."""
        mem_cycles = math.ceil(words / self.words_per_mem_cycle)
        if not self.weight_broadcast:
            mem_cycles *= self.n_channels
        return mem_cycles * self.freq_pe / self.freq_mem

    def elem_cycles(self, vector_len: int) -> int:
        return math.ceil(vector_len / self.elemmul_units) + self.pipeline_latency


def pe_balance_bound(cfg: SimConfig) -> int:
    """Largest PE count per channel whose MAC demand the weight stream can feed."""
    return int(cfg.mem_width_bits * cfg.freq_mem // (WORD_BITS * cfg.freq_pe))


@dataclass
class SpmvTiming:
    cycles: int
    busy: np.ndarray  # per PE, every stored word
    useful: np.ndarray  # per PE, real nonzeros only

    @property
    def n_pe(self) -> int:
        return len(self.busy)

    @property
    def utilization(self) -> float:
        """Busy PE-cycles over available PE-cycles."""
        if self.cycles == 0:
            return 1.0
        return float(self.busy.sum()) / (self.n_pe * self.cycles)

    @property
    def useful_utilization(self) -> float:
        """Like ``utilization`` but padding words do not count as work."""
        if self.cycles == 0:
            return 1.0
        return float(self.useful.sum()) / (self.n_pe * self.cycles)


def spmv_makespan(work: np.ndarray, fifo_depth: int, push_mode: str = "broadcast") -> int:
    """Makespan of a (n_pe, cols) word-count table under the FIFO model."""
    work = np.asarray(work, dtype=np.int64)
    n_pe, cols = work.shape
    if cols == 0 or not work.any():
        return 0
    starts = np.zeros((cols, n_pe), dtype=np.int64)
    finish = np.zeros(n_pe, dtype=np.int64)
    if push_mode == "broadcast":
        push = -1
        for j in range(cols):
            push += 1
            if j >= fifo_depth:
                push = max(push, int(starts[j - fifo_depth].max()))
            s = np.maximum(push, finish)
            starts[j] = s
            finish = s + work[:, j]
    else:
        push = np.full(n_pe, -1, dtype=np.int64)
        for j in range(cols):
            push = push + 1
            if j >= fifo_depth:
                push = np.maximum(push, starts[j - fifo_depth])
            s = np.maximum(push, finish)
            starts[j] = s
            finish = s + work[:, j]
    return int(finish.max())


def simulate_spmv(e: EncodedSparseMatrix, fifo_depth: int = 8,
                  push_mode: str = "broadcast") -> SpmvTiming:
    if fifo_depth < 1:
        raise ValidationError("fifo_depth must be >= 1")
    work = e.word_counts()
    cycles = spmv_makespan(work, fifo_depth, push_mode)
    return SpmvTiming(cycles, work.sum(axis=1), e.real_counts.sum(axis=1))


def compute_lower_bound(e: EncodedSparseMatrix) -> int:
    """Cycles if every PE did an equal share of the words with no stalls."""
    return math.ceil(e.total_words / e.n_pe)


@dataclass
class PhaseRecord:
    state: str
    phase: int
    start: float
    duration: float
    spmv: str = ""
    spmv_cycles: int = 0
    elem_cycles: int = 0
    residual_fetch: float = 0.0
    fetch_bound: bool = False


@dataclass
class SimReport:
    config: dict
    total_cycles: float
    latency_s: float
    matrices: dict[str, dict]
    phases: list[PhaseRecord]
    per_pe_busy: list[int]
    utilization: float
    spmv_utilization: float
    fetch_bound_states: list[str] = field(default_factory=list)
    throughput: dict = field(default_factory=dict)

    def state_durations(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for p in self.phases:
            out[p.state] = out.get(p.state, 0.0) + p.duration
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["state_durations"] = self.state_durations()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        try:
            return cls(
                config=dict(d["config"]),
                total_cycles=float(d["total_cycles"]),
                latency_s=float(d["latency_s"]),
                matrices=dict(d["matrices"]),
                phases=[PhaseRecord(**p) for p in d["phases"]],
                per_pe_busy=[int(b) for b in d["per_pe_busy"]],
                utilization=float(d["utilization"]),
                spmv_utilization=float(d["spmv_utilization"]),
                fetch_bound_states=list(d.get("fetch_bound_states", [])),
                throughput=dict(d.get("throughput", {})),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed simulation report: {exc}") from exc


def simulate_lstm(
    matrices: dict[str, EncodedSparseMatrix],
    sched: Schedule,
    cfg: SimConfig = SimConfig(),
) -> SimReport:
    """Latency of one LSTM timestep on one channel (all channels run in lockstep)."""
    check_schedule(sched)
    hidden = sched.config.hidden_dim
    timings: dict[str, SpmvTiming] = {}
    for name, e in matrices.items():
        if e.n_pe != cfg.n_pe:
            raise ValidationError(f"{name} is encoded for {e.n_pe} PEs, config has {cfg.n_pe}")
        timings[name] = simulate_spmv(e, cfg.fifo_depth, cfg.push_mode)

    cap_words = cfg.spmat_buffer_words * cfg.n_pe
    fetch_total: dict[str, float] = {}
    fetch_start: dict[str, float] = {}
    lane_free = 0.0
    now = 0.0
    phases: list[PhaseRecord] = []

    def missing(name: str) -> ValidationError:
        return ValidationError(f"schedule uses {name} but no encoded matrix was given")

    for st, k, ops in sched.phases():
        rec = PhaseRecord(st, k, now, 0.0)
        candidates = [0.0]
        for op in ops:
            if op.kind == "SpMV":
                w = op.operands[0]
                if w not in timings:
                    raise missing(w)
                rec.spmv = w
                rec.spmv_cycles = timings[w].cycles
                candidates.append(rec.spmv_cycles)
                if w in fetch_total:
                    # prefetch before this phase is capped by one ping-pong buffer;
                    # the rest streams while the SpMV runs
                    start = fetch_start[w]
                    cap = cfg.fetch_cycles(min(matrices[w].total_words, cap_words))
                    done_before = min(max(0.0, now - start), cap)
                    resume = max(now, start)
                    rec.residual_fetch = resume - now + fetch_total[w] - done_before
                    lane_free = now + rec.residual_fetch
                    candidates.append(rec.residual_fetch)
            elif op.lane == "elem":
                rec.elem_cycles = cfg.elem_cycles(hidden)
                candidates.append(rec.elem_cycles)
        for op in ops:
            if op.lane == "weight_fetch":
                w = op.produces[0]
                if w not in matrices:
                    raise missing(w)
                fetch_total[w] = cfg.fetch_cycles(matrices[w].total_words)
                fetch_start[w] = max(now, lane_free)
                lane_free = fetch_start[w] + fetch_total[w]
                if not any(o.lane in ("spmv", "elem") for o in ops):
                    # fetch-only phase: wait until the first buffer is full
                    cap = cfg.fetch_cycles(min(matrices[w].total_words, cap_words))
                    candidates.append(fetch_start[w] - now + cap)
        rec.duration = max(candidates)
        rec.fetch_bound = rec.residual_fetch > max(rec.spmv_cycles, rec.elem_cycles)
        phases.append(rec)
        now += rec.duration

    busy = np.zeros(cfg.n_pe, dtype=np.int64)
    spmv_cycles = 0
    used = {op.operands[0] for op in sched.ops() if op.kind == "SpMV"}
    per_matrix = {}
    for name, t in timings.items():
        e = matrices[name]
        if name in used:
            busy += t.busy
            spmv_cycles += t.cycles
        per_matrix[name] = {
            "shape": [e.rows, e.cols],
            "words": e.total_words,
            "real_nnz": e.real_nnz,
            "compute_cycles": t.cycles,
            "lower_bound_cycles": compute_lower_bound(e),
            "fetch_cycles": cfg.fetch_cycles(e.total_words),
            "utilization": t.utilization,
            "useful_utilization": t.useful_utilization,
            "compute_time_s": t.cycles / cfg.freq_pe,
        }

    total = now
    report = SimReport(
        config=asdict(cfg),
        total_cycles=total,
        latency_s=total / cfg.freq_pe,
        matrices=per_matrix,
        phases=phases,
        per_pe_busy=[int(b) for b in busy],
        # no SpMV work at all counts as fully utilized, like an empty SpmvTiming
        utilization=float(busy.sum()) / (cfg.n_pe * total) if busy.any() else 1.0,
        spmv_utilization=float(busy.sum()) / (cfg.n_pe * spmv_cycles) if spmv_cycles else 1.0,
        fetch_bound_states=sorted({p.state for p in phases if p.fetch_bound}),
    )
    report.throughput = throughput_report(report.latency_s, matrices, cfg)
    return report


def throughput_report(latency_s: float, matrices: dict[str, EncodedSparseMatrix],
                      cfg: SimConfig = SimConfig()) -> dict:
    """Operation counts and GOPS for one timestep across all channels.

    A stored word is one multiply-accumulate (2 ops), padding included;
    ``useful_ops`` excludes padding. Dense-equivalent counts every matrix
    element.
    """
    words = sum(e.total_words for e in matrices.values())
    real = sum(e.real_nnz for e in matrices.values())
    dense = sum(e.rows * e.cols for e in matrices.values())
    sparse_ops = 2 * words * cfg.n_channels
    useful_ops = 2 * real * cfg.n_channels
    dense_ops = 2 * dense * cfg.n_channels
    gops = (lambda ops: ops / latency_s / 1e9) if latency_s > 0 else (lambda ops: 0.0)
    return {
        "latency_s": latency_s,
        "sparse_ops": sparse_ops,
        "useful_ops": useful_ops,
        "dense_ops": dense_ops,
        "sparse_gops": gops(sparse_ops),
        "useful_gops": gops(useful_ops),
        "equivalent_gops": gops(dense_ops),
    }
