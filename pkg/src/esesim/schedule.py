"""LSTM dataflow schedule for one timestep on one accelerator channel.

A schedule is a sequence of states; each state is a sequence of phases;
each phase assigns at most one operation to each of four lanes:

``weight_fetch``
    sparse weight streams from the weight DRAM (strictly serialized)
``aux_fetch``
    pointers, bias and peephole vectors from the second DRAM
``spmv``
    the sparse matrix-vector unit
``elem``
    element-wise multipliers, adder tree and sigmoid/tanh units

Phases run one after another, lanes inside a phase run concurrently, so an
operation may only consume values produced in an earlier phase.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ScheduleError, ValidationError
from .model import Activations, LayerConfig, PROJECTION
from . import quantize as qz

LANES = ("weight_fetch", "aux_fetch", "spmv", "elem")
KINDS = ("Fetch", "SpMV", "ElemMul", "AdderTree", "Activation")
LANE_KINDS = {
    "weight_fetch": {"Fetch"},
    "aux_fetch": {"Fetch"},
    "spmv": {"SpMV"},
    "elem": {"ElemMul", "AdderTree", "Activation"},
}
INPUTS = ("x_t", "y_prev", "c_prev")


@dataclass(frozen=True)
class LstmOp:
    kind: str
    lane: str
    operands: tuple[str, ...]
    produces: tuple[str, ...]
    fn: str = ""  # activation function for Activation ops

    @property
    def label(self) -> str:
        if self.kind == "Fetch":
            return "fetch " + ",".join(self.produces)
        if self.kind == "Activation":
            return f"{self.fn}({self.operands[0]})"
        sym = {"SpMV": "·", "ElemMul": "⊙", "AdderTree": "+"}[self.kind]
        return f"{self.produces[0]} = {sym.join(self.operands)}"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lane": self.lane,
             "operands": list(self.operands), "produces": list(self.produces)}
        if self.fn:
            d["fn"] = self.fn
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LstmOp":
        return cls(d["kind"], d["lane"], tuple(d["operands"]), tuple(d["produces"]), d.get("fn", ""))


@dataclass(frozen=True)
class State:
    name: str
    phases: tuple[tuple[LstmOp, ...], ...]


@dataclass(frozen=True)
class Schedule:
    config: LayerConfig
    states: tuple[State, ...]
    outputs: tuple[str, ...] = ("y_t", "c_t")
    activations: Activations = field(default_factory=Activations)

    def phases(self) -> Iterator[tuple[str, int, tuple[LstmOp, ...]]]:
        for st in self.states:
            for k, ph in enumerate(st.phases):
                yield st.name, k, ph

    def ops(self) -> list[LstmOp]:
        return [op for _, _, ph in self.phases() for op in ph]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "activations": {"g": self.activations.g, "h": self.activations.h},
            "outputs": list(self.outputs),
            "states": [
                {"name": st.name, "phases": [[op.to_dict() for op in ph] for ph in st.phases]}
                for st in self.states
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        try:
            states = tuple(
                State(s["name"], tuple(tuple(LstmOp.from_dict(o) for o in ph) for ph in s["phases"]))
                for s in d["states"]
            )
            acts = Activations(**d.get("activations", {}))
            return cls(LayerConfig.from_dict(d["config"]), states, tuple(d["outputs"]), acts)
        except (KeyError, TypeError, IndexError) as exc:
            raise ScheduleError(f"malformed schedule document: {exc!r}") from exc


class _Builder:
    def __init__(self) -> None:
        self.states: list[State] = []
        self._phases: list[tuple[LstmOp, ...]] = []
        self._name = ""

    def state(self, name: str) -> None:
        self._flush()
        self._name = name

    def phase(self, *ops: LstmOp | None) -> None:
        self._phases.append(tuple(op for op in ops if op is not None))

    def _flush(self) -> None:
        if self._name:
            self.states.append(State(self._name, tuple(self._phases)))
        self._phases = []

    def build(self) -> tuple[State, ...]:
        self._flush()
        return tuple(self.states)


def _wfetch(name: str) -> LstmOp:
    return LstmOp("Fetch", "weight_fetch", (), (name,))


def _afetch(*names: str) -> LstmOp | None:
    names = tuple(n for n in names if n)
    return LstmOp("Fetch", "aux_fetch", (), names) if names else None


def _spmv(w: str, v: str, out: str) -> LstmOp:
    return LstmOp("SpMV", "spmv", (w, "P" + w[1:], v), (out,))


def _elem(a: str, b: str, out: str) -> LstmOp:
    return LstmOp("ElemMul", "elem", (a, b), (out,))


def _add(out: str, *terms: str) -> LstmOp:
    return LstmOp("AdderTree", "elem", tuple(t for t in terms if t), (out,))


def _act(fn: str, src: str, out: str) -> LstmOp:
    return LstmOp("Activation", "elem", (src,), (out,), fn)


def build_schedule(config: LayerConfig, acts: Activations = Activations()) -> Schedule:
    """Canonical INITIAL + STATE_1..STATE_6 schedule for one timestep.

    Weight fetches run one phase ahead of the SpMV that consumes them, the
    input and recurrent products of each gate alternate on the SpMV unit, and
    each gate's adder tree and activation overlap the next gate's products.
    """
    peep = config.has_peephole
    pc = lambda name: name if peep else ""  # noqa: E731
    b = _Builder()

    b.state("INITIAL")
    b.phase(_wfetch("W_ix"), _afetch("P_ix", "P_ir", "b_i", pc("W_ic")))

    b.state("STATE_1")
    b.phase(_spmv("W_ix", "x_t", "ix"), _wfetch("W_ir"), _afetch("P_fx", "P_fr", "b_f", pc("W_fc")))

    b.state("STATE_2")
    b.phase(_spmv("W_ir", "y_prev", "ir"), _wfetch("W_fx"),
            _elem("W_ic", "c_prev", "icc") if peep else None)
    b.phase(_spmv("W_fx", "x_t", "fx"), _wfetch("W_fr"), _afetch("P_cx", "P_cr", "b_c"),
            _add("i_pre", "ix", "ir", pc("icc"), "b_i"))

    b.state("STATE_3")
    b.phase(_spmv("W_fr", "y_prev", "fr"), _wfetch("W_cx"), _act("sigmoid", "i_pre", "i_t"))
    b.phase(_spmv("W_cx", "x_t", "cx"), _wfetch("W_cr"), _afetch("P_ox", "P_or", "b_o", pc("W_oc")),
            _elem("W_fc", "c_prev", "fcc") if peep else None)

    b.state("STATE_4")
    b.phase(_spmv("W_cr", "y_prev", "cr"), _wfetch("W_ox"),
            _add("f_pre", "fx", "fr", pc("fcc"), "b_f"))
    b.phase(_spmv("W_ox", "x_t", "ox"), _wfetch("W_or"),
            _afetch("P_ym") if config.has_projection else None,
            _act("sigmoid", "f_pre", "f_t"))
    b.phase(_spmv("W_or", "y_prev", "or"),
            _wfetch(PROJECTION) if config.has_projection else None,
            _add("g_pre", "cx", "cr", "b_c"))

    b.state("STATE_5")
    b.phase(_act(acts.g, "g_pre", "g_t"))
    b.phase(_elem("f_t", "c_prev", "fc"))
    b.phase(_elem("i_t", "g_t", "ig"))
    b.phase(_add("c_t", "fc", "ig"))
    if peep:
        b.phase(_elem("W_oc", "c_t", "occ"))
    b.phase(_add("o_pre", "ox", "or", pc("occ"), "b_o"))
    b.phase(_act("sigmoid", "o_pre", "o_t"))
    b.phase(_act(acts.h, "c_t", "h_t"))

    b.state("STATE_6")
    if config.has_projection:
        b.phase(_elem("o_t", "h_t", "m_t"))
        b.phase(_spmv(PROJECTION, "m_t", "y_t"))
    else:
        b.phase(_elem("o_t", "h_t", "y_t"))
    return Schedule(config, b.build(), ("y_t", "c_t"), acts)


def validate_schedule(s: Schedule) -> list[str]:
    """Return every rule violation found; an empty list means the schedule is valid."""
    problems: list[str] = []
    produced_at: dict[str, int] = {}
    ops_by_phase = list(s.phases())
    for k, (_, _, ph) in enumerate(ops_by_phase):
        for op in ph:
            for name in op.produces:
                if name in produced_at:
                    problems.append(f"value {name!r} has more than one producer")
                produced_at.setdefault(name, k)

    for k, (st, pk, ph) in enumerate(ops_by_phase):
        where = f"{st} phase {pk}"
        lanes = Counter(op.lane for op in ph)
        for lane, n in lanes.items():
            if n > 1:
                problems.append(f"resource: {where} puts {n} ops on lane {lane!r}")
        for kind in ("SpMV", "ElemMul"):
            n = sum(op.kind == kind for op in ph)
            if n > 1:
                problems.append(f"resource: {where} issues {n} {kind} ops in one phase")
        for op in ph:
            if op.kind not in KINDS:
                problems.append(f"{where}: unknown op kind {op.kind!r}")
                continue
            if op.lane not in LANE_KINDS:
                problems.append(f"{where}: unknown lane {op.lane!r}")
            elif op.kind not in LANE_KINDS[op.lane]:
                problems.append(f"resource: {where} runs {op.kind} on lane {op.lane!r}")
            if op.kind == "Fetch" and op.lane != "weight_fetch" and any(
                n.startswith("W_") and n[3:] in ("x", "r", "m") for n in op.produces
            ):
                problems.append(f"fetch: {where} fetches weight matrix off the weight lane")
            if op.kind == "SpMV" and len(op.operands) != 3:
                problems.append(f"arity: {where} SpMV needs matrix, pointers and vector")
            if op.kind == "ElemMul" and len(op.operands) != 2:
                problems.append(f"arity: {where} ElemMul needs two vectors")
            for name in op.operands:
                if name in INPUTS:
                    continue
                if name not in produced_at:
                    problems.append(f"undefined: {where} reads {name!r}, which nothing produces")
                elif produced_at[name] >= k:
                    problems.append(
                        f"dependency: {where} reads {name!r} before the phase that produces it"
                    )
    for name in s.outputs:
        if name not in produced_at:
            problems.append(f"undefined: output {name!r} is never produced")
    return problems


def check_schedule(s: Schedule) -> Schedule:
    problems = validate_schedule(s)
    if problems:
        raise ScheduleError("invalid schedule:\n  " + "\n  ".join(problems))
    return s


def schedule_to_dot(s: Schedule | None) -> str:
    lines = ["digraph schedule {", "  rankdir=LR;", "  node [shape=box, fontsize=10];"]
    if s is not None:
        producer: dict[str, str] = {}
        ids: list[tuple[str, LstmOp]] = []
        n = 0
        for st, pk, ph in s.phases():
            for op in ph:
                nid = f"op{n}"
                n += 1
                ids.append((nid, op))
                label = f"{st}.{pk}\\n{op.label}".replace('"', "'")
                lines.append(f'  {nid} [label="{label}", group="{op.lane}"];')
                for name in op.produces:
                    producer[name] = nid
        for nid, op in ids:
            for name in op.operands:
                if name in producer:
                    lines.append(f'  {producer[name]} -> {nid} [label="{name}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_schedule(s: Schedule, path: str | Path) -> None:
    Path(path).write_text(json.dumps(s.to_dict(), indent=2, ensure_ascii=False) + "\n")


def load_schedule(path: str | Path) -> Schedule:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScheduleError(f"{path}: invalid JSON ({exc})") from exc
    return Schedule.from_dict(d)


def run_schedule(
    s: Schedule,
    qp: qz.QuantizedParams,
    luts: dict[str, qz.ActLut],
    x_t,
    state: qz.QuantizedState,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, qz.QuantizedState]:
    """Execute a schedule on the fixed-point datapath.

    With ``rng`` the operations inside each phase run in a random order,
    which must never change the result of a valid schedule.
    """
    check_schedule(s)
    fin = qp.plan.input_format.frac
    mid = qp.plan.intermediate_format.frac
    # fraction bits of every value on the datapath
    env: dict[str, np.ndarray] = {
        "x_t": np.asarray(x_t, np.int64),
        "y_prev": np.asarray(state.y, np.int64),
        "c_prev": np.asarray(state.c, np.int64),
    }
    frac: dict[str, int] = {"x_t": fin, "y_prev": fin, "c_prev": mid}

    for _, _, ph in s.phases():
        ops = list(ph)
        if rng is not None:
            ops = [ops[k] for k in rng.permutation(len(ops))]
        for op in ops:
            out = op.produces[0]
            if op.kind == "Fetch":
                continue
            if op.kind == "SpMV":
                w, _, v = op.operands
                out_frac = fin if out == "y_t" else mid
                env[out] = qz.q_spmv(qp, w, env[v], frac[v], out_frac)
                frac[out] = out_frac
            elif op.kind == "ElemMul":
                a, b = op.operands
                if a in qp.tensors:  # peephole
                    env[out] = qz.q_peephole(qp, a, env[b])
                    frac[out] = mid
                else:
                    out_frac = qz.Q15 if out in ("m_t", "y_t") else mid
                    env[out] = qz.q_mul(env[a], frac[a], env[b], frac[b], out_frac)
                    frac[out] = out_frac
            elif op.kind == "AdderTree":
                terms = [qz.q_bias(qp, t) if t in qp.tensors else env[t] for t in op.operands]
                env[out] = qz.q_adder(*terms)
                frac[out] = mid
            elif op.kind == "Activation":
                src = op.operands[0]
                env[out] = qz.q_act(luts, op.fn, env[src], frac[src])
                frac[out] = qz.Q15
    y = env["y_t"]
    if not s.config.has_projection:
        y = qz.rescale(y, qz.Q15, fin)
    return y, qz.QuantizedState(c=env["c_t"], y=y)
