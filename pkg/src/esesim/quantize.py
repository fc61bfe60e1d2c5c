"""Dynamic-precision fixed-point quantization and the integer LSTM datapath.

Every tensor gets its own ``FixedFormat`` chosen from its value range.
Sparse gate and projection matrices share each 16-bit storage word with a
4-bit relative row index, so they lose four fraction bits relative to the
dense parameters (biases and peepholes) of the same width.

All arithmetic here is integer arithmetic on int64 numpy arrays and is
bit-reproducible. Rounding is half away from zero and every narrowing step
saturates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import IO

import numpy as np

from .errors import FormatOverflowError, NumericError, ShapeError, ValidationError
from .model import (
    BIASES,
    INPUT_MATRICES,
    PEEPHOLES,
    PROJECTION,
    RECURRENT_MATRICES,
    Activations,
    LayerConfig,
    LstmParams,
)

INDEX_BITS = 4
ACC_BITS = 32
Q15 = 15


@dataclass(frozen=True)
class FixedFormat:
    width: int
    frac: int

    def __post_init__(self) -> None:
        if not 1 <= self.width <= 32:
            raise ValidationError(f"width must be in [1, 32], got {self.width}")
        if not 0 <= self.frac <= self.width - 1:
            raise ValidationError(f"frac must be in [0, {self.width - 1}], got {self.frac}")

    @property
    def int_bits(self) -> int:
        """Integer bits including the sign bit."""
        return self.width - self.frac

    @property
    def min_int(self) -> int:
        return -(1 << (self.width - 1))

    @property
    def max_int(self) -> int:
        return (1 << (self.width - 1)) - 1

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac

    @property
    def range(self) -> tuple[float, float]:
        return self.min_int * self.lsb, self.max_int * self.lsb

    def __str__(self) -> str:
        return f"Q{self.int_bits}.{self.frac}"


INPUT_FORMAT = FixedFormat(16, 11)
INTERMEDIATE_FORMAT = FixedFormat(16, 8)
LUT_FORMAT = FixedFormat(16, Q15)


@dataclass
class QuantizedTensor:
    values: np.ndarray  # int64
    format: FixedFormat

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.format.lsb


# -- integer helpers --------------------------------------------------------


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def saturate(v, width: int) -> np.ndarray:
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    return np.clip(np.asarray(v, dtype=np.int64), lo, hi)


def shift_round(v, shift: int) -> np.ndarray:
    """Divide by ``2**shift`` rounding half away from zero (negative shift multiplies)."""
    v = np.asarray(v, dtype=np.int64)
    if shift <= 0:
        return v << -shift
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(v) + half) >> shift
    return np.where(v < 0, -mag, mag)


def rescale(v, from_frac: int, to_frac: int, width: int = 16) -> np.ndarray:
    return saturate(shift_round(v, from_frac - to_frac), width)


# -- formats ----------------------------------------------------------------


def analyze_range(m) -> tuple[float, float]:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValidationError("cannot analyze the range of an empty tensor")
    return float(m.min()), float(m.max())


def integer_bits(max_abs: float) -> int:
    """Sign-inclusive integer bits needed for ``max_abs``."""
    return 1 + max(0, math.ceil(math.log2(max_abs)))


def derive_format(max_abs: float, width: int, carries_index: bool) -> FixedFormat:
    """Pick the fraction length for a tensor whose largest magnitude is ``max_abs``.

    >>> derive_format(5.7196, 12, carries_index=True)
    FixedFormat(width=8, frac=4)
    >>> derive_format(0.9584, 12, carries_index=False)
    FixedFormat(width=12, frac=11)
    """
    if not max_abs > 0:
        raise ValidationError(f"max_abs must be positive, got {max_abs}")
    ibits = integer_bits(max_abs)
    frac = width - ibits - (INDEX_BITS if carries_index else 0)
    if frac < 0:
        raise FormatOverflowError(
            f"{ibits} integer bits"
            + (f" plus a {INDEX_BITS}-bit index" if carries_index else "")
            + f" do not fit in {width} bits"
        )
    stored = width - INDEX_BITS if carries_index else width
    return FixedFormat(stored, frac)


def quantize_values(m, fmt: FixedFormat) -> np.ndarray:
    scaled = np.asarray(m, dtype=np.float64) * (2.0 ** fmt.frac)
    return saturate(round_half_away(scaled), fmt.width)


def quantize_tensor(m, fmt: FixedFormat) -> QuantizedTensor:
    return QuantizedTensor(quantize_values(m, fmt), fmt)


# -- activation lookup tables ----------------------------------------------

LUT_RANGES = {"sigmoid": (-64.0, 64.0), "tanh": (-128.0, 128.0)}
LUT_POINTS = 2048


def _exact_fn(tag: str):
    if tag == "sigmoid":
        return lambda x: 0.5 * (1.0 + math.tanh(0.5 * x))
    if tag == "tanh":
        return math.tanh
    raise ValidationError(f"no lookup table for {tag!r}")


@dataclass(frozen=True)
class ActLut:
    tag: str
    sample_min: float
    sample_max: float
    n_points: int
    entries: np.ndarray = field(repr=False)

    @property
    def step(self) -> float:
        return (self.sample_max - self.sample_min) / self.n_points

    def sample_x(self, k) -> np.ndarray:
        return self.sample_min + np.asarray(k) * self.step

    def grid(self, frac: int) -> tuple[int, int]:
        """Table origin and step as integers in an input format with ``frac`` bits."""
        origin = Fraction(self.sample_min) * (1 << frac)
        step = (Fraction(self.sample_max) - Fraction(self.sample_min)) / self.n_points * (1 << frac)
        if origin.denominator != 1 or step.denominator != 1:
            raise ValidationError(
                f"{self.tag} table grid is not aligned with a {frac}-bit fraction input"
            )
        return int(origin), int(step)


def build_lut(tag: str, sample_range: tuple[float, float] | None = None,
              n_points: int = LUT_POINTS) -> ActLut:
    if n_points < 2:
        raise ValidationError("a lookup table needs at least 2 points")
    lo, hi = sample_range if sample_range is not None else LUT_RANGES[tag]
    if not hi > lo:
        raise ValidationError(f"empty sampling range [{lo}, {hi}]")
    fn = _exact_fn(tag)
    step = (hi - lo) / n_points
    xs = [lo + k * step for k in range(n_points)]
    # symmetric clamp so tanh(-128) maps to -(1 - 2^-15), mirroring +1
    entries = np.clip(quantize_values([fn(x) for x in xs], LUT_FORMAT), -LUT_FORMAT.max_int, LUT_FORMAT.max_int)
    return ActLut(tag, float(lo), float(hi), n_points, entries)


def default_luts() -> dict[str, ActLut]:
    return {tag: build_lut(tag) for tag in LUT_RANGES}


def lut_eval(lut: ActLut, x, frac: int) -> np.ndarray:
    """Interpolated table lookup of fixed-point ``x`` (``frac`` fraction bits) -> Q1.15."""
    x = np.asarray(x, dtype=np.int64)
    origin, step = lut.grid(frac)
    offset = x - origin
    idx = offset // step
    rem = offset - idx * step
    e = lut.entries
    last = lut.n_points - 1
    inside = (idx >= 0) & (idx < last)
    k = np.clip(idx, 0, last - 1)
    lo, hi = e[k], e[k + 1]
    # entry + (next - entry) * rem / step, rounded half away from zero
    num = lo * step + (hi - lo) * rem
    mag = (np.abs(num) * 2 + step) // (2 * step)
    interp = np.where(num < 0, -mag, mag)
    out = np.where(inside, interp, np.where(idx < 0, e[0], e[last]))
    return saturate(out, LUT_FORMAT.width)


def lut_eval_float(lut: ActLut, x, frac: int = INTERMEDIATE_FORMAT.frac) -> np.ndarray:
    """Quantize real ``x`` to ``frac`` bits, look it up, return real outputs."""
    q = quantize_values(x, FixedFormat(32, frac))
    return lut_eval(lut, q, frac).astype(np.float64) * LUT_FORMAT.lsb


def dump_lut_csv(lut: ActLut, out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["index", "x", "entry"])
    for k, entry in enumerate(lut.entries):
        w.writerow([k, repr(float(lut.sample_x(k))), int(entry)])


# -- quantization plan ------------------------------------------------------

# Kaldi stores the four gate matrices of a kind together, so they share one format.
FORMAT_GROUPS: dict[str, tuple[tuple[str, ...], bool]] = {
    "W_gifo_x": (INPUT_MATRICES, True),
    "W_gifo_r": (RECURRENT_MATRICES, True),
    "bias": (BIASES, False),
    "W_ic": (("W_ic",), False),
    "W_fc": (("W_fc",), False),
    "W_oc": (("W_oc",), False),
    "W_ym": ((PROJECTION,), True),
}


@dataclass(frozen=True)
class TensorFormat:
    format: FixedFormat
    carries_index: bool


@dataclass
class QuantizationPlan:
    tensors: dict[str, TensorFormat]
    input_format: FixedFormat = INPUT_FORMAT
    intermediate_format: FixedFormat = INTERMEDIATE_FORMAT

    def format_of(self, name: str) -> FixedFormat:
        try:
            return self.tensors[name].format
        except KeyError:
            raise ValidationError(f"quantization plan has no format for {name!r}") from None

    def to_dict(self) -> dict:
        def fmt(f: FixedFormat) -> dict:
            return {"width": f.width, "frac": f.frac}

        return {
            "tensors": {
                n: {**fmt(t.format), "carries_index": t.carries_index}
                for n, t in self.tensors.items()
            },
            "input": fmt(self.input_format),
            "intermediate": fmt(self.intermediate_format),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizationPlan":
        tensors = {
            n: TensorFormat(FixedFormat(t["width"], t["frac"]), bool(t["carries_index"]))
            for n, t in d["tensors"].items()
        }
        return cls(
            tensors,
            FixedFormat(d["input"]["width"], d["input"]["frac"]),
            FixedFormat(d["intermediate"]["width"], d["intermediate"]["frac"]),
        )


def derive_plan(params: LstmParams, width: int = 12) -> QuantizationPlan:
    """One format per tensor group, sized from the group's dynamic range."""
    tensors = params.tensors()
    plan: dict[str, TensorFormat] = {}
    for members, carries_index in FORMAT_GROUPS.values():
        present = [n for n in members if n in tensors]
        if not present:
            continue
        max_abs = max(float(np.max(np.abs(tensors[n]))) for n in present)
        # all-zero groups still need a format; one integer bit is enough
        fmt = derive_format(max_abs if max_abs > 0 else 1.0, width, carries_index)
        for n in present:
            plan[n] = TensorFormat(fmt, carries_index)
    return QuantizationPlan(plan)


@dataclass
class QuantizedParams:
    config: LayerConfig
    plan: QuantizationPlan
    tensors: dict[str, np.ndarray]  # int64, masked entries already zero

    def frac(self, name: str) -> int:
        return self.plan.format_of(name).frac


def quantize_params(params: LstmParams, plan: QuantizationPlan) -> QuantizedParams:
    q = {n: quantize_values(a, plan.format_of(n)) for n, a in params.tensors().items()}
    return QuantizedParams(params.config, plan, q)


@dataclass
class QuantizedState:
    c: np.ndarray  # intermediate format
    y: np.ndarray  # input format

    @classmethod
    def zeros(cls, config: LayerConfig) -> "QuantizedState":
        return cls(np.zeros(config.hidden_dim, np.int64), np.zeros(config.output_dim, np.int64))


# -- datapath primitives ----------------------------------------------------
# The schedule executor calls these same functions op by op, so the fused
# step below and a scheduled run agree bit for bit.


def q_spmv(qp: QuantizedParams, name: str, vec, vec_frac: int, out_frac: int) -> np.ndarray:
    """16-bit activations times 12-bit weights, 32-bit accumulation, then rescale."""
    w = qp.tensors[name]
    acc = w @ np.asarray(vec, dtype=np.int64)
    limit = 1 << (ACC_BITS - 1)
    if np.any(acc >= limit) or np.any(acc < -limit):
        raise NumericError(f"{name}: accumulator exceeds {ACC_BITS} bits")
    return rescale(acc, qp.frac(name) + vec_frac, out_frac)


def q_peephole(qp: QuantizedParams, name: str, c) -> np.ndarray:
    mid = qp.plan.intermediate_format.frac
    return rescale(qp.tensors[name] * np.asarray(c, dtype=np.int64), qp.frac(name) + mid, mid)


def q_bias(qp: QuantizedParams, name: str) -> np.ndarray:
    mid = qp.plan.intermediate_format.frac
    return rescale(qp.tensors[name], qp.frac(name), mid)


def q_adder(*terms) -> np.ndarray:
    return saturate(np.sum(np.stack([np.asarray(t, np.int64) for t in terms]), axis=0), 16)


def q_mul(a, a_frac: int, b, b_frac: int, out_frac: int) -> np.ndarray:
    prod = np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)
    return rescale(prod, a_frac + b_frac, out_frac)


def q_act(luts: dict[str, ActLut], tag: str, pre, frac: int) -> np.ndarray:
    return lut_eval(luts[tag], pre, frac)


def _check_qvec(name: str, v, n: int) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (n,):
        raise ShapeError(f"{name}: expected length {n}, got shape {v.shape}")
    if not np.issubdtype(v.dtype, np.integer):
        raise ValidationError(f"{name}: fixed-point vectors must be integer arrays")
    return v.astype(np.int64)


def quantized_lstm_gates(
    qp: QuantizedParams,
    luts: dict[str, ActLut],
    x_t,
    state: QuantizedState,
    acts: Activations = Activations(),
) -> dict[str, np.ndarray]:
    cfg = qp.config
    fin = qp.plan.input_format.frac
    mid = qp.plan.intermediate_format.frac
    x = _check_qvec("x_t", x_t, cfg.input_dim)
    c_prev = _check_qvec("state.c", state.c, cfg.hidden_dim)
    y_prev = _check_qvec("state.y", state.y, cfg.output_dim)

    def gate_pre(g: str, peep_state=None) -> np.ndarray:
        terms = [
            q_spmv(qp, f"W_{g}x", x, fin, mid),
            q_spmv(qp, f"W_{g}r", y_prev, fin, mid),
        ]
        if peep_state is not None and cfg.has_peephole:
            terms.append(q_peephole(qp, f"W_{g}c", peep_state))
        terms.append(q_bias(qp, f"b_{g}"))
        return q_adder(*terms)

    i = q_act(luts, "sigmoid", gate_pre("i", c_prev), mid)
    f = q_act(luts, "sigmoid", gate_pre("f", c_prev), mid)
    g = q_act(luts, acts.g, gate_pre("c"), mid)
    c = q_adder(q_mul(f, Q15, c_prev, mid, mid), q_mul(i, Q15, g, Q15, mid))
    o = q_act(luts, "sigmoid", gate_pre("o", c), mid)
    h = q_act(luts, acts.h, c, mid)
    m = q_mul(o, Q15, h, Q15, Q15)
    if cfg.has_projection:
        y = q_spmv(qp, PROJECTION, m, Q15, fin)
    else:
        y = rescale(m, Q15, fin)
    return {"i": i, "f": f, "g": g, "c": c, "o": o, "h": h, "m": m, "y": y}


def quantized_lstm_step(
    qp: QuantizedParams,
    luts: dict[str, ActLut],
    x_t,
    state: QuantizedState,
    acts: Activations = Activations(),
) -> tuple[np.ndarray, QuantizedState]:
    v = quantized_lstm_gates(qp, luts, x_t, state, acts)
    return v["y"], QuantizedState(c=v["c"], y=v["y"])


def save_plan(plan: QuantizationPlan, path: str | Path) -> None:
    import json

    Path(path).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")


def save_quantized(layers: QuantizedParams | list[QuantizedParams], path: str | Path) -> Path:
    from .container import write_container

    if isinstance(layers, QuantizedParams):
        layers = [layers]
    tensors = {f"{k}/{n}": np.asarray(a, np.int64) for k, qp in enumerate(layers)
               for n, a in qp.tensors.items()}
    meta = {
        "kind": "quantized-model",
        "layers": [{"config": qp.config.to_dict(), "plan": qp.plan.to_dict()} for qp in layers],
    }
    return write_container(path, meta, tensors)


def load_quantized(path: str | Path) -> list[QuantizedParams]:
    from .container import read_container

    manifest, tensors = read_container(path)
    if manifest.get("kind") != "quantized-model":
        raise ValidationError(f"{path}: not a quantized model container")
    out = []
    for k, layer in enumerate(manifest["layers"]):
        prefix = f"{k}/"
        arrays = {n[len(prefix):]: a for n, a in tensors.items() if n.startswith(prefix)}
        out.append(QuantizedParams(LayerConfig.from_dict(layer["config"]),
                                   QuantizationPlan.from_dict(layer["plan"]), arrays))
    return out
