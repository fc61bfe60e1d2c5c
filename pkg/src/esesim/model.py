"""Floating-point LSTM reference (peephole + projection) and model files."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import read_container, write_container
from .errors import NumericError, ShapeError, ValidationError

INPUT_MATRICES = ("W_ix", "W_fx", "W_cx", "W_ox")
RECURRENT_MATRICES = ("W_ir", "W_fr", "W_cr", "W_or")
PEEPHOLES = ("W_ic", "W_fc", "W_oc")
BIASES = ("b_i", "b_f", "b_c", "b_o")
PROJECTION = "W_ym"
SPARSE_MATRICES = INPUT_MATRICES + RECURRENT_MATRICES + (PROJECTION,)


@dataclass(frozen=True)
class LayerConfig:
    input_dim: int = 153
    hidden_dim: int = 1024
    proj_dim: int = 512
    has_peephole: bool = True
    has_projection: bool = True

    def __post_init__(self) -> None:
        for name in ("input_dim", "hidden_dim", "proj_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.has_projection and self.proj_dim > self.hidden_dim:
            raise ValidationError("proj_dim must not exceed hidden_dim")
        if not self.has_projection and self.proj_dim != self.hidden_dim:
            raise ValidationError("without projection the recurrent width is hidden_dim")

    @property
    def output_dim(self) -> int:
        return self.proj_dim if self.has_projection else self.hidden_dim

    def matrix_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {n: (self.hidden_dim, self.input_dim) for n in INPUT_MATRICES}
        shapes.update({n: (self.hidden_dim, self.output_dim) for n in RECURRENT_MATRICES})
        if self.has_projection:
            shapes[PROJECTION] = (self.proj_dim, self.hidden_dim)
        return shapes

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass(frozen=True)
class Activations:
    """Cell input (``g``) and cell output (``h``) nonlinearities.

    Gates always use the logistic sigmoid. ``g="sigmoid"`` follows the
    literal form of the cell-input equation.
    """

    g: str = "tanh"
    h: str = "tanh"

    def __post_init__(self) -> None:
        for v in (self.g, self.h):
            if v not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {v!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split form keeps exp() from overflowing on large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = {"sigmoid": sigmoid, "tanh": np.tanh}


@dataclass
class LstmParams:
    config: LayerConfig
    W_ix: np.ndarray
    W_fx: np.ndarray
    W_cx: np.ndarray
    W_ox: np.ndarray
    W_ir: np.ndarray
    W_fr: np.ndarray
    W_cr: np.ndarray
    W_or: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    W_ic: np.ndarray | None = None
    W_fc: np.ndarray | None = None
    W_oc: np.ndarray | None = None
    W_ym: np.ndarray | None = None

    def __post_init__(self) -> None:
        cfg = self.config
        for name, shape in cfg.matrix_shapes().items():
            arr = getattr(self, name)
            if arr is None:
                raise ShapeError(f"{name} is required by the layer config")
            _check_array(name, arr, shape)
        for name in BIASES:
            _check_array(name, getattr(self, name), (cfg.hidden_dim,))
        for name in PEEPHOLES:
            arr = getattr(self, name)
            if cfg.has_peephole:
                if arr is None:
                    raise ShapeError(f"{name} is required when has_peephole is set")
                _check_array(name, arr, (cfg.hidden_dim,))
            elif arr is not None:
                raise ShapeError(f"{name} given but has_peephole is false")
        if not cfg.has_projection and self.W_ym is not None:
            raise ShapeError("W_ym given but has_projection is false")

    def tensors(self) -> dict[str, np.ndarray]:
        """All present tensors by name, in canonical order."""
        names = INPUT_MATRICES + RECURRENT_MATRICES + BIASES + PEEPHOLES + (PROJECTION,)
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def replace(self, **arrays: np.ndarray) -> "LstmParams":
        kw = {"config": self.config, **self.tensors(), **arrays}
        return LstmParams(**kw)


def _check_array(name: str, arr: np.ndarray, shape: tuple[int, ...]) -> None:
    if not isinstance(arr, np.ndarray) or arr.shape != shape:
        got = getattr(arr, "shape", None)
        raise ShapeError(f"{name}: expected shape {shape}, got {got}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")


@dataclass
class LstmState:
    c: np.ndarray
    y: np.ndarray

    @classmethod
    def zeros(cls, config: LayerConfig) -> "LstmState":
        return cls(np.zeros(config.hidden_dim), np.zeros(config.output_dim))


def _vector(name: str, v, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ShapeError(f"{name}: expected length {n}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} contains non-finite values")
    return v


def lstm_gates(
    params: LstmParams,
    x_t,
    state: LstmState,
    acts: Activations = Activations(),
) -> dict[str, np.ndarray]:
    """Every intermediate of one LSTM timestep: i, f, g, c, o, m, y."""
    cfg = params.config
    x = _vector("x_t", x_t, cfg.input_dim)
    c_prev = _vector("state.c", state.c, cfg.hidden_dim)
    y_prev = _vector("state.y", state.y, cfg.output_dim)
    g_fn, h_fn = ACTIVATIONS[acts.g], ACTIVATIONS[acts.h]

    pre_i = params.W_ix @ x + params.W_ir @ y_prev + params.b_i
    pre_f = params.W_fx @ x + params.W_fr @ y_prev + params.b_f
    if cfg.has_peephole:
        pre_i = pre_i + params.W_ic * c_prev
        pre_f = pre_f + params.W_fc * c_prev
    i = sigmoid(pre_i)
    f = sigmoid(pre_f)
    g = g_fn(params.W_cx @ x + params.W_cr @ y_prev + params.b_c)
    c = f * c_prev + g * i
    pre_o = params.W_ox @ x + params.W_or @ y_prev + params.b_o
    if cfg.has_peephole:
        pre_o = pre_o + params.W_oc * c
    o = sigmoid(pre_o)
    m = o * h_fn(c)
    y = params.W_ym @ m if cfg.has_projection else m
    return {"i": i, "f": f, "g": g, "c": c, "o": o, "m": m, "y": y}


def lstm_step(
    params: LstmParams,
    x_t,
    state: LstmState,
    acts: Activations = Activations(),
) -> tuple[np.ndarray, LstmState]:
    v = lstm_gates(params, x_t, state, acts)
    return v["y"], LstmState(c=v["c"], y=v["y"])


def lstm_sequence(
    params: LstmParams,
    xs: Sequence,
    initial: LstmState | None = None,
    acts: Activations = Activations(),
) -> list[np.ndarray]:
    state = initial if initial is not None else LstmState.zeros(params.config)
    out = []
    for x in xs:
        y, state = lstm_step(params, x, state, acts)
        out.append(y)
    return out


def lstm_stack(layers: Sequence[LstmParams], xs: Sequence, acts: Activations = Activations()):
    """Run stacked layers sequentially, each over the whole sequence."""
    seq = list(xs)
    for p in layers:
        seq = lstm_sequence(p, seq, acts=acts)
    return seq


# Per-tensor standard deviations giving value ranges in the same ballpark
# as the trained acoustic model (gate input weights reach about +-5,
# recurrent weights about +-0.7).
SYNTHETIC_STD = {
    "x": 1.15, "r": 0.135, "b": 0.85, "W_ic": 0.25, "W_fc": 0.2, "W_oc": 0.4, "W_ym": 0.18,
}


def synthetic_params(config: LayerConfig = LayerConfig(), seed: int = 0) -> LstmParams:
    """Seeded Gaussian weights scaled to realistic per-tensor ranges."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    shapes = config.matrix_shapes()
    for name in INPUT_MATRICES:
        arrays[name] = rng.normal(0.0, SYNTHETIC_STD["x"], shapes[name])
    for name in RECURRENT_MATRICES:
        arrays[name] = rng.normal(0.0, SYNTHETIC_STD["r"], shapes[name])
    for name in BIASES:
        arrays[name] = rng.normal(0.0, SYNTHETIC_STD["b"], config.hidden_dim)
    if config.has_peephole:
        for name in PEEPHOLES:
            arrays[name] = rng.normal(0.0, SYNTHETIC_STD[name], config.hidden_dim)
    if config.has_projection:
        arrays[PROJECTION] = rng.normal(0.0, SYNTHETIC_STD["W_ym"], shapes[PROJECTION])
    return LstmParams(config=config, **arrays)


def zero_params(config: LayerConfig = LayerConfig()) -> LstmParams:
    p = synthetic_params(config)
    return p.replace(**{k: np.zeros_like(v) for k, v in p.tensors().items()})


def save_model(layers: LstmParams | Sequence[LstmParams], path: str | Path) -> Path:
    if isinstance(layers, LstmParams):
        layers = [layers]
    tensors = {}
    for k, p in enumerate(layers):
        for name, arr in p.tensors().items():
            tensors[f"{k}/{name}"] = np.asarray(arr, dtype=np.float64)
    meta = {"kind": "lstm-model", "layers": [p.config.to_dict() for p in layers]}
    return write_container(path, meta, tensors)


def load_model(path: str | Path) -> list[LstmParams]:
    """Load every layer of a model container.

    Raises ShapeError when a tensor disagrees with its layer config,
    ContainerIOError for missing or truncated blobs and ChecksumError
    when the stored digest does not match.
    """
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "lstm-model":
        raise ValidationError(f"{path}: not an LSTM model container")
    layers = []
    for k, cfg_dict in enumerate(manifest["layers"]):
        cfg = LayerConfig.from_dict(cfg_dict)
        prefix = f"{k}/"
        arrays = {n[len(prefix):]: a for n, a in tensors.items() if n.startswith(prefix)}
        try:
            layers.append(LstmParams(config=cfg, **arrays))
        except TypeError as exc:
            raise ValidationError(f"{path}: layer {k}: {exc}") from exc
    return layers
