"""Per-layer threshold selection and joint threshold-factor sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CalibrationError, ConfigError
from .metrics import METRICS, MSE, mse, pixel_accuracy  # noqa: F401  (re-exported)
from .network import INPUT, CBNetwork, dense_outputs, forward_sequence

log = logging.getLogger(__name__)

LAST, ALL = "last", "all"


@dataclass
class CalibConfig:
    """Threshold search settings.

    ``eval_sequences`` are lists of frames. ``references`` optionally gives
    matching per-frame reference outputs; otherwise the dense network's
    outputs are used. ``layer_budgets`` overrides ``per_layer_budget`` for
    named layers (uneven split of the total acceptable loss).
    """

    eval_sequences: Sequence[Sequence[np.ndarray]]
    initial_tau: float = 0.01
    growth_factor: float = 1.1
    per_layer_budget: float = 0.0
    metric: str = MSE
    references: Sequence[Sequence[np.ndarray]] | None = None
    layer_budgets: dict[str, float] = field(default_factory=dict)
    max_iter: int = 100
    aggregate: str = "mean"           # mean | worst over sequences
    eval_frames: str = LAST           # loss on the last frame or mean over frames 1..
    strict: bool = False              # raise when growth hits max_iter

    def __post_init__(self):
        if not self.initial_tau > 0:
            raise ConfigError(f"initial_tau must be > 0, got {self.initial_tau}")
        if not self.growth_factor > 1:
            raise ConfigError(f"growth_factor must be > 1, got {self.growth_factor}")
        if self.per_layer_budget < 0 or any(b < 0 for b in self.layer_budgets.values()):
            raise ConfigError("loss budgets must be >= 0")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.aggregate not in ("mean", "worst"):
            raise ConfigError(f"unknown aggregate {self.aggregate!r}")
        if self.eval_frames not in (LAST, ALL):
            raise ConfigError(f"unknown eval_frames {self.eval_frames!r}")
        if not self.eval_sequences:
            raise ConfigError("at least one evaluation sequence is required")

    def budget(self, layer: str) -> float:
        return self.layer_budgets.get(layer, self.per_layer_budget)


@dataclass
class TraceRow:
    layer: str
    tau: float
    loss: float
    incremental_loss: float


@dataclass
class CalibrationResult:
    thresholds: list[float]
    trace: list[TraceRow]
    capped: list[str]             # layers whose growth stopped at max_iter
    layer_names: list[str]


class _Evaluator:
    """Runs the eval sequences for a threshold vector (with state reset)."""

    def __init__(self, cbnet: CBNetwork, cfg: CalibConfig):
        self.cbnet = cbnet
        self.cfg = cfg
        if cfg.references is not None:
            if len(cfg.references) != len(cfg.eval_sequences):
                raise ConfigError("one reference list per evaluation sequence is required")
            self.references = cfg.references
        else:
            self.references = [dense_outputs(cbnet.dense, seq) for seq in cfg.eval_sequences]
        self.runs = 0

    def loss(self, taus) -> float:
        self.cbnet.set_thresholds(taus)
        per_seq = []
        for frames, ref in zip(self.cfg.eval_sequences, self.references):
            self.cbnet.reset_state()
            _, run = forward_sequence(self.cbnet, frames, ref, self.cfg.metric)
            losses = run.frame_loss
            if self.cfg.eval_frames == LAST or len(losses) == 1:
                per_seq.append(losses[-1])
            else:
                per_seq.append(float(np.mean(losses[1:])))
        self.runs += 1
        return float(np.mean(per_seq)) if self.cfg.aggregate == "mean" else float(np.max(per_seq))


def _ancestors(cbnet: CBNetwork, name: str) -> set[str]:
    seen: set[str] = set()
    stack = list(cbnet.inputs_of(name))
    while stack:
        n = stack.pop()
        if n == INPUT or n in seen:
            continue
        seen.add(n)
        stack.extend(cbnet.inputs_of(n))
    return seen


def select_thresholds(cbnet: CBNetwork, cfg: CalibConfig) -> CalibrationResult:
    """Pick each conv layer's threshold in turn, first to last.

    For each layer with its own change detection, the threshold starts at
    ``initial_tau`` and grows by ``growth_factor`` until the loss this layer
    adds (relative to the same vector with this layer at 0) exceeds its
    budget; the last threshold within budget is kept (0 if the first one
    already fails). Thresholds of layers that are not ancestors of the
    current one are held at 0, so parallel branches are calibrated
    independently. The network's thresholds are left at the result.
    """
    convs = cbnet.conv_layers
    names = [c.name for c in convs]
    selected = [0.0] * len(convs)
    trace: list[TraceRow] = []
    capped: list[str] = []
    ev = _Evaluator(cbnet, cfg)
    for k, layer in enumerate(convs):
        if layer.policy != "detect":
            continue
        anc = _ancestors(cbnet, layer.name)
        base = [selected[i] if names[i] in anc else 0.0 for i in range(len(convs))]
        ref_loss = ev.loss(base)
        trace.append(TraceRow(layer.name, 0.0, ref_loss, 0.0))
        budget = cfg.budget(layer.name)
        tau, best, hit_cap = cfg.initial_tau, 0.0, True
        for _ in range(cfg.max_iter):
            vec = list(base)
            vec[k] = tau
            cur = ev.loss(vec)
            inc = cur - ref_loss
            trace.append(TraceRow(layer.name, tau, cur, inc))
            if inc > budget:
                hit_cap = False
                break
            best = tau
            tau *= cfg.growth_factor
        if hit_cap:
            msg = f"{layer.name}: threshold still within budget after {cfg.max_iter} steps (tau={best:g})"
            if cfg.strict:
                raise CalibrationError(msg)
            log.warning(msg)
            capped.append(layer.name)
        selected[k] = best
    cbnet.set_thresholds(selected)
    cbnet.reset_state()
    return CalibrationResult(selected, trace, capped, names)


def incremental_losses(cbnet: CBNetwork, cfg: CalibConfig, thresholds) -> dict[str, float]:
    """Re-evaluate the loss each detecting layer adds at ``thresholds``."""
    convs = cbnet.conv_layers
    names = [c.name for c in convs]
    ev = _Evaluator(cbnet, cfg)
    out = {}
    for k, layer in enumerate(convs):
        if layer.policy != "detect":
            continue
        anc = _ancestors(cbnet, layer.name)
        base = [thresholds[i] if names[i] in anc else 0.0 for i in range(len(convs))]
        vec = list(base)
        vec[k] = thresholds[k]
        out[layer.name] = ev.loss(vec) - ev.loss(base)
    cbnet.set_thresholds(thresholds)
    cbnet.reset_state()
    return out


@dataclass
class TradeoffRow:
    factor: float
    loss: float
    total_eff_ops: int
    wall_ns: int


@dataclass
class TradeoffCurve:
    rows: list[TradeoffRow] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]


def sweep_threshold_factor(cbnet: CBNetwork, base_tau, factors, sequences, references=None,
                           metric: str = MSE, eval_frames: str = LAST, skip_bootstrap: bool = True
                           ) -> TradeoffCurve:
    """Scale all thresholds jointly by each factor and record loss, ops and time.

    Ops and layer wall time are summed over all sequences (frames after the
    bootstrap frame by default); the loss is averaged over sequences.
    """
    factors = [float(f) for f in factors]
    if any(f < 0 for f in factors):
        raise ConfigError("threshold factors must be >= 0")
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise ConfigError("threshold factors must be strictly increasing")
    base = [float(t) for t in base_tau]
    if references is None:
        references = [dense_outputs(cbnet.dense, seq) for seq in sequences]
    first = 1 if skip_bootstrap else 0
    curve = TradeoffCurve()
    for f in factors:
        cbnet.set_thresholds([f * t for t in base])
        losses, ops, wall = [], 0, 0
        for frames, ref in zip(sequences, references):
            cbnet.reset_state()
            _, run = forward_sequence(cbnet, frames, ref, metric)
            wall += run.total_wall_ns(first)
            ops += run.total_eff_ops(first)
            fl = run.frame_loss
            losses.append(fl[-1] if eval_frames == LAST or len(fl) == 1 else float(np.mean(fl[1:])))
        curve.rows.append(TradeoffRow(f, float(np.mean(losses)), ops, wall))
    cbnet.set_thresholds(base)
    cbnet.reset_state()
    return curve
