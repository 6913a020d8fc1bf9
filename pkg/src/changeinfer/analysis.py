"""Operation counts, fine-grained estimates, memory accounting, change statistics.

Counts cover convolution arithmetic only, one multiply-add = 2 operations;
bias adds, comparisons, pooling and data movement are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import change_engine as ce
from .errors import ShapeError
from .network import CONV, MAXPOOL, NetworkSpec, RunStats

NAIVE, SHARED, CB = "naive", "shared", "cb"
MEM_MODES = (NAIVE, SHARED, CB)


def _conv_geometry(spec: NetworkSpec):
    """Yield ``(layer, in_shape, out_shape)`` for every conv layer."""
    shapes = spec.shapes()
    for i, layer in enumerate(spec.layers):
        if layer.kind == CONV:
            yield layer, shapes[spec.inputs_of(i)[0]], shapes[layer.name]


def _macs_per_pixel(layer, in_shape) -> int:
    kh, kw = layer.kernel
    return layer.out_channels * in_shape[0] * kh * kw


def count_ops_dense(spec: NetworkSpec) -> dict[str, int]:
    """Full-frame conv ops per layer: 2 * h_o * w_o * C_out * C_in * kh * kw."""
    return {layer.name: 2 * o[1] * o[2] * _macs_per_pixel(layer, i) for layer, i, o in _conv_geometry(spec)}


def count_ops_cb(stats: RunStats, spec: NetworkSpec) -> dict[str, list[int]]:
    """Per conv layer, per frame: 2 * changed output pixels * C_out * C_in * kh * kw."""
    macs = {layer.name: _macs_per_pixel(layer, i) for layer, i, _ in _conv_geometry(spec)}
    out: dict[str, list[int]] = {name: [] for name in macs}
    for r in stats.records:
        if r.layer in macs:
            out[r.layer].append(2 * r.changed_px * macs[r.layer])
    return out


def _window_sum(m: np.ndarray, kh: int, kw: int, s: int, p: int, out_hw) -> np.ndarray:
    ho, wo = out_hw
    mp = np.pad(m.astype(np.int64), ((p, max(0, (ho - 1) * s + kh - p - m.shape[0])),
                                     (p, max(0, (wo - 1) * s + kw - p - m.shape[1]))))
    win = np.lib.stride_tricks.sliding_window_view(mp, (kh, kw))
    return win[: (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s].sum(axis=(2, 3))


def estimate_fg_ops(x_t, state, spec, tau: float) -> tuple[int, int]:
    """Fine-grained op estimates for one detection step (no state update).

    Returns ``(fg_sp_ops, fg_fm_ops)``:

    * spatially fine-grained: ``2 * C_out * C_in`` per changed input pixel
      inside each output pixel's window;
    * feature-map fine-grained: ``2 * C_out * kh * kw`` per input channel with
      a change inside each output pixel's window.
    """
    x_t = np.asarray(x_t)
    state = np.asarray(state)
    if x_t.shape != state.shape or x_t.shape[0] != spec.in_channels:
        raise ShapeError(f"frame {x_t.shape}, state {state.shape}, conv expects {spec.in_channels} channels")
    per_channel = np.abs(x_t - state) > tau
    m = per_channel.any(axis=0)
    out_hw = spec.output_hw(*m.shape)
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    taps = int(_window_sum(m, kh, kw, s, p, out_hw).sum())
    channels = sum(int(ce.dilate_change_map(per_channel[c], spec).sum()) for c in range(per_channel.shape[0]))
    c_out, c_in = spec.out_channels, spec.in_channels
    return 2 * c_out * c_in * taps, 2 * c_out * kh * kw * channels


@dataclass
class OpRow:
    frame: int
    layer: str
    dense_ops: int
    cb_ops: int
    fg_sp_ops: int | None = None
    fg_fm_ops: int | None = None


@dataclass
class OpReport:
    rows: list[OpRow] = field(default_factory=list)

    def totals(self) -> dict[str, int]:
        tot = {"dense_ops": 0, "cb_ops": 0, "fg_sp_ops": 0, "fg_fm_ops": 0}
        for r in self.rows:
            tot["dense_ops"] += r.dense_ops
            tot["cb_ops"] += r.cb_ops
            tot["fg_sp_ops"] += r.fg_sp_ops or 0
            tot["fg_fm_ops"] += r.fg_fm_ops or 0
        return tot

    def by_layer(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for r in self.rows:
            d = out.setdefault(r.layer, {"dense_ops": 0, "cb_ops": 0, "fg_sp_ops": 0, "fg_fm_ops": 0})
            d["dense_ops"] += r.dense_ops
            d["cb_ops"] += r.cb_ops
            d["fg_sp_ops"] += r.fg_sp_ops or 0
            d["fg_fm_ops"] += r.fg_fm_ops or 0
        return out


def op_report(stats: RunStats, spec: NetworkSpec) -> OpReport:
    dense = count_ops_dense(spec)
    report = OpReport()
    for r in stats.records:
        if r.layer in dense:
            report.rows.append(OpRow(r.frame, r.layer, dense[r.layer], r.eff_ops, r.fg_sp_ops, r.fg_fm_ops))
    return report


@dataclass
class MemReport:
    """Stored scalar values (not bytes) for one accounting mode."""

    mode: str
    intermediate_values: int
    x_matrix_values: int
    param_values: int
    cb_extra_values: int = 0
    cb_breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.intermediate_values + self.x_matrix_values + self.param_values + self.cb_extra_values


def _numel(shape) -> int:
    return int(np.prod(shape))


def memory_accounting(spec: NetworkSpec, mode: str = SHARED) -> MemReport:
    """Memory needed for batch-1 inference with im2col + GEMM convolution.

    naive:  every layer output plus the input is kept; one X matrix per conv.
    shared: one X matrix sized for the largest layer; two ping-pong buffers
            sized for the largest (input + output) pair of a layer.
    cb:     shared plus, per change-based layer, the previous output (and the
            input state for convolutions), and one shared change map, index
            list and Y matrix, each sized for the largest layer.
    Activations and batch norms are in place / folded and cost nothing.
    """
    if mode not in MEM_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MEM_MODES}")
    shapes = spec.shapes()
    stored = [(i, layer) for i, layer in enumerate(spec.layers) if layer.kind not in ("relu", "batchnorm")]

    x_sizes, params = [], 0
    for layer, i_shape, o_shape in _conv_geometry(spec):
        kh, kw = layer.kernel
        x_sizes.append(i_shape[0] * kh * kw * o_shape[1] * o_shape[2])
        params += layer.out_channels * i_shape[0] * kh * kw + layer.out_channels

    if mode == NAIVE:
        inter = _numel(spec.input_shape) + sum(_numel(shapes[layer.name]) for _, layer in stored)
        return MemReport(mode, inter, sum(x_sizes), params)

    pairs = [sum(_numel(shapes[n]) for n in spec.inputs_of(i)) + _numel(shapes[layer.name]) for i, layer in stored]
    report = MemReport(mode, max(pairs), max(x_sizes, default=0), params)
    if mode == SHARED:
        return report

    prev_out = state = 0
    map_px = idx_px = y_vals = 0
    for i, layer in stored:
        o = shapes[layer.name]
        i_shape = shapes[spec.inputs_of(i)[0]]
        if layer.kind in (CONV, MAXPOOL):
            prev_out += _numel(o)
        if layer.kind == CONV:
            state += _numel(i_shape)
            y_vals = max(y_vals, _numel(o))
        map_px = max(map_px, i_shape[1] * i_shape[2], o[1] * o[2])
        idx_px = max(idx_px, o[1] * o[2])
    report.cb_breakdown = {"prev_output": prev_out, "input_state": state, "change_map": map_px,
                           "index_list": idx_px, "y_matrix": y_vals}
    report.cb_extra_values = sum(report.cb_breakdown.values())
    return report


@dataclass
class ChangeStat:
    frame: int
    layer: str
    change_frac: float
    propagated_frac: float | None
    ratio: float | None


def change_stats(run: RunStats) -> list[ChangeStat]:
    """Changed-pixel fractions and worst-case-propagation / detection ratios.

    ``ratio`` is how many more output pixels worst-case propagation of the
    upstream map would mark than detection did (1.0 when both are empty).
    """
    out = []
    for r in run.records:
        prop_frac = ratio = None
        if r.propagated_px is not None:
            prop_frac = r.propagated_px / r.total_px
            if r.changed_px:
                ratio = r.propagated_px / r.changed_px
            else:
                ratio = 1.0 if r.propagated_px == 0 else float("inf")
        out.append(ChangeStat(r.frame, r.layer, r.change_frac, prop_frac, ratio))
    return out
