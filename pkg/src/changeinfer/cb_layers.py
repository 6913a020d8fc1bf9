"""Change-based layer executors.

Every layer keeps its previous output and recomputes only the output pixels
listed in the current index list. ``forward`` returns the live output buffer
(the same array every frame), the output-frame change map, the index list and
a :class:`LayerFrameStats` record.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import change_engine as ce
from .errors import ConfigError, ShapeError
from .tensor_core import DTYPE, ConvSpec, PoolSpec, as_tensor3, conv2d_dense, gemm, im2col, rel_error, relu

DETECT = "detect"
PROPAGATE = "propagate"
REUSE_1X1 = "reuse_1x1"
POLICIES = (DETECT, PROPAGATE, REUSE_1X1)


@dataclass
class LayerFrameStats:
    layer: str
    kind: str
    changed_px: int
    total_px: int
    eff_ops: int = 0
    dense_ops: int = 0
    input_changed_px: int | None = None
    propagated_px: int | None = None
    fg_sp_ops: int | None = None
    fg_fm_ops: int | None = None
    wall_ns: int = 0
    frame: int | None = None
    loss: float | None = None

    @property
    def change_frac(self) -> float:
        return self.changed_px / self.total_px if self.total_px else 0.0


def update_output(prev_output: np.ndarray, y_partial, indexes, bias=None, fuse_relu=False) -> np.ndarray:
    """Scatter freshly computed columns into ``prev_output`` (in place)."""
    idx = np.asarray(indexes, dtype=np.int64).reshape(-1, 2)
    y = np.asarray(y_partial, dtype=DTYPE)
    if y.ndim != 2 or y.shape[1] != idx.shape[0] or y.shape[0] != prev_output.shape[0]:
        raise ShapeError(f"Y has shape {y.shape}, expected ({prev_output.shape[0]}, {idx.shape[0]})")
    if idx.shape[0] == 0:
        return prev_output
    if bias is not None:
        y = y + np.asarray(bias, dtype=DTYPE)[:, None]
    if fuse_relu:
        y = np.maximum(y, DTYPE(0))
    prev_output[:, idx[:, 0], idx[:, 1]] = y
    return prev_output


def _full_map(h, w):
    return np.ones((h, w), dtype=bool)


class CBLayer:
    """Shared bookkeeping: output buffer and bootstrap flag."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.prev_output: np.ndarray | None = None
        self.needs_bootstrap = True

    def reset(self):
        self.prev_output = None
        self.needs_bootstrap = True

    def _ensure_output(self, shape):
        if self.prev_output is None or self.prev_output.shape != shape:
            self.prev_output = np.zeros(shape, DTYPE)
            self.needs_bootstrap = True
        return self.prev_output


class CBConvLayer(CBLayer):
    """Change-based convolution with closed-loop (or feed-forward) input state."""

    kind = "conv"

    def __init__(self, name, spec: ConvSpec, tau=0.0, policy=DETECT, fuse_relu=False,
                 mode=ce.CLOSED_LOOP):
        super().__init__(name)
        if policy not in POLICIES:
            raise ConfigError(f"{name}: unknown detection policy {policy!r}")
        if policy == REUSE_1X1 and not (spec.kernel_h == spec.kernel_w == 1 and spec.stride == 1
                                        and spec.padding == 0):
            raise ConfigError(f"{name}: reuse_1x1 requires a 1x1, stride-1, unpadded convolution")
        if tau < 0:
            raise ConfigError(f"{name}: threshold must be >= 0, got {tau}")
        self.spec = spec
        self.tau = float(tau)
        self.policy = policy
        self.fuse_relu = fuse_relu
        self.mode = mode
        self.state: np.ndarray | None = None

    def reset(self):
        super().reset()
        self.state = None

    def forward(self, x_t, upstream=None, gather_fg=False):
        t0 = time.perf_counter_ns()
        x_t = as_tensor3(x_t)
        spec = self.spec
        if x_t.shape[0] != spec.in_channels:
            raise ShapeError(f"{self.name}: input has {x_t.shape[0]} channels, expected {spec.in_channels}")
        ho, wo = spec.output_hw(*x_t.shape[1:])
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {x_t.shape[1:]} too small")
        if self.policy != DETECT and upstream is None:
            raise ConfigError(f"{self.name}: policy {self.policy} needs the upstream change map")
        if self.state is None or self.state.shape != x_t.shape:
            self.state = np.zeros_like(x_t)
            self.needs_bootstrap = True
        out = self._ensure_output((spec.out_channels, ho, wo))

        fg = None
        if gather_fg:
            from .analysis import estimate_fg_ops
            fg = estimate_fg_ops(x_t, self.state, spec, self.tau)

        up_map = None if upstream is None else upstream[0]
        if self.needs_bootstrap:
            m_in = _full_map(*x_t.shape[1:])
            self.state[...] = x_t
            m_out = _full_map(ho, wo)
            idx = ce.extract_indexes(m_out)
            self.needs_bootstrap = False
        elif self.policy == DETECT:
            m_in = ce.detect_changes(x_t, self.state, self.tau, self.mode)
            m_out = ce.dilate_change_map(m_in, spec)
            idx = ce.extract_indexes(m_out)
        else:
            m_in = up_map
            if m_in.shape != x_t.shape[1:]:
                raise ShapeError(f"{self.name}: upstream map {m_in.shape} != input {x_t.shape[1:]}")
            self.state[:, m_in] = x_t[:, m_in]
            if self.policy == REUSE_1X1:
                m_out, idx = upstream
            else:
                m_out = ce.propagate_changes(m_in, spec)
                idx = ce.extract_indexes(m_out)

        n = idx.shape[0]
        if n:
            y = gemm(spec.kernel_matrix(), im2col(self.state, spec, idx))
            update_output(out, y, idx, spec.bias, self.fuse_relu)
        stats = LayerFrameStats(
            layer=self.name, kind=self.kind, changed_px=n, total_px=ho * wo,
            eff_ops=2 * n * spec.macs_per_pixel, dense_ops=2 * ho * wo * spec.macs_per_pixel,
            input_changed_px=int(m_in.sum()),
        )
        if up_map is not None:
            stats.propagated_px = int(ce.propagate_changes(up_map, spec).sum())
        if fg is not None:
            stats.fg_sp_ops, stats.fg_fm_ops = fg
        stats.wall_ns = time.perf_counter_ns() - t0
        return out, m_out, idx, stats

    def reference_output(self) -> np.ndarray:
        """Dense convolution of the current input state (plus fused ReLU)."""
        y = conv2d_dense(self.state, self.spec)
        return relu(y) if self.fuse_relu else y

    def consistency_error(self) -> float:
        return rel_error(self.prev_output, self.reference_output())


class CBPoolLayer(CBLayer):
    """Change-based max pooling driven by the producer's change map."""

    kind = "maxpool"

    def __init__(self, name, pool: PoolSpec):
        super().__init__(name)
        self.pool = pool

    def forward(self, x_t, upstream, gather_fg=False):
        t0 = time.perf_counter_ns()
        x_t = as_tensor3(x_t)
        h, w = x_t.shape[1:]
        ho, wo = self.pool.output_hw(h, w)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for pooling")
        if upstream is None:
            raise ConfigError(f"{self.name}: pooling needs the upstream change map")
        out = self._ensure_output((x_t.shape[0], ho, wo))
        if self.needs_bootstrap:
            m_out = _full_map(ho, wo)
            self.needs_bootstrap = False
        else:
            up_map = upstream[0]
            if up_map.shape != (h, w):
                raise ShapeError(f"{self.name}: upstream map {up_map.shape} != input {(h, w)}")
            m_out = ce.dilate_change_map(up_map, self.pool, (ho, wo))
        idx = ce.extract_indexes(m_out)
        if idx.shape[0]:
            out[:, idx[:, 0], idx[:, 1]] = pool_at(x_t, self.pool, idx)
        stats = LayerFrameStats(self.name, self.kind, int(idx.shape[0]), ho * wo,
                                input_changed_px=int(upstream[0].sum()))
        stats.wall_ns = time.perf_counter_ns() - t0
        return out, m_out, idx, stats


def pool_at(x: np.ndarray, pool: PoolSpec, idx: np.ndarray) -> np.ndarray:
    """Window maxima for the listed output pixels, shape ``(channels, n)``."""
    k, s = pool.size, pool.stride
    rows = idx[:, 0] * s
    cols = idx[:, 1] * s
    need_h = int(rows.max()) + k
    need_w = int(cols.max()) + k
    if need_h > x.shape[1] or need_w > x.shape[2]:
        x = np.pad(x, ((0, 0), (0, max(0, need_h - x.shape[1])), (0, max(0, need_w - x.shape[2]))),
                   constant_values=-np.inf)
    jj = np.arange(k)
    win = x[:, rows[:, None, None] + jj[None, :, None], cols[:, None, None] + jj[None, None, :]]
    return win.max(axis=(2, 3))


class CBPointwise(CBLayer):
    """Per-pixel layer (standalone ReLU or batch norm): recompute changed pixels."""

    def __init__(self, name, fn, kind="relu"):
        super().__init__(name)
        self.fn = fn
        self.kind = kind

    def forward(self, x_t, upstream, gather_fg=False):
        t0 = time.perf_counter_ns()
        x_t = as_tensor3(x_t)
        if upstream is None:
            raise ConfigError(f"{self.name}: needs the upstream change map")
        out = self._ensure_output(x_t.shape)
        if self.needs_bootstrap:
            m_out = _full_map(*x_t.shape[1:])
            idx = ce.extract_indexes(m_out)
            self.needs_bootstrap = False
        else:
            m_out, idx = upstream
        if idx.shape[0]:
            out[:, idx[:, 0], idx[:, 1]] = self.fn(x_t[:, idx[:, 0], idx[:, 1]])
        stats = LayerFrameStats(self.name, self.kind, int(idx.shape[0]), m_out.size)
        stats.wall_ns = time.perf_counter_ns() - t0
        return out, m_out, idx, stats


class CBJoin(CBLayer):
    """Elementwise add or channel concat of several branches.

    A pixel is marked changed when it changed in any parent.
    """

    def __init__(self, name, kind="add"):
        super().__init__(name)
        if kind not in ("add", "concat"):
            raise ConfigError(f"{name}: unknown join kind {kind!r}")
        self.kind = kind

    def forward(self, xs, upstreams, gather_fg=False):
        t0 = time.perf_counter_ns()
        xs = [as_tensor3(x) for x in xs]
        hw = xs[0].shape[1:]
        if any(x.shape[1:] != hw for x in xs):
            raise ShapeError(f"{self.name}: branch spatial sizes differ: {[x.shape for x in xs]}")
        if self.kind == "add":
            if any(x.shape != xs[0].shape for x in xs):
                raise ShapeError(f"{self.name}: add needs equal shapes: {[x.shape for x in xs]}")
            shape = xs[0].shape
        else:
            shape = (sum(x.shape[0] for x in xs),) + hw
        out = self._ensure_output(shape)
        if self.needs_bootstrap:
            m_out = _full_map(*hw)
            self.needs_bootstrap = False
        else:
            m_out = np.logical_or.reduce([u[0] for u in upstreams])
        idx = ce.extract_indexes(m_out)
        if idx.shape[0]:
            r, c = idx[:, 0], idx[:, 1]
            if self.kind == "add":
                acc = xs[0][:, r, c].copy()
                for x in xs[1:]:
                    acc += x[:, r, c]
            else:
                acc = np.concatenate([x[:, r, c] for x in xs], axis=0)
            out[:, r, c] = acc
        stats = LayerFrameStats(self.name, self.kind, int(idx.shape[0]), m_out.size)
        stats.wall_ns = time.perf_counter_ns() - t0
        return out, m_out, idx, stats
