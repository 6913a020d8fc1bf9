"""Change detection, change-map dilation/propagation and index extraction.

Change maps are boolean ``(height, width)`` arrays in the coordinate frame of
the tensor they describe. Index lists are ``(n, 2)`` int64 arrays of
``(row, col)`` coordinates in row-major order.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError

CLOSED_LOOP = "closed_loop"
FEED_FORWARD = "feed_forward"


def detect_changes(x_t, state: np.ndarray, tau: float, mode: str = CLOSED_LOOP) -> np.ndarray:
    """Mark pixels where any channel differs from ``state`` by more than ``tau``.

    ``state`` is updated in place: in closed-loop mode all channels of the
    marked pixels are copied from ``x_t``; in feed-forward mode the whole
    tensor is replaced.
    """
    x_t = np.asarray(x_t)
    if x_t.shape != state.shape:
        raise ShapeError(f"frame shape {x_t.shape} != state shape {state.shape}")
    if tau < 0:
        raise ConfigError(f"threshold must be >= 0, got {tau}")
    m = (np.abs(x_t - state) > tau).any(axis=0)
    if mode == CLOSED_LOOP:
        state[:, m] = x_t[:, m]
    elif mode == FEED_FORWARD:
        state[...] = x_t
    else:
        raise ConfigError(f"unknown detection mode {mode!r}")
    return m


def _window_or(m: np.ndarray, axis: int, k: int, s: int, pad: int, n_out: int) -> np.ndarray:
    """OR over windows ``[o*s - pad, o*s - pad + k)`` along ``axis`` (clipped)."""
    n = m.shape[axis]
    after = max(0, (n_out - 1) * s + k - pad - n)
    widths = [(0, 0), (0, 0)]
    widths[axis] = (pad, after)
    mp = np.pad(m, widths)
    win = np.lib.stride_tricks.sliding_window_view(mp, k, axis=axis)
    idx = [slice(None), slice(None)]
    idx[axis] = slice(0, (n_out - 1) * s + 1, s)
    return win[tuple(idx)].any(axis=-1)


def dilate_change_map(m, geom, out_hw=None) -> np.ndarray:
    """Map input-frame changes to the output pixels whose window they touch.

    ``geom`` is anything exposing ``kernel_h``, ``kernel_w``, ``stride`` and
    ``padding`` (a ConvSpec or PoolSpec). The result lives in the output frame.
    """
    m = np.asarray(m, dtype=bool)
    if m.ndim != 2:
        raise ShapeError(f"change map must be 2-D, got {m.shape}")
    ho, wo = out_hw if out_hw is not None else geom.output_hw(*m.shape)
    kh, kw, s, p = geom.kernel_h, geom.kernel_w, geom.stride, geom.padding
    if kh == 1 and kw == 1 and s == 1 and p == 0 and (ho, wo) == m.shape:
        return m.copy()
    rows = _window_or(m, 0, kh, s, p, ho)
    return _window_or(rows, 1, kw, s, p, wo)


def propagate_changes(prev_map, geom) -> np.ndarray:
    """Worst-case propagation of the previous layer's output change map.

    Same as dilation; for a 1x1 stride-1 unpadded window the map itself is
    returned so its index list can be reused.
    """
    prev_map = np.asarray(prev_map, dtype=bool)
    if geom.kernel_h == 1 and geom.kernel_w == 1 and geom.stride == 1 and geom.padding == 0:
        return prev_map
    return dilate_change_map(prev_map, geom)


def extract_indexes(m) -> np.ndarray:
    """Row-major ``(row, col)`` coordinates of the set bits; ``len`` is the count."""
    return np.argwhere(np.asarray(m, dtype=bool))
