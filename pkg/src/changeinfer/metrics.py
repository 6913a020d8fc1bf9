"""Output quality metrics used for losses against a reference."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

MSE = "mse"
PIXEL_ACCURACY = "pixel_accuracy"
METRICS = (MSE, PIXEL_ACCURACY)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def labels(x) -> np.ndarray:
    """Per-pixel argmax over channels."""
    return np.asarray(x).argmax(axis=0)


def pixel_accuracy(pred, ref_labels) -> float:
    """Fraction of pixels whose argmax class matches ``ref_labels``."""
    pred_labels = labels(pred)
    ref_labels = np.asarray(ref_labels)
    if pred_labels.shape != ref_labels.shape:
        raise ShapeError(f"pixel_accuracy: label maps {pred_labels.shape} vs {ref_labels.shape}")
    return float(np.mean(pred_labels == ref_labels))


def loss(output, reference, metric: str = MSE) -> float:
    """Loss of ``output`` against a reference network output (0 = identical)."""
    if metric == MSE:
        return mse(output, reference)
    if metric == PIXEL_ACCURACY:
        return 1.0 - pixel_accuracy(output, labels(reference))
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
