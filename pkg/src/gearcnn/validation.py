"""Input validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .data import FRAME_LENGTH, N_CHANNELS, N_CLASSES
from .exceptions import LabelError, ShapeError


def check_frames(X, allow_flat=True):
    """Coerce ``X`` to a contiguous float32 ``[N, 3, 200]`` array.

    Flat ``[N, 600]`` input is accepted and read channel-major
    (x[0:200], y[0:200], z[0:200]), the same layout as the CSV format.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ShapeError(f"frames must be numeric, got dtype {X.dtype}")
    if allow_flat and X.ndim == 2 and X.shape[1] == N_CHANNELS * FRAME_LENGTH:
        X = X.reshape(len(X), N_CHANNELS, FRAME_LENGTH)
    if X.ndim != 3 or X.shape[1:] != (N_CHANNELS, FRAME_LENGTH):
        raise ShapeError(
            f"expected frames of shape [N, {N_CHANNELS}, {FRAME_LENGTH}] or [N, {N_CHANNELS * FRAME_LENGTH}], got {X.shape}"
        )
    if len(X) == 0:
        raise ShapeError("no frames given")
    if not np.isfinite(X).all():
        raise ValueError("frames contain NaN or infinite values")
    return np.ascontiguousarray(X, dtype=np.float32)


def check_labels(y, n_frames=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {y.shape}")
    if n_frames is not None and len(y) != n_frames:
        raise ShapeError(f"{len(y)} labels for {n_frames} frames")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= N_CLASSES):
        raise LabelError(f"labels must lie in 0..{N_CLASSES - 1}")
    return y.astype(np.int64)
