"""Input validation helpers.

Clips travel as dense float32 arrays with axes (batch, channel, time, height,
width) and pixel values in [0, 255]. These helpers normalize user input to
that convention and raise :class:`~oneframe.errors.ShapeError` early, in the
spirit of scikit-learn's ``check_array``.
"""

import numpy as np

from .errors import ShapeError

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


def as_float32(x, name="array") -> np.ndarray:
    """Return ``x`` as a float32 ndarray, rejecting non-finite values."""
    arr = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains NaN or Inf")
    return arr


def check_tensor5(x, name="tensor") -> np.ndarray:
    """Validate a 5-axis (batch, channel, time, height, width) array."""
    arr = as_float32(x, name)
    if arr.ndim != 5:
        raise ShapeError(f"{name} must have 5 axes (n, c, t, h, w), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has an empty axis: shape {arr.shape}")
    return arr


def check_clip_batch(x, name="clips", pixel_range=True) -> np.ndarray:
    """Validate a batch of clips; single clips (c, t, h, w) gain a batch axis."""
    arr = as_float32(x, name)
    if arr.ndim == 4:
        arr = arr[None]
    arr = check_tensor5(arr, name)
    if pixel_range:
        lo, hi = float(arr.min()), float(arr.max())
        if lo < PIXEL_MIN - 1e-3 or hi > PIXEL_MAX + 1e-3:
            raise ShapeError(f"{name} pixels outside [0, 255]: range [{lo}, {hi}]")
    return arr


def check_labels(y, n, num_classes, name="labels") -> np.ndarray:
    """Validate 1-based class labels for ``n`` samples."""
    labels = np.asarray(y)
    if labels.shape == ():
        labels = labels[None]
    if labels.shape != (n,):
        raise ShapeError(f"{name} must have shape ({n},), got {labels.shape}")
    labels = labels.astype(np.int64)
    if labels.min(initial=1) < 1 or labels.max(initial=num_classes) > num_classes:
        raise ValueError(f"{name} must lie in [1, {num_classes}]")
    return labels


def check_frame_index(i, clip_length, name="frame") -> int:
    """Validate a 1-based frame index."""
    i = int(i)
    if not 1 <= i <= clip_length:
        raise ValueError(f"{name} index {i} outside [1, {clip_length}]")
    return i


def check_frame_set(frames, clip_length, name="frames") -> tuple:
    """Validate a non-empty set of 1-based frame indices; returns sorted tuple."""
    idx = sorted({check_frame_index(i, clip_length, name) for i in frames})
    if not idx:
        raise ValueError(f"{name} must be non-empty")
    return tuple(idx)
