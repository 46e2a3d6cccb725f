"""Input validation helpers and shared exceptions."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

__all__ = [
    "NotFittedError",
    "SampleSkipped",
    "PluginUnavailable",
    "check_image",
    "check_score_map",
    "check_mask",
    "check_same_shape",
    "quantize_scores",
]


class SampleSkipped(RuntimeError):
    """A forgery could not be placed within the retry budget."""


class PluginUnavailable(RuntimeError):
    """A named plug-in (pretrained network) is not installed or has no weights."""


def check_image(image, *, name="image"):
    """Return ``image`` as an ``(H, W, 3)`` uint8 array.

    Grayscale inputs are broadcast to three channels and float inputs in
    ``[0, 1]`` are rescaled to 8 bits.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
        raise ValueError(f"{name} must be HxW or HxWxC, got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} has an empty spatial extent")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            if arr.max(initial=0) <= 1.0:
                arr = arr * 255.0
            arr = np.clip(np.rint(arr), 0, 255)
        else:
            arr = np.clip(arr, 0, 255)
        arr = arr.astype(np.uint8)
    return np.ascontiguousarray(arr)


def check_score_map(scores, shape=None, *, name="score map"):
    """Return ``scores`` as a float64 2-D array with values in ``[0, 1]``."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_mask(mask, shape=None, *, name="mask"):
    """Return a boolean 2-D mask. Nonzero entries are positives."""
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[2] in (1, 3):
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    return arr != 0


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a) for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"shape mismatch between {label}: {shapes}")


def quantize_scores(scores):
    """Round scores to the 16-bit grid used for PNG export."""
    return np.rint(np.asarray(scores, dtype=np.float64) * 65535.0) / 65535.0
