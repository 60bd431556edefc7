"""Seeded randomness and numerically stable primitives.

All arrays are float64 and C-contiguous (row-major). Gaussian draws come from
numpy's ``Generator`` backed by PCG64 using the ziggurat normal sampler; the
stream is reproducible for a fixed seed and numpy version, which is the only
guarantee we make.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def as_mat(x, name: str = "array") -> np.ndarray:
    """Coerce to a finite 2-D float64 C-contiguous array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def sample_gaussian(rng: np.random.Generator, rows: int, cols: int, mean=None) -> np.ndarray:
    """Draw a ``rows x cols`` matrix of i.i.d. N(mean, 1) entries.

    ``mean`` may be None (zero), a full ``rows x cols`` matrix, or a single
    row broadcast to every row.
    """
    noise = rng.standard_normal((rows, cols))
    if mean is None:
        return noise
    mu = np.asarray(mean, dtype=np.float64)
    if mu.ndim == 1:
        mu = mu[None, :]
    if mu.ndim != 2 or mu.shape[1] != cols or mu.shape[0] not in (1, rows):
        raise ValueError(f"mean of shape {mu.shape} does not match ({rows}, {cols})")
    return noise + mu


def logsumexp(values, axis=None, keepdims: bool = False):
    """Shift-stabilized ``log(sum(exp(values)))``.

    Entries equal to ``-inf`` are treated as masked; a slice that is entirely
    masked yields ``-inf``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty input")
    top = np.max(v, axis=axis, keepdims=True)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):  # fully masked slices give log(0) = -inf
        out = np.log(np.sum(np.exp(v - safe_top), axis=axis, keepdims=True)) + safe_top
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if np.ndim(out) == 0:
        return float(out)
    return out


def stable_softmax(logits, axis: int = -1) -> np.ndarray:
    """Softmax with per-slice max subtraction. ``-inf`` logits get zero weight."""
    v = np.asarray(logits, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty input")
    top = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - top)
    return e / np.sum(e, axis=axis, keepdims=True)
