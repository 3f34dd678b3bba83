"""Experimental: frame-difference shot boundary detection over raw frame stacks.

Only plumbing for real footage; the synthetic pipeline never calls it.
"""
from __future__ import annotations

import numpy as np


def frame_differences(frames: np.ndarray) -> np.ndarray:
    """Mean absolute difference between consecutive frames of [F, ...] -> [F-1]."""
    f = np.asarray(frames, dtype=np.float64)
    if f.shape[0] < 2:
        return np.zeros(0)
    return np.abs(np.diff(f, axis=0)).reshape(f.shape[0] - 1, -1).mean(axis=1)


def split_shots(frames: np.ndarray, threshold: float | None = None, min_len: int = 4) -> list[tuple[int, int]]:
    """Cut wherever the frame difference exceeds ``threshold``.

    The default threshold is median + 6 * MAD of the differences.  Shots
    shorter than ``min_len`` are merged into their predecessor.  Returns
    half-open (start, stop) frame ranges covering every frame.
    """
    n = np.asarray(frames).shape[0]
    if n == 0:
        return []
    d = frame_differences(frames)
    if threshold is None:
        if d.size == 0:
            return [(0, n)]
        med = np.median(d)
        threshold = med + 6.0 * np.median(np.abs(d - med)) + 1e-12
    cuts = [i + 1 for i in np.flatnonzero(d > threshold)]
    bounds = [0]
    for c in cuts:
        if c - bounds[-1] >= min_len:
            bounds.append(c)
    if n - bounds[-1] < min_len and len(bounds) > 1:
        bounds.pop()
    bounds.append(n)
    return list(zip(bounds[:-1], bounds[1:]))
