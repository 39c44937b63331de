"""Error and coverage metrics."""

from __future__ import annotations

import numpy as np


def relative_l2(pred, ref) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    den = np.linalg.norm(ref)
    if den == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(pred - ref) / den)


def relative_l2_per_time(pred, ref) -> np.ndarray:
    """Spatial RL2E for each leading (time) index."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    axes = tuple(range(1, ref.ndim))
    return np.sqrt(((pred - ref) ** 2).sum(axis=axes) / (ref**2).sum(axis=axes))


def max_relative_l2(pred, ref) -> float:
    """Maximum over output times of the spatial RL2E."""
    return float(relative_l2_per_time(pred, ref).max())


def ci_coverage(lo, hi, values) -> float:
    """Fraction of ``values`` inside ``[lo, hi]`` (all of one shape)."""
    lo, hi, v = (np.asarray(a, dtype=np.float64) for a in (lo, hi, values))
    if not lo.shape == hi.shape == v.shape:
        raise ValueError("band and values must share a shape")
    return float(np.mean((v >= lo) & (v <= hi)))
