"""Input checks shared by the estimator facade and the command line."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ValidationError


def check_mask(mask, n_channels: int, name: str = "loading") -> np.ndarray:
    """Boolean per-channel mask of length ``n_channels`` with at least one channel lit."""
    arr = np.asarray(mask)
    if arr.shape != (n_channels,):
        raise ValidationError(f"{name} must have shape ({n_channels},), got {arr.shape}")
    if arr.dtype != bool:
        if not np.all(np.isin(arr, (0, 1))):
            raise ValidationError(f"{name} must be boolean")
        arr = arr.astype(bool)
    if not arr.any():
        raise ValidationError(f"{name} has no active channel")
    return arr


def check_masks(masks, n_channels: int) -> np.ndarray:
    """2-D stack of loading masks, one row per scenario."""
    arr = np.asarray(masks)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValidationError(f"loading masks must be 1-D or 2-D, got {arr.ndim}-D")
    return np.stack([check_mask(row, n_channels, f"loading[{i}]") for i, row in enumerate(arr)])


def check_positive(value, name: str, allow_zero: bool = False) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValidationError(f"{name} must be a finite number")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValidationError(f"{name} must be {'non-negative' if allow_zero else 'positive'}")
    return float(value)


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral) or seed < 0:
        raise ValidationError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)


def check_stage(stage, lo: int = 1, hi: int = 5) -> int:
    if isinstance(stage, bool) or not isinstance(stage, numbers.Integral) or not lo <= stage <= hi:
        raise ValidationError(f"stage must be an integer within {lo}..{hi}, got {stage!r}")
    return int(stage)


def check_range(pair, name: str) -> tuple:
    try:
        lo, hi = (float(x) for x in pair)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} must be a (low, high) pair") from exc
    if lo > hi:
        raise ValidationError(f"{name} low bound exceeds high bound")
    return lo, hi
