"""Argument checks shared by the estimators and the CLI."""

from __future__ import annotations

import numbers

import numpy as np


def check_rng(seed) -> np.random.Generator:
    """Turn ``None``, an int, a ``SeedSequence`` or a ``Generator`` into a ``Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a random generator from {type(seed).__name__}")


def child_rngs(seed, n: int) -> list:
    """Independent streams derived from one root seed by fixed offsets."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def check_probability(p, name="p") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError(f"{name} must lie in [0, 1]")
    return p


def check_positive(x, name="value", strict=True):
    bad = x <= 0 if strict else x < 0
    if not np.isfinite(x) or bad:
        raise ValueError(f"{name} must be {'> 0' if strict else '>= 0'}, got {x}")
    return x
