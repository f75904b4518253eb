"""Group-relative advantages and length-aware reward shaping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class AdvantageVector:
    A: np.ndarray
    degenerate: bool


def _rewards(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("a reward group needs at least two entries")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    return r


def group_advantages(r) -> AdvantageVector:
    """Standardize rewards within a group (population std).

    Zero-variance groups carry no signal and map to all-zero advantages.
    """
    r = _rewards(r)
    centered = r - r.mean()
    std = np.sqrt(np.mean(centered * centered))
    if std < DEGENERATE_STD:
        return AdvantageVector(np.zeros_like(r), True)
    return AdvantageVector(centered / std, False)


def _all_correct(r: np.ndarray) -> bool:
    return bool(np.all(r == 1.0))


def lgrpo_shaped_rewards(r, lengths, L_max: int, lam: float) -> np.ndarray:
    """Add ``lam * (1 - L_i / L_max)`` to every reward, but only when the whole
    group is correct; otherwise the rewards pass through unchanged."""
    r = _rewards(r)
    L = np.asarray(lengths, dtype=np.float64)
    if L.shape != r.shape:
        raise ValueError("lengths and rewards differ in size")
    if np.any(L > L_max):
        raise ValueError(f"length exceeds L_max={L_max}")
    if not _all_correct(r):
        return r.copy()
    return r + lam * (1.0 - L / L_max)


def variant_minmax(r, lengths, lam: float) -> np.ndarray:
    """Bonus ``lam * (max L - L_i) / (max L - min L)`` on all-correct groups.

    Equal lengths give no bonus.
    """
    r = _rewards(r)
    L = np.asarray(lengths, dtype=np.float64)
    if not _all_correct(r):
        return r.copy()
    span = L.max() - L.min()
    if span == 0:
        return r.copy()
    return r + lam * (L.max() - L) / span


def variant_groupshare(r, lengths) -> np.ndarray:
    """Scale correct rewards by (n_correct - 1) / n_correct and hand incorrect
    rollouts a share of one unit, larger for shorter responses."""
    r = _rewards(r)
    L = np.asarray(lengths, dtype=np.float64)
    correct = r != 0
    n_correct = int(correct.sum())
    first = (n_correct - 1) / n_correct * r if n_correct else np.zeros_like(r)
    L_hat = np.where(correct, 0.0, 1.0 - L / L.sum())
    total = L_hat.sum()
    second = L_hat / total if total != 0 else np.zeros_like(r)
    return first + second


SHAPERS = ("lgrpo", "minmax", "groupshare", "none")


def shaped_rewards(kind: str, r, lengths, L_max: int, lam: float) -> np.ndarray:
    if kind == "lgrpo":
        return lgrpo_shaped_rewards(r, lengths, L_max, lam)
    if kind == "minmax":
        return variant_minmax(r, lengths, lam)
    if kind == "groupshare":
        return variant_groupshare(r, lengths)
    if kind == "none":
        return _rewards(r).copy()
    raise ValueError(f"unknown reward shaping {kind!r}; expected one of {SHAPERS}")
