"""Arithmetic on finite token distributions.

Distributions are plain 1-D ``numpy`` float arrays, one entry per token.
:func:`as_dist` is the checked entry point; the remaining functions assume
well-formed input and only verify that paired arguments share a vocabulary,
because several callers (the lossy target, residual recipes) legitimately
pass non-normalized weight vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import entr, xlogy

SUM_TOL = 1e-9
NEG_TOL = 1e-12


class DistributionError(ValueError):
    pass


class VocabMismatch(DistributionError):
    pass


@dataclass(frozen=True)
class Vocab:
    size: int
    labels: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise DistributionError(f"vocab size must be an integer >= 2, got {self.size}")
        if self.labels is not None and len(self.labels) != self.size:
            raise DistributionError("labels must name every token")

    def label(self, token: int) -> str:
        return self.labels[token] if self.labels else str(token)


@dataclass(frozen=True)
class Violation:
    """First invariant a candidate distribution breaks."""

    reason: str
    index: Optional[int] = None
    value: Optional[float] = None

    def __str__(self):
        where = f" at index {self.index}" if self.index is not None else ""
        return f"{self.reason}{where}"


def validate(d: Sequence[float], size: Optional[int] = None) -> Optional[Violation]:
    """Return ``None`` if `d` is a distribution, else the first violation.

    Entries down to ``-NEG_TOL`` are tolerated (they are clamped by
    :func:`as_dist`); the total must be within ``SUM_TOL`` of one.
    """
    arr = np.asarray(d, dtype=float)
    if arr.ndim != 1:
        return Violation("not one-dimensional")
    if size is not None and arr.shape[0] != size:
        return Violation(f"length {arr.shape[0]} != vocab size {size}")
    if arr.shape[0] < 2:
        return Violation(f"vocab size {arr.shape[0]} < 2")
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        return Violation("non-finite entry", int(bad[0]), float(arr[bad[0]]))
    neg = np.flatnonzero(arr < -NEG_TOL)
    if neg.size:
        return Violation(f"negative entry {arr[neg[0]]:.3g}", int(neg[0]), float(arr[neg[0]]))
    total = float(arr.sum())
    if abs(total - 1.0) > SUM_TOL:
        return Violation(f"sum = {total:.12g}", None, total)
    return None


def as_dist(d: Sequence[float], size: Optional[int] = None) -> np.ndarray:
    """Validate, clamp tiny negatives to zero and renormalize.

    Renormalization only happens when something was clamped, so an
    already-valid vector comes back bit-identical.  The result is read-only
    so cached model lookups can share it without defensive copies.
    """
    violation = validate(d, size)
    if violation is not None:
        raise DistributionError(str(violation))
    arr = np.array(d, dtype=float)
    if np.any(arr < 0):
        np.maximum(arr, 0.0, out=arr)
        arr /= arr.sum()
    arr.setflags(write=False)
    return arr


def _same_vocab(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise VocabMismatch(f"vocab mismatch: {a.shape[0]} vs {b.shape[0]}")


def tv_distance(p: Sequence[float], q: Sequence[float]) -> float:
    """Total variation distance, as the one-sided sum of positive gaps."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _same_vocab(p, q)
    return float(np.maximum(p - q, 0.0).sum())


def entropy(d: Sequence[float]) -> float:
    """Shannon entropy in nats."""
    return float(entr(np.asarray(d, dtype=float)).sum())


def cross_entropy(truth: Sequence[float], model: Sequence[float]) -> float:
    """``-sum truth * log model``; ``inf`` when `model` misses truth's support."""
    t = np.asarray(truth, dtype=float)
    m = np.asarray(model, dtype=float)
    _same_vocab(t, m)
    return float(-xlogy(t, m).sum())


def mode(d: Sequence[float]) -> tuple[int, float]:
    # np.argmax returns the first maximal index, which is the tie-break we want
    arr = np.asarray(d, dtype=float)
    i = int(np.argmax(arr))
    return i, float(arr[i])


def max_prob(d: Sequence[float]) -> float:
    return float(np.max(d))


def one_hot(token: int, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[token] = 1.0
    return out


def normalize(w: Sequence[float]) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    total = w.sum()
    if not total > 0:
        raise DistributionError("cannot normalize a vector with zero mass")
    return w / total


def apply_temperature(d: Sequence[float], temperature: float) -> np.ndarray:
    """Sharpen or flatten `d` by raising probabilities to ``1/T``.

    ``T == 0`` is the greedy limit and returns a one-hot at the mode.
    """
    if not np.isfinite(temperature) or temperature < 0:
        raise ValueError(f"temperature must be finite and >= 0, got {temperature}")
    arr = np.asarray(d, dtype=float)
    if temperature == 0:
        return one_hot(mode(arr)[0], arr.shape[0])
    if temperature == 1:
        return arr.copy()
    # scale by the max first so small T underflows only the non-modal mass
    w = (arr / arr.max()) ** (1.0 / temperature)
    return w / w.sum()


def binary_mixture(q: Sequence[float], p: Sequence[float], delta: int) -> np.ndarray:
    """``(1 - delta) * q + delta * p`` for a hard decision ``delta``."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    _same_vocab(q, p)
    if delta not in (0, 1):
        raise ValueError(f"delta must be 0 or 1, got {delta}")
    return (p if delta else q).copy()


def residual(pi: Sequence[float], q: Sequence[float]) -> Optional[np.ndarray]:
    """``norm(max(0, pi - q))``, or ``None`` when that vector has no mass."""
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float)
    _same_vocab(pi, q)
    gap = np.maximum(pi - q, 0.0)
    z = gap.sum()
    if z <= 0.0:
        return None
    return gap / z
