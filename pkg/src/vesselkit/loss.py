"""Cross-entropy losses for extremely imbalanced voxel labels.

Three losses are provided: plain mean cross entropy, the unnormalised
class-balanced form (kept for comparison, its value grows with the batch),
and the per-class-mean loss with a false-positive/false-negative correction
term whose weights depend on how far the wrong predictions sit from the
decision threshold.

Class means are computed exactly (the float sum is accumulated as an exact
rational and rounded once), so repeating every voxel ``n`` times leaves the
means bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

EPS = 1e-7


def clamp_probs(probs) -> np.ndarray:
    return np.clip(np.asarray(probs, dtype=np.float64), EPS, 1.0 - EPS)


def exact_sum(values) -> Fraction:
    """Exact rational sum of float64 values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return Fraction(0)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite value in exact sum")
    mant, expo = np.frexp(v)
    ints = np.ldexp(mant, 53).astype(np.int64)
    # ints * 2**(expo - 53) == v exactly; split so bucket sums cannot overflow
    hi = ints >> 26
    lo = ints - (hi << 26)
    total = 0
    emin = int(expo.min())
    for e in np.unique(expo):
        sel = expo == e
        s = (int(hi[sel].sum()) << 26) + int(lo[sel].sum())
        total += s << int(e - emin)
    return Fraction(total) * Fraction(2) ** (emin - 53)


def exact_ratio(values, denom) -> float:
    """``sum(values) / denom`` rounded once to the nearest float."""
    return float(exact_sum(values) / int(denom))


def _prep(probs, labels):
    p = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    y = np.asarray(getattr(labels, "data", labels))
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probs {p.shape} vs labels {y.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return p.ravel(), y.ravel().astype(bool)


@dataclass(frozen=True)
class ClassPartition:
    """Positive/negative voxels and the false predictions at ``threshold``."""

    positives: np.ndarray
    negatives: np.ndarray
    false_positives: np.ndarray
    false_negatives: np.ndarray
    threshold: float = 0.5

    @classmethod
    def from_arrays(cls, probs, labels, threshold: float = 0.5) -> "ClassPartition":
        p, y = _prep(probs, labels)
        predicted = p >= threshold
        return cls(
            positives=np.flatnonzero(y),
            negatives=np.flatnonzero(~y),
            false_positives=np.flatnonzero(~y & predicted),
            false_negatives=np.flatnonzero(y & ~predicted),
            threshold=float(threshold),
        )


@dataclass(frozen=True)
class LossValue:
    l1: float
    l2: float
    gamma1: float
    gamma2: float
    total: float
    absent_class: Optional[str] = None


def standard_ce(probs, labels) -> float:
    """Mean binary cross entropy (natural log)."""
    p, y = _prep(probs, labels)
    pc = clamp_probs(p)
    terms = np.where(y, np.log(pc), np.log1p(-pc))
    return -exact_ratio(terms, p.size)


def class_balanced_ce(probs, labels) -> float:
    """Unnormalised class-balanced cross entropy with ``beta = |Y-| / |Y|``."""
    p, y = _prep(probs, labels)
    pc = clamp_probs(p)
    beta = Fraction(int((~y).sum()), p.size)
    pos = exact_sum(np.log(pc[y]))
    neg = exact_sum(np.log1p(-pc[~y]))
    return -float(beta * pos + (1 - beta) * neg)


def _gamma(wrong_probs: np.ndarray, threshold: float) -> float:
    if wrong_probs.size == 0:
        return 0.0
    return float(Fraction(1, 2) + exact_sum(np.abs(wrong_probs - threshold)) / wrong_probs.size)


def loss_weights(probs, labels, threshold: float = 0.5, correction: bool = True):
    """Per-voxel coefficients ``(a, b, info)`` of the corrected loss.

    The loss equals ``sum(a * -log(P) + b * -log(1 - P))`` with the partition
    and the gammas held fixed, which is how gradients treat them.
    """
    p, y = _prep(probs, labels)
    predicted = p >= threshold
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    fp = ~y & predicted
    fn = y & ~predicted
    g1 = _gamma(p[fp], threshold)
    g2 = _gamma(p[fn], threshold)
    a = np.zeros(p.shape)
    b = np.zeros(p.shape)
    absent = None
    if n_pos:
        a[y] = 1.0 / n_pos
        if correction:
            b[fp] += g1 / n_pos
    else:
        absent = "positive"
    if n_neg:
        b[~y] += 1.0 / n_neg
        if correction:
            a[fn] += g2 / n_neg
    else:
        absent = "negative"
    return a, b, {"gamma1": g1, "gamma2": g2, "absent_class": absent,
                  "n_pos": n_pos, "n_neg": n_neg, "fp": fp, "fn": fn}


def balanced_fp_loss(probs, labels, threshold: float = 0.5,
                     gammas: Optional[tuple[float, float]] = None) -> LossValue:
    """Per-class-mean cross entropy plus the false-prediction correction.

    ``l1`` averages ``-log P`` over positives and ``-log(1-P)`` over
    negatives separately.  ``l2`` adds ``gamma1 / |Y+|`` times the false
    positives' ``-log(1-P)`` and ``gamma2 / |Y-|`` times the false negatives'
    ``-log P``; each gamma is ``0.5`` plus the mean distance of the wrong
    probabilities from ``threshold`` (reported as 0 when there are none).
    If a class is absent from the batch, its terms are dropped and named in
    ``absent_class``.  ``gammas`` freezes ``(gamma1, gamma2)`` at given values,
    which is the function the gradient differentiates.
    """
    p, y = _prep(probs, labels)
    pc = clamp_probs(p)
    log_p = np.log(pc)
    log_q = np.log1p(-pc)
    predicted = p >= threshold
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    fp = ~y & predicted
    fn = y & ~predicted
    g1 = _gamma(p[fp], threshold)
    g2 = _gamma(p[fn], threshold)
    if gammas is not None:
        g1, g2 = (float(g) for g in gammas)

    absent = None
    l1 = Fraction(0)
    l2 = Fraction(0)
    if n_pos:
        l1 -= exact_sum(log_p[y]) / n_pos
        if fp.any():
            l2 -= Fraction(g1) * exact_sum(log_q[fp]) / n_pos
    else:
        absent = "positive"
    if n_neg:
        l1 -= exact_sum(log_q[~y]) / n_neg
        if fn.any():
            l2 -= Fraction(g2) * exact_sum(log_p[fn]) / n_neg
    else:
        absent = "negative"
    l1f, l2f = float(l1), float(l2)
    return LossValue(l1f, l2f, g1, g2, l1f + l2f, absent)


def balanced_fp_loss_grad(probs, labels, threshold: float = 0.5, correction: bool = True) -> np.ndarray:
    """``d total / d P`` per voxel, partition and gammas held constant.

    Probabilities are clamped before the division, matching the clamped logs
    of the loss value.  ``correction=False`` gives the gradient of ``l1`` alone.
    """
    a, b, _ = loss_weights(probs, labels, threshold, correction)
    pc = clamp_probs(np.asarray(getattr(probs, "data", probs)).ravel())
    grad = -a / pc + b / (1.0 - pc)
    return grad.reshape(np.shape(getattr(probs, "data", probs)))
