"""Numerically stable probability primitives.

Temperature softmax, log-sum-exp, KL divergence, and the two projections
that split a C-way prediction: the binary (target vs all-other-classes)
probabilities, and the renormalized distribution over the non-target
classes alone.

All math is double precision. Functions are pure and never mutate their
inputs, so they are safe to call from any number of threads.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

# Temperatures at or above this return the infinite-temperature limit
# (uniform distribution) instead of erroring; keeps sweeps robust.
UNIFORM_TEMPERATURE_LIMIT = 1e6

# Probability mass below this is treated as an exact zero in KL sums,
# implementing the 0*log(0) = 0 convention on the p side. The q side is
# floored at Q_FLOOR inside the log only.
ZERO_MASS = 1e-15
Q_FLOOR = 1e-12


class BinaryProbs(NamedTuple):
    """Mass on the target class and the summed mass on everything else."""

    p_target: float
    p_nontarget: float


def _finite_array(z, name: str) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values")
    return arr


def _check_temperature(temperature: float) -> float:
    t = float(temperature)
    if not np.isfinite(t) or t <= 0.0:
        raise ValueError(f"temperature must be a positive finite real, got {temperature!r}")
    return t


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis.

    Computes softmax(z / T) with max-subtraction, so no overflow occurs
    for any finite logits (|z| up to ~1e300). Accepts a single logit
    vector or a batch (softmax is taken row-wise).
    """
    z = _finite_array(logits, "logits")
    t = _check_temperature(temperature)
    if z.shape[-1] < 1:
        raise ValueError("logits must have at least one class")
    if t >= UNIFORM_TEMPERATURE_LIMIT:
        return np.full_like(z, 1.0 / z.shape[-1])
    s = z / t
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_sum_exp(logits) -> float:
    """log(sum(exp(z_i))) via max-shift; exact for a single element."""
    z = _finite_array(logits, "logits")
    if z.ndim != 1 or z.size == 0:
        raise ValueError("log_sum_exp expects a nonempty 1-D vector")
    m = z.max()
    if z.size == 1:
        return float(m)
    return float(m + np.log(np.exp(z - m).sum()))


def kl_divergence(p, q) -> float:
    """KL(p || q) = sum_i p_i * log(p_i / q_i) for two distributions.

    Terms with p_i below ZERO_MASS are skipped (0*log(0) = 0); q_i is
    floored at Q_FLOOR inside the log. The result can round to a tiny
    negative (>= -1e-12) when p == q.
    """
    pa = _finite_array(p, "p")
    qa = _finite_array(q, "q")
    if pa.ndim != 1 or qa.ndim != 1:
        raise ValueError("kl_divergence expects 1-D distributions")
    if pa.shape != qa.shape:
        raise ValueError(f"p and q must have the same length, got {pa.size} vs {qa.size}")
    mask = pa > ZERO_MASS
    safe_p = np.where(mask, pa, 1.0)
    terms = np.where(mask, safe_p * (np.log(safe_p) - np.log(np.maximum(qa, Q_FLOOR))), 0.0)
    return float(terms.sum())


def binary_probs(logits, target: int, temperature: float = 1.0) -> BinaryProbs:
    """Target-vs-rest probabilities of a logit vector at temperature T.

    p_nontarget is the summed non-target mass rather than 1 - p_target,
    which keeps p_target + p_nontarget equal to the total softmax mass
    to within rounding.
    """
    z = _finite_array(logits, "logits")
    if z.ndim != 1:
        raise ValueError("binary_probs expects a 1-D logit vector")
    c = z.size
    if c < 2:
        raise ValueError("binary_probs requires at least 2 classes")
    t = int(target)
    if not 0 <= t < c:
        raise ValueError(f"target index {target} out of range for {c} classes")
    p = softmax(z, temperature)
    nontarget = float(np.delete(p, t).sum())
    return BinaryProbs(p_target=float(p[t]), p_nontarget=nontarget)


def nontarget_probs(logits, target: int, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the C-1 non-target logits at temperature T.

    Output ordering is the original class order with index `target`
    removed. By construction the result does not depend on the
    target-class logit at all.
    """
    z = _finite_array(logits, "logits")
    if z.ndim != 1:
        raise ValueError("nontarget_probs expects a 1-D logit vector")
    c = z.size
    if c < 2:
        raise ValueError("nontarget_probs requires at least 2 classes")
    t = int(target)
    if not 0 <= t < c:
        raise ValueError(f"target index {target} out of range for {c} classes")
    return softmax(np.delete(z, t), temperature)
