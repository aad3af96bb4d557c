"""Numerically robust primitives over dense probability vectors.

Every function accepts anything convertible to a 1-D float array and
computes in float64.  A probability vector is finite, non-negative, and
sums to 1 within PROB_SUM_TOL; vectors produced by this module are
accurate to FRESH_SUM_TOL.  Divergences use the natural logarithm and
define 0 * ln(0) = 0.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateSpan, DivergenceUndefined, InvalidArgument

# Tolerance accepted on externally supplied vectors (for example vectors
# reconstructed from float32 trace payloads).
PROB_SUM_TOL = 1e-6
# Tolerance guaranteed on vectors this module computes itself.
FRESH_SUM_TOL = 1e-9

LN2 = float(np.log(2.0))


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgument(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidArgument(f"{name} must be non-empty")
    return arr


def validate_probs(values, *, name: str = "p", tol: float = PROB_SUM_TOL) -> np.ndarray:
    """Validate a probability vector and return it as float64."""
    arr = _as_vector(values, name)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} must be finite")
    if np.any(arr < 0.0):
        raise InvalidArgument(f"{name} must be non-negative")
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        raise InvalidArgument(f"{name} must sum to 1 within {tol}, got {total!r}")
    return arr


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction for overflow safety."""
    arr = _as_vector(logits, "logits")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("logits must be finite")
    if not (temperature > 0.0) or not np.isfinite(temperature):
        raise InvalidArgument(f"temperature must be positive and finite, got {temperature!r}")
    scaled = arr / temperature
    scaled -= scaled.max()
    exps = np.exp(scaled)
    return exps / exps.sum()


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Log of softmax computed without forming intermediate probabilities."""
    arr = _as_vector(logits, "logits")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("logits must be finite")
    if not (temperature > 0.0) or not np.isfinite(temperature):
        raise InvalidArgument(f"temperature must be positive and finite, got {temperature!r}")
    scaled = arr / temperature
    scaled -= scaled.max()
    return scaled - np.log(np.exp(scaled).sum())


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats.  Undefined when p has mass where q has none."""
    p_arr = validate_probs(p, name="p")
    q_arr = validate_probs(q, name="q")
    if p_arr.shape != q_arr.shape:
        raise InvalidArgument(
            f"p and q must have equal length, got {p_arr.size} and {q_arr.size}"
        )
    support = p_arr > 0.0
    if np.any(q_arr[support] == 0.0):
        raise DivergenceUndefined("q has zero mass on the support of p")
    terms = p_arr[support] * np.log(p_arr[support] / q_arr[support])
    return max(float(terms.sum()), 0.0)


def _kl_against_mixture(p: np.ndarray, m: np.ndarray) -> float:
    # m is the even mixture of two probability vectors, so m > 0 wherever
    # p > 0 and the divergence is always defined.
    support = p > 0.0
    terms = p[support] * np.log(p[support] / m[support])
    return float(terms.sum())


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; symmetric and bounded by ln 2."""
    p_arr = validate_probs(p, name="p")
    q_arr = validate_probs(q, name="q")
    if p_arr.shape != q_arr.shape:
        raise InvalidArgument(
            f"p and q must have equal length, got {p_arr.size} and {q_arr.size}"
        )
    m = 0.5 * (p_arr + q_arr)
    value = 0.5 * _kl_against_mixture(p_arr, m) + 0.5 * _kl_against_mixture(q_arr, m)
    return max(value, 0.0)


def normalize_span(weights) -> np.ndarray:
    """Normalize non-negative span weights to a probability vector."""
    arr = _as_vector(weights, "weights")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("weights must be finite")
    if np.any(arr < 0.0):
        raise InvalidArgument("weights must be non-negative")
    total = float(arr.sum())
    if total <= 0.0:
        raise DegenerateSpan("span has no positive attention mass")
    return arr / total
