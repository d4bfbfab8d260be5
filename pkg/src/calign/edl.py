"""Beta-evidential classification head math.

A per-anchor binary classifier emits a logit f and an evidence total λ > 0.
The Beta parameters are α = λ·sigmoid(f), β = λ·sigmoid(-f), so the marginal
mean α/(α+β) = sigmoid(f) is independent of λ while the spread (and the
derived uncertainty) is governed by λ alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidEvidenceError, InvalidInputError
from .util import sigmoid as _sigmoid_any

__all__ = [
    "BetaParams",
    "beta_from_logit",
    "uncertainty",
    "edl_marginal_nll",
    "quadrature_marginal_nll",
    "evidence_regularizer",
    "softplus_lambda",
    "LAMBDA_FLOOR",
]

LAMBDA_FLOOR = 1e-6
_MEAN_CLAMP = 1e-7


@dataclass
class BetaParams:
    """Beta(α, β) evidence; scalars or same-shape arrays, strictly positive."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if a.shape != b.shape:
            raise InvalidEvidenceError(f"alpha/beta shapes differ: {a.shape} vs {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidEvidenceError("evidence parameters must be finite")
        if np.any(a <= 0) or np.any(b <= 0):
            raise InvalidEvidenceError("evidence parameters must be strictly positive")
        self.alpha = a
        self.beta = b


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.asarray(_sigmoid_any(x), dtype=np.float64)


def beta_from_logit(f, lam) -> BetaParams:
    """Scale the unit split (sigmoid(f), sigmoid(-f)) by total evidence λ."""
    f = np.asarray(f, dtype=np.float64)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), f.shape).copy()
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("logit must be finite")
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise InvalidEvidenceError("evidence total must be finite and > 0")
    p = _sigmoid(f)
    # sigmoid(f)*exp(-f) == sigmoid(-f); the latter is the overflow-safe form
    return BetaParams(lam * p, lam * _sigmoid(-f))


def uncertainty(b: BetaParams):
    """Beta variance-based uncertainty αβ / ((α+β+1)(α+β)^2), in (0, 0.25]."""
    s = b.alpha + b.beta
    u = (b.alpha * b.beta) / ((s + 1.0) * s * s)
    return u if u.ndim else float(u)


def edl_marginal_nll(y, b: BetaParams):
    """Closed-form NLL of a binary label under the Beta-marginal Bernoulli.

    Equals -y·log(mean) - (1-y)·log(1-mean) with mean = α/(α+β) clamped to
    [1e-7, 1-1e-7] before the logs.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise InvalidInputError("label must be binary")
    mean = np.clip(b.alpha / (b.alpha + b.beta), _MEAN_CLAMP, 1.0 - _MEAN_CLAMP)
    nll = -(y * np.log(mean) + (1.0 - y) * np.log(1.0 - mean))
    return nll if nll.ndim else float(nll)


def quadrature_marginal_nll(y, b: BetaParams, nodes: int = 256):
    """Numerical marginal NLL: -log ∫ p^y (1-p)^(1-y) Beta(p; α, β) dp.

    Integrates on (0, 1) with a tanh-sinh rule evaluated in log space, which
    keeps full accuracy for the integrable endpoint singularities that appear
    when α or β < 1. Exists to validate edl_marginal_nll, not for training.
    """
    if nodes < 64:
        raise InvalidInputError(f"need at least 64 nodes, got {nodes}")
    y = float(np.asarray(y, dtype=np.float64))
    if y not in (0.0, 1.0):
        raise InvalidInputError("label must be binary")
    alpha = np.atleast_1d(np.asarray(b.alpha, dtype=np.float64))
    beta = np.atleast_1d(np.asarray(b.beta, dtype=np.float64))
    out = np.empty(alpha.shape, dtype=np.float64)
    for idx in np.ndindex(alpha.shape):
        out[idx] = _tanh_sinh_nll(y, float(alpha[idx]), float(beta[idx]), nodes)
    arr = np.asarray(b.alpha, dtype=np.float64)
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def _tanh_sinh_nll(y: float, alpha: float, beta: float, nodes: int) -> float:
    a = alpha + y
    bb = beta + (1.0 - y)
    # Substitution p = sigmoid(pi*sinh(t)); pick T so the integrand tails
    # decay below ~exp(-45) relative to the peak for the weaker exponent.
    t_max = math.asinh(max(3.0, 45.0 / (math.pi * min(a, bb))))
    t = np.linspace(-t_max, t_max, nodes)
    x = math.pi * np.sinh(t)
    log_p = -np.logaddexp(0.0, -x)
    log_q = -np.logaddexp(0.0, x)
    log_dpdt = np.log(math.pi * np.cosh(t)) + log_p + log_q
    log_b = math.lgamma(alpha) + math.lgamma(beta) - math.lgamma(alpha + beta)
    log_f = (a - 1.0) * log_p + (bb - 1.0) * log_q + log_dpdt - log_b
    m = np.max(log_f)
    log_integral = m + math.log(np.sum(np.exp(log_f - m))) + math.log(t[1] - t[0])
    return -log_integral


def evidence_regularizer(l, lam):
    """Sum of (l_j - 1/λ_j)^2 with its gradient w.r.t. λ only.

    l is treated as a constant (detached classification loss per anchor);
    returns (loss, d_loss/d_λ elementwise).
    """
    l = np.asarray(l, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if l.shape != lam.shape:
        raise InvalidInputError(f"loss/evidence shapes differ: {l.shape} vs {lam.shape}")
    if not np.all(np.isfinite(l)):
        raise InvalidInputError("classification losses must be finite")
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise InvalidEvidenceError("evidence total must be finite and > 0")
    resid = l - 1.0 / lam
    loss = float(np.sum(resid * resid))
    dlam = 2.0 * resid / (lam * lam)
    return loss, dlam


def softplus_lambda(raw):
    """Map a raw head output to λ via softplus with floor 1e-6.

    Returns (λ, dλ/draw); the gradient is zero wherever the floor binds.
    """
    raw = np.asarray(raw, dtype=np.float64)
    sp = np.where(raw > 30.0, raw, np.log1p(np.exp(np.minimum(raw, 30.0))))
    lam = np.maximum(sp, LAMBDA_FLOOR)
    grad = np.where(sp > LAMBDA_FLOOR, _sigmoid(raw), 0.0)
    return lam, grad
