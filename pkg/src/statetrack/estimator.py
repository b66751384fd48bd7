"""Belief recursions: the gain-based approximate filter and exact Bayes.

Two distinct recursions are maintained deliberately. The gain-based filter
(predict / kalman_update) is the reported estimator; the exact Bayes
recursion (bayes_update) drives decisions. No equivalence between them is
claimed anywhere; episodes run both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionMismatch, SingularInnovation, ValidationError, ZeroEvidence
from .model import MarkovChain, log_likelihood

_JITTER = 1e-10
_SUM_TOL = 1e-9


def clean_belief(p, sum_tol: float = _SUM_TOL) -> np.ndarray:
    """Clamp tiny negatives to 0 and renormalize; reject badly off-simplex input."""
    p = np.asarray(p, dtype=float).reshape(-1)
    if (p < -1e-9).any():
        raise ValidationError(f"belief entry {p.min()} too negative to be rounding noise")
    s = p.sum()
    if abs(s - 1.0) > sum_tol:
        raise ValidationError(f"belief sums to {s}, not 1")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def error_covariance(p) -> np.ndarray:
    """Covariance of the unit-vector state under belief p: diag(p) - p p'."""
    p = np.asarray(p, dtype=float).reshape(-1)
    return np.diag(p) - np.outer(p, p)


@dataclass(frozen=True, eq=False)
class FilterState:
    """Everything one gain-based update produced.

    prediction is the predicted belief the update consumed; pred_cov its
    unit-vector covariance; posterior the clamped+renormalized output;
    l1_correction the total clamping applied before renormalization.
    """

    posterior: np.ndarray
    prediction: np.ndarray
    pred_cov: np.ndarray
    post_cov: np.ndarray
    gain: np.ndarray
    pred_obs: np.ndarray
    mix_cov: np.ndarray
    l1_correction: float


def predict(chain: MarkovChain, posterior) -> np.ndarray:
    """One-step-ahead belief: trans @ posterior."""
    posterior = np.asarray(posterior, dtype=float).reshape(-1)
    return chain.trans @ posterior


def mean_matrix(kernels) -> np.ndarray:
    """d x n matrix whose column i is the mean of state i's kernel."""
    return np.column_stack([k.mean for k in kernels])


def innovation_parts(prediction, kernels):
    """Shared pieces of the gain computation.

    Returns (p, Sigma, M, Qmix, S, gain, pred_obs) where S = M Sigma M' + Qmix
    and gain = Sigma M' S^{-1}. Raises SingularInnovation when S cannot be
    factorized even after a small diagonal jitter.
    """
    p = np.asarray(prediction, dtype=float).reshape(-1)
    n = p.shape[0]
    d = kernels[0].dim
    sigma = error_covariance(p)
    if d == 0:
        return p, sigma, np.zeros((0, n)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((n, 0)), np.zeros(0)
    m = mean_matrix(kernels)
    qmix = np.zeros((d, d))
    for pi, k in zip(p, kernels):
        if pi > 0.0:
            qmix += pi * k.cov
    ms = m @ sigma                      # d x n
    s = ms @ m.T + qmix
    s = 0.5 * (s + s.T)
    try:
        factor = cho_factor(s, lower=True)
    except np.linalg.LinAlgError:
        try:
            factor = cho_factor(s + _JITTER * np.eye(d), lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularInnovation(f"innovation covariance not invertible: {exc}") from exc
    gain = cho_solve(factor, ms).T      # n x d, equals Sigma M' S^{-1}
    pred_obs = m @ p
    return p, sigma, m, qmix, s, gain, pred_obs


def kalman_update(prediction, kernels, y) -> FilterState:
    """Gain-based belief update for one observation.

    d = 0 passes the prediction through unchanged. The raw updated vector may
    exit the simplex; it is clamped to [0, 1] and renormalized, and the
    pre-normalization L1 clamping is recorded as a diagnostic.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    p, sigma, m, qmix, _s, gain, pred_obs = innovation_parts(prediction, kernels)
    d = kernels[0].dim
    if y.shape[0] != d:
        raise DimensionMismatch(f"observation length {y.shape[0]} != kernel dim {d}")
    if d == 0:
        post = p.copy()
        corr = 0.0
    else:
        raw = p + gain @ (y - pred_obs)
        clipped = np.clip(raw, 0.0, 1.0)
        corr = float(np.abs(raw - clipped).sum())
        total = clipped.sum()
        if total <= 0.0:
            raise ZeroEvidence("updated belief clamped to all zeros")
        post = clipped / total
    return FilterState(
        posterior=post,
        prediction=p,
        pred_cov=sigma,
        post_cov=error_covariance(post),
        gain=gain,
        pred_obs=pred_obs,
        mix_cov=qmix,
        l1_correction=corr,
    )


def bayes_filter_posterior(prediction, kernels, y) -> np.ndarray:
    """Exact filtered posterior: likelihood-weighted prediction, normalized.

    Likelihoods are handled in log space with max-subtraction so that far
    spread kernels do not underflow; ZeroEvidence only when every state has
    log-likelihood -inf or the prediction annihilates all support.
    """
    p = np.asarray(prediction, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if kernels[0].dim == 0:
        return p.copy()
    ll = np.array([log_likelihood(k, y) if pi > 0.0 else -np.inf for pi, k in zip(p, kernels)])
    top = ll.max()
    if not np.isfinite(top):
        raise ZeroEvidence("all states have zero likelihood")
    w = p * np.exp(ll - top)
    total = w.sum()
    if total <= 0.0:
        raise ZeroEvidence("evidence underflowed to zero")
    return w / total


def bayes_update(chain: MarkovChain, prediction, kernels, y) -> np.ndarray:
    """Exact predicted-belief recursion: transition applied to the filtered posterior."""
    return chain.trans @ bayes_filter_posterior(prediction, kernels, y)
