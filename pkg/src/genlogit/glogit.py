"""Generalized logistic shock distributions.

A distribution in this family has odds F/(1-F) (first type) or inverse odds
(1-F)/F (second type) equal to a positive combination of exponentials
sum_j w_j exp(lambda_j u). All evaluation goes through the log domain so that
large |u| does not overflow.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, logit, logsumexp

MAX_TERMS = 8
MAX_RATE = 64.0


@dataclass(frozen=True)
class GenLogistic:
    """Shock distribution with exponential-combination odds.

    family_type is "first" (odds are the combination) or "second" (inverse
    odds are). lam must be strictly ascending with lam[0] == 1 (scale
    normalization); w nonnegative with w[0] > 0.
    """

    family_type: str
    lam: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "w", w)
        if self.family_type not in ("first", "second"):
            raise ValueError(f"family_type must be 'first' or 'second', got {self.family_type!r}")
        if lam.ndim != 1 or w.shape != lam.shape:
            raise ValueError("lambda and w must be 1-d vectors of equal length")
        if len(lam) < 1 or len(lam) > MAX_TERMS:
            raise ValueError(f"number of terms must be in [1, {MAX_TERMS}]")
        if lam[0] != 1.0:
            raise ValueError("lambda[0] must be 1 (scale normalization)")
        if np.any(np.diff(lam) <= 0):
            raise ValueError("lambda must be strictly ascending")
        if lam[-1] > MAX_RATE:
            raise ValueError(f"lambda[-1] exceeds the configured cap {MAX_RATE}")
        if w[0] <= 0:
            raise ValueError("w[0] must be positive")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")

    @property
    def n_terms(self) -> int:
        return len(self.lam)

    def is_first_type(self) -> bool:
        return self.family_type == "first"


def logistic() -> GenLogistic:
    """The plain logit distribution (single unit-rate term)."""
    return GenLogistic("first", np.array([1.0]), np.array([1.0]))


def _active(dist: GenLogistic):
    """(log w_j, lambda_j) over terms with w_j > 0."""
    keep = dist.w > 0
    return np.log(dist.w[keep]), dist.lam[keep]


def log_odds(dist: GenLogistic, u) -> np.ndarray:
    """log G(u) with G the exponential combination, elementwise in u."""
    logw, lam = _active(dist)
    u = np.asarray(u, dtype=float)
    return logsumexp(logw[:, None] + lam[:, None] * u.ravel()[None, :], axis=0).reshape(u.shape)


def odds(dist: GenLogistic, u):
    """G(u) = sum_j w_j exp(lambda_j u). First type only."""
    _require_first(dist)
    out = np.exp(log_odds(dist, u))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("odds overflowed despite log-domain evaluation")
    return out if np.ndim(u) else float(out)


def cdf(dist: GenLogistic, u):
    """F(u) = G/(1+G)."""
    _require_first(dist)
    out = expit(log_odds(dist, u))
    return out if np.ndim(u) else float(out)


def pdf(dist: GenLogistic, u):
    """F'(u) = G'/(1+G)^2, computed as exp(log G' - 2 log(1+G))."""
    _require_first(dist)
    logw, lam = _active(dist)
    u = np.asarray(u, dtype=float)
    z = lam[:, None] * u.ravel()[None, :]
    log_gp = logsumexp(logw[:, None] + np.log(lam)[:, None] + z, axis=0)
    log_g = logsumexp(logw[:, None] + z, axis=0)
    log_1pg = np.logaddexp(0.0, log_g)
    out = np.exp(log_gp - 2.0 * log_1pg).reshape(u.shape)
    return out if np.ndim(u) else float(out)


def score_weight(dist: GenLogistic, u):
    """G'/G = F'/(F(1-F)); a convex combination of the rates, in [1, lam_max]."""
    _require_first(dist)
    logw, lam = _active(dist)
    u = np.asarray(u, dtype=float)
    z = logw[:, None] + lam[:, None] * u.ravel()[None, :]
    out = np.exp(logsumexp(z + np.log(lam)[:, None], axis=0) - logsumexp(z, axis=0))
    out = out.reshape(u.shape)
    return out if np.ndim(u) else float(out)


def quantile(dist: GenLogistic, p):
    """Inverse cdf. Bracket geometrically, bisect to 1e-12, one Newton polish."""
    _require_first(dist)
    p_arr = np.atleast_1d(np.asarray(p, dtype=float))
    if np.any((p_arr <= 0) | (p_arr >= 1)):
        raise ValueError("quantile requires p in (0, 1)")
    target = logit(p_arr)  # solve log G(u) = logit(p); log G strictly increasing

    logw, lam = _active(dist)
    # log G(u) >= log w_1 + u  and  log G(u) <= log(sum w) + max(u, lam_max*u)
    hi = target - logw[0]
    lse_w = logsumexp(logw)
    lo = target - lse_w
    pos = lo > 0
    lo[pos] = lo[pos] / lam[-1]
    lo, hi = np.minimum(lo, hi) - 1.0, np.maximum(lo, hi) + 1.0

    f_lo = log_odds(dist, lo) - target
    f_hi = log_odds(dist, hi) - target
    grow = 1.0
    while np.any(f_lo > 0) or np.any(f_hi < 0):
        grow *= 2.0
        lo = np.where(f_lo > 0, lo - grow, lo)
        hi = np.where(f_hi < 0, hi + grow, hi)
        f_lo = log_odds(dist, lo) - target
        f_hi = log_odds(dist, hi) - target

    while np.max(hi - lo) > 1e-12:
        mid = 0.5 * (lo + hi)
        f_mid = log_odds(dist, mid) - target
        lo = np.where(f_mid < 0, mid, lo)
        hi = np.where(f_mid >= 0, mid, hi)
    u = 0.5 * (lo + hi)
    # Newton polish; d/du log G = score_weight >= 1 so the step is stable
    u = u - (log_odds(dist, u) - target) / score_weight(dist, u)
    return u.reshape(np.shape(p)) if np.ndim(p) else float(u[0])


def sample(dist: GenLogistic, n: int, rng) -> np.ndarray:
    """n i.i.d. draws by inverse transform. rng: seed or np.random.Generator."""
    _require_first(dist)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    # uniform() includes 0.0; keep p strictly inside (0, 1)
    p = np.clip(rng.uniform(size=n), 1e-300, 1.0 - 1e-16)
    return np.asarray(quantile(dist, p))


def normalize_to_first_type(dist: GenLogistic, y: np.ndarray, x: np.ndarray):
    """Reduce a second-type model to the first type.

    If the shock distribution is of the second type, -epsilon is of the first
    type with the same (lambda, w), and 1-Y follows the first-type model with
    covariates -X and the same slope. Returns (dist, y, x) unchanged for
    first-type input.
    """
    if dist.is_first_type():
        return dist, y, x
    flipped = replace(dist, family_type="first")
    return flipped, 1 - np.asarray(y), -np.asarray(x)


def _require_first(dist: GenLogistic):
    if not dist.is_first_type():
        raise ValueError(
            "second-type distribution: call normalize_to_first_type on the data first"
        )
