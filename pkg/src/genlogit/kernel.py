"""Determinant-based moment kernel and exponential-polynomial utilities.

The kernel m(y, x; beta) weights single-spell outcome trajectories by signed
determinants of exponentiated index values. All determinant work is carried
out on mean-centered index values; the common positive factor
exp(mean_t(x_t'beta) * sum_j lambda_j) is reported separately as a log scale,
so relative signs and ratios across periods are exact and overflow is avoided.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

MAX_PERIODS = 6

# A D_j smaller than this fraction of the Hadamard magnitude bound is rounding
# noise from an exact zero (e.g. b = beta0); without this floor the relative
# sign test below would misread noise as a common sign.
_ALL_ZERO_FLOOR = 1e-9
_SIGN_RTOL = 1e-10


def _check_lambda(lam: np.ndarray) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam[0] != 1.0 or np.any(np.diff(lam) <= 0):
        raise ValueError("lambda must be strictly ascending with lambda[0] = 1")
    return lam


def _check_shapes(x: np.ndarray, lam: np.ndarray) -> tuple[int, int]:
    T, K = x.shape
    if len(lam) != T - 1:
        raise ValueError(f"need len(lambda) = T-1, got {len(lam)} for T = {T}")
    if T > MAX_PERIODS:
        raise ValueError(f"T = {T} exceeds the factorial cost guard (T <= {MAX_PERIODS})")
    return T, K


def _det_batch(a: np.ndarray) -> np.ndarray:
    """Determinants over the last two axes; closed form for 1x1 and 2x2."""
    m = a.shape[-1]
    if m == 1:
        return np.array(a[..., 0, 0], copy=True)
    if m == 2:
        return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return np.linalg.det(a)


@dataclass
class MomentEval:
    """Kernel value at one trajectory: raw value, stabilized value, scale, gradient.

    value = stab_value * exp(log_scale); grad is the gradient of stab_value
    with respect to beta (the beta-dependence of the centering included).
    """

    value: float
    stab_value: float
    log_scale: float
    grad: np.ndarray


def moment_batch(
    y: np.ndarray,
    x: np.ndarray,
    beta: np.ndarray,
    lam: np.ndarray,
    want_grad: bool = False,
):
    """Stabilized kernel over a panel.

    Parameters
    ----------
    y : (n, T) binary outcomes
    x : (n, T, K) covariates
    beta : (K,) slope candidate
    lam : (T-1,) known rates, ascending, lam[0] = 1

    Returns
    -------
    (m_stab, log_scale) or (m_stab, log_scale, grad) with m_stab (n,),
    log_scale (n,), grad (n, K). The raw kernel is m_stab * exp(log_scale).
    """
    y = np.asarray(y)
    x = np.asarray(x, dtype=float)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    lam = _check_lambda(lam)
    n, T, K = x.shape
    _check_shapes(x[0], lam)
    if y.shape != (n, T):
        raise ValueError("y and x have inconsistent shapes")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("y entries must be 0 or 1")

    a = x @ beta  # (n, T)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite index values x_t'beta")
    abar = a.mean(axis=1)
    log_scale = abar * lam.sum()

    m = np.zeros(n)
    grad = np.zeros((n, K)) if want_grad else None

    ss = y.sum(axis=1) == 1
    if ss.any():
        t_idx = np.argmax(y[ss], axis=1)
        ns = len(t_idx)
        ac = a[ss] - abar[ss, None]
        keep = np.ones((ns, T), dtype=bool)
        keep[np.arange(ns), t_idx] = False
        ac_drop = ac[keep].reshape(ns, T - 1)
        # rows j = rates, columns s = retained periods; extreme beta can
        # still overflow to inf/nan, which callers detect via isfinite
        with np.errstate(over="ignore", invalid="ignore"):
            e_mat = np.exp(lam[None, :, None] * ac_drop[:, None, :])
            sign = np.where(t_idx % 2 == 0, 1.0, -1.0)  # (-1)^(t+1), t one-based
            m[ss] = sign * _det_batch(e_mat)
            if want_grad:
                xc = x[ss] - x[ss].mean(axis=1, keepdims=True)
                xc_drop = xc[keep].reshape(ns, T - 1, K)
                dmod = np.empty((ns, T - 1))
                for s in range(T - 1):
                    es = e_mat.copy()
                    es[:, :, s] *= lam[None, :]
                    dmod[:, s] = _det_batch(es)
                grad[ss] = sign[:, None] * np.einsum("ns,nsk->nk", dmod, xc_drop)

    if want_grad:
        return m, log_scale, grad
    return m, log_scale


def mt_det(x: np.ndarray, beta: np.ndarray, t: int, lam: np.ndarray):
    """Signed minor M_t for one trajectory, period t zero-based.

    Returns (stab_value, log_scale); the raw M_t is stab_value *
    exp(log_scale) and log_scale is identical across t for fixed (x, beta).
    """
    x = np.asarray(x, dtype=float)
    T, _ = _check_shapes(x, _check_lambda(lam))
    if not 0 <= t < T:
        raise ValueError(f"period index t must be in [0, {T - 1}]")
    y = np.zeros((1, T), dtype=int)
    y[0, t] = 1
    m, ls = moment_batch(y, x[None], beta, lam)
    return float(m[0]), float(ls[0])


def moment_m(y: np.ndarray, x: np.ndarray, beta: np.ndarray, lam: np.ndarray) -> MomentEval:
    """Kernel at one trajectory: M_t if y is the t-th single-spell, else 0."""
    y = np.asarray(y)
    x = np.asarray(x, dtype=float)
    m, ls, g = moment_batch(y[None], x[None], beta, lam, want_grad=True)
    with np.errstate(over="ignore"):
        raw = float(m[0] * np.exp(ls[0]))
    return MomentEval(value=raw, stab_value=float(m[0]), log_scale=float(ls[0]), grad=g[0])


def grad_m(y: np.ndarray, x: np.ndarray, beta: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Gradient of the stabilized kernel with respect to beta."""
    return moment_m(y, x, beta, lam).grad


def dj_all(x: np.ndarray, b: np.ndarray, beta0: np.ndarray, lam: np.ndarray):
    """All determinants D_j at a common scale.

    D_j mixes one row exp(lambda_j x_s'beta0) with rows exp(lambda_i x_s'b).
    Returns (vals, log_scale) with the raw D_j equal to vals[j] *
    exp(log_scale); the common column shifts make the vals comparable
    across j (signs and ratios exact).
    """
    x = np.asarray(x, dtype=float)
    lam = _check_lambda(lam)
    T, _ = _check_shapes(x, lam)
    u = x @ np.atleast_1d(np.asarray(beta0, dtype=float))
    v = x @ np.atleast_1d(np.asarray(b, dtype=float))
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("non-finite index values")
    shifts = (u + lam.sum() * v) / T
    log_scale = float(shifts.sum())
    low = np.exp(lam[:, None] * v[None, :] - shifts[None, :])  # (T-1, T)
    mats = np.empty((T - 1, T, T))
    for j in range(T - 1):
        mats[j, 0] = np.exp(lam[j] * u - shifts)
        mats[j, 1:] = low
    return _det_batch(mats), log_scale


def dj_det(x: np.ndarray, b: np.ndarray, beta0: np.ndarray, lam: np.ndarray, j: int) -> float:
    """Raw-scale D_j (j zero-based, indexing lam[j])."""
    vals, ls = dj_all(x, b, beta0, lam)
    if not 0 <= j < len(vals):
        raise ValueError(f"j must be in [0, {len(vals) - 1}]")
    with np.errstate(over="ignore"):
        return float(vals[j] * np.exp(ls))


def _hadamard_bound(x, b, beta0, lam) -> float:
    """Max over j of the Hadamard bound for the stabilized D_j matrices."""
    T = x.shape[0]
    u = x @ np.atleast_1d(np.asarray(beta0, dtype=float))
    v = x @ np.atleast_1d(np.asarray(b, dtype=float))
    shifts = (u + lam.sum() * v) / T
    low = np.exp(lam[:, None] * v[None, :] - shifts[None, :])
    low_prod = np.prod(np.linalg.norm(low, axis=1))
    tops = np.exp(lam[:, None] * u[None, :] - shifts[None, :])
    return float(np.max(np.linalg.norm(tops, axis=1)) * low_prod)


def in_rejection_set(x: np.ndarray, b: np.ndarray, beta0: np.ndarray, lam: np.ndarray) -> bool:
    """Whether all nonzero D_j(x; b) share one sign, with at least one nonzero."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if not np.any(b != 0):
        raise ValueError("candidate b must be nonzero")
    lam = _check_lambda(lam)
    vals, _ = dj_all(x, b, beta0, lam)
    vmax = np.max(np.abs(vals))
    if vmax <= _ALL_ZERO_FLOOR * _hadamard_bound(np.asarray(x, dtype=float), b, beta0, lam):
        return False
    signs = np.sign(vals[np.abs(vals) > _SIGN_RTOL * vmax])
    return bool(np.all(signs == signs[0]))


class ExpPoly:
    """Finite combination sum_k d_k exp(b_k c) of exponentials in c.

    Exponents are sorted ascending and merged when closer than merge_tol
    (coefficients summed); a nonzero combination of K distinct exponentials
    has at most K - 1 real roots.
    """

    def __init__(self, coeffs, exponents, merge_tol: float = 1e-12):
        coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
        exponents = np.atleast_1d(np.asarray(exponents, dtype=float))
        if coeffs.shape != exponents.shape:
            raise ValueError("coefficients and exponents must have equal length")
        order = np.argsort(exponents)
        b, d = exponents[order], coeffs[order]
        mb, md = [b[0]], [d[0]]
        for bk, dk in zip(b[1:], d[1:]):
            if bk - mb[-1] <= merge_tol:
                md[-1] += dk
            else:
                mb.append(bk)
                md.append(dk)
        keep = [k for k in range(len(md)) if md[k] != 0.0]
        if not keep:  # identically zero combination
            keep = [0]
            md[0] = 0.0
        self.d = np.array([md[k] for k in keep])
        self.b = np.array([mb[k] for k in keep])

    @property
    def max_roots(self) -> int:
        if len(self.d) == 1 and self.d[0] == 0.0:
            return 0
        return max(len(self.d) - 1, 0)

    def eval(self, c):
        """Raw value, evaluated with exponent centering."""
        c_arr = np.atleast_1d(np.asarray(c, dtype=float))
        z = c_arr[:, None] * self.b[None, :]
        zm = z.max(axis=1)
        out = np.exp(zm) * np.sum(self.d[None, :] * np.exp(z - zm[:, None]), axis=1)
        return out if np.ndim(c) else float(out[0])

    def eval_scaled(self, c):
        """Sign-faithful value divided by exp(max exponent); bounded."""
        c_arr = np.atleast_1d(np.asarray(c, dtype=float))
        z = c_arr[:, None] * self.b[None, :]
        out = np.sum(self.d[None, :] * np.exp(z - z.max(axis=1)[:, None]), axis=1)
        return out if np.ndim(c) else float(out[0])


def exp_poly_roots(
    poly: ExpPoly,
    lo: float,
    hi: float,
    grid: int = 801,
    xtol: float = 1e-10,
):
    """Real roots of poly on [lo, hi] by grid sign scan plus bisection.

    Returns (roots, flags): roots ascending, never more than the
    theoretical bound; flags lists possible-missed-root warnings.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    if grid < 2 * len(poly.d):
        raise ValueError("grid must be at least twice the number of terms")
    flags: list[str] = []
    cs = np.linspace(lo, hi, grid)
    vals = poly.eval(cs)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("exponential polynomial overflowed on the scan grid")
    vmax = np.max(np.abs(vals))
    if vmax == 0.0:
        return [], ["identically zero on grid"]

    roots: list[float] = []
    covered = np.zeros(grid, dtype=bool)
    for i in range(grid - 1):
        if vals[i] == 0.0:
            roots.append(cs[i])
            covered[i] = True
            continue
        if vals[i] * vals[i + 1] < 0:
            a_, b_ = cs[i], cs[i + 1]
            fa = vals[i]
            while b_ - a_ > xtol:
                mid = 0.5 * (a_ + b_)
                fm = poly.eval(mid)
                if fm == 0.0:
                    a_ = b_ = mid
                    break
                if fa * fm < 0:
                    b_ = mid
                else:
                    a_, fa = mid, fm
            roots.append(0.5 * (a_ + b_))
            covered[i] = covered[i + 1] = True
    if vals[-1] == 0.0 and not covered[-1]:
        roots.append(cs[-1])

    # grid points that are numerically zero but produced no bracket
    near = np.abs(vals) <= 1e-13 * vmax
    for i in np.nonzero(near & ~covered)[0]:
        roots.append(cs[i])
        flags.append(f"near-zero grid value accepted as root at c={cs[i]:.12g}")

    roots = sorted(roots)
    merged: list[float] = []
    for r in roots:
        if merged and r - merged[-1] <= 10 * xtol:
            continue
        merged.append(r)
    roots = [r for r in merged if abs(poly.eval(r)) <= 1e-8 * vmax]

    if len(roots) > poly.max_roots:
        flags.append("sign scan exceeded the theoretical root bound; extra roots dropped")
        roots = roots[: poly.max_roots]
    if len(roots) == poly.max_roots and min(abs(vals[0]), abs(vals[-1])) < 1e-6 * vmax:
        flags.append("root count at bound with small endpoint values; roots may be missed")
    return roots, flags


def _perm_sign(perm) -> int:
    sign = 1
    for i in range(len(perm)):
        for j in range(i + 1, len(perm)):
            if perm[i] > perm[j]:
                sign = -sign
    return sign


def ray_poly(
    x: np.ndarray,
    beta0: np.ndarray,
    a_weights: np.ndarray,
    lam: np.ndarray,
) -> ExpPoly:
    """Expansion of sum_j a_j(x) D_j(x; c*beta0) as an exponential polynomial in c.

    Exponents are the sums sum_{s != t} lambda_{sigma(s)} x_s'beta0 over
    bijections sigma; requires all T index values x_t'beta0 distinct. With
    index values sorted ascending the maximal-exponent coefficient is
    positive; for general column order the whole polynomial carries the
    parity of the sort, matching sum_j a_j * dj_det(x, c*beta0, beta0).
    """
    x = np.asarray(x, dtype=float)
    lam = _check_lambda(lam)
    T, _ = _check_shapes(x, lam)
    a_weights = np.atleast_1d(np.asarray(a_weights, dtype=float))
    if len(a_weights) != T - 1 or np.any(a_weights <= 0):
        raise ValueError("a_weights must be T-1 positive reals")
    u = x @ np.atleast_1d(np.asarray(beta0, dtype=float))
    spread = max(np.ptp(u), 1.0)
    if np.min(np.abs(np.subtract.outer(u, u)[~np.eye(T, dtype=bool)])) <= 1e-12 * spread:
        raise ValueError("index values x_t'beta0 must be pairwise distinct for a ray scan")

    order = np.argsort(u)
    orient = _perm_sign(list(order))
    us = u[order]
    # weights sum_j a_j exp(lambda_j u_t), one per dropped period
    drop_w = np.exp(lam[None, :] * us[:, None]) @ a_weights  # (T,)

    exps: list[float] = []
    coefs: list[float] = []
    idx = list(range(T))
    for t in range(T):
        others = idx[:t] + idx[t + 1:]
        base = orient * (1.0 if t % 2 == 0 else -1.0) * drop_w[t]
        for perm in itertools.permutations(range(T - 1)):
            exps.append(float(sum(lam[perm[p]] * us[others[p]] for p in range(T - 1))))
            coefs.append(base * _perm_sign(perm))
    return ExpPoly(coefs, exps)
