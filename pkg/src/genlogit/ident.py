"""Identification diagnostics.

Ray scans locate the candidate scalings c for which the weighted determinant
combination vanishes at every probed covariate matrix; rejection scans apply
the common-sign determinant criterion to arbitrary candidates; the remaining
tools detect degenerate designs, construct adversarial non-identified DGPs,
check support assumptions, and test the all-zero slope null.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from genlogit import dgp as dgp_mod
from genlogit import kernel
from genlogit.dgp import DgpSpec, GammaLaw, PanelSample, XLaw
from genlogit.glogit import GenLogistic

_ROOT_MATCH_TOL = 1e-6
_DISTINCT_RTOL = 1e-9


@dataclass
class RayScanReport:
    """Result of a ray scan over candidate scalings c of the true slope."""

    c_interval: tuple[float, float]
    roots: list[float]
    per_x_roots: list[list[float]]
    certified_max_roots: int
    flags: list[str] = field(default_factory=list)
    roots_inside: list[float] = field(default_factory=list)
    roots_outside: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "c_interval": list(self.c_interval),
            "roots": self.roots,
            "per_x_roots": self.per_x_roots,
            "certified_max_roots": self.certified_max_roots,
            "flags": self.flags,
            "roots_inside": self.roots_inside,
            "roots_outside": self.roots_outside,
        }


def _distinct_index_values(x: np.ndarray, beta0: np.ndarray) -> bool:
    u = np.sort(x @ beta0)
    spread = max(np.ptp(u), 1.0)
    return bool(np.min(np.diff(u)) > _DISTINCT_RTOL * spread)


def default_probes(spec: DgpSpec, n_probes: int = 25, seed: int = 0) -> list[np.ndarray]:
    """Probe matrices from the spec's X law, filtered for distinct index values."""
    rng = np.random.default_rng(seed)
    if spec.xlaw.kind == "finite":
        candidates = [x for x in spec.xlaw.support if _distinct_index_values(x, spec.beta0)]
        return candidates[:n_probes]
    probes: list[np.ndarray] = []
    attempts = 0
    while len(probes) < n_probes and attempts < 50 * n_probes:
        x, _ = dgp_mod.draw_x(spec.xlaw, spec.T, spec.K, 1, rng)
        attempts += 1
        if _distinct_index_values(x[0], spec.beta0):
            probes.append(x[0])
    return probes


def ray_scan(
    spec: DgpSpec,
    probes: list[np.ndarray] | None = None,
    c_range: tuple[float, float] | None = None,
    grid: int = 2001,
    seed: int = 0,
) -> RayScanReport:
    """Common roots of c -> sum_j a_j(x) D_j(x; c*beta0) across probes.

    Candidate scalings surviving every probe are the only ray points the
    conditional moment restriction cannot reject; c = 1 is always among
    them. Probes with repeated index values are flagged and skipped.
    """
    lam = spec.kernel_lambda()
    lam_top = lam[-1]
    if c_range is None:
        c_range = (1.0 / lam_top - 0.2, lam_top + 0.2)
    lo, hi = float(c_range[0]), float(c_range[1])
    if probes is None:
        probes = default_probes(spec, seed=seed)

    flags: list[str] = []
    per_x_roots: list[list[float]] = []
    bounds: list[int] = []
    for i, x in enumerate(probes):
        x = np.asarray(x, dtype=float)
        if not _distinct_index_values(x, spec.beta0):
            flags.append(f"probe {i}: repeated index values, skipped")
            per_x_roots.append([])
            continue
        aw = dgp_mod.a_weights(x, spec)
        poly = kernel.ray_poly(x, spec.beta0, aw, lam)
        roots, rflags = kernel.exp_poly_roots(poly, lo, hi, grid=grid)
        per_x_roots.append([float(r) for r in roots])
        flags.extend(f"probe {i}: {f}" for f in rflags)
        bounds.append(poly.max_roots)

    valid = [r for r, x in zip(per_x_roots, probes) if _distinct_index_values(np.asarray(x, float), spec.beta0)]
    if not valid:
        raise ValueError("no probe has T distinct index values; ray scan impossible")

    common: list[float] = []
    for r in valid[0]:
        if all(any(abs(r - s) <= _ROOT_MATCH_TOL for s in other) for other in valid[1:]):
            common.append(float(r))
    common.sort()

    t_fact_bound = math.factorial(spec.T) - 1
    if len(common) > t_fact_bound:
        flags.append("common roots exceed the T!-1 bound; truncated")
        common = common[:t_fact_bound]
    inside = [r for r in common if 1.0 / lam_top < r < lam_top]
    outside = [r for r in common if not 1.0 / lam_top < r < lam_top]
    if not any(abs(r - 1.0) <= 1e-8 for r in common):
        flags.append("c = 1 not recovered; scan grid or range too coarse")
    return RayScanReport(
        c_interval=(lo, hi),
        roots=common,
        per_x_roots=per_x_roots,
        certified_max_roots=min(bounds) if bounds else 0,
        flags=flags,
        roots_inside=inside,
        roots_outside=outside,
    )


def rejection_scan(
    beta_candidates,
    spec: DgpSpec,
    probes: list[np.ndarray] | None = None,
    seed: int = 0,
) -> list[dict]:
    """Common-sign determinant test for each candidate against the probes.

    A candidate is rejected as soon as one probe lies in its rejection set
    (all nonzero D_j of one sign, some nonzero); the true slope never is.
    """
    lam = spec.kernel_lambda()
    if probes is None:
        rng = np.random.default_rng(seed)
        x, _ = dgp_mod.draw_x(spec.xlaw, spec.T, spec.K, 25, rng)
        probes = list(x)
    verdicts = []
    for b in beta_candidates:
        b = np.atleast_1d(np.asarray(b, dtype=float))
        hits = [
            i
            for i, x in enumerate(probes)
            if kernel.in_rejection_set(np.asarray(x, float), b, spec.beta0, lam)
        ]
        verdicts.append(
            {
                "candidate": b.tolist(),
                "rejected": bool(hits),
                "probe_hits": hits,
            }
        )
    return verdicts


def _distinct_rows_prob(spec: DgpSpec) -> float:
    if spec.xlaw.kind != "finite":
        return 1.0  # continuous i.i.d. entries tie with probability zero
    p = 0.0
    for prob, x in zip(spec.xlaw.probs, spec.xlaw.support):
        d = np.max(np.abs(x[:, None, :] - x[None, :, :]), axis=2)
        distinct = np.all(d[~np.eye(x.shape[0], dtype=bool)] > 0)
        p += prob * distinct
    return float(p)


def _tied_pair(x: np.ndarray):
    T = x.shape[0]
    for s in range(T):
        for t in range(s + 1, T):
            if np.array_equal(x[s], x[t]):
                return s, t
    return None


def degenerate_check(
    target: DgpSpec | PanelSample,
    n_random_b: int = 20,
    seed: int = 0,
    max_units: int = 50,
) -> dict:
    """Probability of T pairwise-distinct covariate rows, plus moment nullity.

    If that probability is zero the moment restriction has no identification
    power ("no identification power" verdict). On units with a tied row pair
    (s, t) the kernel satisfies m(e_s) = -m(e_t) and m(e_r) = 0 otherwise, so
    any (s, t)-symmetric outcome distribution annihilates it; that pathwise
    cancellation is verified here at machine tolerance for random b.
    """
    rng = np.random.default_rng(seed)
    if isinstance(target, DgpSpec):
        prob = _distinct_rows_prob(target)
        lam = target.kernel_lambda()
        K = target.K
        if target.xlaw.kind == "finite":
            units = [x for x in target.xlaw.support if _tied_pair(x) is not None]
        else:
            units = []
    else:
        tied = [_tied_pair(target.x[i]) for i in range(target.n)]
        mask = np.array([t is not None for t in tied])
        prob = float(1.0 - mask.mean())
        lam = np.ones(1) if target.T == 2 else None
        if target.spec is not None:
            lam = target.spec.kernel_lambda()
        elif lam is None:
            lam = np.arange(1, target.T, dtype=float)  # placeholder rates for the nullity check
        K = target.K
        units = [target.x[i] for i in np.nonzero(mask)[0][:max_units]]

    checks_passed = True
    worst = 0.0
    for x in units[:max_units]:
        pair = _tied_pair(np.asarray(x, float))
        s, t = pair
        T = x.shape[0]
        ys = np.eye(T, dtype=int)
        for _ in range(n_random_b):
            b = rng.normal(size=K)
            m, _ = kernel.moment_batch(ys, np.broadcast_to(x, (T, *np.shape(x))), b, lam)
            scale = max(np.max(np.abs(m)), 1e-300)
            rel = abs(m[s] + m[t]) / scale
            others = [abs(m[r]) / scale for r in range(T) if r not in (s, t)]
            worst = max(worst, rel, *others) if others else max(worst, rel)
            if rel > 1e-12 or any(o > 1e-12 for o in others):
                checks_passed = False

    return {
        "distinct_rows_probability": prob,
        "verdict": "no identification power" if prob == 0.0 else "informative trajectories present",
        "degenerate_units_checked": min(len(units), max_units),
        "nullity_check_passed": checks_passed,
        "nullity_worst_relative": worst,
    }


def adversarial_gamma(x: np.ndarray, b: np.ndarray, beta0: np.ndarray, dist: GenLogistic) -> float:
    """Dirac location gamma0 making E[m(Y, X; b) | X = x] vanish (T = 3).

    Requires opposite-signed D_1, D_2 at (x, b) and a positive second weight;
    then gamma0 = ln(w_1 * (-D_1/D_2) / w_2) / (lambda_2 - 1).
    """
    lam = dist.lam
    if len(lam) != 2:
        raise ValueError("adversarial construction needs tau = 2 (T = 3)")
    if dist.w[1] <= 0:
        raise ValueError("adversarial construction needs w_2 > 0")
    x = np.asarray(x, dtype=float)
    vals, _ = kernel.dj_all(x, b, beta0, lam)
    vmax = np.max(np.abs(vals))
    if vmax <= kernel._ALL_ZERO_FLOOR * kernel._hadamard_bound(
        x, np.atleast_1d(np.asarray(b, float)), np.atleast_1d(np.asarray(beta0, float)), lam
    ):
        raise ValueError("D_1 and D_2 both vanish at (x, b); any gamma law works there")
    if np.min(np.abs(vals)) <= kernel._SIGN_RTOL * vmax or vals[0] * vals[1] >= 0:
        raise ValueError("need sign(D_1) = -sign(D_2) != 0 for the Dirac construction")
    ratio = -vals[0] / vals[1]
    return float(np.log(dist.w[0] * ratio / dist.w[1]) / (lam[1] - 1.0))


def build_nonidentified_dgp(
    b: np.ndarray,
    beta0: np.ndarray,
    dist: GenLogistic,
    xlaw: XLaw,
) -> DgpSpec:
    """A T = 3 DGP whose conditional moment also vanishes at the ray point b.

    b must equal c * beta0 with c strictly inside (1/lambda_2, lambda_2); each
    finite-support point gets the Dirac fixed effect of adversarial_gamma
    (any value where both determinants vanish).
    """
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    lam = dist.lam
    if len(lam) != 2:
        raise ValueError("construction restricted to tau = 2 (T = 3)")
    if xlaw.kind != "finite":
        raise ValueError("construction needs a finite X support")
    denom = float(beta0 @ beta0)
    c = float(b @ beta0) / denom
    if np.max(np.abs(b - c * beta0)) > 1e-10 * max(1.0, np.max(np.abs(beta0))):
        raise ValueError("b must lie on the ray spanned by beta0")
    if not 1.0 / lam[1] < c < lam[1]:
        raise ValueError(f"ray scaling c = {c:.6g} outside (1/lambda_2, lambda_2)")

    cells = []
    for x in xlaw.support:
        try:
            g0 = adversarial_gamma(x, b, beta0, dist)
        except ValueError as err:
            if "both vanish" in str(err):
                g0 = 0.0  # moment already zero for every gamma at this point
            else:
                raise
        cells.append([(g0, 1.0)])
    return DgpSpec(
        beta0=beta0,
        T=3,
        dist=dist,
        gamma=GammaLaw.discrete_cells(cells),
        xlaw=xlaw,
    )


def check_support_assumptions(
    sample: PanelSample,
    k_focus: int | None = None,
    bandwidth: float | None = None,
) -> dict:
    """Report-only checks of the discrete- and continuous-support conditions.

    For each covariate k: empirical frequency of trajectories whose other
    covariates are exactly zero while the k-th takes T distinct values. The
    overlap heuristic reports, per period pair, the share of units whose
    covariate vectors at the two periods are closer than the bandwidth.
    """
    x = sample.x
    n, T, K = x.shape
    ks = range(K) if k_focus is None else [k_focus]

    per_k = {}
    for k in ks:
        others_zero = np.all(x[:, :, [j for j in range(K) if j != k]] == 0.0, axis=(1, 2)) if K > 1 else np.ones(n, bool)
        xk = x[:, :, k]
        distinct = np.array([len(np.unique(xk[i])) == T for i in range(n)])
        per_k[int(k)] = float(np.mean(others_zero & distinct))

    diffs = []
    for s in range(T):
        for t in range(s + 1, T):
            diffs.append(np.linalg.norm(x[:, s, :] - x[:, t, :], axis=1))
    all_d = np.concatenate(diffs)
    if bandwidth is None:
        med = float(np.median(all_d))
        bandwidth = 0.1 * med if med > 0 else 0.1
    overlap = {}
    i = 0
    for s in range(T):
        for t in range(s + 1, T):
            overlap[f"{s},{t}"] = float(np.mean(diffs[i] <= bandwidth))
            i += 1

    return {
        "discrete_support_frequency": per_k,
        "overlap_frequency": overlap,
        "bandwidth": float(bandwidth),
        "note": "report only; the continuous-support condition is not testable from finite data",
    }


@dataclass
class BetaZeroTest:
    """Cell-based chi-square test of the all-zero slope null."""

    statistic: float
    p_value: float
    rank_check: dict
    n_switchers: int
    n_cells: int

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "rank_check": self.rank_check,
            "n_switchers": self.n_switchers,
            "n_cells": self.n_cells,
        }


def test_beta_zero(
    sample: PanelSample,
    t: int,
    t_prime: int,
    bins: int = 2,
    min_cell: int = 20,
) -> BetaZeroTest:
    """Test that switchers between periods t and t_prime are fair coin flips.

    Under a zero slope, P(Y_t = 1, Y_t' = 0 | Y_t + Y_t' = 1, X_t, X_t') is
    exactly one half whatever the fixed effect; the statistic aggregates the
    squared standardized deviations from one half over covariate cells
    (quantile bins, capped so each cell keeps at least min_cell switchers).
    """
    x = sample.x
    y = sample.y
    delta = x[:, t, :] - x[:, t_prime, :]
    mmat = delta.T @ delta / sample.n
    eigs = np.linalg.eigvalsh(mmat)
    rank_check = {
        "min_eigenvalue": float(eigs[0]),
        "max_eigenvalue": float(eigs[-1]),
        "ok": bool(eigs[0] > 1e-8 * max(eigs[-1], 1e-300)),
    }
    if not rank_check["ok"]:
        raise ValueError(
            "E[(X_t - X_t')(X_t - X_t')'] is numerically singular; the test has no content"
        )

    switch = y[:, t] + y[:, t_prime] == 1
    n_switch = int(switch.sum())
    if n_switch < min_cell:
        raise ValueError(f"too few switchers ({n_switch} < {min_cell})")

    coords = np.hstack([x[switch][:, t, :], x[switch][:, t_prime, :]])  # (ns, 2K)
    d2 = coords.shape[1]
    bins_eff = max(1, min(bins, int((n_switch / min_cell) ** (1.0 / d2))))
    cell_id = np.zeros(n_switch, dtype=int)
    for j in range(d2):
        col = coords[:, j]
        if bins_eff > 1:
            edges = np.quantile(col, np.linspace(0, 1, bins_eff + 1)[1:-1])
            lab = np.searchsorted(edges, col, side="right")
        else:
            lab = np.zeros(n_switch, dtype=int)
        cell_id = cell_id * bins_eff + lab

    wins = y[switch][:, t]  # 1 when the switch is (Y_t, Y_t') = (1, 0)
    ids, inverse = np.unique(cell_id, return_inverse=True)
    n_c = np.bincount(inverse)
    s_c = np.bincount(inverse, weights=wins)

    small = n_c < min_cell
    if small.any() and (~small).any():
        # pool undersized cells into a single extra cell
        ns_pool = int(n_c[small].sum())
        ss_pool = float(s_c[small].sum())
        n_c = np.append(n_c[~small], ns_pool)
        s_c = np.append(s_c[~small], ss_pool)
    stat = float(np.sum((s_c - n_c / 2.0) ** 2 / (n_c / 4.0)))
    dof = len(n_c)
    return BetaZeroTest(
        statistic=stat,
        p_value=float(stats.chi2.sf(stat, dof)),
        rank_check=rank_check,
        n_switchers=n_switch,
        n_cells=dof,
    )
