"""Two-step GMM estimation from the conditional moment restriction.

Step one minimizes the identity-weighted quadratic form of basis-instrument
moments from multiple starts; step two either re-weights by the inverse
moment covariance or switches to cell-based / oracle optimal instruments.
All kernel evaluations use the stabilized moment uniformly; instruments can
absorb the positive per-observation scale factor, so the argmin is the one
the raw kernel defines.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from genlogit import dgp as dgp_mod
from genlogit import kernel
from genlogit.dgp import DgpSpec, PanelSample


@dataclass
class GmmConfig:
    """Estimation settings: instruments, multi-start search, tolerances."""

    instrument_mode: str = "basis"  # "basis" | "cell" | "oracle"
    degree: int = 1
    starts: int = 10  # random starts on top of the 3^K grid
    start_box: tuple[float, float] = (-3.0, 3.0)
    grid_starts: bool = True
    start_points: list | None = None  # explicit starts override grid + random
    gtol: float = 1e-8
    xtol: float = 1e-10
    max_iter: int = 200
    ridge: float = 1e-8  # scaled by trace for weight inversions
    seed: int = 0
    local_minima_factor: float = 10.0
    cell_min_obs: int = 10
    max_cells: int = 200
    # the kernel vanishes identically at beta = 0 when T >= 3 (all determinant
    # columns coincide); the model excludes a zero slope, so minima inside this
    # ball are the trivial origin zero and are discarded with a flag
    origin_tol: float = 1e-3

    def __post_init__(self):
        if self.instrument_mode not in ("basis", "cell", "oracle"):
            raise ValueError(f"unknown instrument_mode {self.instrument_mode!r}")
        if self.degree not in (1, 2, 3):
            raise ValueError("degree must be 1, 2 or 3")
        if self.starts < 0 or (self.starts == 0 and not self.grid_starts and not self.start_points):
            raise ValueError("need at least one start")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass
class EstimationResult:
    """Estimate, surviving local minima, variance, and diagnostics."""

    beta_hat: np.ndarray
    local_minima: list[tuple[np.ndarray, float]]
    variance: np.ndarray
    objective_at_solution: float
    j_statistic: float
    diagnostics: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.variance))

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "se": self.se.tolist(),
            "vcov": self.variance.tolist(),
            "local_minima": [
                {"beta": b.tolist(), "objective": q} for b, q in self.local_minima
            ],
            "j_stat": self.j_statistic,
            "objective": self.objective_at_solution,
            "flags": self.flags,
            "diagnostics": self.diagnostics,
        }


def basis_instruments(x: np.ndarray, degree: int = 1) -> np.ndarray:
    """Instrument matrix: constant, all (k, t) covariates, then monomials
    of the time-averaged covariates up to `degree`; columns scaled to unit
    sample second moment (the constant column first, untouched)."""
    if degree not in (1, 2, 3):
        raise ValueError("degree must be 1, 2 or 3")
    n, T, K = x.shape
    cols = [np.ones(n)]
    for k in range(K):
        for t in range(T):
            cols.append(x[:, t, k])
    if degree >= 2:
        xbar = x.mean(axis=1)  # (n, K)
        for deg in range(2, degree + 1):
            for combo in itertools.combinations_with_replacement(range(K), deg):
                col = np.ones(n)
                for k in combo:
                    col = col * xbar[:, k]
                cols.append(col)
    g = np.column_stack(cols)
    if g.shape[1] > n / 10:
        raise ValueError(
            f"{g.shape[1]} instruments for {n} observations exceeds the overfit guard (L <= n/10)"
        )
    scale = np.sqrt(np.mean(g ** 2, axis=0))
    scale[scale == 0] = 1.0
    return g / scale


class _MomentStack:
    """Stacked instrumented moments over one or more period-subset blocks."""

    def __init__(self, blocks):
        # blocks: list of (y, x, inst) with inst (n, L_block)
        self.blocks = blocks
        self.n = blocks[0][0].shape[0]
        self.L = sum(b[2].shape[1] for b in blocks)

    def gbar(self, beta: np.ndarray, lam: np.ndarray, want_jac: bool = False):
        parts, jacs = [], []
        for y, x, inst in self.blocks:
            if want_jac:
                m, _, grad = kernel.moment_batch(y, x, beta, lam, want_grad=True)
            else:
                m, _ = kernel.moment_batch(y, x, beta, lam)
                grad = None
            if not np.all(np.isfinite(m)) or (grad is not None and not np.all(np.isfinite(grad))):
                bad = int(np.nonzero(~np.isfinite(m))[0][0]) if not np.all(np.isfinite(m)) else -1
                raise FloatingPointError(f"non-finite moment value at observation {bad}")
            if grad is not None:
                jacs.append(inst.T @ grad / self.n)
            parts.append(inst.T @ m / self.n)
        gbar = np.concatenate(parts)
        if want_jac:
            return gbar, np.vstack(jacs)
        return gbar

    def moment_matrix(self, beta: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """(n, L) per-observation instrumented moments."""
        parts = []
        for y, x, inst in self.blocks:
            m, _ = kernel.moment_batch(y, x, beta, lam)
            parts.append(inst * m[:, None])
        return np.hstack(parts)


def gmm_objective(
    sample: PanelSample,
    beta: np.ndarray,
    instruments: np.ndarray,
    weight: np.ndarray,
    lam: np.ndarray,
) -> float:
    """Q(beta) = gbar' W gbar with gbar the instrumented stabilized moments."""
    stack = _MomentStack([(sample.y, sample.x, np.asarray(instruments, float))])
    g = stack.gbar(np.atleast_1d(np.asarray(beta, float)), lam)
    return float(g @ weight @ g)


def _subset_blocks(sample: PanelSample, lam: np.ndarray, degree: int):
    """Basis-instrument blocks; all C(T, tau+1) period subsets when T > tau+1."""
    t_need = len(lam) + 1
    if sample.T == t_need:
        subsets = [tuple(range(sample.T))]
    elif sample.T > t_need:
        subsets = list(itertools.combinations(range(sample.T), t_need))
    else:
        raise ValueError(f"sample has T = {sample.T} < tau + 1 = {t_need}")
    blocks = []
    for s in subsets:
        xs = sample.x[:, s, :]
        blocks.append((sample.y[:, s], xs, basis_instruments(xs, degree)))
    return blocks


def _ridge_inverse(mat: np.ndarray, ridge: float, flags: list[str], label: str) -> np.ndarray:
    m = np.asarray(mat, float)
    if np.trace(m) == 0.0:
        raise ValueError(
            f"{label} is identically zero; the design carries no identification power"
        )
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > 1e12:
        bump = ridge * max(np.trace(m) / len(m), 1e-300)
        m = m + bump * np.eye(len(m))
        flags.append(f"{label} ill-conditioned (cond {cond:.2e}); ridge {bump:.2e} applied")
    return np.linalg.inv(m)


def _minimize_once(fun_grad, beta_start, config: GmmConfig):
    res = optimize.minimize(
        fun_grad,
        np.asarray(beta_start, float),
        jac=True,
        method="BFGS",
        options={"gtol": config.gtol, "maxiter": config.max_iter},
    )
    converged = res.success or np.linalg.norm(res.jac) < 10 * config.gtol
    if not converged:
        fallback = optimize.minimize(
            lambda b: fun_grad(b)[0],
            res.x,
            method="Nelder-Mead",
            options={"xatol": config.xtol, "fatol": 1e-14, "maxiter": 400 * len(res.x)},
        )
        if fallback.fun <= res.fun:
            return fallback.x, float(fallback.fun), fallback.success
    return res.x, float(res.fun), converged


def _start_points(k: int, config: GmmConfig) -> list[np.ndarray]:
    if config.start_points is not None:
        return [np.atleast_1d(np.asarray(p, float)) for p in config.start_points]
    lo, hi = config.start_box
    starts = []
    if config.grid_starts:
        axis = [lo, 0.5 * (lo + hi), hi]
        starts.extend(np.array(p) for p in itertools.product(axis, repeat=k))
    rng = np.random.default_rng(config.seed)
    starts.extend(rng.uniform(lo, hi, size=(config.starts, k)))
    # starts inside the origin ball would only rediscover the trivial zero
    keep = [s for s in starts if np.linalg.norm(s) > 10 * config.origin_tol]
    return keep or starts


def _cluster_minima(points, config: GmmConfig, t_periods: int, flags: list[str]):
    """Deduplicate converged endpoints; keep those within the objective factor."""
    points = sorted(points, key=lambda p: (p[1], tuple(p[0])))
    kept: list[tuple[np.ndarray, float]] = []
    dropped_origin = False
    for b, q in points:
        if t_periods >= 3 and np.linalg.norm(b) <= config.origin_tol:
            dropped_origin = True
            continue
        if any(np.linalg.norm(b - kb) <= 1e-3 * (1.0 + np.linalg.norm(kb)) for kb, _ in kept):
            continue
        kept.append((b, q))
    if dropped_origin:
        flags.append("trivial origin minimum discarded (zero slope excluded; see test_beta_zero)")
    if not kept:
        flags.append("only the trivial origin minimum found; the slope may be zero")
        kept = [points[0]]
    q_best = kept[0][1]
    floor = max(q_best, 1e-300)
    return [(b, q) for b, q in kept if q <= config.local_minima_factor * floor]


def cell_optimal_instruments(
    sample: PanelSample,
    beta_pilot: np.ndarray,
    lam: np.ndarray,
    config: GmmConfig | None = None,
):
    """Per-observation R_hat/Omega_hat instruments over discrete covariate cells.

    Cells are distinct covariate trajectories; cells with fewer than the
    configured minimum are pooled into the nearest cell by trajectory
    distance. Returns (instruments (n, K), flags).
    """
    config = config or GmmConfig()
    flags: list[str] = []
    n, T, K = sample.x.shape
    flat = sample.x.reshape(n, -1)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    n_cells = len(uniq)
    if n_cells > config.max_cells:
        raise ValueError(
            f"{n_cells} distinct trajectories exceed the cell limit {config.max_cells}; "
            "use basis instruments or supply coarser cell labels"
        )
    counts = np.bincount(inv, minlength=n_cells)
    # pool undersized cells into their nearest well-populated neighbour
    big = np.nonzero(counts >= config.cell_min_obs)[0]
    if len(big) == 0:
        raise ValueError("no covariate cell reaches the minimum cell size")
    cell_of = np.arange(n_cells)
    for c in np.nonzero(counts < config.cell_min_obs)[0]:
        d = np.linalg.norm(uniq[big] - uniq[c], axis=1)
        cell_of[c] = big[np.argmin(d)]
        flags.append(f"cell {c} ({counts[c]} obs) pooled into cell {int(cell_of[c])}")
    inv = cell_of[inv]

    m, _, grad = kernel.moment_batch(sample.y, sample.x, beta_pilot, lam, want_grad=True)
    inst = np.zeros((n, K))
    omega_scale = float(np.mean(m ** 2))
    floor = config.ridge * max(omega_scale, 1e-300)
    for c in np.unique(inv):
        sel = inv == c
        omega_c = float(np.mean(m[sel] ** 2))
        r_c = grad[sel].mean(axis=0)
        if omega_c == 0.0:
            flags.append(f"cell {int(c)} degenerate (zero moment variance); instrument zeroed")
            continue
        inst[sel] = r_c / max(omega_c, floor)
    return inst, flags


def _oracle_instruments(sample: PanelSample, spec: DgpSpec) -> np.ndarray:
    """R(x)/Omega(x) from the exact DGP, mapped to each observation's cell."""
    if spec.xlaw.kind != "finite":
        raise ValueError("oracle instruments need a finite-support spec")
    n = sample.n
    flat = sample.x.reshape(n, -1)
    sflat = spec.xlaw.support.reshape(len(spec.xlaw.probs), -1)
    inst = np.zeros((n, spec.K))
    ratio = {}
    for i, srow in enumerate(sflat):
        r, omega, degenerate = dgp_mod.r_and_omega(spec.xlaw.support[i], spec)
        ratio[i] = np.zeros(spec.K) if degenerate else r / omega
    d = np.linalg.norm(flat[:, None, :] - sflat[None, :, :], axis=2)
    cell = np.argmin(d, axis=1)
    if np.max(d[np.arange(n), cell]) > 1e-8:
        raise ValueError("sample contains trajectories outside the spec's finite support")
    for i in ratio:
        inst[cell == i] = ratio[i]
    return inst


def two_step_estimate(
    sample: PanelSample,
    lam: np.ndarray,
    config: GmmConfig | None = None,
    spec: DgpSpec | None = None,
) -> EstimationResult:
    """Two-step GMM with multi-start search and local-minima reporting.

    Step one: identity-weighted basis-instrument GMM from a grid plus random
    starts. Step two: inverse-covariance re-weighting (basis mode) or
    cell/oracle optimal instruments. Every local minimum with objective
    within the configured factor of the best is reported; more than one
    surviving minimum flags the estimate as ambiguous.
    """
    config = config or GmmConfig()
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    k = sample.K
    if sample.n < 50 * k:
        raise ValueError(f"n = {sample.n} below the 50*K floor for estimation")
    flags: list[str] = []
    diagnostics: dict = {}

    blocks = _subset_blocks(sample, lam, config.degree)
    if len(blocks) > 1 and config.instrument_mode != "basis":
        raise ValueError("cell/oracle instruments require T = tau + 1 panels")
    stack = _MomentStack(blocks)
    diagnostics["n_instruments_step1"] = stack.L
    diagnostics["instrument_condition"] = float(
        np.linalg.cond(np.vstack([b[2] for b in blocks]))
    )

    w1 = np.eye(stack.L)

    def make_fun(stk, weight):
        def fun_grad(beta):
            try:
                g, jac = stk.gbar(beta, lam, want_jac=True)
            except FloatingPointError:
                # line-search probe left the representable range; push back
                return 1e100 * (1.0 + beta @ beta), 2e100 * beta
            wg = weight @ g
            return float(g @ wg), 2.0 * jac.T @ wg

        return fun_grad

    fun1 = make_fun(stack, w1)
    endpoints = []
    n_fail = 0
    for s in _start_points(k, config):
        b_end, q_end, ok = _minimize_once(fun1, s, config)
        if not ok:
            n_fail += 1
            continue
        endpoints.append((b_end, q_end))
    if not endpoints:
        raise RuntimeError("no start converged in step 1")
    if n_fail:
        flags.append(f"{n_fail} start(s) failed to converge in step 1")
    minima1 = _cluster_minima(endpoints, config, sample.T, flags)
    diagnostics["step1_minima"] = [{"beta": b.tolist(), "objective": q} for b, q in minima1]

    # --- step 2 ---
    beta_pilot = minima1[0][0]
    if config.instrument_mode == "basis":
        s_hat = stack.moment_matrix(beta_pilot, lam)
        s_mat = s_hat.T @ s_hat / sample.n
        w2 = _ridge_inverse(s_mat, config.ridge, flags, "moment covariance")
        stack2, weight2 = stack, w2
    elif config.instrument_mode == "cell":
        inst, cflags = cell_optimal_instruments(sample, beta_pilot, lam, config)
        flags.extend(cflags)
        stack2 = _MomentStack([(sample.y, sample.x, inst)])
        weight2 = np.eye(stack2.L)
    else:
        if spec is None:
            raise ValueError("oracle instruments need the DgpSpec")
        inst = _oracle_instruments(sample, spec)
        stack2 = _MomentStack([(sample.y, sample.x, inst)])
        weight2 = np.eye(stack2.L)

    fun2 = make_fun(stack2, weight2)
    endpoints2 = []
    for b_start, _ in minima1:
        b_end, q_end, ok = _minimize_once(fun2, b_start, config)
        if ok:
            endpoints2.append((b_end, q_end))
    if not endpoints2:
        raise RuntimeError("no step-2 refinement converged")
    minima2 = _cluster_minima(endpoints2, config, sample.T, flags)

    beta_hat, q_hat = minima2[0]
    if len(minima2) > 1:
        flags.append("identification ambiguous - multiple local minima; see ray_scan")

    variance = variance_estimate(stack2, beta_hat, weight2, lam, sample.n, config, flags)

    g2 = stack2.gbar(beta_hat, lam)
    s2 = stack2.moment_matrix(beta_hat, lam)
    s2_mat = s2.T @ s2 / sample.n
    s2_inv = _ridge_inverse(s2_mat, config.ridge, flags, "J-statistic covariance")
    j_stat = float(sample.n * g2 @ s2_inv @ g2)

    return EstimationResult(
        beta_hat=beta_hat,
        local_minima=minima2,
        variance=variance,
        objective_at_solution=q_hat,
        j_statistic=j_stat,
        diagnostics=diagnostics,
        flags=flags,
    )


def variance_estimate(
    stack_or_sample,
    beta_hat: np.ndarray,
    weight: np.ndarray | None,
    lam: np.ndarray,
    n: int | None = None,
    config: GmmConfig | None = None,
    flags: list[str] | None = None,
    instruments: np.ndarray | None = None,
) -> np.ndarray:
    """Sandwich variance (G'WG)^-1 G'W S W G (G'WG)^-1 / n of the GMM estimate.

    Accepts either a prepared moment stack or (sample, instruments). With
    optimal instruments and W = S^-1 the sandwich collapses toward
    (G'S^-1G)^-1/n.
    """
    config = config or GmmConfig()
    flags = [] if flags is None else flags
    if isinstance(stack_or_sample, PanelSample):
        if instruments is None:
            raise ValueError("variance_estimate needs instruments alongside a raw sample")
        stack = _MomentStack([(stack_or_sample.y, stack_or_sample.x, np.asarray(instruments, float))])
        n = stack_or_sample.n
    else:
        stack = stack_or_sample
        if n is None:
            raise ValueError("n required with a prepared stack")
    if weight is None:
        weight = np.eye(stack.L)

    _, jac = stack.gbar(beta_hat, lam, want_jac=True)
    mm = stack.moment_matrix(beta_hat, lam)
    s_mat = mm.T @ mm / n
    a = jac.T @ weight @ jac
    a_inv = _ridge_inverse(a, config.ridge, flags, "G'WG")
    middle = jac.T @ weight @ s_mat @ weight @ jac
    v = a_inv @ middle @ a_inv / n
    return 0.5 * (v + v.T)
