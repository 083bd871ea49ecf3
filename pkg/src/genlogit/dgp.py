"""Data-generating processes: exact conditional objects and panel simulation.

Conditional probabilities, moments, the complete-data score, and the
efficiency bound are computed by enumerating all 2^T outcome trajectories and
integrating the fixed effect exactly (discrete mixtures) or by Gauss-Hermite
quadrature with node doubling (Gaussian-given-X laws).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from genlogit import glogit
from genlogit import kernel
from genlogit.glogit import GenLogistic

_GH_START = 64
_GH_MAX = 256
_GH_TOL = 1e-10

_MASK64 = (1 << 64) - 1


def derive_seed(master: int, index: int) -> int:
    """Splitmix64-style stream seed for replication `index` of `master`."""
    z = (int(master) + 0x9E3779B97F4A7C15 * (int(index) + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class GammaLaw:
    """Conditional law of the fixed effect given X.

    kind "discrete": cells is a tuple of mixtures, each a tuple of
    (support point, probability) pairs; one shared cell, or one per
    finite-support point of X (matched by support index). kind "gaussian":
    gamma | X ~ N(mean_const + mean_coef * stat(x), sd^2) with stat one of
    "mean" (grand mean of x entries), "first" (x[0, 0]) or "zero".
    """

    kind: str
    cells: tuple = ()
    mean_const: float = 0.0
    mean_coef: float = 0.0
    stat: str = "mean"
    sd: float = 1.0

    def __post_init__(self):
        if self.kind == "discrete":
            if not self.cells:
                raise ValueError("discrete GammaLaw needs at least one cell")
            for cell in self.cells:
                pts = np.array([p for p, _ in cell], dtype=float)
                pr = np.array([q for _, q in cell], dtype=float)
                if len(pts) == 0 or np.any(pr < 0):
                    raise ValueError("cell probabilities must be nonnegative")
                if abs(pr.sum() - 1.0) > 1e-12:
                    raise ValueError("cell probabilities must sum to 1")
        elif self.kind == "gaussian":
            if self.sd <= 0:
                raise ValueError("gaussian GammaLaw needs sd > 0")
            if self.stat not in ("mean", "first", "zero"):
                raise ValueError(f"unknown stat {self.stat!r}")
        else:
            raise ValueError(f"unknown GammaLaw kind {self.kind!r}")

    @staticmethod
    def discrete(points, probs) -> "GammaLaw":
        cell = tuple((float(p), float(q)) for p, q in zip(points, probs))
        return GammaLaw(kind="discrete", cells=(cell,))

    @staticmethod
    def discrete_cells(cells) -> "GammaLaw":
        return GammaLaw(
            kind="discrete",
            cells=tuple(tuple((float(p), float(q)) for p, q in cell) for cell in cells),
        )

    @staticmethod
    def gaussian(mean_const=0.0, mean_coef=0.0, stat="mean", sd=1.0) -> "GammaLaw":
        return GammaLaw(
            kind="gaussian",
            mean_const=float(mean_const),
            mean_coef=float(mean_coef),
            stat=stat,
            sd=float(sd),
        )

    def _stat(self, x: np.ndarray) -> float:
        if self.stat == "mean":
            return float(np.mean(x))
        if self.stat == "first":
            return float(x[0, 0])
        return 0.0


@dataclass(frozen=True)
class XLaw:
    """Covariate process law: finite support over T x K matrices, or i.i.d. entries."""

    kind: str
    support: np.ndarray | None = None
    probs: np.ndarray | None = None
    lo: float = -1.0
    hi: float = 1.0
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.kind == "finite":
            support = np.asarray(self.support, dtype=float)
            probs = np.asarray(self.probs, dtype=float)
            if support.ndim != 3:
                raise ValueError("finite support must be an (S, T, K) array")
            if probs.shape != (support.shape[0],) or np.any(probs < 0):
                raise ValueError("finite-support probabilities malformed")
            if abs(probs.sum() - 1.0) > 1e-12:
                raise ValueError("finite-support probabilities must sum to 1")
            object.__setattr__(self, "support", support)
            object.__setattr__(self, "probs", probs)
        elif self.kind == "uniform":
            if not self.lo < self.hi:
                raise ValueError("uniform XLaw needs lo < hi")
        elif self.kind == "gaussian":
            if self.sd <= 0:
                raise ValueError("gaussian XLaw needs sd > 0")
        else:
            raise ValueError(f"unknown XLaw kind {self.kind!r}")

    @staticmethod
    def finite(support, probs) -> "XLaw":
        return XLaw(kind="finite", support=np.asarray(support, float), probs=np.asarray(probs, float))

    @staticmethod
    def uniform(lo=-1.0, hi=1.0) -> "XLaw":
        return XLaw(kind="uniform", lo=float(lo), hi=float(hi))

    @staticmethod
    def gaussian(mean=0.0, sd=1.0) -> "XLaw":
        return XLaw(kind="gaussian", mean=float(mean), sd=float(sd))


@dataclass(frozen=True)
class DgpSpec:
    """Complete data-generating process: slope, periods, shocks, gamma | X, X law."""

    beta0: np.ndarray
    T: int
    dist: GenLogistic
    gamma: GammaLaw
    xlaw: XLaw

    def __post_init__(self):
        beta0 = np.atleast_1d(np.asarray(self.beta0, dtype=float))
        object.__setattr__(self, "beta0", beta0)
        if self.T < 2:
            raise ValueError("need at least two periods")
        if self.dist.n_terms > self.T - 1:
            raise ValueError("need T >= tau + 1 for the moment kernel")
        if self.xlaw.kind == "finite":
            s, t, k = self.xlaw.support.shape
            if t != self.T or k != len(beta0):
                raise ValueError("finite support shape inconsistent with (T, K)")
        if self.gamma.kind == "discrete" and len(self.gamma.cells) > 1:
            if self.xlaw.kind != "finite" or len(self.gamma.cells) != self.xlaw.support.shape[0]:
                raise ValueError("per-cell gamma mixtures require a matching finite X support")

    @property
    def K(self) -> int:
        return len(self.beta0)

    def kernel_lambda(self) -> np.ndarray:
        """The (T-1,) rate vector; requires the canonical T = tau + 1 layout."""
        if self.dist.n_terms != self.T - 1:
            raise ValueError(
                f"kernel operations need T = tau + 1 (T = {self.T}, tau = {self.dist.n_terms})"
            )
        return self.dist.lam


@dataclass
class PanelSample:
    """Observed panel: n units, T periods of (y, x)."""

    y: np.ndarray
    x: np.ndarray
    seed: int | None = None
    spec: DgpSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        self.x = np.asarray(self.x, dtype=float)
        if self.y.ndim != 2 or self.x.shape[:2] != self.y.shape or self.x.ndim != 3:
            raise ValueError("need y (n, T) and x (n, T, K)")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("y entries must be 0 or 1")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def K(self) -> int:
        return self.x.shape[2]


@lru_cache(maxsize=None)
def all_outcomes(T: int) -> np.ndarray:
    """(2^T, T) array of all binary trajectories, lexicographic."""
    out = np.array([[(i >> (T - 1 - t)) & 1 for t in range(T)] for i in range(2 ** T)])
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def _hermgauss(n: int):
    # scipy's Golub-Welsch nodes stay stable where numpy's recurrence overflows
    from scipy.special import roots_hermite

    return roots_hermite(n)


def _finite_cell_index(spec: DgpSpec, x: np.ndarray) -> int | None:
    if spec.xlaw.kind != "finite":
        return None
    diffs = np.max(np.abs(spec.xlaw.support - x[None]), axis=(1, 2))
    idx = int(np.argmin(diffs))
    return idx if diffs[idx] <= 1e-9 else None


def gamma_nodes(spec: DgpSpec, x: np.ndarray, n_gh: int = _GH_START):
    """Integration nodes and weights for gamma | X = x."""
    law = spec.gamma
    if law.kind == "discrete":
        if len(law.cells) == 1:
            cell = law.cells[0]
        else:
            idx = _finite_cell_index(spec, x)
            if idx is None:
                raise ValueError("x does not match any finite-support point for per-cell gamma")
            cell = law.cells[idx]
        pts = np.array([p for p, _ in cell])
        pr = np.array([q for _, q in cell])
        return pts, pr
    mu = law.mean_const + law.mean_coef * law._stat(x)
    z, w = _hermgauss(n_gh)
    return mu + np.sqrt(2.0) * law.sd * z, w / np.sqrt(np.pi)


def integrate_gamma(spec: DgpSpec, x: np.ndarray, fn):
    """E[fn(gamma) | X = x]; fn maps a (G,) grid to (G,) or (G, m) values.

    Discrete laws are summed exactly; Gaussian laws use Gauss-Hermite with
    node doubling until two successive levels agree to 1e-10 relative.
    Returns (value, converged).
    """
    if spec.gamma.kind == "discrete":
        g, w = gamma_nodes(spec, x)
        return np.tensordot(w, fn(g), axes=(0, 0)), True
    prev = None
    n_gh = _GH_START
    while n_gh <= _GH_MAX:
        g, w = gamma_nodes(spec, x, n_gh)
        val = np.tensordot(w, fn(g), axes=(0, 0))
        if prev is not None and np.all(np.abs(val - prev) <= _GH_TOL * (1.0 + np.abs(val))):
            return val, True
        prev = val
        n_gh *= 2
    return prev, False


def _log_f_terms(x: np.ndarray, g, spec: DgpSpec):
    """(log F, log(1-F)) at x_t'beta0 + g, shape (G, T); safe in both tails."""
    idx = x @ spec.beta0
    z = idx[None, :] + np.atleast_1d(np.asarray(g, dtype=float))[:, None]
    log_g = glogit.log_odds(spec.dist, z)
    log_1pg = np.logaddexp(0.0, log_g)
    return log_g - log_1pg, -log_1pg


def cond_prob_y(y: np.ndarray, x: np.ndarray, g, spec: DgpSpec):
    """P(Y = y | X = x, gamma = g); vectorized over an array of g values."""
    y = np.asarray(y)
    log_f, log_1mf = _log_f_terms(x, g, spec)
    p = np.exp(np.sum(np.where(y[None, :] == 1, log_f, log_1mf), axis=1))
    return p if np.ndim(g) else float(p[0])


def _single_spell_probs(x: np.ndarray, g: np.ndarray, spec: DgpSpec) -> np.ndarray:
    """(G, T) matrix of P(Y = e_t | x, g)."""
    log_f, log_1mf = _log_f_terms(x, g, spec)
    total = log_1mf.sum(axis=1, keepdims=True)
    return np.exp(log_f + total - log_1mf)


def _mt_raw(x: np.ndarray, b: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Raw-scale (M_1, ..., M_T) for one covariate matrix."""
    T = x.shape[0]
    ys = np.eye(T, dtype=int)
    m, ls = kernel.moment_batch(ys, np.broadcast_to(x, (T, *x.shape)), b, lam)
    return m * np.exp(ls)


def cond_moment(x: np.ndarray, spec: DgpSpec, b: np.ndarray, return_scale: bool = False):
    """E[m(Y, X; b) | X = x] at raw scale, by outcome enumeration.

    With return_scale=True also returns sum_y P(y|x) |m(y, x; b)|, the
    natural magnitude against which a zero should be judged.
    """
    lam = spec.kernel_lambda()
    x = np.asarray(x, dtype=float)
    mt = _mt_raw(x, np.atleast_1d(np.asarray(b, dtype=float)), lam)

    val, ok = integrate_gamma(spec, x, lambda g: _single_spell_probs(x, g, spec) @ mt)
    if not ok:
        raise RuntimeError("Gauss-Hermite integration did not converge for cond_moment")
    if not return_scale:
        return float(val)
    scale, _ = integrate_gamma(
        spec, x, lambda g: _single_spell_probs(x, g, spec) @ np.abs(mt)
    )
    return float(val), float(scale)


def a_weights(x: np.ndarray, spec: DgpSpec) -> np.ndarray:
    """Positive weights a_j(x) in the decomposition E[m | X = x] = sum_j a_j D_j."""
    lam = spec.kernel_lambda()
    x = np.asarray(x, dtype=float)
    idx = x @ spec.beta0
    w = spec.dist.w

    def fn(g):
        g = np.atleast_1d(g)
        log_den = np.sum(
            np.logaddexp(0.0, glogit.log_odds(spec.dist, idx[None, :] + g[:, None])), axis=1
        )
        return w[None, :] * np.exp(lam[None, :] * g[:, None] - log_den[:, None])

    val, ok = integrate_gamma(spec, x, fn)
    if not ok:
        raise RuntimeError("Gauss-Hermite integration did not converge for a_weights")
    return val


def draw_x(xlaw: XLaw, T: int, K: int, n: int, rng):
    """n covariate matrices from the X law; returns (x, cell_idx or None)."""
    if xlaw.kind == "finite":
        cell_idx = rng.choice(len(xlaw.probs), size=n, p=xlaw.probs)
        return xlaw.support[cell_idx], cell_idx
    if xlaw.kind == "uniform":
        return rng.uniform(xlaw.lo, xlaw.hi, size=(n, T, K)), None
    return rng.normal(xlaw.mean, xlaw.sd, size=(n, T, K)), None


def simulate_panel(spec: DgpSpec, n: int, seed) -> PanelSample:
    """Draw X, then gamma | X, then i.i.d. shocks; deterministic given seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    T, K = spec.T, spec.K
    x, cell_idx = draw_x(spec.xlaw, T, K, n, rng)

    law = spec.gamma
    if law.kind == "discrete":
        gam = np.empty(n)
        if len(law.cells) == 1:
            pts = np.array([p for p, _ in law.cells[0]])
            pr = np.array([q for _, q in law.cells[0]])
            gam[:] = rng.choice(pts, size=n, p=pr)
        else:
            for c, cell in enumerate(law.cells):
                sel = cell_idx == c
                if sel.any():
                    pts = np.array([p for p, _ in cell])
                    pr = np.array([q for _, q in cell])
                    gam[sel] = rng.choice(pts, size=int(sel.sum()), p=pr)
    else:
        if law.stat == "mean":
            stat = x.mean(axis=(1, 2))
        elif law.stat == "first":
            stat = x[:, 0, 0]
        else:
            stat = np.zeros(n)
        gam = rng.normal(law.mean_const + law.mean_coef * stat, law.sd)

    eps = glogit.sample(spec.dist, n * T, rng).reshape(n, T)
    y = (x @ spec.beta0 + gam[:, None] - eps >= 0).astype(int)
    return PanelSample(y=y, x=x, seed=None if isinstance(seed, np.random.Generator) else seed, spec=spec)


def score_complete(y: np.ndarray, x: np.ndarray, g: float, beta: np.ndarray, dist: GenLogistic) -> np.ndarray:
    """Score of the complete model (gamma observed) with respect to beta."""
    y = np.asarray(y)
    x = np.asarray(x, dtype=float)
    idx = x @ np.atleast_1d(np.asarray(beta, dtype=float)) + g
    f = glogit.cdf(dist, idx)
    sw = glogit.score_weight(dist, idx)
    return x.T @ (sw * (y - f))


def score_moment_cov(x: np.ndarray, spec: DgpSpec) -> np.ndarray:
    """E[S_beta0 * m(Y, X; beta0) | X = x] for the stabilized kernel.

    The complete-model score identity makes this equal to -R(x); computed
    here by full outcome enumeration for verification.
    """
    lam = spec.kernel_lambda()
    x = np.asarray(x, dtype=float)
    T = spec.T
    ys = all_outcomes(T)
    m_stab, _ = kernel.moment_batch(ys, np.broadcast_to(x, (len(ys), *x.shape)), spec.beta0, lam)
    idx = x @ spec.beta0

    def fn(g):
        g = np.atleast_1d(g)
        log_f, log_1mf = _log_f_terms(x, g, spec)
        f = np.exp(log_f)
        sw = glogit.score_weight(spec.dist, idx[None, :] + g[:, None])
        out = np.zeros((len(g), spec.K))
        for iy, yvec in enumerate(ys):
            if m_stab[iy] == 0.0:
                continue
            p = np.exp(np.sum(np.where(yvec[None, :] == 1, log_f, log_1mf), axis=1))
            s = (sw * (yvec[None, :] - f)) @ x  # (G, K)
            out += (p * m_stab[iy])[:, None] * s
        return out

    val, ok = integrate_gamma(spec, x, fn)
    if not ok:
        raise RuntimeError("Gauss-Hermite integration did not converge for score_moment_cov")
    return val


def r_and_omega(x: np.ndarray, spec: DgpSpec, degenerate_tol: float = 1e-14):
    """Conditional moment Jacobian R(x) and variance Omega(x) of the stabilized kernel.

    Returns (R, omega, flagged); flagged marks degenerate cells with omega
    below the tolerance. Both objects refer to the stabilized kernel (the
    raw-kernel versions differ by the positive factor exp(mean index *
    sum lambda); the bound V0 is invariant to that choice).
    """
    lam = spec.kernel_lambda()
    x = np.asarray(x, dtype=float)
    T = spec.T
    ys = np.eye(T, dtype=int)
    m_stab, _, grads = kernel.moment_batch(
        ys, np.broadcast_to(x, (T, *x.shape)), spec.beta0, lam, want_grad=True
    )

    probs, ok = integrate_gamma(spec, x, lambda g: _single_spell_probs(x, g, spec))
    if not ok:
        raise RuntimeError("Gauss-Hermite integration did not converge for r_and_omega")
    r = probs @ grads
    omega = float(probs @ m_stab ** 2)
    return r, omega, omega < degenerate_tol


def efficiency_bound(spec: DgpSpec, cond_limit: float = 1e12) -> np.ndarray:
    """V0 = E[Omega(X)^{-1} R(X) R(X)']^{-1} over a finite X support."""
    if spec.xlaw.kind != "finite":
        raise ValueError("efficiency_bound needs a finite-support X law (exact expectation)")
    k = spec.K
    acc = np.zeros((k, k))
    for p, x in zip(spec.xlaw.probs, spec.xlaw.support):
        r, omega, degenerate = r_and_omega(x, spec)
        if degenerate:
            if np.max(np.abs(r)) > 1e-10:
                raise ValueError("degenerate cell with nonzero R: bound undefined")
            continue  # cell carries no information
        acc += p * np.outer(r, r) / omega
    cond = np.linalg.cond(acc)
    if not np.isfinite(cond) or cond > cond_limit:
        raise np.linalg.LinAlgError(
            f"E[Omega^-1 R R'] is numerically singular (condition number {cond:.3e})"
        )
    v0 = np.linalg.inv(acc)
    return 0.5 * (v0 + v0.T)


def write_panel_csv(sample: PanelSample, path) -> None:
    """Write the panel in long form: id, t, y, x1..xK; x at 17 significant digits."""
    n, T, K = sample.n, sample.T, sample.K
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "t", "y"] + [f"x{k + 1}" for k in range(K)])
        for i in range(n):
            for t in range(T):
                writer.writerow(
                    [i, t, int(sample.y[i, t])] + [f"{v:.17g}" for v in sample.x[i, t]]
                )


def read_panel_csv(path) -> PanelSample:
    """Read a panel written by write_panel_csv."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["id", "t", "y"]:
            raise ValueError(f"unexpected panel CSV header: {header[:3]}")
        K = len(header) - 3
        rows = [(int(r[0]), int(r[1]), int(r[2]), [float(v) for v in r[3:]]) for r in reader]
    if not rows:
        raise ValueError("empty panel CSV")
    ids = sorted({r[0] for r in rows})
    ts = sorted({r[1] for r in rows})
    id_pos = {v: i for i, v in enumerate(ids)}
    t_pos = {v: i for i, v in enumerate(ts)}
    y = np.zeros((len(ids), len(ts)), dtype=int)
    x = np.zeros((len(ids), len(ts), K))
    seen = np.zeros((len(ids), len(ts)), dtype=bool)
    for i, t, yv, xv in rows:
        y[id_pos[i], t_pos[t]] = yv
        x[id_pos[i], t_pos[t]] = xv
        seen[id_pos[i], t_pos[t]] = True
    if not seen.all():
        raise ValueError("unbalanced panel: missing (id, t) rows")
    return PanelSample(y=y, x=x)
