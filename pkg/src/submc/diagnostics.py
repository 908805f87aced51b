"""Spectral quantities, TV distances, covering times, and the cost functional.

Finite-state objects are dense numpy matrices; reductions are either
vectorized or merged in replicate order so outputs are independent of
thread count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import simpson
from scipy.stats import norm

from . import _backend
from .core import Dataset, RngStream, parallel_map
from .kernels import run_chain

__all__ = [
    "TransitionMatrix",
    "GridSpec",
    "DiagnosticsReport",
    "discretize",
    "discrete_mh_matrix",
    "stationary_distribution",
    "spectral_gap",
    "pseudo_spectral_gap",
    "half_lazy",
    "worst_case_asvar",
    "worst_case_asvar_brute",
    "iat_ess",
    "IatResult",
    "tv_distance",
    "tv_normals",
    "tv_exponentials",
    "covering_time",
    "CoveringResult",
    "coupon_sim",
    "anticoncentration_check",
    "cost",
    "scaling_experiment",
    "ScalingResult",
]


@dataclass
class GridSpec:
    lo: float
    hi: float
    cells: int = 51

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.cells + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    @classmethod
    def around(cls, mean: float, sd: float, cells: int = 51, width_sds: float = 6.0) -> "GridSpec":
        return cls(mean - width_sds * sd, mean + width_sds * sd, cells)


@dataclass
class TransitionMatrix:
    """Row-stochastic matrix over a declared grid of states."""

    P: np.ndarray
    grid: np.ndarray
    pi: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(P < -1e-12):
            raise ValueError("transition matrix entries must be nonnegative")
        rs = P.sum(axis=1)
        if np.max(np.abs(rs - 1.0)) > 1e-12:
            raise ValueError(f"rows must sum to 1 within 1e-12 (max dev {np.max(np.abs(rs-1)):.2e})")
        self.P = P


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Left Perron eigenvector of a row-stochastic matrix, normalized."""
    vals, vecs = np.linalg.eig(P.T)
    i = int(np.argmin(np.abs(vals - 1.0)))
    v = np.real(vecs[:, i])
    v = np.abs(v)
    return v / v.sum()


def _gl_nodes(a: float, b: float, order: int = 8):
    x, w = np.polynomial.legendre.leggauss(order)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


def discretize(
    kernel,
    data: Dataset,
    grid: GridSpec,
    log_posterior_fn: Callable[[np.ndarray], np.ndarray],
    mode: str = "density",
    stream: Optional[RngStream] = None,
    draws: int = 10_000,
    gl_order: int = 8,
) -> TransitionMatrix:
    """Discretized restriction of a 1-d random-walk MH kernel.

    ``density`` mode computes the cell-conditional posterior-averaged
    transition probabilities analytically from the uniform-proposal MH
    density, so the binned posterior is exactly stationary up to
    quadrature error.  ``mc`` mode estimates each row by per-cell Monte
    Carlo with shared streams (>= 10^4 draws per cell).
    """
    edges = grid.edges
    centers = grid.centers
    C = grid.cells
    h = kernel.proposal_halfwidth(data.n)

    def logp(x):
        return log_posterior_fn(np.asarray(x, dtype=np.float64))

    if mode == "density":
        P = np.zeros((C, C))
        nodes = np.empty((C, gl_order))
        nw = np.empty((C, gl_order))
        for i in range(C):
            x, w = _gl_nodes(edges[i], edges[i + 1], gl_order)
            nodes[i], nw[i] = x, w * np.exp(logp(x))
        cell_mass = nw.sum(axis=1)
        for i in range(C):
            wts = nw[i] / cell_mass[i]
            for a, wa in zip(nodes[i], wts):
                la = float(logp(np.array([a]))[0])
                lo_r, hi_r = a - h, a + h
                j0 = max(0, int(np.searchsorted(edges, lo_r) - 1))
                j1 = min(C - 1, int(np.searchsorted(edges, hi_r) - 1))
                for j in range(j0, j1 + 1):
                    if j == i:
                        continue  # moves within the source cell fold into the diagonal
                    aa, bb = max(edges[j], lo_r), min(edges[j + 1], hi_r)
                    if bb <= aa:
                        continue
                    yx, yw = _gl_nodes(aa, bb, gl_order)
                    acc = np.minimum(1.0, np.exp(logp(yx) - la))
                    P[i, j] += wa * float(np.dot(yw, acc)) / (2.0 * h)
            P[i, i] = 1.0 - P[i].sum()
        if np.any(P.diagonal() < -1e-9):
            raise RuntimeError("discretization produced an invalid diagonal; refine the grid")
        P = np.clip(P, 0.0, None)
        P /= P.sum(axis=1, keepdims=True)
        pi = cell_mass / cell_mass.sum()
        return TransitionMatrix(P, centers, pi=pi)

    if mode != "mc":
        raise ValueError("mode must be 'density' or 'mc'")
    if stream is None:
        raise ValueError("mc mode needs a stream")
    if draws < 10_000:
        raise ValueError("mc mode requires >= 10^4 draws per cell")
    P = np.zeros((C, C))
    for i in range(C):
        gen = stream.child(i).generator()
        # draw starting points from the posterior restricted to the cell
        x, w = _gl_nodes(edges[i], edges[i + 1], gl_order)
        pw = np.exp(logp(x))
        pw /= pw.sum()
        starts = gen.choice(x, size=draws, p=pw)
        from .kernels import KernelState

        counts = np.zeros(C)
        for s in starts:
            st, _, _ = kernel.step(KernelState(theta=np.array([s])), data, gen)
            j = int(np.clip(np.searchsorted(edges, st.theta[0]) - 1, 0, C - 1))
            counts[j] += 1
        P[i] = counts / draws
    return TransitionMatrix(P, centers)


def discrete_mh_matrix(log_weights: np.ndarray, window: int = 1) -> np.ndarray:
    """Exact MH transition matrix on a finite path of states.

    Proposal: uniform over the 2*window neighbors (proposals off the ends
    are rejected in place), acceptance min(1, p_j / p_i).
    """
    lw = np.asarray(log_weights, dtype=np.float64)
    S = lw.size
    P = np.zeros((S, S))
    q = 1.0 / (2 * window)
    for i in range(S):
        for off in range(-window, window + 1):
            if off == 0:
                continue
            j = i + off
            if 0 <= j < S:
                P[i, j] = q * min(1.0, float(np.exp(lw[j] - lw[i])))
        P[i, i] = 1.0 - P[i].sum()
    return P


# ---------------------------------------------------------------------------
# spectral quantities


def _pi_symmetrize(P: np.ndarray, pi: np.ndarray) -> np.ndarray:
    # similarity transform D^1/2 P D^-1/2, symmetric when P is pi-reversible
    r = np.sqrt(np.maximum(pi, 1e-300))
    return r[:, None] * P / r[None, :]


def spectral_gap(T: TransitionMatrix | np.ndarray, pi: Optional[np.ndarray] = None,
                 reversible: bool = False) -> float:
    """Absolute spectral gap: one minus the largest non-unit eigenvalue modulus.

    For reversible chains the similarity-symmetrized matrix keeps the
    eigenproblem real and stable.
    """
    P = T.P if isinstance(T, TransitionMatrix) else np.asarray(T, dtype=np.float64)
    if reversible:
        if pi is None:
            pi = stationary_distribution(P)
        S = _pi_symmetrize(P, pi)
        vals = np.linalg.eigvalsh(0.5 * (S + S.T))
        mods = np.abs(vals)
        mods[int(np.argmin(np.abs(vals - 1.0)))] = 0.0
        return float(1.0 - mods.max())
    vals = np.linalg.eigvals(P)
    mods = np.abs(vals)
    mods[int(np.argmin(np.abs(vals - 1.0)))] = 0.0
    return float(1.0 - mods.max())


def half_lazy(P: np.ndarray) -> np.ndarray:
    P = P.P if isinstance(P, TransitionMatrix) else P
    return 0.5 * (P + np.eye(P.shape[0]))


def pseudo_spectral_gap(T: TransitionMatrix | np.ndarray, s_max: int = 50,
                        pi: Optional[np.ndarray] = None) -> float:
    """max over s <= s_max of gap((K^s)* K^s) / s, with * the pi-adjoint."""
    P = T.P if isinstance(T, TransitionMatrix) else np.asarray(T, dtype=np.float64)
    if pi is None:
        pi = T.pi if isinstance(T, TransitionMatrix) and T.pi is not None else stationary_distribution(P)
    pi = np.maximum(pi, 1e-300)
    Pad = (P.T * pi[None, :]) / pi[:, None]  # adjoint: pi_j P_jk / pi_k transposed
    best = 0.0
    Ps = np.eye(P.shape[0])
    Pads = np.eye(P.shape[0])
    for s in range(1, s_max + 1):
        Ps = Ps @ P
        Pads = Pads @ Pad
        M = Pads @ Ps
        g = spectral_gap(M, pi=pi, reversible=True)
        best = max(best, g / s)
    return float(best)


def worst_case_asvar(T: TransitionMatrix | np.ndarray, pi: Optional[np.ndarray] = None) -> float:
    """Worst-case asymptotic-variance ratio 2/gap - 1 for a reversible,
    nonnegative-spectrum chain; raises if the spectrum is negative
    (apply ``half_lazy`` first)."""
    P = T.P if isinstance(T, TransitionMatrix) else np.asarray(T, dtype=np.float64)
    if pi is None:
        pi = stationary_distribution(P)
    S = _pi_symmetrize(P, pi)
    vals = np.linalg.eigvalsh(0.5 * (S + S.T))
    if vals.min() < -1e-10:
        raise ValueError(
            "spectrum has negative eigenvalues; apply half_lazy(T) first "
            "(asymptotic variance changes by at most a factor of 2)"
        )
    gap = spectral_gap(P, pi=pi, reversible=True)
    return 2.0 / gap - 1.0


def worst_case_asvar_brute(T: TransitionMatrix | np.ndarray, pi: Optional[np.ndarray] = None) -> float:
    """Independent computation of sup_phi asvar(phi)/Var(phi) through the
    fundamental matrix Z = (I - P + 1 pi')^-1 and the quadratic form
    phi' (2Z - I) phi maximized over pi-orthogonal directions."""
    P = T.P if isinstance(T, TransitionMatrix) else np.asarray(T, dtype=np.float64)
    if pi is None:
        pi = stationary_distribution(P)
    S = P.shape[0]
    Z = np.linalg.inv(np.eye(S) - P + np.outer(np.ones(S), pi))
    M = 2.0 * Z - np.eye(S)
    r = np.sqrt(pi)
    A = r[:, None] * M / r[None, :]
    A = 0.5 * (A + A.T)
    proj = np.eye(S) - np.outer(r, r)
    B = proj @ A @ proj
    return float(np.linalg.eigvalsh(B).max())


# ---------------------------------------------------------------------------
# autocorrelation and ESS


@dataclass
class IatResult:
    iat: float
    asvar: float
    ess: float
    reliable: bool


def iat_ess(values: np.ndarray, min_len: int = 1000) -> IatResult:
    """Initial-monotone-sequence estimate of the integrated autocorrelation
    time; ESS = length / IAT.  Flagged unreliable when IAT > length/10 or
    the trace is degenerate."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    N = x.size
    if N < min_len:
        raise ValueError(f"iat_ess requires a trace of length >= {min_len}")
    x = x - x.mean()
    var = float(np.dot(x, x) / N)
    if var <= 0.0:
        return IatResult(iat=float("inf"), asvar=0.0, ess=0.0, reliable=False)
    nfft = 1 << int(np.ceil(np.log2(2 * N)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[: N // 2] / N
    npairs = acov.size // 2
    gam = acov[0 : 2 * npairs : 2] + acov[1 : 2 * npairs : 2]
    # initial positive then monotone sequence of lag pairs
    pos = np.nonzero(gam <= 0)[0]
    stop = int(pos[0]) if pos.size else gam.size
    g = np.minimum.accumulate(gam[:stop]) if stop else gam[:0]
    iat = max(2.0 * float(g.sum()) / acov[0] - 1.0, 1e-12)
    reliable = iat <= N / 10.0
    return IatResult(iat=iat, asvar=var * iat, ess=N / iat, reliable=reliable)


# ---------------------------------------------------------------------------
# total variation distances


def tv_distance(
    logpdf1: Callable[[np.ndarray], np.ndarray],
    logpdf2: Callable[[np.ndarray], np.ndarray],
    lo,
    hi,
    grid: int = 257,
    tol: float = 1e-6,
    max_refine: int = 12,
) -> float:
    """0.5 * integral |p1 - p2| on [lo, hi] (d = 1 or 2, product grid),
    after independent Simpson normalization of each unnormalized density.
    Refines until successive estimates differ by less than ``tol``."""
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    d = lo.size
    if d > 2:
        raise ValueError("tv_distance supports d <= 2 only")

    def eval_density(fn, pts):
        out = np.asarray(fn(pts), dtype=np.float64)
        return out

    prev = None
    for _ in range(max_refine):
        axes = [np.linspace(lo[j], hi[j], grid) for j in range(d)]
        if d == 1:
            pts = axes[0]
            l1 = eval_density(logpdf1, pts)
            l2 = eval_density(logpdf2, pts)
            p1 = np.exp(l1 - l1.max())
            p2 = np.exp(l2 - l2.max())
            z1 = simpson(p1, x=pts)
            z2 = simpson(p2, x=pts)
            tv = 0.5 * float(simpson(np.abs(p1 / z1 - p2 / z2), x=pts))
        else:
            A, B = np.meshgrid(axes[0], axes[1], indexing="ij")
            pts = np.column_stack([A.reshape(-1), B.reshape(-1)])
            l1 = eval_density(logpdf1, pts).reshape(grid, grid)
            l2 = eval_density(logpdf2, pts).reshape(grid, grid)
            p1 = np.exp(l1 - l1.max())
            p2 = np.exp(l2 - l2.max())
            z1 = simpson(simpson(p1, x=axes[1], axis=1), x=axes[0])
            z2 = simpson(simpson(p2, x=axes[1], axis=1), x=axes[0])
            diff = np.abs(p1 / z1 - p2 / z2)
            tv = 0.5 * float(simpson(simpson(diff, x=axes[1], axis=1), x=axes[0]))
        if prev is not None and abs(tv - prev) < tol:
            return tv
        prev = tv
        grid = 2 * grid - 1
    raise RuntimeError(f"tv_distance did not converge; last two estimates {prev}, {tv}")


def tv_normals(mu1: float, s1: float, mu2: float, s2: float) -> float:
    """Closed-form TV distance between two univariate normals."""
    if abs(s1 - s2) < 1e-15 * max(s1, s2):
        return float(2.0 * norm.cdf(abs(mu1 - mu2) / (2.0 * s1)) - 1.0)
    # crossing points of the two densities: quadratic in x
    a = 0.5 / s2**2 - 0.5 / s1**2
    b = mu1 / s1**2 - mu2 / s2**2
    c = 0.5 * mu2**2 / s2**2 - 0.5 * mu1**2 / s1**2 + np.log(s2 / s1)
    r = np.sort(np.roots([a, b, c]))
    xs = np.concatenate([[-np.inf], r.real, [np.inf]])
    D = norm.cdf(xs, mu1, s1) - norm.cdf(xs, mu2, s2)
    return float(0.5 * np.abs(np.diff(D)).sum())


def tv_exponentials(r1: float, r2: float) -> float:
    """Closed-form TV distance between Exponential(r1) and Exponential(r2)."""
    if r1 == r2:
        return 0.0
    a, b = (r1, r2) if r1 < r2 else (r2, r1)
    xc = np.log(b / a) / (b - a)
    return float(np.exp(-a * xc) - np.exp(-b * xc))


# ---------------------------------------------------------------------------
# covering times and the weighted coupon collector


@dataclass
class CoveringResult:
    tau_hat: float
    taus: np.ndarray
    censored_fraction: float
    is_lower_bound: bool
    quantile: float


def covering_time(
    kernel,
    data: Dataset,
    stream: RngStream,
    start,
    threshold: Optional[int] = None,
    quantile: float = 0.99,
    replicates: int = 500,
    step_budget: int = 2000,
    cv=None,
    threads: int = 1,
) -> CoveringResult:
    """Empirical quantile of the first step at which the chain's cumulative
    used set reaches ``threshold`` (default n-1), across replicates started
    from ``start`` with independent streams."""
    n = data.n
    if threshold is None:
        threshold = n - 1

    def one(r: int) -> Optional[int]:
        trace = run_chain(
            kernel, data, step_budget, stream.child(r), theta0=start, cv=cv, keep_step_sets=False
        )
        return trace.ledger.first_cover_step(threshold)

    results = parallel_map(one, replicates, threads)
    taus = np.array([step_budget if t is None else t for t in results], dtype=np.float64)
    censored = sum(t is None for t in results)
    frac = censored / replicates
    return CoveringResult(
        tau_hat=float(np.quantile(taus, quantile)),
        taus=taus,
        censored_fraction=frac,
        is_lower_bound=frac > 0.10,
        quantile=quantile,
    )


def _coupon_T_numpy(weights: np.ndarray, inv_a: float, k: int, threshold: int,
                    max_draws: int, gen_idx, gen_u) -> int:
    """Numpy twin of the jit coupon run.  Index draws and rejection
    uniforms come from separate streams, so the chunked k == 1 path yields
    the same accepted sequence (hence the same draw count) as the scalar
    jit loop; k > 1 falls back to the per-draw python loop."""
    n = weights.shape[0]
    seen = np.zeros(n, dtype=bool)
    covered = 0
    draws = 0
    if k == 1:
        scaled = weights * inv_a
        chunk = 4096
        while covered < threshold:
            if draws >= max_draws:
                return -1
            idx = gen_idx.integers(0, n, size=chunk)
            us = gen_u.random(chunk)
            for i in idx[us < scaled[idx]]:
                draws += 1
                if not seen[i]:
                    seen[i] = True
                    covered += 1
                    if covered >= threshold:
                        break
                if draws >= max_draws:
                    break
        return draws
    from .kernels import _floyd_py

    while covered < threshold:
        if draws >= max_draws:
            return -1
        while True:
            batch = _floyd_py(gen_idx, n, k)
            u = gen_u.random()
            pw = float(np.prod(weights[batch] * inv_a))
            if u < pw:
                break
        draws += 1
        fresh = np.unique(batch[~seen[batch]])
        seen[fresh] = True
        covered += int(fresh.size)
    return draws


def coupon_sim(
    n: int,
    k: int,
    weights: Optional[np.ndarray],
    replicates: int,
    stream: RngStream,
    weight_bound: Optional[float] = None,
    threshold: Optional[int] = None,
    max_draws: Optional[int] = None,
) -> np.ndarray:
    """Draw i.i.d. product-weighted k-subsets of {0..n-1} per replicate and
    report the number of draws needed to see ``threshold`` distinct items
    (default all n).  Censored replicates are returned as -1."""
    if k < 1 or k > n:
        raise ValueError("need 1 <= k <= n")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w <= 0):
        raise ValueError("weights must be a positive length-n vector")
    A = float(weight_bound) if weight_bound is not None else max(float(w.max()), float(1.0 / w.min()))
    if A < 1.0 or np.any(w > A + 1e-12) or np.any(w < 1.0 / A - 1e-12):
        raise ValueError("weights must lie in [1/A, A] with A >= 1")
    if threshold is None:
        threshold = n
    if max_draws is None:
        max_draws = int(50 * A * A * max(n * np.log(max(n, 2)), 10) / k) + 1000
    out = np.empty(replicates, dtype=np.int64)
    use_jit = _backend.using_numba()
    if use_jit:
        from ._jit import coupon_draws

    for r in range(replicates):
        gen_idx = stream.child(r, 0).generator()
        gen_u = stream.child(r, 1).generator()
        if use_jit:
            out[r] = coupon_draws(w, 1.0 / A, k, threshold, max_draws, gen_idx, gen_u)
        else:
            out[r] = _coupon_T_numpy(w, 1.0 / A, k, threshold, max_draws, gen_idx, gen_u)
    return out


# ---------------------------------------------------------------------------
# anti-concentration


def anticoncentration_check(
    dist_spec: dict,
    v: np.ndarray,
    eps: float,
    samples: int,
    stream: RngStream,
) -> dict:
    """Empirical sliding-window mass of sum_i v_i X_i against the
    rho_max * eps * sqrt(m) bound.

    dist_spec: {"kind": "uniform"} (X_i ~ U[0,1], rho_max = 1) or
    {"kind": "normal", "sd": s} (rho_max = 1/(s sqrt(2 pi))).
    """
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError("v must be a unit vector")
    m = v.size
    gen = stream.generator()
    kind = dist_spec.get("kind", "uniform")
    if kind == "uniform":
        X = gen.random((samples, m))
        rho_max = 1.0
    elif kind == "normal":
        sd = float(dist_spec.get("sd", 1.0))
        X = gen.normal(0.0, sd, size=(samples, m))
        rho_max = 1.0 / (sd * np.sqrt(2.0 * np.pi))
    else:
        raise ValueError(f"unknown dist kind {kind!r}")
    s = np.sort(X @ v)
    # max count of points in any half-open window of length eps
    hi = np.searchsorted(s, s + eps, side="left")
    counts = hi - np.arange(samples)
    p_hat = float(counts.max()) / samples
    bound = rho_max * eps * np.sqrt(m)
    sigma_mc = float(np.sqrt(max(p_hat * (1 - p_hat), 1e-12) / samples))
    return {
        "empirical": p_hat,
        "bound": float(bound),
        "sigma_mc": sigma_mc,
        "ok": p_hat <= bound + 3 * sigma_mc,
        "m": m,
        "eps": eps,
        "samples": samples,
    }


# ---------------------------------------------------------------------------
# cost accounting


def cost(n: int, gap: float, tau: float) -> float:
    """Computational cost functional n / (gap * tau)."""
    if not 0.0 < gap <= 1.0:
        raise ValueError("gap must lie in (0, 1]")
    if tau < 1.0:
        raise ValueError("tau must be >= 1")
    return n / (gap * tau)


@dataclass
class ScalingResult:
    rows: list
    slope: float
    intercept: float

    def to_csv(self, path, manifest_hash: Optional[str] = None) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            if manifest_hash is not None:
                fh.write(f"# manifest_hash={manifest_hash}\n")
            w = csv.writer(fh)
            w.writerow(["n", "ESS", "accesses", "accesses_per_ES", "gap", "tau", "cost"])
            for row in self.rows:
                w.writerow(
                    [
                        row["n"],
                        repr(row["ess"]),
                        row["accesses"],
                        repr(row["accesses_per_es"]),
                        "" if row.get("gap") is None else repr(row["gap"]),
                        "" if row.get("tau") is None else row["tau"],
                        "" if row.get("cost") is None else repr(row["cost"]),
                    ]
                )


def scaling_experiment(
    data_builder: Callable[[int, RngStream], Dataset],
    kernel_builder: Callable[[Dataset], object],
    n_grid: Sequence[int],
    steps_for: Callable[[int], int],
    stream: RngStream,
    theta0_builder: Optional[Callable[[Dataset], np.ndarray]] = None,
    phi: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    burn_fraction: float = 0.2,
) -> ScalingResult:
    """Accesses per effective sample across a grid of dataset sizes, with
    the fitted log-log slope.  ESS uses the first parameter coordinate by
    default; accesses come from the usage ledger."""
    rows = []
    for ix, n in enumerate(n_grid):
        data = data_builder(int(n), stream.child(1, ix))
        kernel = kernel_builder(data)
        steps = int(steps_for(int(n)))
        theta0 = theta0_builder(data) if theta0_builder is not None else None
        trace = run_chain(kernel, data, steps, stream.child(2, ix), theta0=theta0,
                          keep_step_sets=False)
        burn = int(burn_fraction * steps)
        vals = trace.states[burn + 1 :, 0] if phi is None else phi(trace.states[burn + 1 :])
        res = iat_ess(vals)
        per_step = trace.ledger.access_count / steps
        accesses_per_es = per_step * res.iat
        tau = trace.ledger.first_cover_step(data.n - 1)
        rows.append(
            {
                "n": int(n),
                "ess": res.ess,
                "accesses": int(trace.ledger.access_count),
                "accesses_per_es": accesses_per_es,
                "gap": None,
                "tau": tau,
                "cost": None,
                "iat": res.iat,
                "reliable": res.reliable,
            }
        )
    ln = np.log([r["n"] for r in rows])
    lc = np.log([r["accesses_per_es"] for r in rows])
    slope, intercept = np.polyfit(ln, lc, 1)
    return ScalingResult(rows=rows, slope=float(slope), intercept=float(intercept))


@dataclass
class DiagnosticsReport:
    """Bundle of chain diagnostics; cost = n/(gap*tau) when both present."""

    gap: Optional[float] = None
    pseudo_gap: Optional[float] = None
    asvar: Optional[float] = None
    ess: Optional[float] = None
    iat: Optional[float] = None
    tau: Optional[float] = None
    tau_quantile: Optional[float] = None
    cost: Optional[float] = None
    tv_entries: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def finalize_cost(self, n: int) -> None:
        if self.gap is not None and self.tau is not None:
            self.cost = cost(n, self.gap, self.tau)

    def to_json(self, path, manifest_hash: Optional[str] = None) -> None:
        payload = {k: v for k, v in self.__dict__.items()}
        if manifest_hash is not None:
            payload["manifest_hash"] = manifest_hash
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")
