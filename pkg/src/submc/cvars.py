"""Control variates, their covariate Jacobians, and warm starts.

A control-variate set maps a dataset to a k-vector of precomputed
statistics.  The Jacobian with respect to the free covariates (rows
after a fixed prefix) drives the coupled-dataset construction in
``submc.manifold``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Dataset, RngStream
from .models import GlmModel, mle, mle_jacobian, score_covariate_jacobian

__all__ = [
    "ControlVariateSet",
    "WarmStart",
    "mle_cv",
    "grid_cv",
    "mean_cv",
    "composite_cv",
    "cv_jacobian",
    "warm_start_sample",
    "warm_start_ratio",
]


@dataclass(frozen=True)
class ControlVariateSet:
    """Statistic maps T with stored values t = T(generating dataset)."""

    kind: str  # "mle" | "grid" | "mean" | "composite"
    values: np.ndarray
    evaluator: Callable[[Dataset], np.ndarray]
    payload: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.values.size


def mle_cv(model: GlmModel, data: Dataset) -> ControlVariateSet:
    """MLE components as control variates (k = d).  MLE failures propagate."""

    def evaluator(ds: Dataset) -> np.ndarray:
        return mle(model, ds)

    return ControlVariateSet(
        kind="mle", values=evaluator(data), evaluator=evaluator, payload={"model": model}
    )


def grid_spacing(n: int, a: float) -> float:
    return float(n) ** (-float(a))


def _snap(x: np.ndarray, g: float) -> np.ndarray:
    # round half toward -inf so tie-breaking is reproducible
    return g * np.ceil(np.asarray(x, dtype=np.float64) / g - 0.5)


def grid_cv(data: Dataset, a: float) -> ControlVariateSet:
    """Nearest lattice point of spacing n^-a per covariate entry (k = n*d)."""
    if a < 0:
        raise ValueError("grid exponent a must be >= 0")
    g = grid_spacing(data.n, a)

    def evaluator(ds: Dataset) -> np.ndarray:
        return _snap(ds.covariates, g).reshape(-1)

    return ControlVariateSet(
        kind="grid", values=evaluator(data), evaluator=evaluator, payload={"a": a, "spacing": g}
    )


def mean_cv(data: Dataset) -> ControlVariateSet:
    """Mean of the responses; sufficient for the Gaussian-mean toy."""

    def evaluator(ds: Dataset) -> np.ndarray:
        return np.array([ds.responses.mean()])

    return ControlVariateSet(kind="mean", values=evaluator(data), evaluator=evaluator)


def covariate_mean_cv(data: Dataset) -> ControlVariateSet:
    """Mean of all covariate entries: the affine sum-statistic toy."""

    def evaluator(ds: Dataset) -> np.ndarray:
        return np.array([ds.covariates.mean()])

    return ControlVariateSet(kind="mean_x", values=evaluator(data), evaluator=evaluator)


def composite_cv(parts: Sequence[ControlVariateSet]) -> ControlVariateSet:
    parts = list(parts)

    def evaluator(ds: Dataset) -> np.ndarray:
        return np.concatenate([p.evaluator(ds) for p in parts])

    return ControlVariateSet(
        kind="composite",
        values=np.concatenate([p.values for p in parts]),
        evaluator=evaluator,
        payload={"parts": parts},
    )


def cv_jacobian(
    cv: ControlVariateSet,
    model: Optional[GlmModel],
    data: Dataset,
    fixed_prefix: int,
) -> np.ndarray:
    """Rows dT_l / dx_ij over free coordinates i >= fixed_prefix, shape (k, d*(n-m)).

    Free-coordinate columns are flattened row-major: datapoint-major,
    covariate-coordinate-minor.  For the mle kind the rows come from
    implicit differentiation d beta_hat / dx = -J^-1 df/dx; a singular J
    is an explicit failure.  The grid kind is locally constant (zero
    matrix almost everywhere).
    """
    n, d = data.n, data.d
    m = int(fixed_prefix)
    if not 0 <= m <= n:
        raise ValueError("fixed_prefix out of range")
    ncols = d * (n - m)
    if cv.kind == "mle":
        if model is None:
            model = cv.payload["model"]
        beta = cv.evaluator(data)
        J = mle_jacobian(model, data, beta)
        M = score_covariate_jacobian(model, data, beta)[:, m * d :]
        try:
            return -np.linalg.solve(J, M)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular MLE Jacobian; cv_jacobian undefined") from exc
    if cv.kind == "grid":
        return np.zeros((cv.k, ncols))
    if cv.kind == "mean":
        # statistic is over responses, which are never free coordinates here
        return np.zeros((cv.k, ncols))
    if cv.kind == "mean_x":
        return np.full((1, ncols), 1.0 / (n * d))
    if cv.kind == "composite":
        return np.vstack([cv_jacobian(p, model, data, m) for p in cv.payload["parts"]])
    raise ValueError(f"unknown cv kind {cv.kind!r}")


# ---------------------------------------------------------------------------
# warm starts


@dataclass(frozen=True)
class WarmStart:
    """Uniform distribution on the ball B(center, radius), radius = n^-c_w."""

    center: np.ndarray
    radius: float
    c_w: float = 1.0

    @classmethod
    def from_mle(cls, model: GlmModel, data: Dataset, c_w: float = 1.0) -> "WarmStart":
        if not 0.5 <= c_w <= 2.0:
            raise ValueError("warm-start exponent c_w must lie in [0.5, 2]")
        center = mle(model, data)
        return cls(center=center, radius=float(data.n) ** (-c_w), c_w=c_w)

    @property
    def d(self) -> int:
        return self.center.size

    def log_density(self) -> float:
        """Log of the constant density on the ball."""
        d = self.d
        log_vol = (
            0.5 * d * np.log(np.pi) - _lgamma(0.5 * d + 1.0) + d * np.log(self.radius)
        )
        return -log_vol


def _lgamma(x: float) -> float:
    from scipy.special import gammaln

    return float(gammaln(x))


def warm_start_sample(ws: WarmStart, stream: RngStream) -> np.ndarray:
    """Uniform draw from the warm-start ball."""
    gen = stream.generator() if isinstance(stream, RngStream) else stream
    d = ws.d
    v = gen.standard_normal(d)
    v /= np.linalg.norm(v)
    r = ws.radius * gen.random() ** (1.0 / d)
    return ws.center + r * v


def _eval_logp(log_posterior_fn, pts: np.ndarray) -> np.ndarray:
    """Evaluate a log-density on (N, d) points, batched if the callable allows."""
    try:
        out = np.asarray(log_posterior_fn(pts), dtype=np.float64)
        if out.shape == (pts.shape[0],):
            return out
    except Exception:
        pass
    return np.array([float(log_posterior_fn(p)) for p in pts])


def warm_start_ratio(
    ws: WarmStart,
    log_posterior_fn: Callable[[np.ndarray], float],
    lo: np.ndarray,
    hi: np.ndarray,
    grid: int = 257,
    tol: float = 1e-6,
    max_refine: int = 10,
    ball_nodes: int = 4097,
) -> float:
    """sup over ball nodes of warm-start density / normalized posterior density.

    The posterior normalizer comes from Simpson quadrature on [lo, hi]
    (d <= 2), refined until stable to ``tol``; the sup is taken over a
    dense node set inside the ball including its boundary.  A quadrature
    that fails to stabilize raises with the last two estimates.
    """
    from scipy.integrate import simpson

    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    d = ws.d
    if d > 2:
        raise ValueError("warm_start_ratio supports d <= 2 only")

    # reference level keeps exponentials sane across refinements
    ref = float(_eval_logp(log_posterior_fn, ws.center[None, :])[0])

    prev = None
    Z = None
    for _ in range(max_refine):
        axes = [np.linspace(lo[j], hi[j], grid) for j in range(d)]
        if d == 1:
            pts = axes[0][:, None]
        else:
            A, B = np.meshgrid(axes[0], axes[1], indexing="ij")
            pts = np.column_stack([A.reshape(-1), B.reshape(-1)])
        dens = np.exp(_eval_logp(log_posterior_fn, pts) - ref)
        if d == 1:
            Z = float(simpson(dens, x=axes[0]))
        else:
            M = dens.reshape(grid, grid)
            Z = float(simpson(simpson(M, x=axes[1], axis=1), x=axes[0]))
        if prev is not None and abs(Z - prev) <= tol * abs(Z):
            break
        prev = Z
        grid = 2 * grid - 1
    else:
        raise RuntimeError(
            f"warm_start_ratio quadrature did not stabilize (last two estimates {prev}, {Z})"
        )

    c, r = ws.center, ws.radius
    if d == 1:
        nodes = (c[0] + np.linspace(-r, r, ball_nodes))[:, None]
    else:
        side = int(np.sqrt(ball_nodes))
        g = np.linspace(-r, r, side)
        A, B = np.meshgrid(g, g, indexing="ij")
        disk = np.column_stack([A.reshape(-1), B.reshape(-1)])
        disk = disk[np.linalg.norm(disk, axis=1) <= r]
        ang = np.linspace(0.0, 2 * np.pi, 1024, endpoint=False)
        ring = r * np.column_stack([np.cos(ang), np.sin(ang)])
        nodes = c[None, :] + np.vstack([disk, ring])
    post = np.exp(_eval_logp(log_posterior_fn, nodes) - ref) / Z
    return float(np.exp(ws.log_density()) / post.min())
