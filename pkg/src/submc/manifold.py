"""Coupled-dataset generation on the set of datasets that share a prefix
and all control-variate values.

The walk proposes in the tangent space (the null space of the
control-variate Jacobian over free coordinates), retracts back onto the
constraint set with Newton corrections in the Jacobian row space, and
accepts in-box proposals (the covariate law is a uniform box).  Free
coordinates are the covariate rows after the prefix; for the
response-statistic toys they are the responses instead.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import null_space

from .core import Dataset, RngStream, parallel_map
from .cvars import ControlVariateSet, cv_jacobian, grid_cv, mean_cv, mle_cv
from .diagnostics import tv_distance
from .models import (
    GlmModel,
    ToyModel,
    log_posterior,
    mle,
    mle_jacobian,
    sample_dataset,
    toy_posterior,
)

__all__ = [
    "ManifoldConstraint",
    "RetractError",
    "tangent_basis",
    "retract",
    "manifold_mh_step",
    "couple_datasets",
    "fluctuation_experiment",
    "FluctuationResult",
]

RESIDUAL_TOL = 1e-10


class RetractError(RuntimeError):
    """Newton projection failed: non-convergence or exit from the box."""


@dataclass
class ManifoldConstraint:
    """A base dataset, a fixed prefix, and the statistic values to hold."""

    data: Dataset
    fixed_prefix: int
    cv: ControlVariateSet
    model: Optional[GlmModel] = None
    box_low: Optional[np.ndarray] = None
    box_high: Optional[np.ndarray] = None
    move: str = "covariates"  # or "responses"
    target: np.ndarray = field(init=False)

    def __post_init__(self):
        n, d = self.data.n, self.data.d
        m = self.fixed_prefix
        if self.cv.kind != "grid" and not m <= n - self.cv.k - 1:
            if self.cv.kind in ("mle", "mean", "mean_x", "composite"):
                raise ValueError(
                    f"fixed prefix m={m} leaves no tangent directions (need m <= n-k-1 with k={self.cv.k})"
                )
        self.target = np.asarray(self.cv.values, dtype=np.float64).copy()
        res = float(np.linalg.norm(self.cv.evaluator(self.data) - self.target))
        if res > RESIDUAL_TOL:
            raise ValueError(f"base dataset violates T(base)=t (residual {res:.2e})")
        if self.move == "covariates":
            if self.box_low is None:
                self.box_low = np.full(d, -1.0)
            if self.box_high is None:
                self.box_high = np.full(d, 1.0)

    @property
    def n_free(self) -> int:
        return self.data.n - self.fixed_prefix

    @property
    def free_dim(self) -> int:
        per = self.data.d if self.move == "covariates" else 1
        return self.n_free * per

    def free_coords(self) -> np.ndarray:
        if self.move == "covariates":
            return self.data.covariates[self.fixed_prefix :].reshape(-1).copy()
        return self.data.responses[self.fixed_prefix :].copy()

    def with_free_coords(self, x_free: np.ndarray) -> Dataset:
        m = self.fixed_prefix
        if self.move == "covariates":
            X = self.data.covariates.copy()
            X[m:] = x_free.reshape(self.n_free, self.data.d)
            return self.data.replace_covariates(X)
        y = self.data.responses.copy()
        y[m:] = x_free
        return self.data.replace_responses(y)

    def _mle_model(self) -> GlmModel:
        return self.model if self.model is not None else self.cv.payload["model"]

    def statistic(self, x_free: np.ndarray) -> np.ndarray:
        ds = self.with_free_coords(x_free)
        if self.cv.kind == "mle":
            # warm-start at the held target: the walk never leaves its basin
            return mle(self._mle_model(), ds, start=self.target)
        return self.cv.evaluator(ds)

    def jacobian(self, x_free: np.ndarray) -> np.ndarray:
        ds = self.with_free_coords(x_free)
        if self.move == "covariates":
            if self.cv.kind == "mle":
                from .models import score_covariate_jacobian

                mdl = self._mle_model()
                beta = mle(mdl, ds, start=self.target)
                J = mle_jacobian(mdl, ds, beta)
                M = score_covariate_jacobian(mdl, ds, beta)[:, self.fixed_prefix * ds.d :]
                return -np.linalg.solve(J, M)
            return cv_jacobian(self.cv, self.model, ds, self.fixed_prefix)
        if self.cv.kind == "mean":
            return np.full((1, self.n_free), 1.0 / ds.n)
        raise ValueError(f"response-moving Jacobian undefined for cv kind {self.cv.kind!r}")

    def in_box(self, x_free: np.ndarray) -> bool:
        if self.move != "covariates":
            return True
        X = x_free.reshape(self.n_free, self.data.d)
        return bool(np.all(X >= self.box_low - 1e-12) and np.all(X <= self.box_high + 1e-12))


def tangent_basis(mc: ManifoldConstraint, rank_check: bool = True) -> np.ndarray:
    """Orthonormal basis (columns) of the tangent space W: the null space of
    the CV Jacobian over free coordinates.  Raises when a statistic that
    should be full-rank is not, naming it."""
    J = mc.jacobian(mc.free_coords())
    if rank_check and mc.cv.kind in ("mle", "mean", "mean_x"):
        r = np.linalg.matrix_rank(J, tol=1e-10 * max(1.0, float(np.abs(J).max())))
        if r < mc.cv.k:
            raise np.linalg.LinAlgError(
                f"CV Jacobian rank-deficient for statistic kind {mc.cv.kind!r}: rank {r} < k={mc.cv.k}"
            )
    B = null_space(J)
    return B


def _project_tangent(J: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Orthogonal projection of v onto the null space of J."""
    if not np.any(J):
        return v
    G = J @ J.T
    try:
        coef = np.linalg.solve(G, J @ v)
    except np.linalg.LinAlgError:
        coef, *_ = np.linalg.lstsq(G, J @ v, rcond=None)
    return v - J.T @ coef


def retract(
    mc: ManifoldConstraint,
    x_free: np.ndarray,
    direction: np.ndarray,
    step: float,
    max_newton: int = 50,
    J0: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, float]:
    """Newton projection of ``x_free + step*direction`` back onto {T = t},
    with corrections restricted to the row space of the base Jacobian.

    Returns (new free coordinates, correction norm).  The correction is
    second order in the step size; failures raise RetractError.
    """
    if J0 is None:
        J0 = mc.jacobian(x_free)
    p = x_free + step * direction
    if not np.any(J0):
        # locally constant statistic: no correction possible or needed
        if not mc.in_box(p):
            raise RetractError("proposal left the covariate box")
        res = float(np.linalg.norm(mc.statistic(p) - mc.target))
        if res > RESIDUAL_TOL:
            raise RetractError(f"statistic changed across a flat region (residual {res:.2e})")
        return p, 0.0
    alpha = np.zeros(J0.shape[0])
    cur = p
    for _ in range(max_newton):
        r = mc.statistic(cur) - mc.target
        if float(np.linalg.norm(r)) <= RESIDUAL_TOL:
            if not mc.in_box(cur):
                raise RetractError("retracted point left the covariate box")
            return cur, float(np.linalg.norm(J0.T @ alpha))
        Jc = mc.jacobian(cur)
        M = Jc @ J0.T
        try:
            delta = np.linalg.solve(M, r)
        except np.linalg.LinAlgError as exc:
            raise RetractError("singular Newton system during retraction") from exc
        alpha = alpha - delta
        cur = p + J0.T @ alpha
    raise RetractError(f"retraction Newton failed to reach {RESIDUAL_TOL} in {max_newton} iterations")


def manifold_mh_step(
    mc: ManifoldConstraint,
    step_scale: float,
    gen,
) -> tuple[ManifoldConstraint, bool, dict]:
    """One walk step: direction uniform on the unit sphere of the tangent
    space, length uniform on [-s, s], Newton retraction, accept iff the
    proposal stays in the box (uniform-box covariate law)."""
    x = mc.free_coords()
    J = mc.jacobian(x)
    v = gen.standard_normal(mc.free_dim)
    v = _project_tangent(J, v)
    nv = float(np.linalg.norm(v))
    info = {"accepted": False, "correction": 0.0, "residual": 0.0}
    if nv < 1e-12:
        return mc, False, info
    v /= nv
    s = float(gen.uniform(-step_scale, step_scale))
    try:
        x_new, corr = retract(mc, x, v, s, J0=J)
    except RetractError as exc:
        info["reason"] = str(exc)
        return mc, False, info
    new_data = mc.with_free_coords(x_new)
    res = float(np.linalg.norm(mc.cv.evaluator(new_data) - mc.target))
    if res > RESIDUAL_TOL:
        info["reason"] = f"residual {res:.2e}"
        return mc, False, info
    info.update(accepted=True, correction=corr, residual=res)
    new_mc = replace(mc, data=new_data)
    return new_mc, True, info


def couple_datasets(
    data: Dataset,
    model: Optional[GlmModel],
    cv: ControlVariateSet,
    fixed_prefix: int,
    walk_steps: int,
    stream: RngStream,
    step_scale: Optional[float] = None,
    move: str = "covariates",
    box_low: Optional[np.ndarray] = None,
    box_high: Optional[np.ndarray] = None,
) -> tuple[Dataset, dict]:
    """Walk ``walk_steps`` manifold MH steps from ``data``; the result shares
    the responses, the first ``fixed_prefix`` covariate rows, and all
    control-variate values with the input."""
    mc = ManifoldConstraint(
        data=data, fixed_prefix=fixed_prefix, cv=cv, model=model,
        box_low=box_low, box_high=box_high, move=move,
    )
    if step_scale is None:
        if move == "covariates":
            half = float(np.min((mc.box_high - mc.box_low) / 2.0))
        else:
            half = 1.0
        step_scale = 0.05 * half
    gen = stream.generator()
    accepted = 0
    max_corr = 0.0
    for _ in range(walk_steps):
        mc, ok, info = manifold_mh_step(mc, step_scale, gen)
        accepted += int(ok)
        max_corr = max(max_corr, info.get("correction", 0.0))
    final_res = float(np.linalg.norm(mc.cv.evaluator(mc.data) - mc.target))
    stats = {
        "accept_rate": accepted / walk_steps if walk_steps else 1.0,
        "max_correction": max_corr,
        "residual": final_res,
        "step_scale": step_scale,
    }
    return mc.data, stats


@dataclass
class FluctuationResult:
    tvs: np.ndarray
    rows: list
    quantiles: dict
    failures: int


def _prefix_hash(data: Dataset, m: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.covariates[:m]).tobytes())
    h.update(np.ascontiguousarray(data.responses).tobytes())
    return h.hexdigest()[:16]


def _glm_logpost_fn(model: GlmModel, data: Dataset) -> Callable[[np.ndarray], np.ndarray]:
    X, y = data.covariates, data.responses
    fam = model.family

    def fn(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != data.d:
            pts = pts.T
        Z = X @ pts.T  # (n, G)
        ll = (Z * y[:, None] - fam.c(Z, 0)).sum(axis=0) / fam.d_sigma
        if np.isfinite(model.prior.tau):
            ll = ll - 0.5 * (pts**2).sum(axis=1) / model.prior.tau**2
        return ll

    return fn


def fluctuation_experiment(
    model,
    n: int,
    fixed_prefix: int,
    cv_kind: str,
    replicates: int,
    walk_steps: int,
    stream: RngStream,
    beta0: Optional[np.ndarray] = None,
    grid_a: float = 0.5,
    step_scale: Optional[float] = None,
    max_resample: int = 5,
    box_halfwidth: float = 1.0,
    threads: int = 1,
) -> FluctuationResult:
    """Per replicate: draw Z1, couple Z2 on the constraint manifold, and
    report TV(p(.|Z1), p(.|Z2)) by quadrature.  Replicate-level failures
    are recorded and the experiment continues."""

    def one(r: int) -> dict:
        row = {"replicate": r}
        try:
            tv, stats = _one_fluctuation(
                model, n, fixed_prefix, cv_kind, walk_steps,
                stream.child(r), beta0, grid_a, step_scale, max_resample,
                box_halfwidth,
            )
            row.update(tv=tv, **stats)
        except Exception as exc:  # noqa: BLE001 - replicate failures are data
            row.update(tv=None, error=str(exc))
        return row

    rows = parallel_map(one, replicates, threads)
    tvs = [row["tv"] for row in rows if row.get("tv") is not None]
    failures = sum(1 for row in rows if row.get("tv") is None)
    tv_arr = np.asarray(tvs, dtype=np.float64)
    qs = {}
    if tv_arr.size:
        for q in (0.05, 0.25, 0.5, 0.75, 0.95):
            qs[f"q{int(q*100):02d}"] = float(np.quantile(tv_arr, q))
    return FluctuationResult(tvs=tv_arr, rows=rows, quantiles=qs, failures=failures)


def _one_fluctuation(model, n, m, cv_kind, walk_steps, stream, beta0, grid_a,
                     step_scale, max_resample, box_halfwidth=1.0):
    if isinstance(model, ToyModel):
        if model.variant != "gaussian_hierarchy" or cv_kind != "mean":
            raise ValueError("toy fluctuation supports the gaussian hierarchy with the mean statistic")
        gen = stream.child(0).generator()
        y = gen.standard_normal(n)
        z1 = Dataset(np.zeros((n, 1)), y)
        cv = mean_cv(z1)
        z2, stats = couple_datasets(z1, None, cv, m, walk_steps, stream.child(1),
                                    step_scale=step_scale, move="responses")
        p1 = toy_posterior(model, z1.responses)
        p2 = toy_posterior(model, z2.responses)
        lo, hi = p1.support()
        tv = tv_distance(lambda x: p1.logpdf(x), lambda x: p2.logpdf(x), lo, hi)
        stats["prefix_hash"] = _prefix_hash(z1, m)
        return tv, stats

    if not isinstance(model, GlmModel):
        raise TypeError("model must be a GlmModel or ToyModel")
    if beta0 is None:
        beta0 = np.full(model.d, 0.7)
    last_exc: Optional[Exception] = None
    gamma = {"kind": "uniform_box", "low": -box_halfwidth, "high": box_halfwidth}
    box_lo = np.full(model.d, -box_halfwidth)
    box_hi = np.full(model.d, box_halfwidth)
    for attempt in range(max_resample):
        sub = stream.child(attempt)
        z1 = sample_dataset(model.family, beta0, gamma, n, sub.child(0))
        try:
            if cv_kind == "mle":
                cv = mle_cv(model, z1)
            elif cv_kind == "grid":
                cv = grid_cv(z1, grid_a)
            else:
                raise ValueError(f"unsupported cv kind {cv_kind!r} for GLM fluctuation")
            z2, stats = couple_datasets(z1, model, cv, m, walk_steps, sub.child(1),
                                        step_scale=step_scale, box_low=box_lo, box_high=box_hi)
            break
        except (np.linalg.LinAlgError, ValueError) as exc:
            # degenerate dataset: resample Z1 (good-set restriction)
            last_exc = exc
    else:
        raise RuntimeError(f"no usable dataset after {max_resample} attempts: {last_exc}")

    f1 = _glm_logpost_fn(model, z1)
    f2 = _glm_logpost_fn(model, z2)
    if model.d != 1:
        raise ValueError("fluctuation TV computation supports d <= 1 GLMs")
    center = mle(model, z1)
    H = mle_jacobian(model, z1, center)
    sd = float(1.0 / np.sqrt(-H[0, 0]))
    lo, hi = center[0] - 10 * sd, center[0] + 10 * sd
    tv = tv_distance(lambda x: f1(x[:, None] if x.ndim == 1 else x),
                     lambda x: f2(x[:, None] if x.ndim == 1 else x), lo, hi)
    stats["prefix_hash"] = _prefix_hash(z1, m)
    return tv, stats
