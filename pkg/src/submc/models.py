"""GLM families in canonical form, toy models, log-posteriors, MLE.

Canonical form means b(x) = x (so b' = 1, b'' = 0); the per-datum
log-likelihood is ((x_i . beta) y_i - c(x_i . beta)) / d_sigma + log a(y_i).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, gammaln

from .core import Dataset, RngStream

__all__ = [
    "GlmFamily",
    "GlmModel",
    "GaussianPrior",
    "ToyModel",
    "MleError",
    "logistic_family",
    "binomial_family",
    "poisson_family",
    "gaussian_identity_family",
    "log1pexp",
    "log_likelihood",
    "log_posterior",
    "grad_log_posterior",
    "hessian_log_posterior",
    "mle",
    "mle_jacobian",
    "sensitivity_D",
    "sensitivity_Dmax",
    "toy_posterior",
    "sample_dataset",
    "save_dataset",
    "load_dataset",
]


def log1pexp(x):
    """Overflow-guarded log(1 + e^x); branches to x + e^(-x) for x > 30."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 30.0, x + np.exp(-np.minimum(np.abs(x), 700.0)), np.log1p(np.exp(np.minimum(x, 30.0))))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class GlmFamily:
    """Link bundle (a, b, c, d) of a canonical-form GLM, with derivatives of c.

    ``c_derivs(z, order)`` returns the order-th derivative of c at z for
    order in 0..4 (orders 3 and 4 feed the certificate module).
    """

    tag: str
    c_derivs: Callable[[np.ndarray, int], np.ndarray]
    log_a: Callable[[np.ndarray], np.ndarray]
    d_sigma: float = 1.0
    n_trials: int = 1
    integer_responses: bool = True

    def c(self, z, order: int = 0):
        return self.c_derivs(np.asarray(z, dtype=np.float64), order)

    def validate_responses(self, y: np.ndarray) -> None:
        y = np.asarray(y)
        if self.tag == "logistic" and not np.all(np.isin(y, (0.0, 1.0))):
            raise ValueError("logistic responses must lie in {0, 1}")
        if self.tag == "binomial":
            ok = np.all((y >= 0) & (y <= self.n_trials) & (y == np.floor(y)))
            if not ok:
                raise ValueError(f"binomial responses must lie in 0..{self.n_trials}")
        if self.tag == "poisson":
            if not np.all((y >= 0) & (y == np.floor(y))):
                raise ValueError("poisson responses must be nonnegative integers")


def _logistic_c(z, order):
    if order == 0:
        return log1pexp(z)
    s = expit(z)
    if order == 1:
        return s
    v = s * (1.0 - s)
    if order == 2:
        return v
    if order == 3:
        return v * (1.0 - 2.0 * s)
    if order == 4:
        return v * (1.0 - 6.0 * s + 6.0 * s * s)
    raise ValueError(f"unsupported derivative order {order}")


def logistic_family() -> GlmFamily:
    return GlmFamily(
        tag="logistic",
        c_derivs=_logistic_c,
        log_a=lambda y: np.zeros_like(np.asarray(y, dtype=np.float64)),
    )


def binomial_family(n_trials: int) -> GlmFamily:
    N = int(n_trials)

    def c_derivs(z, order):
        return N * _logistic_c(z, order)

    def log_a(y):
        y = np.asarray(y, dtype=np.float64)
        return gammaln(N + 1.0) - gammaln(y + 1.0) - gammaln(N - y + 1.0)

    return GlmFamily(tag="binomial", c_derivs=c_derivs, log_a=log_a, n_trials=N)


def poisson_family() -> GlmFamily:
    def c_derivs(z, order):
        return np.exp(np.minimum(z, 700.0))

    return GlmFamily(
        tag="poisson",
        c_derivs=c_derivs,
        log_a=lambda y: -gammaln(np.asarray(y, dtype=np.float64) + 1.0),
    )


def gaussian_identity_family() -> GlmFamily:
    """Gaussian responses with identity link: c(z) = z^2/2 (unit dispersion).

    Used by the certificate module as the classical degenerate case.
    """

    def c_derivs(z, order):
        z = np.asarray(z, dtype=np.float64)
        if order == 0:
            return 0.5 * z * z
        if order == 1:
            return z
        if order == 2:
            return np.ones_like(z)
        return np.zeros_like(z)

    def log_a(y):
        y = np.asarray(y, dtype=np.float64)
        return -0.5 * y * y - 0.5 * np.log(2.0 * np.pi)

    return GlmFamily(tag="gaussian_identity", c_derivs=c_derivs, log_a=log_a, integer_responses=False)


FAMILY_IDS = {"logistic": 0, "binomial": 1, "poisson": 2}


@dataclass(frozen=True)
class GaussianPrior:
    """Mean-zero Gaussian prior with covariance tau^2 * I (tau=inf -> flat)."""

    tau: float = 10.0

    def logpdf(self, beta: np.ndarray) -> float:
        if not np.isfinite(self.tau):
            return 0.0
        return float(-0.5 * np.dot(beta, beta) / self.tau**2)

    def grad(self, beta: np.ndarray) -> np.ndarray:
        if not np.isfinite(self.tau):
            return np.zeros_like(beta)
        return -beta / self.tau**2

    def hess(self, d: int) -> np.ndarray:
        if not np.isfinite(self.tau):
            return np.zeros((d, d))
        return -np.eye(d) / self.tau**2


@dataclass(frozen=True)
class GlmModel:
    family: GlmFamily
    d: int
    prior: GaussianPrior = field(default_factory=GaussianPrior)


class MleError(RuntimeError):
    """Raised when Newton iteration diverges or fails to converge."""


def _linpred(data: Dataset, beta: np.ndarray) -> np.ndarray:
    return data.covariates @ beta


def log_likelihood(model: GlmModel, data: Dataset, beta: np.ndarray, include_a: bool = False) -> float:
    z = _linpred(data, beta)
    fam = model.family
    val = float(np.sum(z * data.responses - fam.c(z, 0)) / fam.d_sigma)
    if include_a:
        val += float(np.sum(fam.log_a(data.responses)))
    return val


def log_posterior(model: GlmModel, data: Dataset, beta: np.ndarray) -> float:
    """Unnormalized log posterior: prior + likelihood incl. log a(y, sigma)."""
    beta = np.asarray(beta, dtype=np.float64)
    return model.prior.logpdf(beta) + log_likelihood(model, data, beta, include_a=True)


def grad_log_likelihood(model: GlmModel, data: Dataset, beta: np.ndarray) -> np.ndarray:
    z = _linpred(data, beta)
    r = (data.responses - model.family.c(z, 1)) / model.family.d_sigma
    return data.covariates.T @ r


def grad_log_posterior(model: GlmModel, data: Dataset, beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    return model.prior.grad(beta) + grad_log_likelihood(model, data, beta)


def hessian_log_likelihood(model: GlmModel, data: Dataset, beta: np.ndarray) -> np.ndarray:
    z = _linpred(data, beta)
    w = model.family.c(z, 2) / model.family.d_sigma
    X = data.covariates
    return -(X.T * w) @ X


def hessian_log_posterior(model: GlmModel, data: Dataset, beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    return model.prior.hess(model.d) + hessian_log_likelihood(model, data, beta)


def mle(
    model: GlmModel,
    data: Dataset,
    tol: float = 1e-10,
    max_iter: int = 200,
    divergence_norm: float = 1e6,
    start: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Maximum-likelihood estimate by damped Newton with step halving.

    The prior is excluded.  Divergence of ||beta|| beyond
    ``divergence_norm`` is treated as separation and raises MleError;
    so does failure to reach gradient norm ``tol``.  ``start`` warm-starts
    the iteration (default: zero).
    """
    model.family.validate_responses(data.responses)
    beta = np.zeros(model.d) if start is None else np.asarray(start, dtype=np.float64).copy()

    def _check_interior(b):
        # saturated fit: the likelihood supremum is attained only in the
        # limit, so a float-exact perfect fit means separated data
        if model.family.tag in ("logistic", "binomial"):
            z = data.covariates @ b
            resid = data.responses - model.family.c(z, 1)
            if np.all(np.abs(resid) < 1e-8):
                raise MleError("perfectly separated data: the MLE does not exist")

    ll = log_likelihood(model, data, beta)
    for _ in range(max_iter):
        g = grad_log_likelihood(model, data, beta)
        if np.linalg.norm(g) < tol:
            _check_interior(beta)
            return beta
        H = hessian_log_likelihood(model, data, beta)
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError as exc:
            raise MleError(f"singular Hessian at beta={beta}") from exc
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            ll_new = log_likelihood(model, data, cand)
            if ll_new >= ll - 1e-12 * (1.0 + abs(ll)):
                break
            t *= 0.5
        else:
            raise MleError("step halving failed to make progress")
        beta, ll = cand, ll_new
        if np.linalg.norm(beta) > divergence_norm:
            raise MleError("MLE diverged (separated data?)")
    if np.linalg.norm(grad_log_likelihood(model, data, beta)) < tol:
        _check_interior(beta)
        return beta
    raise MleError(f"Newton did not converge in {max_iter} iterations")


def mle_jacobian(model: GlmModel, data: Dataset, beta: np.ndarray) -> np.ndarray:
    """Jacobian J of the score in beta: J_jk = -sum_i x_ij x_ik c''(x_i beta)/d_sigma.

    Canonical form (b'' = 0), responses viewed as fixed.  Equals the
    likelihood Hessian; the prior contributes nothing.
    """
    return hessian_log_likelihood(model, data, np.asarray(beta, dtype=np.float64))


def score_covariate_jacobian(model: GlmModel, data: Dataset, beta: np.ndarray) -> np.ndarray:
    """d x (n*d) matrix of score derivatives in the covariates.

    Column (i, l) (flattened row-major over datapoints i, coordinates l)
    holds d f_j / d x_il = delta_jl (y_i - c'(z_i)) - x_ij c''(z_i) beta_l.
    """
    X, y = data.covariates, data.responses
    n, d = X.shape
    z = X @ beta
    r = (y - model.family.c(z, 1)) / model.family.d_sigma
    w = model.family.c(z, 2) / model.family.d_sigma
    out = np.zeros((d, n * d))
    for j in range(d):
        block = -np.outer(X[:, j] * w, beta)  # (n, d)
        block[:, j] += r
        out[j] = block.reshape(-1)
    return out


def sensitivity_D(model: GlmModel, data: Dataset, beta: np.ndarray, i: int, j: int) -> float:
    """D_ij = beta_j (b'(x_i beta) y_i - c'(x_i beta)) / d_sigma (b' = 1)."""
    beta = np.asarray(beta, dtype=np.float64)
    z = float(data.covariates[i] @ beta)
    fam = model.family
    return float(beta[j] * (data.responses[i] - fam.c(z, 1)) / fam.d_sigma)


def sensitivity_Dmax(model: GlmModel, data: Dataset, beta: np.ndarray) -> float:
    """Largest normalized second derivative of the posterior in the covariates.

    max over (i, i', j, j') of |beta_j beta_j' [(y_i - c'(z_i))(y_i' - c'(z_i'))
    + 1{i=i'} (-c''(z_i))]| / d_sigma^2, in canonical form.
    """
    beta = np.asarray(beta, dtype=np.float64)
    fam = model.family
    z = _linpred(data, beta)
    a = (data.responses - fam.c(z, 1))
    cc = -fam.c(z, 2)
    bmax = float(np.max(np.abs(beta)))
    a_abs = np.sort(np.abs(a))[::-1]
    off = a_abs[0] * a_abs[1] if a_abs.size > 1 else 0.0
    diag = float(np.max(np.abs(a * a + cc)))
    return bmax * bmax * max(off, diag) / fam.d_sigma**2


# ---------------------------------------------------------------------------
# toy models


@dataclass(frozen=True)
class ToyModel:
    """Closed-form toy targets: a 2-level Gaussian hierarchy, or an
    exponential-tail model whose posterior is Exponential in theta."""

    variant: str  # "gaussian_hierarchy" | "exponential_tail"

    def __post_init__(self):
        if self.variant not in ("gaussian_hierarchy", "exponential_tail"):
            raise ValueError(f"unknown toy variant {self.variant!r}")


@dataclass(frozen=True)
class NormalDensity:
    mean: float
    var: float

    def logpdf(self, x):
        return -0.5 * (np.asarray(x) - self.mean) ** 2 / self.var - 0.5 * np.log(2 * np.pi * self.var)

    def support(self):
        sd = np.sqrt(self.var)
        return (self.mean - 10 * sd, self.mean + 10 * sd)


@dataclass(frozen=True)
class ExponentialDensity:
    rate: float

    def logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.where(x >= 0, np.log(self.rate) - self.rate * x, -np.inf)
        return out if out.ndim else float(out)

    def support(self):
        return (0.0, 40.0 / self.rate)


def toy_posterior(model: ToyModel, y: np.ndarray):
    """Closed-form posterior of a toy model given responses y."""
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if model.variant == "gaussian_hierarchy":
        return NormalDensity(mean=float(y.sum()) / (n + 1), var=1.0 / (n + 1))
    return ExponentialDensity(rate=1.0 + float(np.abs(y).sum()))


def sample_toy_responses(model: ToyModel, n: int, stream: RngStream, mu0: float = 0.0, theta0: float = 0.5) -> np.ndarray:
    gen = stream.generator()
    if model.variant == "gaussian_hierarchy":
        return mu0 + gen.standard_normal(n)
    return gen.laplace(0.0, 1.0 / theta0, n)


# ---------------------------------------------------------------------------
# dataset generation and serialization


def sample_dataset(
    family: GlmFamily,
    beta0: np.ndarray,
    gamma_spec: dict,
    n: int,
    stream: RngStream,
) -> Dataset:
    """Draw covariates i.i.d. from gamma and responses from the family at beta0.

    gamma_spec: {"kind": "uniform_box", "low": [...], "high": [...]} or
    {"kind": "trunc_gauss", "low": [...], "high": [...], "sd": s}.
    """
    beta0 = np.asarray(beta0, dtype=np.float64)
    d = beta0.size
    gen = stream.generator()
    kind = gamma_spec.get("kind", "uniform_box")
    low = np.broadcast_to(np.asarray(gamma_spec.get("low", -1.0), dtype=np.float64), (d,))
    high = np.broadcast_to(np.asarray(gamma_spec.get("high", 1.0), dtype=np.float64), (d,))
    if kind == "uniform_box":
        X = gen.uniform(low, high, size=(n, d))
    elif kind == "trunc_gauss":
        sd = float(gamma_spec.get("sd", 1.0))
        X = np.empty((n, d))
        filled = 0
        while filled < n:
            block = gen.normal(0.0, sd, size=(2 * (n - filled) + 16, d))
            ok = np.all((block >= low) & (block <= high), axis=1)
            take = block[ok][: n - filled]
            X[filled : filled + take.shape[0]] = take
            filled += take.shape[0]
    else:
        raise ValueError(f"unknown gamma_spec kind {kind!r}")

    z = X @ beta0
    if family.tag == "logistic":
        y = (gen.random(n) < expit(z)).astype(np.float64)
    elif family.tag == "binomial":
        y = gen.binomial(family.n_trials, expit(z)).astype(np.float64)
    elif family.tag == "poisson":
        y = gen.poisson(np.exp(z)).astype(np.float64)
    elif family.tag == "gaussian_identity":
        y = z + gen.standard_normal(n)
    else:
        raise ValueError(f"cannot sample from family {family.tag!r}")
    meta = {
        "family": family.tag,
        "n_trials": family.n_trials,
        "beta0": beta0.tolist(),
        "gamma_spec": {"kind": kind, "low": low.tolist(), "high": high.tolist(), **({"sd": gamma_spec["sd"]} if "sd" in gamma_spec else {})},
        "seed": stream.seed,
        "stream_id": stream.stream_id,
    }
    return Dataset(X, y, true_param=beta0, meta=meta)


def save_dataset(data: Dataset, csv_path, json_path, control_variates: Optional[dict] = None) -> None:
    """CSV with one row per datum (x_1..x_d, y) plus a JSON sidecar."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j+1}" for j in range(data.d)] + ["y"])
        for i in range(data.n):
            w.writerow([repr(float(v)) for v in data.covariates[i]] + [repr(float(data.responses[i]))])
    side = dict(data.meta)
    if control_variates is not None:
        side["control_variates"] = control_variates
    with open(json_path, "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(csv_path, json_path=None) -> Dataset:
    rows = []
    with open(csv_path) as fh:
        rd = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(rd)
        for row in rd:
            rows.append([float(v) for v in row])
    arr = np.asarray(rows)
    meta = {}
    if json_path is not None:
        with open(json_path) as fh:
            meta = json.load(fh)
    b0 = np.asarray(meta["beta0"]) if "beta0" in meta else None
    return Dataset(arr[:, :-1], arr[:, -1], true_param=b0, meta=meta)
