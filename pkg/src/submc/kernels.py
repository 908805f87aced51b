"""Instrumented Markov transition kernels.

Every kernel reports, per step, exactly the datapoint indices whose
values entered the step's computation (proposal, acceptance, brightness
refresh).  Quantities precomputed at construction (informed weights,
firefly bound coefficients, the identity permutation of the wrapper)
are control variates: they are frozen and do not count as usage.

Python ``step`` implementations and the numba drivers in ``submc._jit``
consume the driving randomness in the same order (see that module's
docstring), so fused and stepped runs agree for a fixed stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from . import _backend
from .core import ChainTrace, Dataset, RngStream, UsageLedger
from .cvars import ControlVariateSet
from .models import FAMILY_IDS, GlmModel, ToyModel, log1pexp, mle

__all__ = [
    "KernelState",
    "KernelConfig",
    "full_mh",
    "generic_subsampling",
    "informed_subsampler",
    "firefly",
    "permutation_wrapper",
    "step",
    "run_chain",
    "perturb_replay_check",
]


@dataclass
class KernelState:
    """Parameter vector plus the kernel's auxiliary component (if any)."""

    theta: np.ndarray
    aux: Optional[object] = None


@dataclass(frozen=True)
class KernelConfig:
    """Knobs of the F1/F2/F3 template and the other kernels.

    ``delta`` is the batch-growth stopping threshold: 1.0 (default) stops
    after a single size-k batch; smaller values grow the batch in
    increments of k until the normal-approximation p-value of the accept
    decision falls to delta (sequential-test subsampling).
    """

    kind: str = "generic"
    proposal_scale: float = 2.4
    batch_size: int = 10
    delta: float = 1.0
    weight_bound: float = 1.0
    resample_fraction: float = 0.1
    max_batches: int = 64
    continuation_prob: float = 0.0
    bound_slack: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.weight_bound < 1.0:
            raise ValueError("weight bound A must be >= 1")
        if not 0.0 < self.resample_fraction <= 1.0:
            raise ValueError("resample_fraction must lie in (0, 1]")
        if not 0.0 <= self.continuation_prob < 1.0:
            raise ValueError("continuation_prob must lie in [0, 1)")
        if self.bound_slack < 0.0:
            raise ValueError("bound_slack must be >= 0")


def _floyd_py(gen, n: int, k: int) -> np.ndarray:
    out = np.empty(k, dtype=np.int64)
    c = 0
    for j in range(n - k, n):
        t = int(gen.integers(0, j + 1))
        hit = False
        for q in range(c):
            if out[q] == t:
                hit = True
        out[c] = j if hit else t
        c += 1
    return out


# ---------------------------------------------------------------------------
# target adapters: log-density deltas for GLMs and the closed-form toys


def _is_hierarchy(model) -> bool:
    return isinstance(model, ToyModel) and model.variant == "gaussian_hierarchy"


def _model_dim(model) -> int:
    return model.d if isinstance(model, GlmModel) else 1


def _glm_delta_np(model: GlmModel, data: Dataset, idx, th, thp) -> float:
    X = data.covariates if idx is None else data.covariates[idx]
    yv = data.responses if idx is None else data.responses[idx]
    fam = model.family
    z, zp = X @ th, X @ thp
    return float(
        (np.sum(zp * yv - fam.c(zp, 0)) - np.sum(z * yv - fam.c(z, 0))) / fam.d_sigma
    )


def _target_delta(model, data: Dataset, idx, th, thp) -> float:
    """log target(thp) - log target(th) over the given index subset
    (idx=None means all data), with the n/|idx| likelihood rescaling and
    the prior applied exactly."""
    n = data.n
    if isinstance(model, GlmModel):
        prior = model.prior.logpdf(thp) - model.prior.logpdf(th)
        scale = 1.0 if idx is None else n / idx.size
        return prior + scale * _glm_delta_np(model, data, idx, th, thp)
    if model.variant == "gaussian_hierarchy":
        mu, mup = float(th[0]), float(thp[0])
        if idx is None:
            ysum = float(data.responses.sum())
            return -0.5 * (mup * mup - mu * mu) * (n + 1.0) + (mup - mu) * ysum
        yv = data.responses[idx]
        acc = float(np.sum(-0.5 * (yv - mup) ** 2 + 0.5 * (yv - mu) ** 2))
        return -0.5 * (mup * mup - mu * mu) + (n / idx.size) * acc
    # exponential_tail: prior e^-theta on theta > 0, terms -theta |y_i|
    t0, t1 = float(th[0]), float(thp[0])
    if t1 <= 0.0:
        return -np.inf
    if idx is None:
        s = float(np.abs(data.responses).sum())
        return -(t1 - t0) * (1.0 + s)
    s = float(np.abs(data.responses[idx]).sum())
    return -(t1 - t0) - (n / idx.size) * (t1 - t0) * s


def _propose(gen, theta: np.ndarray, halfwidth: float) -> np.ndarray:
    return theta + gen.uniform(-halfwidth, halfwidth, size=theta.size)


# ---------------------------------------------------------------------------
# kernels


class _KernelBase:
    kind: str = ""
    model = None
    config: KernelConfig = KernelConfig()

    def proposal_halfwidth(self, n: int) -> float:
        return self.config.proposal_scale * max(n, 1) ** -0.5

    def init_state(self, data: Dataset, theta0=None, gen=None) -> KernelState:
        d = _model_dim(self.model)
        theta = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=np.float64).reshape(d)
        return KernelState(theta=theta.copy())

    def step(self, state: KernelState, data: Dataset, gen, cv=None):
        raise NotImplementedError


class FullMhKernel(_KernelBase):
    """Random-walk MH on the full posterior; uses every datapoint each step."""

    kind = "full"

    def __init__(self, model, proposal_scale: float = 2.4):
        self.model = model
        self.config = KernelConfig(kind="full", proposal_scale=proposal_scale, batch_size=1)

    def step(self, state, data, gen, cv=None):
        h = self.proposal_halfwidth(data.n)
        thp = _propose(gen, state.theta, h)
        logr = _target_delta(self.model, data, None, state.theta, thp)
        u = gen.random()
        accept = math.log(u) < logr
        theta = thp if accept else state.theta.copy()
        return KernelState(theta=theta), np.arange(data.n), accept


class GenericSubsamplingKernel(_KernelBase):
    """The F1/F2/F3 template: uniform without-replacement batches,
    random-walk proposal, rescaled-likelihood MH accept.  Inexact for
    batch sizes below n.

    Batch growth: with delta == 1 a single size-k batch is used; with
    delta < 1 the batch grows in increments of k until the accept
    decision's normal-approximation p-value drops below delta (sequential
    test), reaching the exact decision at b == n.  A geometric
    continuation (``continuation_prob``) is also available."""

    kind = "generic"

    def __init__(self, model, config: KernelConfig):
        self.model = model
        self.config = config

    def _per_datum_diff(self, data: Dataset, idx, th, thp) -> np.ndarray:
        if isinstance(self.model, GlmModel):
            X = data.covariates[idx]
            yv = data.responses[idx]
            fam = self.model.family
            z, zp = X @ th, X @ thp
            return ((zp * yv - fam.c(zp, 0)) - (z * yv - fam.c(z, 0))) / fam.d_sigma
        if self.model.variant == "gaussian_hierarchy":
            yv = data.responses[idx]
            return -0.5 * (yv - thp[0]) ** 2 + 0.5 * (yv - th[0]) ** 2
        yv = data.responses[idx]
        return -(thp[0] - th[0]) * np.abs(yv)

    def _prior_delta(self, th, thp) -> float:
        if isinstance(self.model, GlmModel):
            return self.model.prior.logpdf(thp) - self.model.prior.logpdf(th)
        if self.model.variant == "gaussian_hierarchy":
            return -0.5 * (thp[0] ** 2 - th[0] ** 2)
        return -np.inf if thp[0] <= 0 else -(thp[0] - th[0])

    def _austerity_step(self, state, data, gen):
        n = data.n
        k = min(self.config.batch_size, n)
        h = self.proposal_halfwidth(n)
        thp = _propose(gen, state.theta, h)
        u = gen.random()
        dprior = self._prior_delta(state.theta, thp)
        if not np.isfinite(dprior):
            return KernelState(theta=state.theta.copy()), np.empty(0, dtype=np.int64), False
        mu0 = (math.log(u) - dprior) / n
        idx = np.arange(n, dtype=np.int64)
        pos = 0
        sums = 0.0
        sumsq = 0.0
        accept = False
        while True:
            take = min(k, n - pos)
            for _ in range(take):
                j = int(gen.integers(pos, n))
                idx[pos], idx[j] = idx[j], idx[pos]
                pos += 1
            new = idx[pos - take : pos]
            d_i = self._per_datum_diff(data, new, state.theta, thp)
            sums += float(d_i.sum())
            sumsq += float((d_i * d_i).sum())
            b = pos
            mu = sums / b
            if b >= n:
                accept = mu > mu0
                break
            var = max(sumsq / b - mu * mu, 0.0) * (b / max(b - 1, 1))
            se = math.sqrt(var / b) * math.sqrt((n - b) / (n - 1.0))
            if se == 0.0:
                p = 0.0 if mu != mu0 else 1.0
            else:
                p = math.erfc(abs(mu - mu0) / (se * math.sqrt(2.0)))
            if p <= self.config.delta:
                accept = mu > mu0
                break
        theta = thp if accept else state.theta.copy()
        return KernelState(theta=theta), np.sort(idx[:pos]), accept

    def _draw_batch(self, gen, n: int) -> Optional[np.ndarray]:
        k = self.config.batch_size
        if k >= n:
            return None
        batch = _floyd_py(gen, n, k)
        gamma = self.config.continuation_prob
        if gamma > 0.0:
            n_batches = 1
            while gen.random() < gamma:
                n_batches += 1
                if n_batches > self.config.max_batches:
                    raise RuntimeError(
                        f"batch growth exceeded max_batches={self.config.max_batches}"
                    )
                remaining = np.setdiff1d(np.arange(n), batch, assume_unique=False)
                take = min(k, remaining.size)
                if take == 0:
                    break
                local = _floyd_py(gen, remaining.size, take)
                batch = np.concatenate([batch, remaining[local]])
        return batch

    def step(self, state, data, gen, cv=None):
        n = data.n
        if self.config.delta < 1.0 and self.config.batch_size < n:
            return self._austerity_step(state, data, gen)
        batch = self._draw_batch(gen, n)
        h = self.proposal_halfwidth(n)
        thp = _propose(gen, state.theta, h)
        logr = _target_delta(self.model, data, batch, state.theta, thp)
        u = gen.random()
        accept = math.log(u) < logr
        theta = thp if accept else state.theta.copy()
        used = np.arange(n) if batch is None else np.unique(batch)
        return KernelState(theta=theta), used, accept


class InformedSubsamplerKernel(_KernelBase):
    """Single batch drawn with probability proportional to the product of
    precomputed per-datum weights, then as the generic subsampler."""

    kind = "informed"

    def __init__(self, model, config: KernelConfig, weights):
        self.model = model
        self.config = config
        w = np.asarray(weights, dtype=np.float64).copy()
        A = config.weight_bound
        if np.any(w < 1.0 / A - 1e-12) or np.any(w > A + 1e-12):
            raise ValueError(f"informed weights must lie in [1/A, A] with A={A}")
        w.setflags(write=False)
        self.weights = w
        self.max_tries = 1_000_000

    def _draw_batch(self, gen, n: int) -> np.ndarray:
        k = min(self.config.batch_size, n)
        inv_a = 1.0 / self.config.weight_bound
        tries = 0
        while True:
            batch = _floyd_py(gen, n, k)
            u = gen.random()
            pw = 1.0
            for q in range(k):
                pw *= self.weights[batch[q]] * inv_a
            if u < pw:
                return batch
            tries += 1
            if tries > self.max_tries:
                raise RuntimeError("informed batch rejection exceeded max tries")

    def step(self, state, data, gen, cv=None):
        n = data.n
        batch = self._draw_batch(gen, n)
        h = self.proposal_halfwidth(n)
        thp = _propose(gen, state.theta, h)
        logr = _target_delta(self.model, data, batch, state.theta, thp)
        u = gen.random()
        accept = math.log(u) < logr
        theta = thp if accept else state.theta.copy()
        return KernelState(theta=theta), np.unique(batch), accept


class FireflyKernel(_KernelBase):
    """Exact data-augmentation chain on (theta, brightness) for logistic
    targets.  Per-datum quadratic lower bounds on the log-likelihood are
    anchored at the MLE linear predictor and frozen at construction, as
    are their dataset-level aggregates; the per-step work touches only the
    resampled and bright points.
    """

    kind = "firefly"

    def __init__(self, model: GlmModel, config: KernelConfig, data: Dataset, cv: Optional[ControlVariateSet] = None):
        if not isinstance(model, GlmModel) or model.family.tag != "logistic":
            raise ValueError("firefly bound construction requires the logistic family")
        self.model = model
        self.config = config
        beta_hat = cv.values if cv is not None and cv.kind == "mle" else mle(model, data)
        X, y = data.covariates, data.responses
        a = X @ beta_hat
        self.anchors = a.copy()
        self.anchors.setflags(write=False)
        self.slack = float(config.bound_slack)
        # frozen aggregates of the quadratic bound over the whole dataset:
        # sum_i log L_i(th) = Ctot + gvec . th - th' H th / 8
        self.Ctot = float(np.sum(-log1pexp(a) + expit(a) * a - 0.125 * a * a)) - data.n * self.slack
        self.gvec = X.T @ (y - expit(a) + 0.25 * a)
        self.Hmat = X.T @ X
        self.gvec.setflags(write=False)
        self.Hmat.setflags(write=False)
        self.n_resample = max(1, int(round(config.resample_fraction * data.n)))

    def _bound_terms(self, data, idx, theta):
        """(loglik, logbound) arrays at the given rows; hard failure when
        the bound exceeds the likelihood."""
        X = data.covariates[idx]
        yv = data.responses[idx]
        a = self.anchors[idx]
        z = X @ theta
        ll = yv * z - log1pexp(z)
        lb = yv * z - (log1pexp(a) + expit(a) * (z - a) + 0.125 * (z - a) ** 2) - self.slack
        if np.any(lb - ll > 1e-9):
            raise RuntimeError("firefly lower bound exceeded the likelihood")
        return ll, lb

    def _aggregate(self, theta) -> float:
        return float(self.Ctot + self.gvec @ theta - 0.125 * theta @ (self.Hmat @ theta))

    def _bright_part(self, data, z, theta) -> float:
        idx = np.flatnonzero(z)
        if idx.size == 0:
            return 0.0
        ll, lb = self._bound_terms(data, idx, theta)
        em = -np.expm1(np.minimum(lb - ll, 0.0))
        if np.any(em <= 0.0):
            return -np.inf
        return float(np.sum(ll + np.log(em) - lb))

    def log_target(self, data, theta, z) -> float:
        """Unnormalized log density of the augmented target at (theta, z)."""
        theta = np.asarray(theta, dtype=np.float64)
        return self.model.prior.logpdf(theta) + self._aggregate(theta) + self._bright_part(data, z, theta)

    def init_state(self, data, theta0=None, gen=None) -> KernelState:
        d = _model_dim(self.model)
        theta = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=np.float64).reshape(d)
        z = np.zeros(data.n, dtype=np.uint8)
        if gen is not None:
            ll, lb = self._bound_terms(data, np.arange(data.n), theta)
            p = -np.expm1(np.minimum(lb - ll, 0.0))
            z = (gen.random(data.n) < p).astype(np.uint8)
        return KernelState(theta=theta.copy(), aux=z)

    def step(self, state, data, gen, cv=None):
        n = data.n
        z = np.asarray(state.aux, dtype=np.uint8).copy()
        rs = np.sort(_floyd_py(gen, n, self.n_resample))
        ll, lb = self._bound_terms(data, rs, state.theta)
        p_bright = -np.expm1(np.minimum(lb - ll, 0.0))
        us = gen.random(rs.size)
        z[rs] = (us < p_bright).astype(np.uint8)
        h = self.proposal_halfwidth(n)
        thp = _propose(gen, state.theta, h)
        cur = self._aggregate(state.theta) + self._bright_part(data, z, state.theta)
        prop = self._aggregate(thp) + self._bright_part(data, z, thp)
        logr = (self.model.prior.logpdf(thp) - self.model.prior.logpdf(state.theta)) + prop - cur
        u = gen.random()
        accept = math.log(u) < logr
        theta = thp if accept else state.theta.copy()
        used = np.union1d(rs, np.flatnonzero(z))
        return KernelState(theta=theta, aux=z), used, accept


class PermutationWrapper(_KernelBase):
    """Relabels datapoint identities by a uniform permutation drawn once at
    construction, and tracks the first-use order of raw indices so covering
    statistics read off as a growing prefix in arrival labels."""

    kind = "permutation"

    def __init__(self, inner, n: int, stream: RngStream):
        self.inner = inner
        self.model = inner.model
        self.config = inner.config
        self.perm = stream.generator().permutation(n)
        self.perm.setflags(write=False)

    def _permuted(self, data: Dataset) -> Dataset:
        return Dataset(
            data.covariates[self.perm], data.responses[self.perm], data.true_param, dict(data.meta)
        )

    def init_state(self, data, theta0=None, gen=None) -> KernelState:
        inner_state = self.inner.init_state(self._permuted(data), theta0=theta0, gen=gen)
        book = {"labels": np.full(data.n, -1, dtype=np.int64), "next": 0}
        return KernelState(theta=inner_state.theta, aux={"inner": inner_state.aux, **book})

    def step(self, state, data, gen, cv=None):
        inner_state = KernelState(theta=state.theta, aux=state.aux["inner"])
        new_inner, used_inner, accept = self.inner.step(inner_state, self._permuted(data), gen, cv)
        labels = state.aux["labels"].copy()
        nxt = state.aux["next"]
        # arrival labels in inner index order: the uniform relabeling makes
        # the first-use order a uniform permutation of the raw identities
        for i in self.perm[np.sort(used_inner)]:
            if labels[i] < 0:
                labels[i] = nxt
                nxt += 1
        aux = {"inner": new_inner.aux, "labels": labels, "next": nxt}
        return KernelState(theta=new_inner.theta, aux=aux), np.sort(self.perm[used_inner]), accept


# constructors matching the operation map


def full_mh(model, proposal_scale: float = 2.4) -> FullMhKernel:
    return FullMhKernel(model, proposal_scale)


def generic_subsampling(model, config: KernelConfig) -> GenericSubsamplingKernel:
    if config.kind not in ("generic", "full"):
        raise ValueError("generic_subsampling requires config.kind == 'generic'")
    return GenericSubsamplingKernel(model, config)


def informed_subsampler(model, config: KernelConfig, weights) -> InformedSubsamplerKernel:
    return InformedSubsamplerKernel(model, config, weights)


def firefly(model, config: KernelConfig, data: Dataset, cv=None) -> FireflyKernel:
    return FireflyKernel(model, config, data, cv)


def permutation_wrapper(kernel, n: int, stream: RngStream) -> PermutationWrapper:
    return PermutationWrapper(kernel, n, stream)


def step(kernel, state: KernelState, data: Dataset, cv, stream):
    """One instrumented transition; returns (new_state, used_indices).

    ``stream`` may be an RngStream (stepped from its start) or an
    np.random.Generator (consumed in place).
    """
    gen = stream.generator() if isinstance(stream, RngStream) else stream
    new_state, used, _ = kernel.step(state, data, gen, cv)
    return new_state, used


# ---------------------------------------------------------------------------
# chain runner with fused numba fast paths


def _fused_run(kernel, data: Dataset, steps: int, gen, state: KernelState):
    """Dispatch to a numba driver when one covers this kernel; returns
    (states, accepts, ledger_info) or None."""
    from . import _jit

    model = kernel.model
    if isinstance(kernel, PermutationWrapper):
        inner = _fused_run(kernel.inner, kernel._permuted(data), steps, gen,
                           KernelState(theta=state.theta, aux=state.aux["inner"]))
        if inner is None:
            return None
        states, accepts, info = inner
        if info[0] != "batches":
            return None
        return states, accepts, ("batches", kernel.perm[info[1]])
    if isinstance(model, GlmModel):
        fam = FAMILY_IDS.get(model.family.tag)
        if fam is None:
            return None
        args = (
            data.covariates,
            data.responses,
            fam,
            model.family.n_trials,
            1.0 / model.family.d_sigma,
            0.0 if not np.isfinite(model.prior.tau) else model.prior.tau**-2,
        )
        h = kernel.proposal_halfwidth(data.n)
        if isinstance(kernel, FullMhKernel):
            th, acc, _ = _jit.glm_chain(*args, state.theta, h, data.n, steps, gen,
                                        np.empty(0), 1.0, False, 0)
            return th, acc, ("full", None)
        if isinstance(kernel, GenericSubsamplingKernel) and kernel.config.continuation_prob == 0.0:
            k = min(kernel.config.batch_size, data.n)
            if kernel.config.delta < 1.0 and k < data.n:
                th, acc, sizes, first_use = _jit.glm_austerity_chain(
                    *args, state.theta, h, k, kernel.config.delta, steps, gen)
                return th, acc, ("sizes", (sizes, first_use))
            th, acc, batches = _jit.glm_chain(*args, state.theta, h, k, steps, gen,
                                              np.empty(0), 1.0, False, 0)
            if k >= data.n:
                return th, acc, ("full", None)
            return th, acc, ("batches", batches)
        if isinstance(kernel, InformedSubsamplerKernel):
            k = min(kernel.config.batch_size, data.n)
            th, acc, batches = _jit.glm_chain(*args, state.theta, h, k, steps, gen,
                                              kernel.weights, 1.0 / kernel.config.weight_bound,
                                              True, kernel.max_tries)
            return th, acc, ("batches", batches)
        if isinstance(kernel, FireflyKernel):
            z0 = np.asarray(state.aux, dtype=np.uint8)
            th, acc, z, first_use, used_counts, bright_counts = _jit.firefly_chain(
                data.covariates, data.responses, kernel.anchors, kernel.slack,
                kernel.gvec, kernel.Hmat, kernel.Ctot, args[5], z0, state.theta, h,
                kernel.n_resample, steps, gen)
            return th, acc, ("firefly", (z, first_use, used_counts, bright_counts))
        return None
    if _is_hierarchy(model):
        if isinstance(kernel, FullMhKernel):
            th, acc = _jit.hierarchy_chain(
                data.n, float(data.responses.sum()), float(state.theta[0]),
                kernel.proposal_halfwidth(data.n), steps, gen)
            return th[:, None], acc, ("full", None)
        if isinstance(kernel, GenericSubsamplingKernel) and kernel.config.continuation_prob == 0.0:
            k = min(kernel.config.batch_size, data.n)
            if k >= data.n:
                th, acc = _jit.hierarchy_chain(
                    data.n, float(data.responses.sum()), float(state.theta[0]),
                    kernel.proposal_halfwidth(data.n), steps, gen)
                return th[:, None], acc, ("full", None)
            th, acc, batches = _jit.hierarchy_sub_chain(
                data.responses, k, float(state.theta[0]),
                kernel.proposal_halfwidth(data.n), steps, gen)
            return th[:, None], acc, ("batches", batches)
    return None


def run_chain(
    kernel,
    data: Dataset,
    steps: int,
    stream: RngStream,
    theta0=None,
    cv=None,
    fused: Optional[bool] = None,
    keep_step_sets: Optional[bool] = None,
) -> ChainTrace:
    """Run an instrumented chain for ``steps`` transitions.

    When the numba backend is active and a fused driver covers the kernel,
    the whole loop runs compiled; otherwise the kernel is stepped in
    python.  Both paths draw identically from ``stream``.
    """
    gen = stream.generator()
    state = kernel.init_state(data, theta0=theta0, gen=gen)
    if keep_step_sets is None:
        keep_step_sets = steps <= 20_000
    use_fused = _backend.using_numba() if fused is None else fused
    if use_fused:
        out = _fused_run(kernel, data, steps, gen, state)
        if out is not None:
            states, accepts, info = out
            kind, payload = info
            if kind == "full":
                ledger = UsageLedger.full_usage(data.n, steps)
            elif kind == "batches":
                ledger = UsageLedger.from_batches(data.n, payload, keep_sets=keep_step_sets)
            elif kind == "sizes":
                sizes, first_use = payload
                counts = np.bincount(first_use[first_use > 0], minlength=steps + 1)[1:]
                ledger = UsageLedger.from_sizes(data.n, sizes, np.cumsum(counts))
            else:  # firefly summary
                z, first_use, used_counts, bright_counts = payload
                counts = np.bincount(first_use[first_use > 0], minlength=steps + 1)[1:]
                ledger = UsageLedger.from_sizes(data.n, used_counts, np.cumsum(counts))
                return ChainTrace(states, accepts.astype(bool), ledger, aux_final=z)
            return ChainTrace(states, accepts.astype(bool), ledger)

    d = state.theta.size
    states = np.empty((steps + 1, d))
    states[0] = state.theta
    accepts = np.zeros(steps, dtype=bool)
    ledger = UsageLedger(data.n)
    if not keep_step_sets:
        ledger.step_sets = None
    for t in range(steps):
        state, used, accept = kernel.step(state, data, gen, cv)
        states[t + 1] = state.theta
        accepts[t] = accept
        ledger.record(used)
    aux = state.aux
    if isinstance(aux, dict):
        aux = None
    return ChainTrace(states, accepts, ledger, aux_final=aux)


# ---------------------------------------------------------------------------
# usage-soundness probe


def _aux_equal(a, b) -> bool:
    if a is None and b is None:
        return True
    if isinstance(a, dict):
        return all(_aux_equal(a[k], b[k]) for k in a)
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def _perturb_unused(data: Dataset, used: np.ndarray, gen) -> Dataset:
    mask = np.ones(data.n, dtype=bool)
    mask[used] = False
    if not mask.any():
        return data
    X = data.covariates.copy()
    X[mask] += gen.uniform(0.05, 0.5, size=(int(mask.sum()), data.d))
    y = data.responses.copy()
    y[mask] = np.where(y[mask] == 0.0, 1.0, 0.0) if set(np.unique(y)) <= {0.0, 1.0} else y[mask] + 1.0
    return Dataset(X, y, data.true_param, dict(data.meta))


def perturb_replay_check(kernel, data: Dataset, stream: RngStream, probes: int = 100,
                         theta0=None, cv=None) -> bool:
    """Verify that perturbing every datum outside a step's used set and
    replaying the step with the same randomness leaves the next state
    bit-identical.  Runs ``probes`` sequential steps."""
    gen = stream.generator()
    state = kernel.init_state(data, theta0=theta0, gen=gen)
    perturb_gen = stream.child(0xFEED).generator()
    snapshot = gen.bit_generator.state
    for _ in range(probes):
        s1, used, _ = kernel.step(state, data, gen, cv)
        data2 = _perturb_unused(data, used, perturb_gen)
        g2 = stream.generator()
        g2.bit_generator.state = snapshot
        s2, used2, _ = kernel.step(state, data2, g2, cv)
        ok = (
            np.array_equal(s1.theta, s2.theta)
            and _aux_equal(s1.aux, s2.aux)
            and np.array_equal(used, used2)
        )
        if not ok:
            return False
        state = s1
        snapshot = gen.bit_generator.state
    return True
