"""Numba drivers for the hot inner loops.

Every driver consumes its ``np.random.Generator`` in the documented
per-step order, which the pure-python kernel ``step`` implementations
follow draw for draw.  That makes fused runs reproduce stepped runs
exactly (same seed, same trajectory), which the backend tests assert.

Per-step draw order:
  GLM/toy subsampled step:  Floyd batch draws (k integers; informed mode
  repeats [k integers + 1 uniform] until the product-weight rejection
  accepts), then d proposal uniforms, then 1 accept uniform.
  Full-data step (k == n):  d proposal uniforms, then 1 accept uniform.
  Firefly step:  Floyd resample draws, 1 uniform per resampled index in
  ascending index order, d proposal uniforms, 1 accept uniform.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

JIT_OPTS = dict(cache=True, nogil=True)


@njit(**JIT_OPTS)
def _log1pexp(z):
    if z > 30.0:
        return z + math.exp(-z)
    return math.log1p(math.exp(z))


@njit(**JIT_OPTS)
def _expit(z):
    if z < -700.0:
        return 0.0
    return 1.0 / (1.0 + math.exp(-z))


@njit(**JIT_OPTS)
def _glm_term(fam, ntrials, z, y):
    # log-likelihood term without the beta-free log a(y) part
    if fam == 0:
        return y * z - _log1pexp(z)
    elif fam == 1:
        return y * z - ntrials * _log1pexp(z)
    return y * z - math.exp(z)


@njit(**JIT_OPTS)
def _floyd(gen, n, k, out):
    """Floyd's uniform without-replacement sample of k indices from 0..n-1."""
    c = 0
    for j in range(n - k, n):
        t = gen.integers(0, j + 1)
        hit = False
        for q in range(c):
            if out[q] == t:
                hit = True
        if hit:
            out[c] = j
        else:
            out[c] = t
        c += 1


@njit(**JIT_OPTS)
def _glm_delta(X, y, fam, ntrials, inv_dsig, th, thp, batch):
    d = X.shape[1]
    acc = 0.0
    for bi in range(batch.shape[0]):
        i = batch[bi]
        z = 0.0
        zp = 0.0
        for j in range(d):
            z += X[i, j] * th[j]
            zp += X[i, j] * thp[j]
        acc += _glm_term(fam, ntrials, zp, y[i]) - _glm_term(fam, ntrials, z, y[i])
    return acc * inv_dsig


@njit(**JIT_OPTS)
def _glm_delta_full(X, y, fam, ntrials, inv_dsig, th, thp):
    n = X.shape[0]
    d = X.shape[1]
    acc = 0.0
    for i in range(n):
        z = 0.0
        zp = 0.0
        for j in range(d):
            z += X[i, j] * th[j]
            zp += X[i, j] * thp[j]
        acc += _glm_term(fam, ntrials, zp, y[i]) - _glm_term(fam, ntrials, z, y[i])
    return acc * inv_dsig


@njit(**JIT_OPTS)
def _prior_delta(th, thp, inv_tau2):
    acc = 0.0
    for j in range(th.shape[0]):
        acc += thp[j] * thp[j] - th[j] * th[j]
    return -0.5 * inv_tau2 * acc


@njit(**JIT_OPTS)
def glm_chain(X, y, fam, ntrials, inv_dsig, inv_tau2, theta0, halfwidth, k, steps, gen,
              weights, inv_a, use_weights, max_tries):
    """Random-walk MH on a GLM posterior using size-k uniform (or
    product-weighted) batches; k == n runs the exact full-data chain.

    Returns (thetas, accepts, batches); batches is (0, 0) for k == n.
    """
    n = X.shape[0]
    d = X.shape[1]
    thetas = np.empty((steps + 1, d))
    accepts = np.zeros(steps, dtype=np.uint8)
    full = k >= n
    if full:
        batches = np.empty((0, 0), dtype=np.int64)
    else:
        batches = np.empty((steps, k), dtype=np.int64)
    th = theta0.copy()
    for j in range(d):
        thetas[0, j] = th[j]
    thp = np.empty(d)
    batch = np.empty(k, dtype=np.int64)
    scale = n / k if not full else 1.0
    for t in range(steps):
        if not full:
            if use_weights:
                tries = 0
                while True:
                    _floyd(gen, n, k, batch)
                    u = gen.random()
                    pw = 1.0
                    for q in range(k):
                        pw *= weights[batch[q]] * inv_a
                    if u < pw:
                        break
                    tries += 1
                    if tries > max_tries:
                        raise RuntimeError("informed batch rejection exceeded max tries")
            else:
                _floyd(gen, n, k, batch)
            for q in range(k):
                batches[t, q] = batch[q]
        for j in range(d):
            thp[j] = th[j] + gen.uniform(-halfwidth, halfwidth)
        if full:
            logr = _prior_delta(th, thp, inv_tau2) + _glm_delta_full(
                X, y, fam, ntrials, inv_dsig, th, thp
            )
        else:
            logr = _prior_delta(th, thp, inv_tau2) + scale * _glm_delta(
                X, y, fam, ntrials, inv_dsig, th, thp, batch
            )
        u = gen.random()
        if math.log(u) < logr:
            for j in range(d):
                th[j] = thp[j]
            accepts[t] = 1
        for j in range(d):
            thetas[t + 1, j] = th[j]
    return thetas, accepts, batches


@njit(**JIT_OPTS)
def glm_austerity_chain(X, y, fam, ntrials, inv_dsig, inv_tau2, theta0, halfwidth,
                        k, delta, steps, gen):
    """Sequential-test subsampled MH: the batch grows in increments of k
    until the accept decision's normal-approximation p-value falls below
    delta (exact at b == n).  Returns (thetas, accepts, batch_sizes,
    first_use)."""
    n = X.shape[0]
    d = X.shape[1]
    thetas = np.empty((steps + 1, d))
    accepts = np.zeros(steps, dtype=np.uint8)
    sizes = np.zeros(steps, dtype=np.int64)
    first_use = np.full(n, -1, dtype=np.int64)
    th = theta0.copy()
    for j in range(d):
        thetas[0, j] = th[j]
    thp = np.empty(d)
    idx = np.arange(n)
    for t in range(steps):
        for j in range(d):
            thp[j] = th[j] + gen.uniform(-halfwidth, halfwidth)
        u = gen.random()
        mu0 = (math.log(u) - _prior_delta(th, thp, inv_tau2)) / n
        for i in range(n):
            idx[i] = i
        pos = 0
        sums = 0.0
        sumsq = 0.0
        accept = False
        while True:
            take = min(k, n - pos)
            for _ in range(take):
                j = gen.integers(pos, n)
                tmp = idx[pos]
                idx[pos] = idx[j]
                idx[j] = tmp
                i = idx[pos]
                zc = 0.0
                zp = 0.0
                for q in range(d):
                    zc += X[i, q] * th[q]
                    zp += X[i, q] * thp[q]
                di = (_glm_term(fam, ntrials, zp, y[i]) - _glm_term(fam, ntrials, zc, y[i])) * inv_dsig
                sums += di
                sumsq += di * di
                pos += 1
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
            if p <= delta:
                accept = mu > mu0
                break
        sizes[t] = pos
        for q in range(pos):
            i = idx[q]
            if first_use[i] < 0:
                first_use[i] = t + 1
        if accept:
            for j in range(d):
                th[j] = thp[j]
            accepts[t] = 1
        for j in range(d):
            thetas[t + 1, j] = th[j]
    return thetas, accepts, sizes, first_use


@njit(**JIT_OPTS)
def hierarchy_chain(n, ysum, mu0, halfwidth, steps, gen):
    """Full-data MH for the 2-level Gaussian hierarchy via sufficient stats."""
    thetas = np.empty(steps + 1)
    accepts = np.zeros(steps, dtype=np.uint8)
    mu = mu0
    thetas[0] = mu
    for t in range(steps):
        mup = mu + gen.uniform(-halfwidth, halfwidth)
        # prior N(0,1) plus likelihood sum in sufficient-statistic form
        logr = -0.5 * (mup * mup - mu * mu) * (n + 1.0) + (mup - mu) * ysum
        u = gen.random()
        if math.log(u) < logr:
            mu = mup
            accepts[t] = 1
        thetas[t + 1] = mu
    return thetas, accepts


@njit(**JIT_OPTS)
def hierarchy_sub_chain(yv, k, mu0, halfwidth, steps, gen):
    """Inexact subsampled MH for the Gaussian hierarchy (n/k rescaling)."""
    n = yv.shape[0]
    thetas = np.empty(steps + 1)
    accepts = np.zeros(steps, dtype=np.uint8)
    batches = np.empty((steps, k), dtype=np.int64)
    batch = np.empty(k, dtype=np.int64)
    mu = mu0
    thetas[0] = mu
    scale = n / k
    for t in range(steps):
        _floyd(gen, n, k, batch)
        for q in range(k):
            batches[t, q] = batch[q]
        mup = mu + gen.uniform(-halfwidth, halfwidth)
        acc = 0.0
        for q in range(k):
            yi = yv[batch[q]]
            acc += -0.5 * (yi - mup) ** 2 + 0.5 * (yi - mu) ** 2
        logr = -0.5 * (mup * mup - mu * mu) + scale * acc
        u = gen.random()
        if math.log(u) < logr:
            mu = mup
            accepts[t] = 1
        thetas[t + 1] = mu
    return thetas, accepts, batches


@njit(**JIT_OPTS)
def _ff_logl(X, y, th, i):
    z = 0.0
    for j in range(X.shape[1]):
        z += X[i, j] * th[j]
    return y[i] * z - _log1pexp(z)


@njit(**JIT_OPTS)
def _ff_logbound(X, y, anchors, slack, th, i):
    z = 0.0
    for j in range(X.shape[1]):
        z += X[i, j] * th[j]
    a = anchors[i]
    return y[i] * z - (_log1pexp(a) + _expit(a) * (z - a) + 0.125 * (z - a) ** 2) - slack


@njit(**JIT_OPTS)
def _ff_aggregate(gvec, Hmat, Ctot, th):
    d = th.shape[0]
    acc = Ctot
    for j in range(d):
        acc += gvec[j] * th[j]
        row = 0.0
        for l in range(d):
            row += Hmat[j, l] * th[l]
        acc -= 0.125 * th[j] * row
    return acc


@njit(**JIT_OPTS)
def _ff_bright_part(X, y, anchors, slack, th, z):
    """sum over bright i of [log(l_i - L_i) - log L_i]; -inf when any
    bright point has zero slack at th.  Raises on bound violation."""
    acc = 0.0
    for i in range(z.shape[0]):
        if z[i] == 1:
            ll = _ff_logl(X, y, th, i)
            lb = _ff_logbound(X, y, anchors, slack, th, i)
            delta = lb - ll
            if delta > 1e-9:
                raise RuntimeError("firefly lower bound exceeded the likelihood")
            em = -math.expm1(min(delta, 0.0))
            if em <= 0.0:
                return -np.inf
            acc += ll + math.log(em) - lb
    return acc


@njit(**JIT_OPTS)
def firefly_chain(X, y, anchors, slack, gvec, Hmat, Ctot, inv_tau2, z0, theta0,
                  halfwidth, n_resample, steps, gen):
    """Exact firefly chain on (theta, brightness) for logistic targets.

    Returns (thetas, accepts, z, first_use, used_counts, bright_counts).
    first_use[i] is the 1-based step at which datum i first entered a
    step's used set (-1 if never).
    """
    n = X.shape[0]
    d = X.shape[1]
    thetas = np.empty((steps + 1, d))
    accepts = np.zeros(steps, dtype=np.uint8)
    z = z0.copy()
    th = theta0.copy()
    for j in range(d):
        thetas[0, j] = th[j]
    thp = np.empty(d)
    rset = np.empty(n_resample, dtype=np.int64)
    first_use = np.full(n, -1, dtype=np.int64)
    used_counts = np.zeros(steps, dtype=np.int64)
    bright_counts = np.zeros(steps, dtype=np.int64)
    stamp = np.zeros(n, dtype=np.int64)
    for t in range(steps):
        _floyd(gen, n, n_resample, rset)
        rset_s = np.sort(rset)
        for q in range(n_resample):
            i = rset_s[q]
            ll = _ff_logl(X, y, th, i)
            lb = _ff_logbound(X, y, anchors, slack, th, i)
            delta = lb - ll
            if delta > 1e-9:
                raise RuntimeError("firefly lower bound exceeded the likelihood")
            p_bright = -math.expm1(min(delta, 0.0))
            u = gen.random()
            z[i] = 1 if u < p_bright else 0
            stamp[i] = t + 1
        for j in range(d):
            thp[j] = th[j] + gen.uniform(-halfwidth, halfwidth)
        cur = _ff_aggregate(gvec, Hmat, Ctot, th) + _ff_bright_part(X, y, anchors, slack, th, z)
        prop = _ff_aggregate(gvec, Hmat, Ctot, thp) + _ff_bright_part(X, y, anchors, slack, thp, z)
        logr = _prior_delta(th, thp, inv_tau2) + prop - cur
        u = gen.random()
        if math.log(u) < logr:
            for j in range(d):
                th[j] = thp[j]
            accepts[t] = 1
        nb = 0
        nu = 0
        for i in range(n):
            if z[i] == 1:
                nb += 1
            if z[i] == 1 or stamp[i] == t + 1:
                nu += 1
                if first_use[i] < 0:
                    first_use[i] = t + 1
        bright_counts[t] = nb
        used_counts[t] = nu
        for j in range(d):
            thetas[t + 1, j] = th[j]
    return thetas, accepts, z, first_use, used_counts, bright_counts


@njit(**JIT_OPTS)
def coupon_draws(weights, inv_a, k, threshold, max_draws, gen_idx, gen_u):
    """Draws of product-weighted k-subsets until ``threshold`` distinct
    items are seen.  Returns the number of subset draws, or -1 if the
    budget is exhausted.  Index draws and rejection uniforms come from
    separate streams so the numpy twin can batch them identically."""
    n = weights.shape[0]
    seen = np.zeros(n, dtype=np.uint8)
    batch = np.empty(k, dtype=np.int64)
    covered = 0
    draws = 0
    while covered < threshold:
        if draws >= max_draws:
            return -1
        if k == 1:
            while True:
                i = gen_idx.integers(0, n)
                u = gen_u.random()
                if u < weights[i] * inv_a:
                    batch[0] = i
                    break
        else:
            while True:
                _floyd(gen_idx, n, k, batch)
                u = gen_u.random()
                pw = 1.0
                for q in range(k):
                    pw *= weights[batch[q]] * inv_a
                if u < pw:
                    break
        draws += 1
        for q in range(k):
            i = batch[q]
            if seen[i] == 0:
                seen[i] = 1
                covered += 1
    return draws
