import itertools

import numpy as np
import pytest
from scipy.integrate import simpson
from scipy.stats import chisquare, ks_2samp

from submc.core import Dataset, RngStream
from submc.diagnostics import discrete_mh_matrix
from submc.kernels import (
    KernelConfig,
    KernelState,
    firefly,
    full_mh,
    generic_subsampling,
    informed_subsampler,
    permutation_wrapper,
    perturb_replay_check,
    run_chain,
    step,
)
from submc.manifold import _glm_logpost_fn
from submc.models import (
    GaussianPrior,
    GlmModel,
    ToyModel,
    log_posterior,
    logistic_family,
    mle,
    sample_dataset,
)


def _model(d=1, tau=10.0):
    return GlmModel(logistic_family(), d, GaussianPrior(tau))


def _toy_data(n, seed=0, shift=0.3):
    y = RngStream(seed).generator().standard_normal(n) + shift
    return Dataset(np.zeros((n, 1)), y)


@pytest.fixture(scope="module")
def glm_setup():
    stream = RngStream(50)
    model = _model()
    data = sample_dataset(logistic_family(), np.array([0.8]), {"kind": "uniform_box"}, 120, stream)
    theta0 = mle(model, data)
    return model, data, theta0


def test_full_mh_uses_all(glm_setup):
    model, data, theta0 = glm_setup
    kern = full_mh(model, 2.4)
    st = kern.init_state(data, theta0=theta0)
    _, used = step(kern, st, data, None, RngStream(51))
    assert np.array_equal(used, np.arange(data.n))


def test_generic_single_batch_size(glm_setup):
    model, data, theta0 = glm_setup
    kern = generic_subsampling(model, KernelConfig(batch_size=10))
    st = kern.init_state(data, theta0=theta0)
    _, used = step(kern, st, data, None, RngStream(52))
    assert used.size == 10
    assert np.all((used >= 0) & (used < data.n))


def test_k_equals_n_reduces_to_full_mh(glm_setup):
    model, data, theta0 = glm_setup
    k_full = full_mh(model, 2.4)
    k_gen = generic_subsampling(model, KernelConfig(batch_size=data.n))
    a = run_chain(k_full, data, 200, RngStream(53), theta0=theta0, fused=False)
    b = run_chain(k_gen, data, 200, RngStream(53), theta0=theta0, fused=False)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.accept_flags, b.accept_flags)


def test_prior_only_target_uphill_always_accepted():
    # with no data, proposals into higher prior density always accept;
    # rejected proposals are reconstructed by replaying the stream
    model = _model(tau=1.0)
    data = Dataset(np.zeros((0, 1)), np.zeros(0))
    kern = full_mh(model, 2.4)
    gen = RngStream(54).generator()
    st = KernelState(theta=np.array([1.0]))
    h = kern.proposal_halfwidth(0)
    for _ in range(500):
        snap = gen.bit_generator.state
        new, _, accepted = kern.step(st, data, gen)
        if not accepted:
            g2 = RngStream(54).generator()
            g2.bit_generator.state = snap
            thp = st.theta + g2.uniform(-h, h, size=1)
            assert abs(thp[0]) > abs(st.theta[0])  # only downhill proposals reject
        st = new


def test_full_mh_hierarchy_matches_closed_form():
    toy = ToyModel("gaussian_hierarchy")
    data = _toy_data(100, seed=55)
    n = data.n
    post_mean = data.responses.sum() / (n + 1)
    post_sd = 1.0 / np.sqrt(n + 1)
    kern = full_mh(toy, 2.4)
    tr = run_chain(kern, data, 10**5, RngStream(56), theta0=np.array([post_mean]))
    xs = tr.states[10_000:, 0]
    from submc.diagnostics import iat_ess

    res = iat_ess(xs)
    mc_sd = post_sd * np.sqrt(res.iat / xs.size)
    assert abs(xs.mean() - post_mean) < 3 * mc_sd


def test_detailed_balance_discrete_restriction():
    # 21-state restriction of the random-walk MH acceptance rule
    grid = np.linspace(-2, 2, 21)
    logw = -0.5 * grid**2 * 4.0
    P = discrete_mh_matrix(logw, window=3)
    pi = np.exp(logw - logw.max())
    pi /= pi.sum()
    flow = pi[:, None] * P
    assert np.max(np.abs(flow - flow.T)) < 1e-12


def test_batch_frequencies_uniform(glm_setup):
    model, data, theta0 = glm_setup
    n, k, steps = data.n, 6, 30_000
    kern = generic_subsampling(model, KernelConfig(batch_size=k))
    tr = run_chain(kern, data, steps, RngStream(57), theta0=theta0, keep_step_sets=True)
    counts = np.zeros(n)
    for s in tr.ledger.step_sets:
        counts[s] += 1
    p = k / n
    sigma = np.sqrt(steps * p * (1 - p))
    # 5 sigma with a multiplicity allowance across n indices
    assert np.max(np.abs(counts - steps * p)) < 5 * sigma


def test_generic_stationary_bias_exists():
    toy = ToyModel("gaussian_hierarchy")
    data = _toy_data(1000, seed=58)
    n = data.n
    post_mean = data.responses.sum() / (n + 1)
    post_sd = 1.0 / np.sqrt(n + 1)
    kern = generic_subsampling(_toy_cfg_model(), KernelConfig(batch_size=10))
    tr = run_chain(kern, data, 2 * 10**5, RngStream(59), theta0=np.array([post_mean]), keep_step_sets=False)
    xs = tr.states[40_000:, 0]
    edges = np.linspace(post_mean - 12 * post_sd, post_mean + 12 * post_sd, 61)
    hist, _ = np.histogram(xs, bins=edges)
    hist = hist / hist.sum()
    from scipy.stats import norm

    mass = np.diff(norm.cdf(edges, post_mean, post_sd))
    mass = mass / mass.sum()
    tv = 0.5 * np.abs(hist - mass).sum()
    assert tv > 0.1  # far beyond Monte-Carlo error at this length


def _toy_cfg_model():
    return ToyModel("gaussian_hierarchy")


def test_informed_uniform_weights_chi2(glm_setup):
    model, data, theta0 = glm_setup
    kern = informed_subsampler(model, KernelConfig(batch_size=1, weight_bound=1.0), np.ones(data.n))
    tr = run_chain(kern, data, 24_000, RngStream(60), theta0=theta0, keep_step_sets=True, fused=False)
    counts = np.zeros(data.n)
    for s in tr.ledger.step_sets:
        counts[s] += 1
    _, pval = chisquare(counts)
    assert pval > 0.01


def test_informed_two_point_ratio():
    model = _model()
    data = Dataset(np.array([[0.5], [-0.5]]), np.array([1.0, 0.0]))
    A = 2.0
    kern = informed_subsampler(model, KernelConfig(batch_size=1, weight_bound=A), np.array([A, 1.0 / A]))
    gen = RngStream(61).generator()
    st = kern.init_state(data, theta0=np.zeros(1))
    hits = 0
    draws = 10**5
    for _ in range(draws):
        _, used, _ = kern.step(st, data, gen)
        hits += used[0] == 0
    p = A**2 / (1 + A**2)
    sigma = np.sqrt(draws * p * (1 - p))
    assert abs(hits - draws * p) < 3 * sigma


def test_informed_frequency_band(glm_setup):
    model, data, theta0 = glm_setup
    n, k = data.n, 5
    A = 1.5
    rng = np.random.default_rng(3)
    w = np.exp(rng.uniform(-np.log(A), np.log(A), n))
    kern = informed_subsampler(model, KernelConfig(batch_size=k, weight_bound=A), w)
    tr = run_chain(kern, data, 40_000, RngStream(62), theta0=theta0, keep_step_sets=True)
    counts = np.zeros(n)
    for s in tr.ledger.step_sets:
        counts[s] += 1
    freq = counts / 40_000
    eps = 0.1
    assert np.all(freq >= (k / n) / A**2 * (1 - eps) - 3e-3)
    assert np.all(freq <= (k / n) * A**2 * (1 + eps) + 3e-3)


def test_informed_rejects_out_of_band_weights(glm_setup):
    model, data, _ = glm_setup
    with pytest.raises(ValueError):
        informed_subsampler(model, KernelConfig(batch_size=2, weight_bound=2.0), np.full(data.n, 3.0))


def test_firefly_all_bright_reduces_to_full_ratio(glm_setup):
    model, data, theta0 = glm_setup
    # huge slack drives the bounds to ~0, so bright terms carry the full likelihood
    kern = firefly(model, KernelConfig(resample_fraction=0.2, bound_slack=60.0), data)
    z = np.ones(data.n, dtype=np.uint8)
    th1, th2 = theta0, theta0 + 0.11
    delta_ff = kern.log_target(data, th2, z) - kern.log_target(data, th1, z)
    delta_full = log_posterior(model, data, th2) - log_posterior(model, data, th1)
    assert abs(delta_ff - delta_full) < 1e-8


def test_firefly_bound_validity_random_probes(glm_setup):
    model, data, theta0 = glm_setup
    kern = firefly(model, KernelConfig(resample_fraction=0.2, bound_slack=0.0), data)
    gen = np.random.default_rng(63)
    X, y = data.covariates, data.responses
    a = kern.anchors
    total = 0
    for _ in range(100):
        beta = gen.normal(theta0[0], 2.0)
        z = X[:, 0] * beta
        ll = y * z - np.log1p(np.exp(z))
        lb = y * z - (np.log1p(np.exp(a)) + (1 / (1 + np.exp(-a))) * (z - a) + 0.125 * (z - a) ** 2)
        assert np.all(lb <= ll + 1e-12)
        total += data.n
    assert total >= 10**4  # dense probe of (beta, datum) pairs


def test_firefly_runtime_bound_check_fires(glm_setup):
    model, data, theta0 = glm_setup
    # negative slack forges a bound above the likelihood near the anchor;
    # the exactness guard must detect it at runtime
    kern_bad = firefly(model, KernelConfig(resample_fraction=0.2, bound_slack=0.0), data)
    kern_bad.slack = -0.5
    gen = RngStream(64).generator()
    with pytest.raises(RuntimeError):
        st = kern_bad.init_state(data, theta0=theta0, gen=gen)
        for _ in range(50):
            st, _, _ = kern_bad.step(st, data, gen)


def test_firefly_long_run_matches_full_mh(glm_setup):
    model, data, theta0 = glm_setup
    steps = 2 * 10**5
    tr_full = run_chain(full_mh(model, 2.4), data, steps, RngStream(65), theta0=theta0, keep_step_sets=False)
    kern = firefly(model, KernelConfig(resample_fraction=0.1, bound_slack=0.0), data)
    tr_ff = run_chain(kern, data, steps, RngStream(66), theta0=theta0, keep_step_sets=False)
    from submc.diagnostics import iat_ess

    burn = steps // 5
    a, b = tr_full.states[burn:, 0], tr_ff.states[burn:, 0]
    ra, rb = iat_ess(a), iat_ess(b)
    se = np.sqrt(a.var() * ra.iat / a.size + b.var() * rb.iat / b.size)
    assert abs(a.mean() - b.mean()) < 3 * se


def test_firefly_joint_exact_invariance(glm_setup):
    """pi K = pi for the discretized joint (theta, brightness) chain."""
    model = _model()
    stream = RngStream(67)
    data = sample_dataset(logistic_family(), np.array([0.8]), {"kind": "uniform_box"}, 4, stream)
    kern = firefly(model, KernelConfig(resample_fraction=0.25, bound_slack=0.4), data)
    bh = mle(model, data)
    grid = bh[0] + np.linspace(-3, 3, 21)
    zs = list(itertools.product([0, 1], repeat=4))
    states = [(gi, z) for gi in range(21) for z in zs]
    index = {s: i for i, s in enumerate(states)}
    S = len(states)

    logpi = np.array([kern.log_target(data, np.array([grid[gi]]), np.array(z, dtype=np.uint8)) for gi, z in states])
    pi = np.exp(logpi - logpi.max())
    pi /= pi.sum()

    # z-refresh: uniform singleton resample set, exact Gibbs on that index
    Kz = np.zeros((S, S))
    for (gi, z), i in index.items():
        th = np.array([grid[gi]])
        for r in range(4):
            ll, lb = kern._bound_terms(data, np.array([r]), th)
            p1 = float(-np.expm1(min(lb[0] - ll[0], 0.0)))
            for znew in (0, 1):
                z2 = list(z)
                z2[r] = znew
                Kz[i, index[(gi, tuple(z2))]] += 0.25 * (p1 if znew else 1 - p1)

    # theta-move: symmetric neighbor proposal, MH accept on the joint target
    Kb = np.zeros((S, S))
    win = 2
    for (gi, z), i in index.items():
        for off in range(-win, win + 1):
            if off == 0:
                continue
            gj = gi + off
            if 0 <= gj < 21:
                j = index[(gj, z)]
                acc = min(1.0, float(np.exp(logpi[j] - logpi[i])))
                Kb[i, j] = acc / (2 * win)
        Kb[i, i] = 1.0 - Kb[i].sum()

    K = Kz @ Kb
    assert np.max(np.abs(pi @ K - pi)) < 1e-8


def test_permutation_wrapper_prefix_labels(glm_setup):
    model, data, theta0 = glm_setup
    inner = generic_subsampling(model, KernelConfig(batch_size=7))
    wrap = permutation_wrapper(inner, data.n, RngStream(68))
    gen = RngStream(69).generator()
    st = wrap.init_state(data, theta0=theta0, gen=gen)
    for _ in range(30):
        st, used, _ = wrap.step(st, data, gen)
    labels = st.aux["labels"]
    nxt = st.aux["next"]
    got = sorted(labels[labels >= 0].tolist())
    assert got == list(range(nxt))  # cumulative usage is a label prefix


def test_permutation_wrapper_first_use_uniform():
    model = _model()
    n = 8
    stream = RngStream(70)
    data = sample_dataset(logistic_family(), np.array([0.5]), {"kind": "uniform_box"}, n, stream)
    theta0 = np.zeros(1)
    inner = generic_subsampling(model, KernelConfig(batch_size=2))
    position_counts = np.zeros((n, n))
    for rep in range(3000):
        wrap = permutation_wrapper(inner, n, RngStream(71).child(rep))
        gen = RngStream(72).child(rep).generator()
        st = wrap.init_state(data, theta0=theta0, gen=gen)
        while st.aux["next"] < n:
            st, _, _ = wrap.step(st, data, gen)
        position_counts[np.arange(n), st.aux["labels"]] += 1
    # each raw index's arrival label should be uniform on 0..n-1
    pvals = [chisquare(position_counts[i]).pvalue for i in range(n)]
    assert min(pvals) > 0.01 / n


def test_permutation_wrapper_law_unchanged(glm_setup):
    model, data, theta0 = glm_setup
    inner = generic_subsampling(model, KernelConfig(batch_size=8))
    finals_plain = []
    finals_wrapped = []
    for rep in range(300):
        tr = run_chain(inner, data, 40, RngStream(73).child(rep), theta0=theta0, fused=False)
        finals_plain.append(tr.states[-1, 0])
        wrap = permutation_wrapper(inner, data.n, RngStream(74).child(rep))
        trw = run_chain(wrap, data, 40, RngStream(75).child(rep), theta0=theta0, fused=False)
        finals_wrapped.append(trw.states[-1, 0])
    assert ks_2samp(finals_plain, finals_wrapped).pvalue > 0.01


def test_geometric_continuation_exponential_tail(glm_setup):
    model, data, theta0 = glm_setup
    gamma = 0.5
    kern = generic_subsampling(model, KernelConfig(batch_size=4, continuation_prob=gamma, max_batches=64))
    gen = RngStream(76).generator()
    st = kern.init_state(data, theta0=theta0)
    counts = []
    for _ in range(4000):
        st, used, _ = kern.step(st, data, gen)
        counts.append(int(round(used.size / 4)))
    counts = np.array(counts)
    # geometric: P(N >= j) = gamma^(j-1); verify the exponential tail
    for j in (2, 3, 4):
        frac = (counts >= j).mean()
        expect = gamma ** (j - 1)
        assert abs(frac - expect) < 5 * np.sqrt(expect * (1 - expect) / counts.size) + 1e-3


def test_continuation_exceeding_max_batches_aborts(glm_setup):
    model, data, theta0 = glm_setup
    kern = generic_subsampling(model, KernelConfig(batch_size=2, continuation_prob=0.99, max_batches=3))
    gen = RngStream(77).generator()
    st = kern.init_state(data, theta0=theta0)
    with pytest.raises(RuntimeError):
        for _ in range(200):
            st, _, _ = kern.step(st, data, gen)


def test_austerity_batches_grow_and_decide(glm_setup):
    model, data, theta0 = glm_setup
    kern = generic_subsampling(model, KernelConfig(batch_size=10, delta=0.05))
    gen = RngStream(78).generator()
    st = kern.init_state(data, theta0=theta0)
    sizes = []
    for _ in range(300):
        st, used, _ = kern.step(st, data, gen)
        sizes.append(used.size)
    sizes = np.array(sizes)
    assert np.all(sizes % 10 == 0) or np.any(sizes == data.n)
    assert sizes.min() >= 10 and sizes.max() <= data.n
    assert len(np.unique(sizes)) > 1  # the sequential test actually adapts


USAGE_KERNELS = [
    "full",
    "generic",
    "austerity",
    "informed",
    "firefly",
    "permutation",
    "toy_full",
    "toy_sub",
]


@pytest.mark.parametrize("kind", USAGE_KERNELS)
def test_usage_soundness(kind):
    stream = RngStream(800 + USAGE_KERNELS.index(kind))
    if kind.startswith("toy"):
        model = ToyModel("gaussian_hierarchy")
        data = _toy_data(40, seed=81)
        kern = full_mh(model, 2.4) if kind == "toy_full" else generic_subsampling(model, KernelConfig(batch_size=6))
    else:
        model = _model()
        data = sample_dataset(logistic_family(), np.array([0.7]), {"kind": "uniform_box"}, 50, RngStream(82))
        if kind == "full":
            kern = full_mh(model, 2.4)
        elif kind == "generic":
            kern = generic_subsampling(model, KernelConfig(batch_size=5))
        elif kind == "austerity":
            kern = generic_subsampling(model, KernelConfig(batch_size=5, delta=0.1))
        elif kind == "informed":
            w = np.where(np.arange(50) % 2 == 0, 2.0, 0.5)
            kern = informed_subsampler(model, KernelConfig(batch_size=5, weight_bound=2.0), w)
        elif kind == "firefly":
            kern = firefly(model, KernelConfig(resample_fraction=0.15, bound_slack=0.7), data)
        else:
            inner = generic_subsampling(model, KernelConfig(batch_size=5))
            kern = permutation_wrapper(inner, data.n, RngStream(83))
    assert perturb_replay_check(kern, data, stream, probes=100)
