import numpy as np
import pytest
from scipy.stats import norm

from submc.core import Dataset, RngStream
from submc.cvars import (
    ControlVariateSet,
    WarmStart,
    composite_cv,
    covariate_mean_cv,
    cv_jacobian,
    grid_cv,
    mean_cv,
    mle_cv,
    warm_start_ratio,
    warm_start_sample,
)
from submc.models import GaussianPrior, GlmModel, logistic_family, mle, sample_dataset

from .test_models import irls_logistic


def _model(d=1, tau=np.inf):
    return GlmModel(logistic_family(), d, GaussianPrior(tau))


def test_mle_cv_symmetric_two_point():
    data = Dataset(np.ones((2, 1)), np.array([1.0, 0.0]))
    cv = mle_cv(_model(), data)
    assert abs(cv.values[0]) < 1e-10


def test_mle_cv_permutation_invariant():
    stream = RngStream(31)
    data = sample_dataset(logistic_family(), np.array([0.6]), {"kind": "uniform_box"}, 50, stream)
    cv = mle_cv(_model(), data)
    perm = RngStream(32).generator().permutation(50)
    data_p = Dataset(data.covariates[perm], data.responses[perm])
    assert np.max(np.abs(cv.evaluator(data_p) - cv.values)) < 1e-9


def test_mle_cv_matches_irls():
    stream = RngStream(33)
    data = sample_dataset(logistic_family(), np.array([0.6]), {"kind": "uniform_box"}, 100, stream)
    cv = mle_cv(_model(), data)
    oracle = irls_logistic(data.covariates, data.responses)
    assert np.max(np.abs(cv.values - oracle)) < 1e-8


def test_mle_cv_evaluator_reproduces_values():
    stream = RngStream(34)
    data = sample_dataset(logistic_family(), np.array([0.6]), {"kind": "uniform_box"}, 40, stream)
    cv = mle_cv(_model(), data)
    assert np.array_equal(cv.evaluator(data), cv.values)


def test_grid_cv_rounding():
    # n=1, a=0 -> spacing 1
    data = Dataset(np.array([[0.4]]), np.array([1.0]))
    cv = grid_cv(data, 0.0)
    assert cv.values[0] == 0.0
    # half cases round toward -inf
    assert grid_cv(Dataset(np.array([[0.5]]), np.array([0.0])), 0.0).values[0] == 0.0
    assert grid_cv(Dataset(np.array([[-0.5]]), np.array([0.0])), 0.0).values[0] == -1.0


def test_grid_cv_spacing_point_one():
    # n=100, a=0.5 -> spacing 0.1
    X = np.full((100, 1), 0.234)
    cv = grid_cv(Dataset(X, np.zeros(100)), 0.5)
    assert np.allclose(cv.values, 0.2)
    assert cv.k == 100


def test_grid_cv_lattice_fixed_point():
    # exactly representable lattice: spacing 0.25 (n=16, a=0.5)
    X = np.array([[0.75], [-0.5]] * 8)
    cv = grid_cv(Dataset(X, np.zeros(16)), 0.5)
    assert np.array_equal(cv.values, X.reshape(-1))


def test_grid_cv_negative_exponent_rejected():
    with pytest.raises(ValueError):
        grid_cv(Dataset(np.zeros((2, 1)), np.zeros(2)), -1.0)


def test_cv_jacobian_shape_and_grid_zero():
    stream = RngStream(35)
    model = _model(2)
    data = sample_dataset(logistic_family(), np.array([0.4, -0.2]), {"kind": "uniform_box"}, 20, stream)
    m = 4
    cvm = mle_cv(model, data)
    J = cv_jacobian(cvm, model, data, m)
    assert J.shape == (2, 2 * (20 - 4))
    cg = grid_cv(data, 0.5)
    Jg = cv_jacobian(cg, model, data, m)
    assert Jg.shape == (cg.k, 2 * 16) and not Jg.any()


def test_cv_jacobian_finite_difference_with_resolve():
    stream = RngStream(36)
    model = _model(2)
    data = sample_dataset(logistic_family(), np.array([0.4, -0.6]), {"kind": "uniform_box"}, 30, stream)
    m = 3
    cv = mle_cv(model, data)
    J = cv_jacobian(cv, model, data, m)
    rng = np.random.default_rng(1)
    h = 1e-5
    for _ in range(6):
        i = int(rng.integers(m, 30))
        j = int(rng.integers(0, 2))
        col = (i - m) * 2 + j
        Xp = data.covariates.copy()
        Xm = data.covariates.copy()
        Xp[i, j] += h
        Xm[i, j] -= h
        fd = (mle(model, Dataset(Xp, data.responses)) - mle(model, Dataset(Xm, data.responses))) / (2 * h)
        denom = np.maximum(np.abs(J[:, col]), 1e-3)
        assert np.all(np.abs(fd - J[:, col]) / denom < 1e-4)


def test_composite_concatenates():
    stream = RngStream(37)
    model = _model(1)
    data = sample_dataset(logistic_family(), np.array([0.4]), {"kind": "uniform_box"}, 12, stream)
    comp = composite_cv([mle_cv(model, data), grid_cv(data, 0.5)])
    assert comp.k == 1 + 12
    J = cv_jacobian(comp, model, data, 2)
    assert J.shape == (13, 10)
    # duplicated statistics are allowed
    comp2 = composite_cv([mle_cv(model, data), mle_cv(model, data)])
    assert comp2.k == 2


def test_null_space_second_order_displacement():
    # moving data along a null direction changes the re-solved MLE at
    # second order: residual(step) / residual(step/10) ~ 100
    stream = RngStream(38)
    model = _model(1)
    data = sample_dataset(logistic_family(), np.array([0.7]), {"kind": "uniform_box"}, 25, stream)
    m = 2
    cv = mle_cv(model, data)
    J = cv_jacobian(cv, model, data, m)
    from scipy.linalg import null_space

    B = null_space(J)
    v = B[:, 0]

    def moved(step):
        X = data.covariates.copy()
        X[m:] += (step * v).reshape(-1, 1)
        return abs(mle(model, Dataset(X, data.responses))[0] - cv.values[0])

    r1, r2 = moved(1e-3), moved(1e-4)
    assert r1 / max(r2, 1e-16) > 20  # second order: ratio ~ 100


def test_warm_start_radius_property():
    stream = RngStream(39)
    ws = WarmStart(center=np.array([0.3, -0.1]), radius=0.05)
    gen = stream.generator()
    pts = np.array([warm_start_sample(ws, gen) for _ in range(10**4)])
    assert np.all(np.linalg.norm(pts - ws.center, axis=1) <= ws.radius + 1e-15)


def test_warm_start_density_constant_d1():
    ws = WarmStart(center=np.zeros(1), radius=0.2)
    assert abs(np.exp(ws.log_density()) - 1.0 / (2 * 0.2)) < 1e-12


def test_warm_start_ratio_gaussian_closed_form():
    # center at the posterior mean, radius = posterior sd: the sup ratio is
    # (1/(2r)) / density at the ball edge
    sd = 0.5
    ws = WarmStart(center=np.zeros(1), radius=sd)

    def logpost(x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return -0.5 * x**2 / sd**2

    ratio = warm_start_ratio(ws, logpost, np.array([-10 * sd]), np.array([10 * sd]))
    exact = (1.0 / (2 * sd)) / norm.pdf(sd, scale=sd)
    assert abs(ratio - exact) / exact < 1e-6


def test_warm_start_ratio_logistic_bound():
    stream = RngStream(40)
    model = _model(1, tau=10.0)
    n = 100
    data = sample_dataset(logistic_family(), np.array([0.7]), {"kind": "uniform_box"}, n, stream)
    ws = WarmStart.from_mle(model, data, c_w=1.0)
    from submc.manifold import _glm_logpost_fn

    f = _glm_logpost_fn(model, data)
    lo, hi = ws.center[0] - 1.5, ws.center[0] + 1.5
    ratio = warm_start_ratio(ws, lambda p: f(np.atleast_2d(p)), np.array([lo]), np.array([hi]))
    assert np.isfinite(ratio)
    assert ratio <= 2 * np.e * n ** (1.0 * 1)


def test_warm_start_exponent_validated():
    stream = RngStream(41)
    model = _model(1)
    data = sample_dataset(logistic_family(), np.array([0.2]), {"kind": "uniform_box"}, 20, stream)
    with pytest.raises(ValueError):
        WarmStart.from_mle(model, data, c_w=3.0)


def test_mean_cv_kinds():
    data = Dataset(np.full((4, 1), 0.5), np.array([1.0, 2.0, 3.0, 4.0]))
    assert mean_cv(data).values[0] == 2.5
    assert covariate_mean_cv(data).values[0] == 0.5
    Jx = cv_jacobian(covariate_mean_cv(data), None, data, 1)
    assert np.allclose(Jx, 1.0 / 4)
