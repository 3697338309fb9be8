import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from collapsed_ns import autodiff as ad
from collapsed_ns.collapse import (
    NU_MAX,
    CollapseOptions,
    Flag,
    _dense_neg_hessian,
    collapse_batch,
    collapsed_loglik_gaussian,
    collapsed_loglik_student,
    conditional_map,
    estimate_nu,
    latent_hessian,
    student_log_q,
    student_log_q0,
)
from collapsed_ns.models import get_model
from collapsed_ns.models.zoo import StudentHierarchy
from collapsed_ns.structure import LatentStructure


def prior_draws(model, n, seed=0):
    rng = np.random.default_rng(seed)
    return model.prior_transform(rng.random((n, model.d_theta)))


@settings(max_examples=30, deadline=None)
@given(m=st.floats(-5, 5), y=st.floats(-4, 4))
def test_linear_gaussian_closed_form(m, y):
    model = get_model("linear_gaussian", y=y)
    ev = collapsed_loglik_gaussian(model, [m])
    assert ev.logl == pytest.approx(stats.norm.logpdf(y, m, math.sqrt(2)), abs=1e-10)
    assert ev.z_hat[0] == pytest.approx((m + y) / 2, abs=1e-8)
    assert ev.converged


@pytest.mark.parametrize("name,kw", [("eight_schools", {}), ("radon", {"J": 8}),
                                     ("brownian", {"T": 20}), ("sne", {"N": 6}),
                                     ("linear_funnel", {})])
def test_gaussian_collapse_exact_on_conjugate_models(name, kw):
    model = get_model(name, **kw)
    theta = prior_draws(model, 25)
    res = collapse_batch(model, theta)
    ref = model.exact_marginal(theta)
    np.testing.assert_allclose(res.logl, ref, rtol=1e-9, atol=1e-9)
    assert not np.any(res.flags & (Flag.NONCONVERGED | Flag.INDEFINITE | Flag.NONFINITE))


@pytest.mark.parametrize("nu", [3.0, 5.0, 12.0])
def test_unit_curvature_student_matches_scipy(nu):
    scale = math.sqrt((nu + 1) / nu)
    w = np.linspace(-4, 4, 9)
    np.testing.assert_allclose(student_log_q(w, nu), stats.t.logpdf(w, nu, scale=scale),
                               rtol=1e-13)
    assert float(student_log_q0(nu)) == pytest.approx(stats.t.logpdf(0, nu, scale=scale),
                                                      rel=1e-14)


def test_log_q0_gaussian_limit_is_accurate():
    assert float(student_log_q0(NU_MAX)) == pytest.approx(-0.5 * math.log(2 * math.pi),
                                                          abs=1e-8)


class PureStudent(StudentHierarchy):
    """Latent conditional equal to the Student-t prior (no data term)."""

    def log_likelihood_p(self, p, z):
        return 0.0 * ad.sum(z, axis=-1)

    def block_log_joint_p(self, p, zb):
        return self._prior_terms(p, zb[..., 0])


@pytest.mark.parametrize("nu", [5.0, 9.0, 30.0])
def test_student_collapse_exact_for_student_conditional(nu):
    model = PureStudent(N_obj=3, nu=nu)
    theta = np.array([[0.4, math.log(0.7)], [-1.0, math.log(2.0)]])
    st_ = collapse_batch(model, theta, options=CollapseOptions(method="student"))
    ga = collapse_batch(model, theta)
    # a normalised density integrates to one
    np.testing.assert_allclose(st_.logl, 0.0, atol=1e-10)
    np.testing.assert_allclose(st_.nu, nu, rtol=1e-8)
    assert np.all(np.abs(ga.logl) > 1e-3)


def test_student_with_huge_nu_reduces_to_gaussian():
    model = get_model("student_hier", N_obj=6)
    theta = prior_draws(model, 5)
    g = collapse_batch(model, theta)
    s = collapse_batch(model, theta, options=CollapseOptions(method="student", nu=NU_MAX))
    np.testing.assert_allclose(s.logl, g.logl, atol=1e-6)


def test_nu_clamped_flag_on_gaussian_conditional():
    model = get_model("eight_schools")
    theta = prior_draws(model, 4)
    s = collapse_batch(model, theta, options=CollapseOptions(method="student"))
    assert np.all(s.flags & Flag.NU_CLAMPED)
    np.testing.assert_allclose(s.nu, NU_MAX)
    np.testing.assert_allclose(s.logl, model.exact_marginal(theta), atol=1e-6)


def test_estimate_nu_single_theta():
    model = PureStudent(N_obj=2, nu=7.0)
    th = np.array([0.0, 0.0])
    ev = collapsed_loglik_student(model, th)
    nu = estimate_nu(model, th, ev.z_hat, ev.factor)
    np.testing.assert_allclose(nu, 7.0, rtol=1e-8)
    assert np.all(estimate_nu(model, th, ev.z_hat, ev.factor, "as_written") == NU_MAX)


def test_batch_result_independent_of_batching():
    model = get_model("sv", T=15)
    theta = prior_draws(model, 6, seed=3)
    full = collapse_batch(model, theta)
    for i in range(6):
        one = collapse_batch(model, theta[i:i + 1])
        assert one.logl[0] == pytest.approx(full.logl[i], abs=1e-8)


def test_warm_start_reaches_same_mode():
    model = get_model("sv", T=15)
    theta = prior_draws(model, 5, seed=4)
    cold = collapse_batch(model, theta)
    nearby = collapse_batch(model, theta + 1e-3)
    warm = collapse_batch(model, theta, nearby.cache)
    np.testing.assert_allclose(warm.logl, cold.logl, atol=1e-8)
    assert np.all(warm.n_iter <= cold.n_iter)
    assert not np.any(warm.flags & Flag.WARM_FALLBACK)


def test_mismatched_cache_falls_back():
    model = get_model("eight_schools")
    theta = prior_draws(model, 3)
    other = collapse_batch(model, prior_draws(model, 2))
    res = collapse_batch(model, theta, other.cache)
    assert np.all(res.flags & Flag.WARM_FALLBACK)
    np.testing.assert_allclose(res.logl, model.exact_marginal(theta), atol=1e-9)


@pytest.mark.parametrize("name,kw", [("sv", {"T": 12}), ("brownian", {"T": 12}),
                                     ("sne", {"N": 3}), ("lgcp", {"grid": 3}),
                                     ("eight_schools", {})])
def test_structured_hessian_matches_dense(name, kw):
    model = get_model(name, **kw)
    theta = prior_draws(model, 3, seed=6)
    z = collapse_batch(model, theta).z_hat
    H = latent_hessian(model, theta, z).to_dense()
    D = latent_hessian(model, theta, z, LatentStructure.dense(model.d_z)).to_dense()
    np.testing.assert_allclose(H, D, rtol=1e-9, atol=1e-9 * np.abs(D).max())


@pytest.mark.parametrize("name,kw", [("lgcp", {"grid": 3}), ("brownian", {"T": 10}),
                                     ("sv", {"T": 10})])
def test_analytic_prior_path_matches_full_autodiff(name, kw):
    model = get_model(name, **kw)
    theta = prior_draws(model, 4, seed=7)
    split = collapse_batch(model, theta)
    model.split_prior = False
    full = collapse_batch(model, theta)
    np.testing.assert_allclose(split.logl, full.logl, rtol=1e-10, atol=1e-9)


def test_latent_hessian_debug_checks_band():
    model = get_model("brownian", T=8)
    H = latent_hessian(model, [0.0], np.zeros(8), debug=True)
    D = _dense_neg_hessian(model, model.params(np.zeros((1, 1))), np.zeros((1, 8)))[0]
    np.testing.assert_allclose(H.to_dense(), D, atol=1e-12)


def test_conditional_map_linear_gaussian():
    res = conditional_map(get_model("linear_gaussian"), [1.0])
    assert res.x[0] == pytest.approx(1.5, abs=1e-10)
    assert res.converged


def test_non_finite_theta_is_flagged_not_raised():
    model = get_model("eight_schools")
    res = collapse_batch(model, np.array([[0.0, 800.0], [0.0, 0.0]]))
    assert res.logl[0] == -np.inf and res.flags[0] & Flag.NONFINITE
    assert np.isfinite(res.logl[1])


@pytest.mark.parametrize("kw", [{"method": "laplace"}, {"nu_estimator": "moments"}, {"nu": -1.0}])
def test_options_validation(kw):
    with pytest.raises(ValueError):
        CollapseOptions(**kw)


def test_as_written_estimator_is_recorded():
    model = get_model("student_hier", N_obj=4)
    theta = prior_draws(model, 3)
    opts = CollapseOptions(method="student", nu_estimator="as_written")
    res = collapse_batch(model, theta, options=opts)
    np.testing.assert_array_equal(res.nu, res.nu_as_written)
    res_t = collapse_batch(model, theta, options=dataclasses.replace(opts, nu_estimator="taylor"))
    np.testing.assert_array_equal(res_t.nu_as_written, res.nu_as_written)
