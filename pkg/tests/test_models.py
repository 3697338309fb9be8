import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from collapsed_ns import autodiff as ad
from collapsed_ns.models import MODELS, SyntheticDataset, get_model

rng0 = np.random.default_rng(20240)


def prior_draws(model, n, seed=0):
    rng = np.random.default_rng(seed)
    return model.prior_transform(rng.random((n, model.d_theta)))


SMALL = {
    "eight_schools": {},
    "radon": {"J": 6},
    "brownian": {"T": 12},
    "lgcp": {"grid": 3},
    "sv": {"T": 12},
    "irt": {"n_students": 6, "n_questions": 4},
    "sne": {"N": 4},
    "student_hier": {"N_obj": 5},
    "tanh_funnel": {},
    "linear_funnel": {},
    "linear_gaussian": {},
}


def test_every_registered_model_has_a_small_config():
    assert set(SMALL) == set(MODELS)


@pytest.mark.parametrize("name", sorted(SMALL))
def test_prior_transform_and_shapes(name):
    model = get_model(name, **SMALL[name])
    theta = prior_draws(model, 7)
    assert theta.shape == (7, model.d_theta)
    assert np.all(np.isfinite(theta))
    z = model.latent_from_unit(theta, np.full((7, model.d_z), 0.5))
    assert z.shape == (7, model.d_z)
    lj = model.log_joint(theta, z)
    assert lj.shape == (7,) and np.all(np.isfinite(lj))
    np.testing.assert_allclose(lj, model.log_likelihood(theta, z) + model.log_latent_prior(theta, z))
    assert model.describe()["d_z"] == model.d_z


@pytest.mark.parametrize("name", sorted(SMALL))
def test_dataset_json_round_trip(name):
    model = get_model(name, **SMALL[name])
    text = model.dataset.to_json()
    back = SyntheticDataset.from_json(text)
    rebuilt = type(model)(**SMALL[name], data=back)
    theta = prior_draws(model, 3, seed=1)
    z = model.latent_from_unit(theta, np.full((3, model.d_z), 0.3))
    np.testing.assert_array_equal(rebuilt.log_joint(theta, z), model.log_joint(theta, z))


@pytest.mark.parametrize("name", sorted(SMALL))
def test_same_seed_same_data(name):
    a = get_model(name, **SMALL[name]).dataset.to_json()
    b = get_model(name, **SMALL[name]).dataset.to_json()
    assert a == b


@pytest.mark.parametrize("name", sorted(SMALL))
def test_gaussian_prior_matches_scipy(name):
    model = get_model(name, **SMALL[name])
    if not model.gaussian_latent_prior:
        pytest.skip("non-Gaussian latent prior")
    theta = prior_draws(model, 3, seed=2)
    rng = np.random.default_rng(3)
    for i in range(3):
        mean = model.prior_mean(theta[i])
        Q = model.prior_precision(theta[i]).to_dense()
        z = mean + rng.normal(size=model.d_z) * 0.3
        ref = stats.multivariate_normal(mean, np.linalg.inv(Q)).logpdf(z)
        assert model.log_latent_prior(theta[i], z) == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_unknown_model():
    with pytest.raises(KeyError):
        get_model("nope")


# exact references against independent marginal formulas -------------------


def test_eight_schools_exact_marginal():
    m = get_model("eight_schools")
    theta = prior_draws(m, 10)
    for th in theta:
        ref = stats.norm.logpdf(m.y, th[0], np.sqrt(np.exp(2 * th[1]) + m.s2)).sum()
        assert m.exact_marginal(th) == pytest.approx(ref, rel=1e-13)


def test_radon_exact_marginal():
    m = get_model("radon", J=6)
    for th in prior_draws(m, 5):
        sa2, sy2 = np.exp(2 * th[2]), np.exp(2 * th[3])
        ref = 0.0
        for j in range(m.J):
            n = m.y.shape[1]
            cov = sy2 * np.eye(n) + sa2 * np.ones((n, n))
            ref += stats.multivariate_normal(th[0] + th[1] * m.x[j], cov).logpdf(m.y[j])
        assert m.exact_marginal(th) == pytest.approx(ref, rel=1e-10)


def test_brownian_kalman_against_dense_gaussian():
    m = get_model("brownian", T=15)
    t = np.arange(15)
    for ls in (-2.0, -0.5, 1.0):
        s2 = np.exp(2 * ls)
        cov = s2 * (np.minimum.outer(t, t) + 1) + np.eye(15)
        ref = stats.multivariate_normal(np.zeros(15), cov).logpdf(m.y)
        assert m.exact_marginal([ls]) == pytest.approx(ref, rel=1e-11)


@pytest.mark.parametrize("cosmology", ["lcdm", "wcdm"])
def test_sne_exact_against_dense_gaussian(cosmology):
    m = get_model("sne", N=3, cosmology=cosmology)
    d = m.d_block
    for th in prior_draws(m, 3):
        offset = m.params(th[None])["offset"][0]
        A = np.vstack([m.g[None], np.eye(d)])
        S = A @ np.diag(m.prior_var) @ A.T + np.diag(np.r_[m.sigma_obs2, m.meas_var])
        ref = sum(stats.multivariate_normal(np.r_[offset[i], np.zeros(d)], S)
                  .logpdf(np.r_[m.mB[i], m.lat_obs[i]]) for i in range(m.N))
        assert m.exact_marginal(th) == pytest.approx(ref, rel=1e-11)


def test_distance_modulus_against_scipy_quad():
    m = get_model("sne", N=3)
    for z, om, w in ((0.5, 0.3, -1.0), (1.2, 0.2, -0.7)):
        chi = integrate.quad(lambda x: 1 / np.sqrt(om * (1 + x) ** 3
                                                   + (1 - om) * (1 + x) ** (3 * (1 + w))), 0, z,
                             epsabs=0, epsrel=1e-13)[0]
        dl = (1 + z) * m.C_KMS / m.H0 * chi
        ref = 5 * np.log10(dl) + 25
        got = m.distance_modulus(np.array([z]), om, w)
        assert float(np.ravel(got)[0]) == pytest.approx(ref, rel=1e-12)


def test_student_hierarchy_quadrature_against_scipy():
    m = get_model("student_hier", N_obj=4)
    for th in prior_draws(m, 4, seed=5):
        mu, sg = th[0], np.exp(th[1])
        ref = 0.0
        for y in m.y:
            f = lambda z: stats.norm.pdf(y, z, 1) * stats.t.pdf(z, m.nu, mu, sg)
            ref += np.log(integrate.quad(f, -np.inf, np.inf, points=None, epsabs=0,
                                         epsrel=1e-12, limit=200)[0])
        assert m.exact_marginal(th) == pytest.approx(ref, abs=1e-8)


def test_tanh_funnel_quadrature_against_scipy():
    m = get_model("tanh_funnel")
    for th in (-2.0, 0.0, 2.5):
        sd = math.exp(th / 2)
        ref = 0.0
        for x in m.x:
            f = lambda z: stats.norm.pdf(x, np.tanh(z), 1) * stats.norm.pdf(z, 0, sd)
            ref += np.log(integrate.quad(f, -40 * sd, 40 * sd, epsabs=0, epsrel=1e-12,
                                         limit=400)[0])
        assert m.exact_marginal([th]) == pytest.approx(ref, abs=1e-8)


@settings(max_examples=20, deadline=None)
@given(th=st.floats(-6, 6))
def test_linear_funnel_exact(th):
    m = get_model("linear_funnel")
    ref = stats.norm.logpdf(m.x, 0, np.sqrt(1 + np.exp(th))).sum()
    assert m.exact_marginal([th]) == pytest.approx(ref, rel=1e-12)


def test_linear_gaussian_closed_form():
    m = get_model("linear_gaussian")
    assert m.exact_marginal([0.0]) == pytest.approx(stats.norm.logpdf(2.0, 0, math.sqrt(2)), rel=1e-14)


def test_sv_prior_transform_marginals():
    m = get_model("sv", T=5)
    u = np.array([[0.3, 0.6, 0.8]])
    th = m.prior_transform(u)[0]
    assert (np.tanh(th[0]) + 1) / 2 == pytest.approx(stats.beta(20, 1.5).ppf(0.3), rel=1e-10)
    assert th[1] == pytest.approx(stats.cauchy(0, 5).ppf(0.6), rel=1e-12)
    assert np.exp(th[2]) == pytest.approx(stats.halfcauchy(0, 2).ppf(0.8), rel=1e-12)


def test_student_latent_from_unit_quantiles():
    m = get_model("student_hier", N_obj=3)
    z = m.latent_from_unit([0.5, math.log(2.0)], np.array([[0.1, 0.5, 0.9]]))
    np.testing.assert_allclose(z, 0.5 + 2.0 * stats.t.ppf([0.1, 0.5, 0.9], 5.0), rtol=1e-12)


def test_lgcp_jitter_flag_on_near_singular_kernel():
    m = get_model("lgcp", grid=4)
    p = m.params(np.array([[0.0, 12.0], [-1.0, -1.0]]))
    assert p["_flags"][0] & 64
    assert p["_flags"][1] == 0


@pytest.mark.parametrize("name", ["sv", "brownian", "lgcp"])
def test_split_prior_models_have_block_likelihood(name):
    model = get_model(name, **SMALL[name])
    theta = prior_draws(model, 2)
    z = model.latent_from_unit(theta, np.full((2, model.d_z), 0.4))
    p = model.params(theta)
    blocks = model.block_log_likelihood_p(p, z[..., None])
    np.testing.assert_allclose(blocks.sum(-1), model.log_likelihood(theta, z), rtol=1e-12)


def test_autodiff_through_model_matches_finite_difference():
    m = get_model("sv", T=8)
    th = prior_draws(m, 1, seed=9)
    z = m.latent_from_unit(th, np.full((1, 8), 0.45))[0]
    g = ad.gradient(lambda zz: m.log_joint_p(m.params(th), zz), z)
    h = 1e-6
    fd = [(m.log_joint(th[0], z + h * e) - m.log_joint(th[0], z - h * e)) / (2 * h)
          for e in np.eye(8)]
    np.testing.assert_allclose(g, fd, rtol=1e-6)
