import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from collapsed_ns.errors import DegeneratePrior, StuckSampler
from collapsed_ns.models import get_model
from collapsed_ns.nested import (
    FunctionLikelihood,
    NsSettings,
    bootstrap_sigma,
    finalize,
    gaussian_2d,
    make_likelihood,
    ns_init,
    ns_step,
    run,
    shrink_rates,
    systematic_resample,
    terminate,
)


def flat(d=1, value=0.0):
    return FunctionLikelihood(lambda th: np.full(th.shape[0], value), d)


@pytest.mark.parametrize("volume", ["batch", "sequential"])
def test_two_live_points_shrink_by_half(volume):
    st_ = ns_init(flat(), NsSettings(m=2, k=1, s=1, volume=volume), seed=0)
    for i in range(1, 6):
        ns_step(st_)
        assert st_.log_x == pytest.approx(-i / 2, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 50), extra=st.integers(0, 200))
def test_batch_rates_are_order_statistics(k, extra):
    m = 2 * k + extra
    r = shrink_rates(k, m, "batch")
    assert r.sum() == pytest.approx(sum(1.0 / (m - j) for j in range(k)), rel=1e-14)
    assert np.all(np.diff(r) > 0)
    assert shrink_rates(k, m, "sequential").sum() == pytest.approx(k / m)


def test_unknown_volume_rule():
    with pytest.raises(ValueError):
        shrink_rates(2, 10, "bogus")


@pytest.mark.parametrize("volume", ["batch", "sequential"])
@pytest.mark.parametrize("m,k", [(20, 1), (40, 10), (50, 25)])
def test_weights_and_remainder_sum_to_one(m, k, volume):
    like = gaussian_2d()
    r = run(like, None, m=m, k=k, s=2, seed=3, n_boot=5, volume=volume)
    assert np.exp(r.trace.logw).sum() == pytest.approx(1.0, abs=1e-12)
    assert len(r.trace) == r.n_dead + m
    assert np.all(np.diff(r.trace.logl[:r.n_dead]) >= 0)


@pytest.mark.parametrize("c", [-3.0, 0.0, 12.5])
def test_constant_likelihood_is_exact(c):
    r = run(flat(2, c), None, m=30, k=5, s=2, seed=1)
    assert r.log_z == pytest.approx(c, abs=1e-12)
    assert r.sigma == 0.0
    assert r.dkl == pytest.approx(0.0, abs=1e-12)


def test_degenerate_prior_raises():
    with pytest.raises(DegeneratePrior):
        run(flat(1, -np.inf), None, m=10, k=2)


class Vanishing:
    """Finite only for the first evaluation batch, then zero everywhere."""

    d_theta = 1

    def __init__(self):
        self.calls = 0

    def prior_transform(self, u):
        return np.atleast_2d(u)

    def evaluate(self, theta, cache=None):
        self.calls += 1
        value = -theta[:, 0] if self.calls == 1 else np.full(theta.shape[0], -np.inf)
        return value, None, np.zeros(theta.shape[0], dtype=int)


def test_stuck_sampler_reports_chain():
    with pytest.raises(StuckSampler) as exc:
        run(Vanishing(), None, m=10, k=2, s=1)
    assert "chain" in exc.value.diagnostics


def test_same_seed_same_run():
    like = gaussian_2d()
    a = run(like, None, m=40, k=8, s=2, seed=11, n_boot=20)
    b = run(like, None, m=40, k=8, s=2, seed=11, n_boot=20)
    assert a.log_z == b.log_z and a.sigma == b.sigma
    np.testing.assert_array_equal(a.trace.theta, b.trace.theta)
    c = run(like, None, m=40, k=8, s=2, seed=12, n_boot=20)
    assert c.log_z != a.log_z


def test_threads_do_not_change_results():
    model = get_model("eight_schools")
    a = run(model, "gaussian", m=40, k=10, s=2, seed=5, n_boot=10)
    b = run(model, "gaussian", m=40, k=10, s=2, seed=5, n_boot=10, threads=3)
    assert a.log_z == pytest.approx(b.log_z, abs=1e-9)


def test_gaussian_benchmark_small_run_is_calibrated():
    like = gaussian_2d(sigma=0.5)
    zs = []
    for seed in range(4):
        r = run(like, None, m=200, k=20, s=3, seed=seed)
        zs.append((r.log_z - like.log_evidence) / r.sigma)
        # posterior of a flat-prior Gaussian likelihood is nearly N(0, sigma^2 I)
        assert r.dkl == pytest.approx(-1.0 - like.log_evidence, abs=0.25)
    assert np.max(np.abs(zs)) < 4.0


def test_gaussian_2d_evidence_oracle():
    like = gaussian_2d(sigma=0.7, half_width=2.0)
    mass = stats.norm.cdf(2.0, 0, 0.7) - stats.norm.cdf(-2.0, 0, 0.7)
    ref = math.log((2 * math.pi * 0.49) * mass ** 2 / 16)
    assert like.log_evidence == pytest.approx(ref, rel=1e-14)


def test_terminate_uses_mean_live_likelihood():
    st_ = ns_init(flat(1, 0.0), NsSettings(m=10, k=2, s=1), seed=0)
    st_.log_z = 0.0
    st_.log_x = -2.5
    assert not terminate(st_, threshold=-3.0, live_mean=False)
    st_.log_x = -0.8
    assert terminate(st_, threshold=-3.0) is False
    st_.log_x = -3.5
    assert terminate(st_, threshold=-3.0)


def test_bootstrap_sigma_shrinks_with_more_live_points():
    like = gaussian_2d()
    small = run(like, None, m=40, k=4, s=2, seed=0)
    large = run(like, None, m=400, k=40, s=2, seed=0)
    assert large.sigma < small.sigma
    # the spread scales like sqrt(D_KL / m)
    assert large.sigma == pytest.approx(math.sqrt(large.dkl / 400), rel=0.5)
    again = bootstrap_sigma(large.trace, 400, 200, seed=0)
    assert again == large.sigma


def test_systematic_resample_proportions():
    rng = np.random.default_rng(0)
    w = np.array([0.1, 0.0, 0.6, 0.3])
    idx = systematic_resample(w, 1000, rng)
    counts = np.bincount(idx, minlength=4)
    np.testing.assert_allclose(counts / 1000, w, atol=1e-3)


def test_posterior_samples_and_summary():
    r = run(get_model("linear_gaussian"), "gaussian", m=100, k=10, s=2, seed=0, n_boot=20)
    draws = r.posterior_samples(500, seed=1)
    assert draws.shape == (500, 1)
    # posterior over m with flat prior on [-5, 5] and y = 2 is about N(2, 2)
    assert draws.mean() == pytest.approx(2.0, abs=0.4)
    s = r.summary()
    assert s["logZ"] == r.log_z and s["settings"]["m"] == 100
    assert r.flagged_fraction == 0.0


def test_modes_agree_on_linear_gaussian():
    model = get_model("linear_gaussian")
    out = {}
    for mode in ("gaussian", "student", "exact-reference", "joint-full-ns"):
        out[mode] = run(model, mode, m=150, k=15, s=3, seed=2, n_boot=50)
    ref = math.log(stats.norm.cdf(2.0, -5, math.sqrt(2)) - stats.norm.cdf(2.0, 5, math.sqrt(2)))
    ref -= math.log(10.0)
    for r in out.values():
        assert abs(r.log_z - ref) < 4 * r.sigma + 0.05
    assert out["gaussian"].log_z == pytest.approx(out["exact-reference"].log_z, abs=1e-8)


def test_make_likelihood_rejects_unknown_mode():
    with pytest.raises(ValueError):
        make_likelihood(get_model("linear_gaussian"), "laplace")
    with pytest.raises(ValueError):
        make_likelihood(get_model("sv", T=5), "exact-reference")


@pytest.mark.parametrize("kw", [{"m": 10, "k": 6}, {"k": 0}, {"s": 0}])
def test_settings_validation(kw):
    with pytest.raises(ValueError):
        NsSettings(**kw)


def test_finalize_before_any_step():
    st_ = ns_init(flat(1, 0.0), NsSettings(m=10, k=2, s=1), seed=0)
    trace, log_z = finalize(st_)
    assert len(trace) == 10 and trace.n_dead == 0
    assert log_z == pytest.approx(0.0, abs=1e-12)
