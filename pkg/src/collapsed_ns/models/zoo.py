"""Benchmark hierarchical models.

Every model generates its synthetic data from ``numpy.random.default_rng(seed)``
with a fixed draw order, so regeneration with the same seed is bit-identical.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special, stats

from .. import autodiff as ad
from ..quadrature import log_integrate
from ..structure import (BlockPrecision, DensePrecision, LatentStructure,
                         TridiagonalPrecision, _dense_cholesky)
from .base import LOG_2PI, HierarchicalModel, ndtri, norm_logpdf

FLAG_JITTER = 64


def _col(x):
    return np.asarray(x, dtype=float)[:, None]


def _uniform(u, lo, hi):
    return lo + (hi - lo) * u


# ---------------------------------------------------------------------------
# Gaussian-conjugate models
# ---------------------------------------------------------------------------


class EightSchools(HierarchicalModel):
    """Eight Schools with ``mu ~ U(-10, 10)`` and ``log tau ~ U(-5, 5)``."""

    name = "eight_schools"
    theta_names = ("mu", "log_tau")
    reference = "analytic"
    Y = np.array([28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0])
    SIGMA = np.array([15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0])

    def _generate(self, rng):
        return {"y": self.Y.copy(), "sigma": self.SIGMA.copy()}, {}

    def _setup(self):
        self.y = np.asarray(self.data["y"], dtype=float)
        self.s2 = np.asarray(self.data["sigma"], dtype=float) ** 2
        self.structure = LatentStructure.blocks([1] * self.y.size)

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        return np.stack([_uniform(u[:, 0], -10, 10), _uniform(u[:, 1], -5, 5)], axis=1)

    def params(self, theta):
        return {"mu": _col(theta[:, 0]), "tau2": _col(np.exp(2 * theta[:, 1]))}

    def _terms(self, p, z):
        return norm_logpdf(z, self.y, self.s2) + norm_logpdf(z, p["mu"], p["tau2"])

    def log_likelihood_p(self, p, z):
        return ad.sum(norm_logpdf(z, self.y, self.s2), axis=-1)

    def log_latent_prior_p(self, p, z):
        return ad.sum(norm_logpdf(z, p["mu"], p["tau2"]), axis=-1)

    def block_log_joint_p(self, p, zb):
        return self._terms(p, zb[..., 0])

    def prior_mean_p(self, p):
        return np.broadcast_to(p["mu"], (p["mu"].shape[0], self.d_z)).copy()

    def prior_precision_p(self, p):
        prec = np.broadcast_to(1.0 / p["tau2"], (p["tau2"].shape[0], self.d_z))
        return BlockPrecision(prec[..., None, None])

    def exact_marginal_batch(self, theta):
        p = self.params(theta)
        return np.sum(norm_logpdf(self.y, p["mu"], p["tau2"] + self.s2), axis=-1)

    def conditional_moments(self, theta):
        """Conjugate posterior mean and variance of each school effect."""
        p = self.params(np.atleast_2d(theta))
        prec = 1.0 / self.s2 + 1.0 / p["tau2"]
        mean = (self.y / self.s2 + p["mu"] / p["tau2"]) / prec
        return mean, 1.0 / prec


class LinearGaussian(HierarchicalModel):
    """One latent ``z ~ N(m, 1)`` observed once as ``y ~ N(z, 1)``; ``m ~ U(-5, 5)``."""

    name = "linear_gaussian"
    theta_names = ("m",)
    reference = "analytic"

    def __init__(self, y=2.0, data=None, seed=42):
        self._y = y
        super().__init__(data=data, seed=seed)

    def _generate(self, rng):
        return {"y": np.array([self._y])}, {}

    def _setup(self):
        self.y = np.asarray(self.data["y"], dtype=float)
        self.structure = LatentStructure.blocks([1])

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        return _uniform(u[:, :1], -5, 5)

    def params(self, theta):
        return {"m": _col(theta[:, 0])}

    def log_likelihood_p(self, p, z):
        return ad.sum(norm_logpdf(z, self.y, 1.0), axis=-1)

    def log_latent_prior_p(self, p, z):
        return ad.sum(norm_logpdf(z, p["m"], 1.0), axis=-1)

    def block_log_joint_p(self, p, zb):
        z = zb[..., 0]
        return norm_logpdf(z, self.y, 1.0) + norm_logpdf(z, p["m"], 1.0)

    def prior_mean_p(self, p):
        return p["m"].copy()

    def prior_precision_p(self, p):
        return BlockPrecision(np.ones((p["m"].shape[0], 1, 1, 1)))

    def exact_marginal_batch(self, theta):
        return np.sum(norm_logpdf(self.y, self.params(theta)["m"], 2.0), axis=-1)


class Radon(HierarchicalModel):
    """Varying-intercept regression with a binary floor covariate.

    Synthetic design: ``n_per`` observations per county with covariate
    ``x ~ Bernoulli(0.5)``; county intercepts and responses are drawn from the
    model at the ``truth`` values.
    """

    name = "radon"
    theta_names = ("mu_alpha", "beta", "log_sigma_alpha", "log_sigma_y")
    reference = "analytic"
    TRUTH = {"mu_alpha": 1.5, "beta": -0.7, "sigma_alpha": 0.5, "sigma_y": 0.8}

    def __init__(self, J=85, n_per=5, data=None, seed=42):
        self.J = J
        self.n_per = n_per
        super().__init__(data=data, seed=seed)

    def _generate(self, rng):
        t = self.TRUTH
        x = (rng.random((self.J, self.n_per)) < 0.5).astype(float)
        alpha = t["mu_alpha"] + t["sigma_alpha"] * rng.standard_normal(self.J)
        y = alpha[:, None] + t["beta"] * x + t["sigma_y"] * rng.standard_normal(x.shape)
        return {"x": x, "y": y}, dict(t, alpha=alpha)

    def _setup(self):
        self.x = np.asarray(self.data["x"], dtype=float)
        self.y = np.asarray(self.data["y"], dtype=float)
        self.structure = LatentStructure.blocks([1] * self.y.shape[0])

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        return np.stack([_uniform(u[:, 0], -5, 5), _uniform(u[:, 1], -3, 1),
                         _uniform(u[:, 2], -5, 2), _uniform(u[:, 3], -5, 2)], axis=1)

    def params(self, theta):
        return {"mu": _col(theta[:, 0]), "beta": theta[:, 1, None, None],
                "sa2": _col(np.exp(2 * theta[:, 2])), "sy2": np.exp(2 * theta[:, 3])[:, None, None]}

    def _lik_terms(self, p, z):
        mean = z[..., None] + p["beta"] * self.x
        return ad.sum(norm_logpdf(self.y, mean, p["sy2"]), axis=-1)

    def log_likelihood_p(self, p, z):
        return ad.sum(self._lik_terms(p, z), axis=-1)

    def log_latent_prior_p(self, p, z):
        return ad.sum(norm_logpdf(z, p["mu"], p["sa2"]), axis=-1)

    def block_log_joint_p(self, p, zb):
        z = zb[..., 0]
        return self._lik_terms(p, z) + norm_logpdf(z, p["mu"], p["sa2"])

    def prior_mean_p(self, p):
        return np.broadcast_to(p["mu"], (p["mu"].shape[0], self.d_z)).copy()

    def prior_precision_p(self, p):
        prec = np.broadcast_to(1.0 / p["sa2"], (p["sa2"].shape[0], self.d_z))
        return BlockPrecision(prec[..., None, None])

    def exact_marginal_batch(self, theta):
        """Per-county marginal ``N(mu + beta x, sy2 I + sa2 11^T)``."""
        p = self.params(theta)
        sa2 = p["sa2"]
        sy2 = p["sy2"][:, :, 0]
        n = self.y.shape[1]
        r = self.y - p["mu"][:, :, None] - p["beta"] * self.x
        s1 = r.sum(axis=-1)
        s2 = (r * r).sum(axis=-1)
        denom = sy2 + n * sa2
        quad = (s2 - sa2 * s1 ** 2 / denom) / sy2
        logdet = (n - 1) * np.log(sy2) + np.log(denom)
        return np.sum(-0.5 * quad - 0.5 * logdet - 0.5 * n * LOG_2PI, axis=-1)


class SupernovaCosmology(HierarchicalModel):
    """Standardisable-candle cosmology with per-object Gaussian latents.

    Each object ``i`` has latents ``z_i`` (stretch/colour-like pairs) with prior
    ``N(0, diag(prior_scale^2))``. Observations are a peak magnitude
    ``m_i ~ N(mu_th(z_obs_i) + M + g^T z_i, sigma_obs^2)`` and direct noisy
    measurements of each latent. ``g`` alternates ``(-alpha, beta)`` per pair,
    scaled by ``1/(k+1)`` for the ``k``-th pair.

    Parameters
    ----------
    cosmology : {"lcdm", "wcdm"}
        ``lcdm`` samples ``(Omega_m, M)``; ``wcdm`` samples ``(Omega_m, w0, M)``.
    """

    name = "sne"
    reference = "analytic"
    H0 = 70.0
    C_KMS = 299792.458
    TRUTH = {"omega_m": 0.3, "w0": -1.0, "M": -19.3}

    def __init__(self, N=64, d_block=2, cosmology="lcdm", alpha=0.14, beta=3.1,
                 sigma_obs=0.15, prior_scale=(1.0, 0.1), meas_err=(0.3, 0.03),
                 data=None, seed=42):
        if d_block < 2 or d_block % 2:
            raise ValueError("d_block must be a positive even integer")
        if cosmology not in ("lcdm", "wcdm"):
            raise ValueError("cosmology must be 'lcdm' or 'wcdm'")
        self.N = N
        self.d_block = d_block
        self.cosmology = cosmology
        self.theta_names = ("omega_m", "M") if cosmology == "lcdm" else ("omega_m", "w0", "M")
        k = np.repeat(np.arange(d_block // 2), 2)
        self.g = np.tile([-alpha, beta], d_block // 2) / (k + 1.0)
        self.prior_var = np.tile(np.asarray(prior_scale, dtype=float) ** 2, d_block // 2)
        self.meas_var = np.tile(np.asarray(meas_err, dtype=float) ** 2, d_block // 2)
        self.sigma_obs2 = sigma_obs ** 2
        self._gl_x, self._gl_w = np.polynomial.legendre.leggauss(64)
        super().__init__(data=data, seed=seed)

    def distance_modulus(self, redshift, omega_m, w0):
        """Flat-universe distance modulus by 64-point Gauss-Legendre quadrature."""
        redshift = np.asarray(redshift, dtype=float)
        om = np.asarray(omega_m, dtype=float)[..., None, None]
        w = np.asarray(w0, dtype=float)[..., None, None]
        zz = 0.5 * redshift[:, None] * (self._gl_x + 1.0)
        a = 1.0 + zz
        E = np.sqrt(om * a ** 3 + (1.0 - om) * a ** (3.0 * (1.0 + w)))
        chi = 0.5 * redshift * np.sum(self._gl_w / E, axis=-1)
        dl = (1.0 + redshift) * (self.C_KMS / self.H0) * chi
        return 5.0 * np.log10(dl) + 25.0

    def _generate(self, rng):
        t = self.TRUTH
        zobs = np.linspace(0.1, 1.0, self.N)
        lat = np.sqrt(self.prior_var) * rng.standard_normal((self.N, self.d_block))
        mu = self.distance_modulus(zobs, t["omega_m"], t["w0"])
        mB = mu + t["M"] + lat @ self.g + math.sqrt(self.sigma_obs2) * rng.standard_normal(self.N)
        meas = lat + np.sqrt(self.meas_var) * rng.standard_normal(lat.shape)
        return {"redshift": zobs, "mB": mB, "latent_obs": meas}, dict(t, latents=lat)

    def _setup(self):
        self.redshift = np.asarray(self.data["redshift"], dtype=float)
        self.mB = np.asarray(self.data["mB"], dtype=float)
        self.lat_obs = np.asarray(self.data["latent_obs"], dtype=float)
        self.structure = LatentStructure.blocks([self.d_block] * self.N)
        # marginal covariance of (mB_i, latent_obs_i) is theta-independent
        A = np.vstack([self.g[None, :], np.eye(self.d_block)])
        S = A @ np.diag(self.prior_var) @ A.T + np.diag(np.r_[self.sigma_obs2, self.meas_var])
        self._S_chol = np.linalg.cholesky(S)
        self._S_half_logdet = float(np.sum(np.log(np.diag(self._S_chol))))

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        cols = [_uniform(u[:, 0], 0.05, 0.95)]
        if self.cosmology == "wcdm":
            cols.append(_uniform(u[:, 1], -2.5, -0.3))
        cols.append(_uniform(u[:, -1], -19.8, -18.8))
        return np.stack(cols, axis=1)

    def _cosmo(self, theta):
        om = theta[:, 0]
        w0 = theta[:, 1] if self.cosmology == "wcdm" else -np.ones_like(om)
        return om, w0, theta[:, -1]

    def params(self, theta):
        om, w0, M = self._cosmo(theta)
        offset = self.distance_modulus(self.redshift, om, w0) + M[:, None]
        return {"offset": offset}

    def _split(self, z):
        shape = z.shape[:-1] + (self.N, self.d_block)
        return z.reshape(shape)

    def block_log_likelihood_p(self, p, zb):
        pred = p["offset"] + ad.dot(zb, self.g)
        return (norm_logpdf(pred, self.mB, self.sigma_obs2)
                + ad.sum(norm_logpdf(zb, self.lat_obs, self.meas_var), axis=-1))

    def _block_prior(self, zb):
        return ad.sum(norm_logpdf(zb, 0.0, self.prior_var), axis=-1)

    def block_log_joint_p(self, p, zb):
        return self.block_log_likelihood_p(p, zb) + self._block_prior(zb)

    def log_likelihood_p(self, p, z):
        return ad.sum(self.block_log_likelihood_p(p, self._split(z)), axis=-1)

    def log_latent_prior_p(self, p, z):
        return ad.sum(self._block_prior(self._split(z)), axis=-1)

    def prior_mean_p(self, p):
        return np.zeros((p["offset"].shape[0], self.d_z))

    def prior_precision_p(self, p):
        B = p["offset"].shape[0]
        blk = np.diag(1.0 / self.prior_var)
        return BlockPrecision(np.broadcast_to(blk, (B, self.N) + blk.shape).copy())

    def exact_marginal_batch(self, theta):
        p = self.params(theta)
        r = np.concatenate([(self.mB - p["offset"])[..., None],
                            np.broadcast_to(self.lat_obs, p["offset"].shape + (self.d_block,))],
                           axis=-1)
        w = np.linalg.solve(self._S_chol, r.reshape(-1, self.d_block + 1).T).T
        quad = np.sum(w * w, axis=-1).reshape(r.shape[:-1])
        per = -0.5 * quad - self._S_half_logdet - 0.5 * (self.d_block + 1) * LOG_2PI
        return np.sum(per, axis=-1)


# ---------------------------------------------------------------------------
# time series
# ---------------------------------------------------------------------------


class BrownianMotion(HierarchicalModel):
    """Random walk ``x_t ~ N(x_{t-1}, sigma^2)`` observed with unit noise."""

    name = "brownian"
    theta_names = ("log_sigma",)
    split_prior = True
    reference = "kalman"
    TRUTH = {"sigma": 0.5}
    LOG_LO, LOG_HI = math.log(0.01), math.log(10.0)

    def __init__(self, T=50, data=None, seed=42):
        self.T = T
        super().__init__(data=data, seed=seed)

    def _generate(self, rng):
        s = self.TRUTH["sigma"]
        x = np.cumsum(s * rng.standard_normal(self.T))
        y = x + rng.standard_normal(self.T)
        return {"y": y}, dict(self.TRUTH, x=x)

    def _setup(self):
        self.y = np.asarray(self.data["y"], dtype=float)
        if self.y.size < 2:
            raise ValueError("T must be at least 2")
        self.structure = LatentStructure.tridiagonal(self.y.size)
        self.likelihood_structure = LatentStructure.blocks([1] * self.y.size)

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        return _uniform(u[:, :1], self.LOG_LO, self.LOG_HI)

    def params(self, theta):
        return {"s2": _col(np.exp(2 * theta[:, 0]))}

    def block_log_likelihood_p(self, p, zb):
        return norm_logpdf(zb[..., 0], self.y, 1.0)

    def log_likelihood_p(self, p, z):
        return ad.sum(norm_logpdf(z, self.y, 1.0), axis=-1)

    def log_latent_prior_p(self, p, z):
        d = z[..., 1:] - z[..., :-1]
        q = z[..., 0] * z[..., 0] + ad.sum(d * d, axis=-1)
        s2 = p["s2"][:, 0]
        return -0.5 * q / s2 - 0.5 * self.T * (np.log(s2) + LOG_2PI)

    def prior_mean_p(self, p):
        return np.zeros((p["s2"].shape[0], self.T))

    def prior_precision_p(self, p):
        B = p["s2"].shape[0]
        diag = np.full((B, self.T), 2.0)
        diag[:, -1] = 1.0
        return TridiagonalPrecision(diag / p["s2"], np.full((B, self.T - 1), -1.0) / p["s2"])

    def exact_marginal_batch(self, theta):
        return kalman_marginal(self, theta[:, 0])


def kalman_marginal(model, log_sigma):
    """Exact log marginal of a unit-noise random walk by Kalman filtering.

    Parameters
    ----------
    model : BrownianMotion
    log_sigma : array_like
        Innovation log standard deviations (any shape).
    """
    log_sigma = np.asarray(log_sigma, dtype=float)
    s2 = np.exp(2 * log_sigma)
    m = np.zeros_like(s2)
    P = s2.copy()  # x_0 ~ N(0, sigma^2)
    ll = np.zeros_like(s2)
    for t, yt in enumerate(model.y):
        if t > 0:
            P = P + s2
        S = P + 1.0
        r = yt - m
        ll += -0.5 * (r * r / S + np.log(S) + LOG_2PI)
        K = P / S
        m = m + K * r
        P = P * (1.0 - K)
    return ll


def _log_one_minus_tanh2(psi):
    a = np.abs(psi)
    return -2.0 * (a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0))


class StochasticVolatility(HierarchicalModel):
    """AR(1) log-volatility ``x`` with returns ``y_t ~ N(0, exp(x_t))``.

    Hyperparameters are ``(atanh beta, mu, log sigma)`` with priors
    ``beta ~ 2 Beta(20, 1.5) - 1``, ``mu ~ Cauchy(0, 5)`` and
    ``sigma ~ HalfCauchy(0, 2)``, applied through the prior transform.
    """

    name = "sv"
    theta_names = ("psi_beta", "mu", "psi_sigma")
    split_prior = True
    TRUTH = {"beta": 0.96, "mu": -1.0, "sigma": 0.3}

    def __init__(self, T=100, data=None, seed=42):
        self.T = T
        super().__init__(data=data, seed=seed)

    def _generate(self, rng):
        t = self.TRUTH
        x = np.empty(self.T)
        x[0] = t["mu"] + t["sigma"] / math.sqrt(1 - t["beta"] ** 2) * rng.standard_normal()
        eps = rng.standard_normal(self.T)
        for i in range(1, self.T):
            x[i] = t["mu"] + t["beta"] * (x[i - 1] - t["mu"]) + t["sigma"] * eps[i]
        y = np.exp(0.5 * x) * rng.standard_normal(self.T)
        return {"y": y}, dict(t, x=x)

    def _setup(self):
        self.y = np.asarray(self.data["y"], dtype=float)
        self.y2 = self.y ** 2
        self.structure = LatentStructure.tridiagonal(self.y.size)
        self.likelihood_structure = LatentStructure.blocks([1] * self.y.size)

    def prior_transform(self, u):
        u = np.clip(np.atleast_2d(u), 1e-15, 1 - 1e-15)
        beta = 2.0 * stats.beta.ppf(u[:, 0], 20.0, 1.5) - 1.0
        psi_beta = np.arctanh(np.clip(beta, -1 + 1e-16, 1 - 1e-16))
        mu = stats.cauchy.ppf(u[:, 1], 0.0, 5.0)
        sigma = 2.0 * np.tan(0.5 * np.pi * u[:, 2])
        return np.stack([psi_beta, mu, np.log(sigma)], axis=1)

    def params(self, theta):
        return {"beta": _col(np.tanh(theta[:, 0])), "mu": _col(theta[:, 1]),
                "s2": _col(np.exp(2 * theta[:, 2])),
                "log1mb2": _col(_log_one_minus_tanh2(theta[:, 0]))}

    def block_log_likelihood_p(self, p, zb):
        z = zb[..., 0]
        return -0.5 * z - 0.5 * self.y2 * ad.exp(-z) - 0.5 * LOG_2PI

    def log_likelihood_p(self, p, z):
        return ad.sum(-0.5 * z - 0.5 * self.y2 * ad.exp(-z), axis=-1) - 0.5 * self.T * LOG_2PI

    def log_latent_prior_p(self, p, z):
        beta, s2 = p["beta"], p["s2"]
        r = z - p["mu"]
        e = r[..., 1:] - beta * r[..., :-1]
        r0 = r[..., 0]
        q = (r0 * r0) * np.exp(p["log1mb2"][:, 0]) + ad.sum(e * e, axis=-1)
        return (-0.5 * q / s2[:, 0] + 0.5 * p["log1mb2"][:, 0]
                - 0.5 * self.T * (np.log(s2[:, 0]) + LOG_2PI))

    def prior_mean_p(self, p):
        return np.broadcast_to(p["mu"], (p["mu"].shape[0], self.T)).copy()

    def prior_precision_p(self, p):
        beta, s2 = p["beta"], p["s2"]
        B = beta.shape[0]
        diag = np.broadcast_to(1.0 + beta ** 2, (B, self.T)).copy()
        diag[:, 0] = 1.0
        diag[:, -1] = 1.0
        off = np.broadcast_to(-beta, (B, self.T - 1))
        return TridiagonalPrecision(diag / s2, off / s2)


# ---------------------------------------------------------------------------
# spatial and discrete
# ---------------------------------------------------------------------------


class LogGaussianCox(HierarchicalModel):
    """Poisson counts on a grid with a Matern-3/2 Gaussian-process log intensity.

    ``log a ~ N(-1, 0.5^2)`` and ``log l ~ N(-1, 1)``; counts are
    ``Poisson(exp(phi + ybar))`` with ``ybar = log(mean count + 1e-9)``.
    """

    name = "lgcp"
    theta_names = ("log_amplitude", "log_lengthscale")
    split_prior = True
    TRUTH = {"log_amplitude": -1.0, "log_lengthscale": -1.0, "rate": 100.0}
    JITTER = 1e-8

    def __init__(self, grid=10, data=None, seed=42):
        self.grid = grid
        c = (np.arange(grid) + 0.5) / grid
        X, Y = np.meshgrid(c, c, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        self.dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        super().__init__(data=data, seed=seed)

    def kernel(self, log_a, log_l):
        r = math.sqrt(3.0) * self.dist / np.exp(np.asarray(log_l, dtype=float))[..., None, None]
        return np.exp(2 * np.asarray(log_a, dtype=float))[..., None, None] * (1.0 + r) * np.exp(-r)

    def _generate(self, rng):
        t = self.TRUTH
        K = self.kernel(t["log_amplitude"], t["log_lengthscale"])
        L = np.linalg.cholesky(K + self.JITTER * np.eye(K.shape[0]))
        phi = L @ rng.standard_normal(K.shape[0])
        counts = rng.poisson(t["rate"] * np.exp(phi)).astype(float)
        return {"counts": counts}, dict(t, phi=phi)

    def _setup(self):
        self.counts = np.asarray(self.data["counts"], dtype=float)
        self.ybar = math.log(self.counts.mean() + 1e-9)
        self.lgc = special.gammaln(self.counts + 1.0)
        n = self.counts.size
        self.structure = LatentStructure.dense(n)
        self.likelihood_structure = LatentStructure.blocks([1] * n)

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        return np.stack([-1.0 + 0.5 * ndtri(u[:, 0]), -1.0 + ndtri(u[:, 1])], axis=1)

    def params(self, theta):
        K = self.kernel(theta[:, 0], theta[:, 1])
        n = K.shape[-1]
        flags = np.zeros(K.shape[0], dtype=int)
        L, ok, _ = _dense_cholesky(K)
        jitter = self.JITTER
        while not ok.all() and jitter < 1.0:
            K[~ok] += jitter * np.eye(n)
            flags[~ok] |= FLAG_JITTER
            L2, ok2, _ = _dense_cholesky(K[~ok])
            L[~ok] = L2
            ok[~ok] = ok2
            jitter *= 10.0
        Linv = np.linalg.inv(L)
        Q = np.swapaxes(Linv, -1, -2) @ Linv
        half_logdet_Q = -np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        return {"Q": Q, "hld": half_logdet_Q, "_flags": flags}

    def block_log_likelihood_p(self, p, zb):
        eta = zb[..., 0] + self.ybar
        return self.counts * eta - ad.exp(eta) - self.lgc

    def log_likelihood_p(self, p, z):
        eta = z + self.ybar
        return ad.sum(self.counts * eta - ad.exp(eta) - self.lgc, axis=-1)

    def log_latent_prior_p(self, p, z):
        q = ad.sum(z * ad.matvec(p["Q"], z), axis=-1)
        return -0.5 * q + p["hld"] - 0.5 * self.d_z * LOG_2PI

    def prior_mean_p(self, p):
        return np.zeros((p["Q"].shape[0], self.d_z))

    def prior_precision_p(self, p):
        return DensePrecision(p["Q"])


class ItemResponse(HierarchicalModel):
    """One-parameter logistic item response model.

    ``P(y_ij = 1) = logistic(mu + a_i - b_j)`` with ``a_i, b_j ~ N(0, 1)`` and
    ``mu ~ N(0.75, 1)``; a random ``fill`` fraction of student-question pairs
    is observed.
    """

    name = "irt"
    theta_names = ("mu_ability",)
    TRUTH = {"mu_ability": 0.75}

    def __init__(self, n_students=40, n_questions=10, fill=0.75, data=None, seed=42):
        self.n_students = n_students
        self.n_questions = n_questions
        self.fill = fill
        super().__init__(data=data, seed=seed)

    def _generate(self, rng):
        Ns, Nq = self.n_students, self.n_questions
        a = rng.standard_normal(Ns)
        b = rng.standard_normal(Nq)
        n_obs = max(1, int(round(self.fill * Ns * Nq)))
        flat = np.sort(rng.choice(Ns * Nq, size=n_obs, replace=False))
        si, qi = flat // Nq, flat % Nq
        eta = self.TRUTH["mu_ability"] + a[si] - b[qi]
        y = (rng.random(n_obs) < special.expit(eta)).astype(float)
        return {"student": si, "question": qi, "y": y}, dict(self.TRUTH, a=a, b=b)

    def _setup(self):
        self.si = np.asarray(self.data["student"], dtype=int)
        self.qi = np.asarray(self.data["question"], dtype=int) + self.n_students
        self.sign = 2.0 * np.asarray(self.data["y"], dtype=float) - 1.0
        self.structure = LatentStructure.dense(self.n_students + self.n_questions)

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        return 0.75 + ndtri(u[:, :1])

    def params(self, theta):
        return {"mu": _col(theta[:, 0])}

    def log_likelihood_p(self, p, z):
        eta = p["mu"] + z[..., self.si] - z[..., self.qi]
        return ad.sum(ad.log(ad.logistic(self.sign * eta)), axis=-1)

    def log_latent_prior_p(self, p, z):
        return -0.5 * ad.sum(z * z, axis=-1) - 0.5 * self.d_z * LOG_2PI

    def prior_mean_p(self, p):
        return np.zeros((p["mu"].shape[0], self.d_z))

    def prior_precision_p(self, p):
        B = p["mu"].shape[0]
        return DensePrecision(np.broadcast_to(np.eye(self.d_z), (B, self.d_z, self.d_z)).copy())


# ---------------------------------------------------------------------------
# non-Gaussian latent conditionals (quadrature references)
# ---------------------------------------------------------------------------


def _sum_by_owner(values, n_theta, n_lat):
    return values.reshape(n_theta, n_lat).sum(axis=1)


class StudentHierarchy(HierarchicalModel):
    """Scalar latents with a Student-t prior observed with unit Gaussian noise.

    ``z_i ~ t_nu(mu, sigma)``, ``y_i ~ N(z_i, 1)`` with ``mu ~ U(-3, 3)`` and
    ``log sigma ~ U(log 0.1, log 5)``.
    """

    name = "student_hier"
    theta_names = ("mu", "log_sigma")
    gaussian_latent_prior = False
    reference = "quadrature"
    TRUTH = {"mu": 0.0, "sigma": 1.0}

    def __init__(self, N_obj=50, nu=5.0, data=None, seed=42):
        self.N_obj = N_obj
        self.nu = float(nu)
        self._norm = (special.gammaln(0.5 * (self.nu + 1)) - special.gammaln(0.5 * self.nu)
                      - 0.5 * math.log(self.nu * math.pi))
        super().__init__(data=data, seed=seed)

    def _generate(self, rng):
        t = self.TRUTH
        z = t["mu"] + t["sigma"] * rng.standard_t(self.nu, self.N_obj)
        y = z + rng.standard_normal(self.N_obj)
        return {"y": y}, dict(t, z=z, nu=self.nu)

    def _setup(self):
        self.y = np.asarray(self.data["y"], dtype=float)
        self.structure = LatentStructure.blocks([1] * self.y.size)

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        return np.stack([_uniform(u[:, 0], -3, 3),
                         _uniform(u[:, 1], math.log(0.1), math.log(5.0))], axis=1)

    def params(self, theta):
        return {"mu": _col(theta[:, 0]), "sigma": _col(np.exp(theta[:, 1])),
                "log_sigma": _col(theta[:, 1])}

    def _prior_terms(self, p, z):
        w = (z - p["mu"]) / p["sigma"]
        return (self._norm - p["log_sigma"]
                - 0.5 * (self.nu + 1) * ad.log(1.0 + (w * w) / self.nu))

    def log_likelihood_p(self, p, z):
        return ad.sum(norm_logpdf(z, self.y, 1.0), axis=-1)

    def log_latent_prior_p(self, p, z):
        return ad.sum(self._prior_terms(p, z), axis=-1)

    def block_log_joint_p(self, p, zb):
        z = zb[..., 0]
        return norm_logpdf(z, self.y, 1.0) + self._prior_terms(p, z)

    def prior_mean_p(self, p):
        return np.broadcast_to(p["mu"], (p["mu"].shape[0], self.d_z)).copy()

    def prior_precision_p(self, p):
        prec = (self.nu + 1.0) / (self.nu * p["sigma"] ** 2)
        prec = np.broadcast_to(prec, (prec.shape[0], self.d_z))
        return BlockPrecision(prec[..., None, None])

    def latent_from_unit(self, theta, u):
        theta2, single = self._batched(theta)
        p = self.params(theta2)
        z = p["mu"] + p["sigma"] * stats.t.ppf(np.atleast_2d(u), self.nu)
        return z[0] if single else z

    def exact_marginal_batch(self, theta):
        return quadrature_marginal(self, theta)


def quadrature_marginal(model, theta, rtol=1e-10):
    """Sum of per-latent log marginals by adaptive quadrature.

    The integration window covers ``y_i +- 15`` (where the unit-noise
    likelihood is non-negligible) and ``mu +- 60 sigma``. On failure the window
    is doubled once before the error propagates.
    """
    theta = np.atleast_2d(theta)
    p = model.params(theta)
    B, N = theta.shape[0], model.d_z
    mu = np.broadcast_to(p["mu"], (B, N)).ravel()
    sg = np.broadcast_to(p["sigma"], (B, N)).ravel()
    y = np.broadcast_to(model.y, (B, N)).ravel()
    lsg = np.log(sg)
    nu = model.nu

    def logf(x, i):
        w = (x - mu[i]) / sg[i]
        return (-0.5 * (x - y[i]) ** 2 - 0.5 * LOG_2PI + model._norm - lsg[i]
                - 0.5 * (nu + 1) * np.log1p(w * w / nu))

    for widen in (1.0, 2.0):
        lo = np.minimum(y - 15 * widen, mu - 60 * widen * sg)
        hi = np.maximum(y + 15 * widen, mu + 60 * widen * sg)
        try:
            val, _ = log_integrate(logf, lo, hi, rtol=rtol, breakpoints=np.stack([mu, y], 1))
            break
        except Exception:
            if widen == 2.0:
                raise
    return _sum_by_owner(val, B, N)


class TanhFunnel(HierarchicalModel):
    """``theta ~ N(0, 9)``, ``z_j ~ N(0, e^theta)``, ``x_j ~ N(tanh z_j, 1)``."""

    name = "tanh_funnel"
    theta_names = ("theta",)
    reference = "quadrature"
    TRUTH = {"theta": 0.0}
    link = staticmethod(ad.tanh)

    def __init__(self, J=10, data=None, seed=42):
        self.J = J
        super().__init__(data=data, seed=seed)

    def _observe(self, z):
        return np.tanh(z)

    def _generate(self, rng):
        z = math.exp(0.5 * self.TRUTH["theta"]) * rng.standard_normal(self.J)
        x = self._observe(z) + rng.standard_normal(self.J)
        return {"x": x}, dict(self.TRUTH, z=z)

    def _setup(self):
        self.x = np.asarray(self.data["x"], dtype=float)
        self.structure = LatentStructure.blocks([1] * self.x.size)

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        return 3.0 * ndtri(u[:, :1])

    def params(self, theta):
        return {"var": _col(np.exp(theta[:, 0]))}

    def _lik_terms(self, z):
        return norm_logpdf(self.link(z), self.x, 1.0)

    def log_likelihood_p(self, p, z):
        return ad.sum(self._lik_terms(z), axis=-1)

    def log_latent_prior_p(self, p, z):
        return ad.sum(norm_logpdf(z, 0.0, p["var"]), axis=-1)

    def block_log_joint_p(self, p, zb):
        z = zb[..., 0]
        return self._lik_terms(z) + norm_logpdf(z, 0.0, p["var"])

    def prior_mean_p(self, p):
        return np.zeros((p["var"].shape[0], self.d_z))

    def prior_precision_p(self, p):
        prec = np.broadcast_to(1.0 / p["var"], (p["var"].shape[0], self.d_z))
        return BlockPrecision(prec[..., None, None])

    def exact_marginal_batch(self, theta):
        return funnel_quadrature(self, theta)


def funnel_quadrature(model, theta, rtol=1e-10):
    """Per-latent quadrature of ``N(x_j; link(z), 1) N(z; 0, e^theta)``."""
    theta = np.atleast_2d(theta)
    B, J = theta.shape[0], model.d_z
    var = np.repeat(np.exp(theta[:, 0]), J)
    sd = np.sqrt(var)
    x = np.tile(model.x, B)
    link = model._observe

    def logf(zv, i):
        return (-0.5 * (x[i] - link(zv)) ** 2 - 0.5 * zv * zv / var[i]
                - 0.5 * np.log(var[i]) - LOG_2PI)

    peak = np.arctanh(np.clip(x, -0.999, 0.999)) if model.name == "tanh_funnel" else x
    bps = np.stack([np.zeros_like(x), peak], 1)
    for widen in (1.0, 2.0):
        half = 40.0 * widen * sd
        try:
            val, _ = log_integrate(logf, -half, half, rtol=rtol, breakpoints=bps)
            break
        except Exception:
            if widen == 2.0:
                raise
    return _sum_by_owner(val, B, J)


class LinearFunnel(TanhFunnel):
    """Funnel with a linear observation ``x_j ~ N(z_j, 1)``; exactly Gaussian."""

    name = "linear_funnel"
    reference = "analytic"
    link = staticmethod(lambda z: z)

    def _observe(self, z):
        return z

    def exact_marginal_batch(self, theta):
        var = np.exp(np.atleast_2d(theta)[:, :1])
        return np.sum(norm_logpdf(self.x, 0.0, 1.0 + var), axis=-1)


MODELS = {
    "eight_schools": EightSchools,
    "radon": Radon,
    "brownian": BrownianMotion,
    "lgcp": LogGaussianCox,
    "sv": StochasticVolatility,
    "irt": ItemResponse,
    "sne": SupernovaCosmology,
    "student_hier": StudentHierarchy,
    "tanh_funnel": TanhFunnel,
    "linear_funnel": LinearFunnel,
    "linear_gaussian": LinearGaussian,
}


def get_model(name, **kwargs):
    """Construct a registered model by name."""
    try:
        cls = MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**kwargs)
