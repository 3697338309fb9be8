"""Importance-sampling checks of the local approximation and posterior recovery.

For a fixed ``theta`` the collapse defines a normalised proposal over latents,

    z = z_hat + L^{-T} w,   w_j ~ q_j,

with ``H = L L^T`` and ``q_j`` standard normal (Gaussian collapse) or the
unit-curvature Student-t (Student collapse). Importance weights relative to
the collapsed likelihood are

    log w = [log p*(z) - log p*(z_hat)] - sum_j [log q_j(w_j) - log q_j(0)],

so ``E[w] = 1`` exactly when the approximation is exact. The normalised
effective sample size ``(sum w)^2 / (K sum w^2)`` then measures how well the
approximation matches, and ``logL + log mean(w)`` is an unbiased-in-``Z``
corrected likelihood.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .collapse import CollapseOptions, collapse_batch, student_log_q, student_log_q0
from .errors import DegenerateWeights

__all__ = [
    "ImportanceResult",
    "EssProfile",
    "JointSamples",
    "DiagnosticReport",
    "importance_log_weights",
    "is_ess",
    "is_corrected_loglik",
    "ess_profile",
    "posterior_ess",
    "recover_posterior",
    "ess_fraction",
]

_CHUNK = 4_000_000  # latent draws times dimension held in memory at once


def ess_fraction(log_w):
    """Normalised ESS ``(sum w)^2 / (K sum w^2)`` along the first axis.

    Examples
    --------
    >>> float(ess_fraction(np.zeros(10)))
    1.0
    >>> round(float(ess_fraction(np.log([1.0, 0, 0, 0]))), 6)
    0.25
    """
    log_w = np.asarray(log_w, dtype=float)
    K = log_w.shape[0]
    with np.errstate(invalid="ignore"):
        return np.exp(2 * logsumexp(log_w, axis=0) - logsumexp(2 * log_w, axis=0) - math.log(K))


@dataclass
class ImportanceResult:
    """Importance-sampling check at one ``theta``.

    Attributes
    ----------
    theta : ndarray
    proposal : str
    logl : float
        Collapsed log likelihood the weights are relative to.
    log_weights : ndarray, shape (K,)
    ess : float
        Effective sample size ``(sum w)^2 / sum w^2``.
    ess_fraction : float
        ``ess / K``.
    log_mean_weight : float
        ``log mean(w)``, the evidence correction.
    flags : int
    """

    theta: np.ndarray
    proposal: str
    logl: float
    log_weights: np.ndarray
    ess: float
    ess_fraction: float
    log_mean_weight: float
    flags: int = 0

    @property
    def corrected_logl(self):
        return self.logl + self.log_mean_weight

    def to_dict(self):
        return {"theta": self.theta.tolist(), "proposal": self.proposal, "logl": self.logl,
                "ess": self.ess, "ess_fraction": self.ess_fraction,
                "log_mean_weight": self.log_mean_weight,
                "corrected_logl": self.corrected_logl, "flags": self.flags}


def _options(proposal, options):
    base = options or CollapseOptions()
    if proposal not in ("gaussian", "student"):
        raise ValueError(f"unknown proposal {proposal!r}")
    return dataclasses.replace(base, method=proposal)


def _draw(rng, K, nu_row, n):
    if nu_row is None:
        return rng.standard_normal((K, n))
    x = rng.standard_t(nu_row, size=(K, n))
    return x * np.sqrt((nu_row + 1.0) / nu_row)


def importance_log_weights(model, theta, K=5000, proposal="gaussian", seed=0, options=None,
                           collapsed=None):
    """Log importance weights ``(K, B)`` for a batch of ``theta``.

    Row ``i`` uses the stream ``SeedSequence([seed, i])`` so results do not
    depend on how rows are batched together.

    Returns
    -------
    log_w : ndarray, shape (K, B)
    collapsed : CollapseBatch
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    B = theta.shape[0]
    opts = _options(proposal, options)
    res = collapsed if collapsed is not None else collapse_batch(model, theta, None, opts)
    n = res.z_hat.shape[1]
    log_w = np.full((K, B), -np.inf)
    good = np.flatnonzero(np.isfinite(res.logl))
    step = max(1, _CHUNK // max(K * n, 1))
    for lo in range(0, good.size, step):
        rows = good[lo:lo + step]
        b = rows.size
        w = np.empty((K, b, n))
        for j, i in enumerate(rows):
            rng = np.random.default_rng(np.random.SeedSequence([seed, int(i)]))
            w[:, j] = _draw(rng, K, None if proposal == "gaussian" else res.nu[i], n)
        factor = res.factor.take(rows)
        z = res.z_hat[rows] + factor.solve_lt(w)
        with np.errstate(all="ignore"):
            lj = np.asarray(model.log_joint(theta[rows], z), dtype=float)
        if proposal == "gaussian":
            lq = -0.5 * np.sum(w * w, axis=-1)
        else:
            nu = res.nu[rows]
            lq = np.sum(student_log_q(w, nu) - student_log_q0(nu), axis=-1)
        lw = lj - res.log_joint[rows] - lq
        log_w[:, rows] = np.where(np.isnan(lw), -np.inf, lw)
    return log_w, res


def _result(theta, proposal, logl, lw, flags):
    if not np.any(np.isfinite(lw)):
        raise DegenerateWeights(f"all importance weights vanish at theta={np.asarray(theta).tolist()}")
    K = lw.size
    lmean = float(logsumexp(lw) - math.log(K))
    frac = float(ess_fraction(lw))
    return ImportanceResult(theta=np.asarray(theta, dtype=float), proposal=proposal,
                            logl=float(logl), log_weights=lw, ess=frac * K, ess_fraction=frac,
                            log_mean_weight=lmean, flags=int(flags))


def is_ess(model, theta, K=5000, proposal="gaussian", seed=0, options=None):
    """Importance-sampling effective sample size at one ``theta``.

    Raises
    ------
    DegenerateWeights
        If the collapse failed or every weight is zero.

    Examples
    --------
    >>> from collapsed_ns.models import get_model
    >>> r = is_ess(get_model("linear_gaussian"), [0.3], K=1000)
    >>> round(r.ess_fraction, 12), round(r.log_mean_weight, 12)
    (1.0, 0.0)
    """
    lw, res = importance_log_weights(model, theta, K, proposal, seed, options)
    return _result(np.ravel(theta), proposal, res.logl[0], lw[:, 0], res.flags[0])


def is_corrected_loglik(model, theta, K=5000, proposal="gaussian", seed=0, options=None):
    """Importance-corrected collapsed log likelihood ``logL + log mean(w)``."""
    return is_ess(model, theta, K, proposal, seed, options).corrected_logl


@dataclass
class EssProfile:
    """ESS over a set of ``theta`` values with summary quantiles."""

    proposal: str
    K: int
    records: list
    quantiles: dict = field(default_factory=dict)

    @property
    def fractions(self):
        return np.array([r["ess_fraction"] for r in self.records])

    @property
    def median(self):
        return self.quantiles.get("p50", float("nan"))

    def to_dict(self):
        return {"proposal": self.proposal, "K": self.K, "quantiles": self.quantiles,
                "records": self.records}


def ess_profile(model, thetas, K=5000, proposal="gaussian", seed=0, options=None):
    """ESS/K, log-weight correction and collapsed logL at each ``theta``.

    Points whose collapse or weights fail are recorded with ``ess_fraction``
    zero and ``degenerate`` set.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    lw, res = importance_log_weights(model, thetas, K, proposal, seed, options)
    records = []
    for i, th in enumerate(thetas):
        col = lw[:, i]
        rec = {"index": i, "theta": th.tolist(), "logl": float(res.logl[i]),
               "flags": int(res.flags[i])}
        if np.any(np.isfinite(col)):
            lmean = float(logsumexp(col) - math.log(K))
            rec.update(ess_fraction=float(ess_fraction(col)), log_mean_weight=lmean,
                       corrected_logl=float(res.logl[i]) + lmean, degenerate=False)
        else:
            rec.update(ess_fraction=0.0, log_mean_weight=float("nan"),
                       corrected_logl=float("nan"), degenerate=True)
        records.append(rec)
    fr = np.array([r["ess_fraction"] for r in records])
    q = {f"p{p}": float(np.percentile(fr, p)) for p in (10, 50, 90)} if fr.size else {}
    return EssProfile(proposal=proposal, K=K, records=records, quantiles=q)


def posterior_ess(result, model, M=200, K=5000, proposal="gaussian", seed=0, options=None):
    """ESS profile over ``M`` equal-weight posterior draws of a nested-sampling run."""
    thetas = result.posterior_samples(M, seed=seed)
    return ess_profile(model, thetas, K, proposal, seed, options)


@dataclass
class JointSamples:
    """Joint posterior draws ``(theta, z)``."""

    theta: np.ndarray
    z: np.ndarray
    flags: np.ndarray

    def __len__(self):
        return self.theta.shape[0]


def recover_posterior(source, model, S=2000, seed=0, options=None, batch=500):
    """Joint posterior draws from a collapsed run.

    Each draw takes ``theta`` from the hyperparameter posterior, re-solves the
    collapse at that ``theta`` and draws ``z ~ N(z_hat, H^{-1})`` through the
    structured factor, ``z = z_hat + L^{-T} eps``.

    Parameters
    ----------
    source : NsResult or ndarray
        A nested-sampling result (resampled to ``S`` draws) or an array of
        ``theta`` draws used as-is.
    """
    if hasattr(source, "posterior_samples"):
        thetas = source.posterior_samples(S, seed=seed)
    else:
        thetas = np.atleast_2d(np.asarray(source, dtype=float))
    opts = dataclasses.replace(options or CollapseOptions(), method="gaussian")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    zs, flags = [], []
    for lo in range(0, thetas.shape[0], batch):
        th = thetas[lo:lo + batch]
        res = collapse_batch(model, th, None, opts)
        eps = rng.standard_normal(res.z_hat.shape)
        z = res.z_hat + res.factor.solve_lt(eps)
        bad = ~np.isfinite(res.logl)
        z[bad] = np.nan
        zs.append(z)
        flags.append(res.flags)
    return JointSamples(theta=thetas, z=np.concatenate(zs), flags=np.concatenate(flags))


@dataclass
class DiagnosticReport:
    """Collected diagnostics for one model and run."""

    model: str
    profiles: dict = field(default_factory=dict)
    corrections: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"model": self.model,
                "profiles": {k: v.to_dict() for k, v in self.profiles.items()},
                "corrections": self.corrections, **self.extra}
