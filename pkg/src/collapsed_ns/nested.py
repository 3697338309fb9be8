"""Batch-deletion nested sampling over hyperparameters.

Each iteration removes the ``k`` lowest-likelihood live points, assigns them
sequential prior volumes ``log X_i = -i / m``, and refills the live set with
``k`` constrained slice-sampling chains started from randomly chosen
survivors. Likelihoods are evaluated in batches through a small protocol::

    logl, cache, flags = likelihood.evaluate(theta, cache)

where ``theta`` has shape ``(B, d_theta)`` and ``cache`` is either ``None`` or
a tuple of arrays with leading axis ``B`` (warm-start payload). Collapsed
likelihoods use the cache to warm-start the latent optimisation.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .collapse import PROBLEM_FLAGS, CollapseOptions, Flag, collapse_batch
from .errors import DegeneratePrior, SliceCollapse, StuckSampler
from .structure import TridiagonalFactor

__all__ = [
    "CollapsedLikelihood",
    "ExactLikelihood",
    "JointLikelihood",
    "FunctionLikelihood",
    "make_likelihood",
    "gaussian_2d",
    "NsSettings",
    "NsState",
    "DeadTrace",
    "NsResult",
    "ns_init",
    "ns_step",
    "slice_sample_constrained",
    "terminate",
    "finalize",
    "bootstrap_sigma",
    "run",
]

_TINY = 1e-12


# ---------------------------------------------------------------------------
# likelihood adapters
# ---------------------------------------------------------------------------


def _cache_take(cache, rows):
    return None if cache is None else tuple(a[rows] for a in cache)


def _cache_put(cache, rows, sub):
    if cache is None or sub is None:
        return cache
    for a, s in zip(cache, sub):
        a[rows] = s
    return cache


def _cache_alloc(sub, n):
    if sub is None:
        return None
    return tuple(np.zeros((n,) + a.shape[1:], dtype=a.dtype) for a in sub)


def _factor_arrays(factor):
    if isinstance(factor, TridiagonalFactor):
        return (factor.d, factor.e)
    return (factor.L,)


def _factor_from_arrays(kind, arrays):
    return kind(*arrays)


class CollapsedLikelihood:
    """Latent-collapsed likelihood ``L(theta)`` of a hierarchical model.

    Parameters
    ----------
    model : HierarchicalModel
    method : {"gaussian", "student"}
    options : CollapseOptions, optional
    """

    def __init__(self, model, method="gaussian", options=None):
        self.model = model
        self.options = dataclasses.replace(options or CollapseOptions(), method=method)
        self.d_theta = model.d_theta
        self._kind = None

    def prior_transform(self, u):
        return self.model.prior_transform(u)

    def evaluate(self, theta, cache=None):
        c = None
        if cache is not None:
            c = (cache[0], _factor_from_arrays(self._kind, cache[1:]))
        res = collapse_batch(self.model, theta, c, self.options)
        self._kind = type(res.factor)
        return res.logl, (res.z_hat,) + _factor_arrays(res.factor), res.flags


class ExactLikelihood:
    """Collapse-free reference likelihood from the model's exact marginal."""

    def __init__(self, model):
        if not model.has_exact:
            raise ValueError(f"model {model.name!r} has no exact reference")
        self.model = model
        self.d_theta = model.d_theta

    def prior_transform(self, u):
        return self.model.prior_transform(u)

    def evaluate(self, theta, cache=None):
        with np.errstate(all="ignore"):
            logl = np.asarray(self.model.exact_marginal_batch(theta), dtype=float)
        flags = np.where(np.isfinite(logl), 0, int(Flag.NONFINITE))
        return logl, None, flags


class JointLikelihood:
    """Full joint sampling over ``(theta, z)`` with the data likelihood only.

    The unit cube is split into ``d_theta`` hyperparameter coordinates and
    ``d_z`` latent coordinates mapped through ``model.latent_from_unit``.
    """

    def __init__(self, model):
        self.model = model
        self.d_theta = model.d_theta + model.d_z

    def prior_transform(self, u):
        u = np.atleast_2d(u)
        dt = self.model.d_theta
        th = self.model.prior_transform(u[:, :dt])
        z = self.model.latent_from_unit(th, u[:, dt:])
        return np.concatenate([th, z], axis=1)

    def evaluate(self, theta, cache=None):
        dt = self.model.d_theta
        th, z = theta[:, :dt], theta[:, dt:]
        with np.errstate(all="ignore"):
            logl = np.asarray(self.model.log_likelihood_p(self.model.params(th), z), dtype=float)
        flags = np.where(np.isfinite(logl), 0, int(Flag.NONFINITE))
        return logl, None, flags


class FunctionLikelihood:
    """Wrap a vectorised ``logl(theta (B, d)) -> (B,)`` and a prior transform."""

    def __init__(self, logl, d_theta, prior_transform=None, log_evidence=None):
        self.fn = logl
        self.d_theta = d_theta
        self._pt = prior_transform
        self.log_evidence = log_evidence

    def prior_transform(self, u):
        return np.atleast_2d(u) if self._pt is None else self._pt(u)

    def evaluate(self, theta, cache=None):
        logl = np.asarray(self.fn(theta), dtype=float)
        return logl, None, np.zeros(logl.shape, dtype=int)


def gaussian_2d(sigma=1.0, half_width=5.0):
    """Spherical 2-D Gaussian likelihood under a flat prior on a square.

    ``L(theta) = exp(-|theta|^2 / (2 sigma^2))`` with ``theta ~ U[-a, a]^2``,
    so ``Z = 2 pi sigma^2 erf(a / (sigma sqrt 2))^2 / (2a)^2``.
    """
    a = float(half_width)
    logz = (math.log(2 * math.pi * sigma ** 2) + 2 * math.log(math.erf(a / (sigma * math.sqrt(2))))
            - 2 * math.log(2 * a))

    def logl(theta):
        return -0.5 * np.sum(theta ** 2, axis=-1) / sigma ** 2

    return FunctionLikelihood(logl, 2, lambda u: -a + 2 * a * np.atleast_2d(u), log_evidence=logz)


def make_likelihood(model, mode, options=None):
    """Likelihood adapter for a run mode.

    ``mode`` is one of ``gaussian``, ``student``, ``exact-reference`` or
    ``joint-full-ns``.
    """
    if mode in ("gaussian", "student"):
        return CollapsedLikelihood(model, mode, options)
    if mode in ("exact-reference", "exact"):
        return ExactLikelihood(model)
    if mode in ("joint-full-ns", "joint"):
        return JointLikelihood(model)
    raise ValueError(f"unknown mode {mode!r}")


def _evaluate(like, theta, cache, threads=1):
    """Evaluate in ``threads`` row chunks; results merged in row order."""
    B = theta.shape[0]
    if threads <= 1 or B < 2 * threads:
        out = like.evaluate(theta, cache)
    else:
        chunks = np.array_split(np.arange(B), threads)
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda r: like.evaluate(theta[r], _cache_take(cache, r)), chunks))
        logl = np.concatenate([p[0] for p in parts])
        flags = np.concatenate([p[2] for p in parts])
        c = None if parts[0][1] is None else tuple(
            np.concatenate([p[1][j] for p in parts]) for j in range(len(parts[0][1])))
        out = (logl, c, flags)
    logl, c, flags = out
    logl = np.where(np.isnan(logl), -np.inf, np.asarray(logl, dtype=float))
    return logl, c, np.asarray(flags, dtype=int)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NsSettings:
    """Sampler settings.

    Parameters
    ----------
    m : int
        Live points.
    k : int
        Points deleted and replaced per iteration.
    s : int
        Slice-sampling directions per replacement chain.
    threshold : float
        Stop when ``log Z_live - log Z`` falls below this value.
    max_iter : int
    step_budget : int
        Total stepping-out expansions per slice (Neal's ``m``).
    max_retries : int
        Fresh directions tried after a bracket collapses.
    n_boot : int
    threads : int
        Row chunks evaluated concurrently inside one batched call.
    volume : {"batch", "sequential"}
        Prior-volume model for simultaneous deletions, see :func:`shrink_rates`.
    """

    m: int = 500
    k: int = 100
    s: int = 5
    threshold: float = -3.0
    max_iter: int = 100_000
    step_budget: int = 32
    max_retries: int = 10
    n_boot: int = 200
    threads: int = 1
    volume: str = "batch"

    def __post_init__(self):
        if self.k < 1 or self.m < 2 * self.k:
            raise ValueError("need k >= 1 and m >= 2 k")
        if self.s < 1:
            raise ValueError("s must be positive")


@dataclass
class NsState:
    """Live set, accumulated evidence and dead-point trace."""

    likelihood: object
    settings: NsSettings
    seed: int
    u: np.ndarray
    theta: np.ndarray
    logl: np.ndarray
    tie: np.ndarray
    flags: np.ndarray
    cache: tuple | None
    log_x: float = 0.0
    log_z: float = -np.inf
    n_dead: int = 0
    iteration: int = 0
    n_eval: int = 0
    dead_u: list = field(default_factory=list)
    dead_theta: list = field(default_factory=list)
    dead_logl: list = field(default_factory=list)
    dead_logx: list = field(default_factory=list)
    dead_logw: list = field(default_factory=list)
    dead_flags: list = field(default_factory=list)
    dead_nlive: list = field(default_factory=list)
    log_z_history: list = field(default_factory=list)

    @property
    def m(self):
        return self.logl.size


@dataclass
class DeadTrace:
    """Dead points followed by the final live points, in likelihood order.

    ``logw`` holds log prior-volume weights ``w_i`` (not multiplied by ``L``)
    and ``nlive`` the effective live count whose ``Beta(nlive, 1)``
    shrinkage produced each dead point's volume.
    """

    u: np.ndarray
    theta: np.ndarray
    logl: np.ndarray
    logx: np.ndarray
    logw: np.ndarray
    flags: np.ndarray
    n_dead: int
    nlive: np.ndarray

    def __len__(self):
        return self.logl.size


@dataclass
class NsResult:
    """Outcome of :func:`run`."""

    log_z: float
    sigma: float
    n_dead: int
    dkl: float
    trace: DeadTrace
    settings: NsSettings
    seed: int
    n_eval: int
    n_iter: int

    @property
    def log_weights(self):
        """Normalised log posterior weights of the trace points."""
        lw = self.trace.logw + self.trace.logl
        return lw - logsumexp(lw)

    @property
    def flagged_fraction(self):
        """Share of trace points with a convergence or validity flag."""
        if not len(self.trace):
            return 0.0
        return float(np.mean((self.trace.flags & int(PROBLEM_FLAGS)) != 0))

    def posterior_samples(self, n, seed=0):
        """Equal-weight ``theta`` draws by systematic resampling."""
        idx = systematic_resample(np.exp(self.log_weights), n, np.random.default_rng(seed))
        return self.trace.theta[idx]

    def summary(self):
        return {"logZ": self.log_z, "sigma": self.sigma, "N_dead": self.n_dead, "D_KL": self.dkl,
                "flagged_fraction": self.flagged_fraction, "n_eval": self.n_eval,
                "n_iter": self.n_iter, "seed": self.seed,
                "settings": {k: getattr(self.settings, k) for k in
                             ("m", "k", "s", "threshold", "n_boot")}}


def systematic_resample(weights, n, rng):
    """Indices drawn by systematic resampling of normalised ``weights``."""
    w = np.asarray(weights, dtype=float)
    c = np.cumsum(w / w.sum())
    c[-1] = 1.0
    pos = (rng.random() + np.arange(n)) / n
    return np.searchsorted(c, pos, side="right").clip(0, w.size - 1)


def _rng(seed, iteration, chain):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, iteration, chain])))


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------


def shrink_rates(k, m, volume="batch"):
    """Expected ``-d log X`` for each of ``k`` deaths in one iteration.

    ``batch`` uses the order statistics of ``k`` simultaneous deletions from
    ``m`` points, ``1 / (m - j)`` for the ``j``-th death; ``sequential``
    uses ``1 / m`` throughout, which is exact only for ``k = 1``.

    Examples
    --------
    >>> shrink_rates(3, 10)
    array([0.1       , 0.11111111, 0.125     ])
    """
    if volume == "batch":
        return 1.0 / (m - np.arange(k, dtype=float))
    if volume == "sequential":
        return np.full(k, 1.0 / m)
    raise ValueError(f"unknown volume model {volume!r}")


def _log_half_diff(a, b):
    """``log((e^a - e^b) / 2)`` for ``a > b``."""
    return a + np.log(-np.expm1(b - a)) - math.log(2.0)


def _log_weights(log_x_prev, log_x, m, first):
    """Log trapezoid weights ``w_i = (X_{i-1} - X_{i+1}) / 2`` for one batch.

    ``log_x_prev`` is the volume before the batch and the volume after the
    batch is extrapolated by one ``1 / m`` shrinkage, which is exactly the
    next batch's first step. The very first death uses
    ``w_1 = X_0 - (X_1 + X_2) / 2`` so weights plus the remainder
    ``(X_N + X_{N+1}) / 2`` sum to ``X_0 = 1``.
    """
    lx = np.concatenate([[log_x_prev], log_x, [log_x[-1] - 1.0 / m]])
    lw = _log_half_diff(lx[:-2], lx[2:])
    if first:
        lw[0] = math.log1p(-0.5 * (math.exp(lx[1]) + math.exp(lx[2])))
    return lw


def _log_remainder(log_x, m):
    """Log of ``(X_N + X_{N+1}) / 2``."""
    return log_x + math.log1p(math.exp(-1.0 / m)) - math.log(2.0)


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------


def ns_init(likelihood, settings=NsSettings(), seed=0):
    """Draw ``m`` prior points and evaluate them.

    Raises
    ------
    DegeneratePrior
        If every initial likelihood is ``-inf``.
    """
    rng = _rng(seed, 0, 2 ** 31)
    m, d = settings.m, likelihood.d_theta
    u = np.clip(rng.random((m, d)), _TINY, 1 - _TINY)
    theta = likelihood.prior_transform(u)
    logl, cache, flags = _evaluate(likelihood, theta, None, settings.threads)
    if not np.any(np.isfinite(logl)):
        raise DegeneratePrior("every initial live point has zero likelihood")
    return NsState(likelihood=likelihood, settings=settings, seed=seed, u=u, theta=theta, logl=logl,
                   tie=rng.random(m), flags=flags, cache=cache, n_eval=m)


def _reflect(x):
    r = np.mod(x, 2.0)
    r = np.where(r > 1.0, 2.0 - r, r)
    return np.clip(r, _TINY, 1 - _TINY)


def _above(logl, tie, thr_logl, thr_tie):
    return (logl > thr_logl) | ((logl == thr_logl) & (tie > thr_tie))


def slice_sample_constrained(likelihood, u0, logl0, cache0, threshold, s, rngs, live_u,
                             settings=NsSettings(), flags0=None):
    """Evolve chains with ``s`` slice updates each, constrained above ``threshold``.

    All chains run in lock-step so their likelihood calls are batched.

    Parameters
    ----------
    likelihood : likelihood adapter
    u0 : ndarray, shape (c, d)
        Start points on the unit cube, all above the threshold.
    logl0 : ndarray, shape (c,)
    cache0 : tuple of arrays or None
    threshold : tuple (logl, tie)
    s : int
    rngs : list of numpy Generators, one per chain
    live_u : ndarray, shape (m, d)
        Live set whose covariance defines directions and bracket widths.

    Returns
    -------
    u, theta, logl, tie, cache, flags, n_eval

    Raises
    ------
    StuckSampler
        If a chain's bracket collapses ``max_retries`` times in a row.
    """
    thr_l, thr_t = threshold
    c, d = u0.shape
    cov = np.atleast_2d(np.cov(live_u, rowvar=False))
    jitter = _TINY * max(np.trace(cov) / d, _TINY)
    chol = np.linalg.cholesky(cov + jitter * np.eye(d))

    x = u0.copy()
    logl = logl0.copy()
    tie = np.array([r.random() for r in rngs])
    flags = np.zeros(c, dtype=int) if flags0 is None else flags0.copy()
    cache = None if cache0 is None else tuple(a.copy() for a in cache0)
    theta = likelihood.prior_transform(x)
    n_eval = 0
    budget = settings.step_budget

    for _ in range(s):
        direc = np.empty((c, d))
        width = np.empty(c)
        lo = np.empty(c)
        hi = np.empty(c)
        left = np.empty(c, dtype=int)
        right = np.empty(c, dtype=int)
        phase = np.empty(c, dtype=int)  # 0 step left, 1 step right, 2 shrink, 3 done
        retries = np.zeros(c, dtype=int)

        def new_bracket(ch):
            for j in ch:
                r = rngs[j]
                v = chol @ r.standard_normal(d)
                v /= np.linalg.norm(v)
                spread = math.sqrt(max(v @ cov @ v, 0.0))
                w = max(2.0 * spread, _TINY)
                direc[j], width[j] = v, w
                lo[j] = -w * r.random()
                hi[j] = lo[j] + w
                jl = int(budget * r.random())
                left[j], right[j] = jl, budget - 1 - jl
                phase[j] = 0 if left[j] > 0 else (1 if right[j] > 0 else 2)

        new_bracket(range(c))
        while True:
            act = np.flatnonzero(phase < 3)
            if act.size == 0:
                break
            t = np.where(phase[act] == 0, lo[act], hi[act])
            shr = phase[act] == 2
            for i in np.flatnonzero(shr):
                j = act[i]
                t[i] = lo[j] + (hi[j] - lo[j]) * rngs[j].random()
            prop = _reflect(x[act] + t[:, None] * direc[act])
            th = likelihood.prior_transform(prop)
            pl, pc, pf = _evaluate(likelihood, th, _cache_take(cache, act), settings.threads)
            n_eval += act.size
            ptie = np.array([rngs[j].random() for j in act])
            inside = _above(pl, ptie, thr_l, thr_t)
            for i, j in enumerate(act):
                ph = phase[j]
                if ph == 0:
                    if inside[i]:
                        lo[j] -= width[j]
                        left[j] -= 1
                    if not inside[i] or left[j] == 0:
                        phase[j] = 1 if right[j] > 0 else 2
                elif ph == 1:
                    if inside[i]:
                        hi[j] += width[j]
                        right[j] -= 1
                    if not inside[i] or right[j] == 0:
                        phase[j] = 2
                elif inside[i]:
                    x[j], theta[j], logl[j], tie[j], flags[j] = prop[i], th[i], pl[i], ptie[i], pf[i]
                    if cache is not None and pc is not None:
                        for a, b in zip(cache, pc):
                            a[j] = b[i]
                    phase[j] = 3
                else:
                    if t[i] < 0:
                        lo[j] = t[i]
                    else:
                        hi[j] = t[i]
                    if hi[j] - lo[j] < 1e-12 * width[j]:
                        retries[j] += 1
                        if retries[j] > settings.max_retries:
                            err = SliceCollapse("slice bracket collapsed")
                            raise StuckSampler(
                                f"chain {j} bracket collapsed {retries[j]} times",
                                diagnostics={"chain": int(j), "threshold": float(thr_l),
                                             "u": x[j].tolist(), "logl": float(logl[j]),
                                             "cause": repr(err)})
                        new_bracket([j])
    return x, theta, logl, tie, cache, flags, n_eval


def ns_step(state, k=None, s=None):
    """One batch-deletion iteration (modifies and returns ``state``)."""
    st = state.settings
    k = st.k if k is None else k
    s = st.s if s is None else s
    m = state.m
    if not 1 <= k < m:
        raise ValueError("need 1 <= k < m")
    order = np.lexsort((state.tie, state.logl))
    dead, keep = order[:k], order[k:]

    rates = shrink_rates(k, m, st.volume)
    logx = state.log_x - np.cumsum(rates)
    logw = _log_weights(state.log_x, logx, m, state.n_dead == 0)
    state.dead_u.append(state.u[dead])
    state.dead_theta.append(state.theta[dead])
    state.dead_logl.append(state.logl[dead])
    state.dead_logx.append(logx)
    state.dead_logw.append(logw)
    state.dead_flags.append(state.flags[dead])
    state.dead_nlive.append(1.0 / rates)
    with np.errstate(invalid="ignore"):
        contrib = logsumexp(state.logl[dead] + logw)
    state.log_z = float(np.logaddexp(state.log_z, contrib))
    state.n_dead += k
    state.log_x = float(logx[-1])
    state.log_z_history.append(state.log_z)

    threshold = (state.logl[dead[-1]], state.tie[dead[-1]])
    state.iteration += 1
    pick_rng = _rng(state.seed, state.iteration, 2 ** 31)
    starts = keep[pick_rng.integers(0, keep.size, size=k)]
    rngs = [_rng(state.seed, state.iteration, j) for j in range(k)]
    u, theta, logl, tie, cache, flags, n_eval = slice_sample_constrained(
        state.likelihood, state.u[starts], state.logl[starts], _cache_take(state.cache, starts),
        threshold, s, rngs, state.u, st, flags0=state.flags[starts])
    state.u[dead], state.theta[dead], state.logl[dead] = u, theta, logl
    state.tie[dead], state.flags[dead] = tie, flags
    _cache_put(state.cache, dead, cache)
    state.n_eval += n_eval
    return state


def terminate(state, threshold=None, live_mean=True):
    """Termination test ``log Z_live - log Z < threshold``.

    ``log Z_live = logsumexp(live logl) - log m + log X`` (mean live
    likelihood times remaining volume); ``live_mean=False`` drops the
    ``- log m`` term.
    """
    thr = state.settings.threshold if threshold is None else threshold
    if not np.any(np.isfinite(state.logl)):
        return True
    log_live = logsumexp(state.logl) + state.log_x - (math.log(state.m) if live_mean else 0.0)
    return bool(log_live - state.log_z < thr)


def finalize(state):
    """Append the live points to the trace and return it with ``log Z``."""
    m = state.m
    order = np.lexsort((state.tie, state.logl))
    # with no deaths the live points carry the whole prior volume
    lrem = _log_remainder(state.log_x, m) if state.n_dead else state.log_x
    live_logw = np.full(m, lrem - math.log(m))
    live_logx = state.log_x + np.log1p(-np.arange(1, m + 1) / (m + 1.0))
    parts = lambda lst, extra: np.concatenate(lst + [extra]) if lst else extra  # noqa: E731
    trace = DeadTrace(
        u=parts(state.dead_u, state.u[order]),
        theta=parts(state.dead_theta, state.theta[order]),
        logl=parts(state.dead_logl, state.logl[order]),
        logx=parts(state.dead_logx, live_logx),
        logw=parts(state.dead_logw, live_logw),
        flags=parts(state.dead_flags, state.flags[order]),
        n_dead=state.n_dead,
        nlive=np.concatenate(state.dead_nlive) if state.dead_nlive else np.zeros(0))
    with np.errstate(invalid="ignore"):
        log_z = float(logsumexp(trace.logl + trace.logw))
    return trace, log_z


def _trace_log_z(logl, log_x_dead, n_dead, m, live_logl):
    """``log Z`` from a dead sequence with given volumes plus a live remainder."""
    X = np.exp(np.concatenate([[0.0], log_x_dead]))
    # extra volume after the last death, one more expected shrinkage
    X_next = X[-1] * math.exp(-1.0 / m)
    Xp = np.concatenate([X, [X_next]])
    w = 0.5 * (Xp[:-2] - Xp[2:])
    w[0] = Xp[0] - 0.5 * (Xp[1] + Xp[2])
    rem = 0.5 * (Xp[-2] + Xp[-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.concatenate([logl[:n_dead] + np.log(w), live_logl + math.log(rem / m)])
    return logsumexp(terms)


def bootstrap_sigma(trace, m, n_boot=200, seed=0):
    """Standard deviation of ``log Z`` under resampled shrinkage factors.

    Each replicate draws ``t_i ~ Beta(n_i, 1)`` per death, with ``n_i`` the
    effective live count (``m`` for sequential volumes), rebuilds the
    volumes ``X_i = prod t`` and recomputes ``log Z`` with the same
    quadrature rule. A constant likelihood gives exactly zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    n = trace.n_dead
    fin = trace.logl[np.isfinite(trace.logl)]
    if n == 0 or (fin.size == trace.logl.size and np.ptp(fin) == 0):
        return 0.0
    live_logl = trace.logl[n:]
    vals = np.empty(n_boot)
    for b in range(n_boot):
        logt = np.log(rng.random(n)) / trace.nlive
        vals[b] = _trace_log_z(trace.logl, np.cumsum(logt), n, m, live_logl)
    return float(np.std(vals, ddof=1)) if n_boot > 1 else 0.0


def kl_divergence(trace, log_z):
    """``D_KL = sum_i p_i (log L_i - log Z)`` from the trace."""
    lp = trace.logl + trace.logw - log_z
    p = np.exp(lp)
    fin = np.isfinite(trace.logl) & (p > 0)
    return float(np.sum(p[fin] * (trace.logl[fin] - log_z)))


def run(target, mode="gaussian", m=500, k=100, s=5, seed=0, *, threshold=-3.0,
        n_boot=200, threads=1, max_iter=100_000, volume="batch", options=None,
        callback=None):
    """Run nested sampling to termination.

    Parameters
    ----------
    target : HierarchicalModel or likelihood adapter
        Models are wrapped by :func:`make_likelihood` with ``mode``.
    mode : str
        ``gaussian``, ``student``, ``exact-reference`` or ``joint-full-ns``.
    m, k, s : int
        Live points, deletions per iteration, slice directions per chain.
    seed : int
    threshold : float
        Termination threshold on ``log Z_live - log Z``.
    callback : callable, optional
        Called with the state after every iteration.

    Returns
    -------
    NsResult
    """
    like = target if hasattr(target, "evaluate") else make_likelihood(target, mode, options)
    settings = NsSettings(m=m, k=k, s=s, threshold=threshold, n_boot=n_boot, threads=threads,
                          max_iter=max_iter, volume=volume)
    state = ns_init(like, settings, seed)
    while state.iteration < settings.max_iter:
        ns_step(state)
        if callback is not None:
            callback(state)
        if terminate(state):
            break
    trace, log_z = finalize(state)
    sigma = bootstrap_sigma(trace, m, n_boot, seed)
    return NsResult(log_z=log_z, sigma=sigma, n_dead=state.n_dead, dkl=kl_divergence(trace, log_z),
                    trace=trace, settings=settings, seed=seed, n_eval=state.n_eval,
                    n_iter=state.iteration)
