"""Whitened, batched L-BFGS for conditional latent modes.

The minimiser runs many independent problems in lock-step: each row of the
state arrays is one problem (for example the latent MAP at one
hyperparameter value). Rows leave the active set as soon as they converge,
stall or fail, so the per-iteration cost tracks the number of unfinished
problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .errors import LineSearchStalled, NonFiniteObjective, SingularWhitening
from .structure import DenseFactor

__all__ = [
    "WhiteningTransform",
    "LbfgsOptions",
    "OptResult",
    "BatchOptResult",
    "lbfgs_minimize",
    "lbfgs_batch",
    "whiten",
    "unwhiten",
    "warm_start",
    "STATUS_CONVERGED",
    "STATUS_MAXITER",
    "STATUS_STALLED",
    "STATUS_NONFINITE",
]

STATUS_RUNNING = -1
STATUS_CONVERGED = 0
STATUS_MAXITER = 1
STATUS_STALLED = 2
STATUS_NONFINITE = 3


@dataclass
class WhiteningTransform:
    """Affine map ``z_tilde = L^T (z - z0)`` with ``H0 = L L^T``.

    The transposed Cholesky factor plays the role of the square root of
    ``H0``. Under this map gradients transform as ``g_tilde = L^{-1} g`` and
    Hessians as ``H = L H_tilde L^T``.

    Parameters
    ----------
    z0 : ndarray, shape (*batch, n)
    factor : structured Cholesky factor of ``H0``
    """

    z0: np.ndarray
    factor: object

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=float)
        p = self.factor.pivots()
        if not np.all(np.isfinite(p) & (p > 0)):
            raise SingularWhitening("whitening factor has a zero or non-finite pivot")

    @classmethod
    def identity(cls, n, z0=None):
        z0 = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float)
        return cls(z0, DenseFactor(np.eye(n)))

    @classmethod
    def from_precision(cls, z0, H0):
        """Build from a structured precision (``H0.cholesky()`` must succeed)."""
        return cls(z0, H0.cholesky())

    @property
    def dim(self):
        return self.z0.shape[-1]

    def forward(self, z):
        return self.factor.lt_matvec(np.asarray(z, dtype=float) - self.z0)

    def backward(self, zt):
        return self.z0 + self.factor.solve_lt(zt)

    def gradient_to_white(self, g):
        return self.factor.solve_l(g)

    def take(self, idx):
        return WhiteningTransform(self.z0[idx], self.factor.take(idx))


def whiten(z, transform):
    """Map latent coordinates to whitened coordinates."""
    if np.shape(z)[-1] != transform.dim:
        raise ValueError("dimension mismatch between z and whitening transform")
    return transform.forward(z)


def unwhiten(zt, transform):
    """Inverse of :func:`whiten`."""
    if np.shape(zt)[-1] != transform.dim:
        raise ValueError("dimension mismatch between z and whitening transform")
    return transform.backward(zt)


def warm_start(cache, prior_mean, prior_precision):
    """Initial point and whitening from a cached mode and Hessian factor.

    Parameters
    ----------
    cache : tuple or None
        ``(z_hat, factor)`` from an earlier evaluation, ``factor`` being a
        Cholesky factor of the Hessian there, or ``(z_hat, precision)``.
    prior_mean, prior_precision
        Cold-start fallback.

    Returns
    -------
    x0 : ndarray
    transform : WhiteningTransform
    fell_back : bool
        True when a cache was supplied but could not be used.
    """
    cold = WhiteningTransform.from_precision(prior_mean, prior_precision)
    if cache is None:
        return np.asarray(prior_mean, dtype=float), cold, False
    z_hat, H = cache
    try:
        factor = H.cholesky() if hasattr(H, "cholesky") else H
        transform = WhiteningTransform(z_hat, factor)
    except Exception:  # indefinite or singular cached curvature
        return np.asarray(prior_mean, dtype=float), cold, True
    if np.shape(z_hat)[-1] != cold.dim:
        return np.asarray(prior_mean, dtype=float), cold, True
    return np.asarray(z_hat, dtype=float), transform, False


@dataclass(frozen=True)
class LbfgsOptions:
    """L-BFGS settings.

    ``gtol`` bounds the preconditioned gradient norm ``sqrt(g^T B g)`` where
    ``B`` is the current inverse-curvature estimate. When ``secant`` is set,
    an accepted step whose end slope is still large is refined once by a
    secant step along the search direction.
    """

    memory: int = 10
    max_iter: int = 200
    gtol: float = 1e-8
    c1: float = 1e-4
    shrink: float = 0.5
    max_ls: int = 30
    secant: bool = True
    secant_ratio: float = 1e-3

    def __post_init__(self):
        if min(self.memory, self.max_iter, self.max_ls) < 1 or self.gtol <= 0:
            raise ValueError("L-BFGS options must be positive")
        if not (0 < self.c1 < 1 and 0 < self.shrink < 1):
            raise ValueError("line-search constants must lie in (0, 1)")


@dataclass
class OptResult:
    """Outcome of one minimisation (in original, unwhitened coordinates)."""

    x: np.ndarray
    fun: float
    grad_norm: float
    n_iter: int
    converged: bool
    status: int = STATUS_CONVERGED


@dataclass
class BatchOptResult:
    """Outcome of a batch of minimisations (whitened coordinates)."""

    x: np.ndarray
    fun: np.ndarray
    grad: np.ndarray
    grad_norm: np.ndarray
    n_iter: np.ndarray
    status: np.ndarray
    n_eval: int = 0
    history: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == STATUS_CONVERGED


def _two_loop(g, S, Y, rho, order, gamma):
    """Apply the L-BFGS inverse-curvature estimate to ``g`` (row-wise)."""
    q = g.copy()
    alpha = []
    for j in order:  # newest first
        a = rho[:, j] * np.einsum("ij,ij->i", S[:, j], q)
        q -= a[:, None] * Y[:, j]
        alpha.append(a)
    r = gamma[:, None] * q
    for j, a in zip(reversed(order), reversed(alpha)):
        b = rho[:, j] * np.einsum("ij,ij->i", Y[:, j], r)
        r += (a - b)[:, None] * S[:, j]
    return r


def lbfgs_batch(fg, x0, opts=LbfgsOptions(), *, record=False):
    """Minimise a batch of independent objectives in lock-step.

    Parameters
    ----------
    fg : callable
        ``fg(x, rows) -> (f, g)`` evaluates objectives and gradients for the
        subset ``rows`` of problems at points ``x`` of shape ``(len(rows), n)``.
        Non-finite values are allowed and treated as failed trials.
    x0 : ndarray, shape (B, n)
    opts : LbfgsOptions
    record : bool
        Keep the accepted objective values per iteration in ``history``.

    Returns
    -------
    BatchOptResult
    """
    x = np.array(x0, dtype=float, copy=True)
    B, n = x.shape
    m = opts.memory
    rows_all = np.arange(B)
    f, g = fg(x, rows_all)
    f = np.array(f, dtype=float)
    g = np.array(g, dtype=float)
    n_eval = 1
    status = np.full(B, STATUS_RUNNING)
    bad0 = ~(np.isfinite(f) & np.all(np.isfinite(g), axis=1))
    status[bad0] = STATUS_NONFINITE
    S = np.zeros((B, m, n))
    Y = np.zeros((B, m, n))
    rho = np.zeros((B, m))
    gamma = np.ones(B)
    n_iter = np.zeros(B, dtype=int)
    gnorm = np.full(B, np.inf)
    history = [f.copy()] if record else []
    stored = 0

    for it in range(opts.max_iter + 1):
        act = np.flatnonzero(status == STATUS_RUNNING)
        if act.size == 0:
            break
        order = [(it - 1 - j) % m for j in range(min(stored, m))]
        ga = g[act]
        p = -_two_loop(ga, S[act], Y[act], rho[act], order, gamma[act])
        d0 = np.einsum("ij,ij->i", ga, p)
        gn = np.sqrt(np.maximum(-d0, 0.0))
        gnorm[act] = gn
        done = gn <= opts.gtol
        status[act[done]] = STATUS_CONVERGED
        if it == opts.max_iter:
            status[act[~done]] = STATUS_MAXITER
            break
        keep = ~done
        act, p, d0, ga = act[keep], p[keep], d0[keep], ga[keep]
        if act.size == 0:
            break
        # reset to steepest descent where the quasi-Newton direction is unusable
        reset = ~(d0 < 0) | ~np.all(np.isfinite(p), axis=1)
        if reset.any():
            p[reset] = -ga[reset]
            d0[reset] = -np.einsum("ij,ij->i", ga[reset], ga[reset])
            rho[act[reset]] = 0.0

        fa = f[act]
        xa = x[act]
        t = np.ones(act.size)
        if stored == 0:
            gn2 = np.sqrt(-d0)
            t = np.minimum(1.0, 1.0 / np.maximum(gn2, 1e-300))
        new_x = xa.copy()
        new_f = fa.copy()
        new_g = ga.copy()
        accepted = np.zeros(act.size, dtype=bool)
        searching = np.ones(act.size, dtype=bool)
        tol_f = 10.0 * np.finfo(float).eps * (1.0 + np.abs(fa))
        for _ in range(opts.max_ls):
            si = np.flatnonzero(searching)
            if si.size == 0:
                break
            xt = xa[si] + t[si, None] * p[si]
            ft, gt = fg(xt, act[si])
            n_eval += 1
            ft = np.asarray(ft, dtype=float)
            gt = np.asarray(gt, dtype=float)
            ok = (np.isfinite(ft) & np.all(np.isfinite(gt), axis=1)
                  & (ft <= fa[si] + opts.c1 * t[si] * d0[si] + tol_f[si]))
            acc = si[ok]
            new_x[acc], new_f[acc], new_g[acc] = xt[ok], ft[ok], gt[ok]
            accepted[acc] = True
            searching[acc] = False
            t[si[~ok]] *= opts.shrink
        if opts.secant and accepted.any():
            ai = np.flatnonzero(accepted)
            d1 = np.einsum("ij,ij->i", new_g[ai], p[ai])
            # secant minimiser of the directional slope: t* = t d0 / (d0 - d1)
            need = (np.abs(d1) > opts.secant_ratio * np.abs(d0[ai])) & (d1 > d0[ai])
            ri = ai[need]
            if ri.size:
                ts = t[ri] * d0[ri] / (d0[ri] - d1[need])
                xt = xa[ri] + ts[:, None] * p[ri]
                ft, gt = fg(xt, act[ri])
                n_eval += 1
                ft = np.asarray(ft, dtype=float)
                gt = np.asarray(gt, dtype=float)
                better = (np.isfinite(ft) & np.all(np.isfinite(gt), axis=1)
                          & (ft <= new_f[ri]))
                bi = ri[better]
                new_x[bi], new_f[bi], new_g[bi] = xt[better], ft[better], gt[better]
        stalled = ~accepted
        status[act[stalled]] = STATUS_STALLED

        slot = it % m
        s_vec = new_x - xa
        y_vec = new_g - ga
        sy = np.einsum("ij,ij->i", s_vec, y_vec)
        yy = np.einsum("ij,ij->i", y_vec, y_vec)
        valid = accepted & (sy > 1e-12 * np.sqrt(np.einsum("ij,ij->i", s_vec, s_vec) * yy))
        S[act, slot] = s_vec
        Y[act, slot] = y_vec
        rho[act, slot] = np.where(valid, 1.0 / np.where(valid, sy, 1.0), 0.0)
        gamma[act] = np.where(valid, sy / np.where(valid, yy, 1.0), gamma[act])
        stored += 1
        x[act] = new_x
        f[act] = new_f
        g[act] = new_g
        n_iter[act[accepted]] += 1
        if record:
            history.append(f.copy())

    return BatchOptResult(x=x, fun=f, grad=g, grad_norm=gnorm, n_iter=n_iter,
                          status=status, n_eval=n_eval, history=history)


def lbfgs_minimize(f, x0, whitening=None, opts=LbfgsOptions()):
    """Minimise a differentiable scalar function with whitened L-BFGS.

    Parameters
    ----------
    f : callable
        Objective on original coordinates, evaluable on :class:`Jet` input.
    x0 : ndarray, shape (n,)
    whitening : WhiteningTransform, optional
        Defaults to the identity centred at ``x0``.
    opts : LbfgsOptions

    Returns
    -------
    OptResult
        ``x`` is in original coordinates.

    Raises
    ------
    NonFiniteObjective
        If ``f`` or its gradient is not finite at ``x0``.
    LineSearchStalled
        If no sufficient decrease is found in ``opts.max_ls`` trials.

    Examples
    --------
    >>> res = lbfgs_minimize(lambda z: 0.5 * (z[..., 0] - 3.0) ** 2, [0.0])
    >>> bool(abs(res.x[0] - 3.0) < 1e-10), res.converged
    (True, True)
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[-1]
    if whitening is None:
        whitening = WhiteningTransform.identity(n, x0)
    if whitening.dim != n:
        raise ValueError("whitening dimension does not match x0")

    def fg(xt, rows):
        z = whitening.backward(xt)
        val, grad = autodiff.value_and_gradient(f, z, check=False)
        return val, whitening.gradient_to_white(grad)

    xt0 = whitening.forward(x0)[None]
    f0, g0 = fg(xt0, np.arange(1))
    if not (np.isfinite(f0).all() and np.isfinite(g0).all()):
        raise NonFiniteObjective("objective or gradient not finite at the starting point")
    res = lbfgs_batch(fg, xt0, opts)
    x = whitening.backward(res.x[0])
    if res.status[0] == STATUS_STALLED:
        raise LineSearchStalled("line search found no decrease", best=x)
    if res.status[0] == STATUS_NONFINITE:
        raise NonFiniteObjective("objective became non-finite")
    return OptResult(x=x, fun=float(res.fun[0]), grad_norm=float(res.grad_norm[0]),
                     n_iter=int(res.n_iter[0]), converged=bool(res.status[0] == STATUS_CONVERGED),
                     status=int(res.status[0]))
