"""Laplace-style collapse of the latent variables at fixed hyperparameters.

For each ``theta`` the latent log joint ``log p*(z) = log L(D|theta,z) +
log pi(z|theta)`` is maximised by whitened L-BFGS, its negative Hessian ``H``
is assembled in the model's structure, and the latents are integrated out
against either a Gaussian or a product-of-Student-t proposal centred at the
mode:

* Gaussian: ``log p*(z_hat) + (d_z / 2) log 2 pi - 0.5 log det H``
* Student:  ``log p*(z_hat) - 0.5 log det H - sum_j log q_j(0)``

where ``q_j`` is a unit-curvature Student-t density with ``nu_j`` degrees of
freedom matched to the fourth-order behaviour of ``log p*`` along the
``j``-th whitened axis.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad
from .errors import NonConcaveDirection, NonFiniteObjective
from .models.base import LOG_2PI, take_params
from .optimizer import (STATUS_CONVERGED, STATUS_MAXITER, STATUS_NONFINITE, STATUS_STALLED,
                        LbfgsOptions, OptResult, WhiteningTransform, lbfgs_batch)
from .structure import (BlockFactor, BlockPrecision, DenseFactor, DensePrecision,
                        TridiagonalFactor, TridiagonalPrecision)

__all__ = [
    "PROBLEM_FLAGS",
    "Flag",
    "CollapseOptions",
    "CollapseBatch",
    "CollapsedEvaluation",
    "collapse_batch",
    "conditional_map",
    "latent_hessian",
    "tridiag_coloring",
    "half_logdet",
    "estimate_nu",
    "student_log_q0",
    "collapsed_loglik_gaussian",
    "collapsed_loglik_student",
    "NU_MIN",
    "NU_MAX",
]

NU_MIN = 4.01
NU_MAX = 1e8


class Flag(enum.IntFlag):
    """Reason codes attached to every likelihood evaluation."""

    NONCONVERGED = 1
    INDEFINITE = 2
    NONFINITE = 4
    WARM_FALLBACK = 8
    NU_CLAMPED = 16
    STALLED = 32
    JITTER = 64


#: flags that mark an evaluation as unreliable rather than merely annotated
PROBLEM_FLAGS = Flag.NONCONVERGED | Flag.INDEFINITE | Flag.NONFINITE | Flag.STALLED


@dataclass(frozen=True)
class CollapseOptions:
    """Settings for :func:`collapse_batch`.

    Parameters
    ----------
    method : {"gaussian", "student"}
    nu : float or None
        Fixed degrees of freedom for the Student collapse; ``None`` estimates
        one value per whitened axis.
    nu_estimator : {"taylor", "as_written"}
        ``taylor`` matches the quartic coefficient of the Student log density;
        ``as_written`` uses ``nu = 4 + 6 / kappa`` with
        ``kappa = 18 c4 / c2^2 - 3``.
    lbfgs : LbfgsOptions
    warm_start : bool
        Use a supplied cache as the starting point and whitening.
    restarts : int
        Rows that hit the iteration limit or stall are restarted from their
        current point, whitened by the local Hessian, up to this many times.
    """

    method: str = "gaussian"
    nu: float | None = None
    nu_estimator: str = "taylor"
    lbfgs: LbfgsOptions = field(default_factory=LbfgsOptions)
    warm_start: bool = True
    restarts: int = 2

    def __post_init__(self):
        if self.method not in ("gaussian", "student"):
            raise ValueError(f"unknown collapse method {self.method!r}")
        if self.nu_estimator not in ("taylor", "as_written"):
            raise ValueError(f"unknown nu estimator {self.nu_estimator!r}")
        if self.nu is not None and not self.nu > 0:
            raise ValueError("nu must be positive")


@dataclass
class CollapseBatch:
    """Collapsed log likelihoods and mode information for a batch of ``theta``.

    Attributes
    ----------
    logl : ndarray, shape (B,)
        ``-inf`` where the evaluation failed (see ``flags``).
    z_hat : ndarray, shape (B, d_z)
    factor : Cholesky factor of ``H`` (batched, structure-specific)
    half_logdet : ndarray, shape (B,)
    log_joint : ndarray, shape (B,)
        ``log p*(z_hat)``.
    flags : ndarray of int, shape (B,)
    n_iter : ndarray of int, shape (B,)
    grad_norm : ndarray, shape (B,)
    nu : ndarray, shape (B, d_z) or None
    nu_as_written : ndarray, shape (B, d_z) or None
    log_q0 : ndarray, shape (B, d_z) or None
    """

    logl: np.ndarray
    z_hat: np.ndarray
    factor: object
    half_logdet: np.ndarray
    log_joint: np.ndarray
    flags: np.ndarray
    n_iter: np.ndarray
    grad_norm: np.ndarray
    nu: np.ndarray | None = None
    nu_as_written: np.ndarray | None = None
    log_q0: np.ndarray | None = None

    @property
    def cache(self):
        """Warm-start cache ``(z_hat, factor)``."""
        return self.z_hat, self.factor

    def take(self, i):
        """Single-``theta`` view as a :class:`CollapsedEvaluation`."""
        return CollapsedEvaluation(
            logl=float(self.logl[i]), z_hat=self.z_hat[i], factor=self.factor.take(i),
            half_logdet=float(self.half_logdet[i]), log_joint=float(self.log_joint[i]),
            flags=int(self.flags[i]), n_iter=int(self.n_iter[i]),
            grad_norm=float(self.grad_norm[i]),
            nu=None if self.nu is None else self.nu[i],
            nu_as_written=None if self.nu_as_written is None else self.nu_as_written[i])


@dataclass
class CollapsedEvaluation:
    """Collapse result at one ``theta``."""

    logl: float
    z_hat: np.ndarray
    factor: object
    half_logdet: float
    log_joint: float
    flags: int
    n_iter: int
    grad_norm: float = float("nan")
    nu: np.ndarray | None = None
    nu_as_written: np.ndarray | None = None

    @property
    def cache(self):
        return self.z_hat, self.factor

    @property
    def converged(self):
        bad = Flag.NONCONVERGED | Flag.INDEFINITE | Flag.NONFINITE
        return not (self.flags & bad)

    @property
    def condition(self):
        """Condition estimate of ``H`` from its extreme Cholesky pivots."""
        return float(self.factor.condition())


# ---------------------------------------------------------------------------
# derivatives of the latent log joint
# ---------------------------------------------------------------------------


def _block_shape(z, structure):
    return z.reshape(z.shape[:-1] + (structure.n_blocks, structure.block_size))


def _block_value_grad(fb, p, z, structure):
    """Value and gradient of ``sum_b fb(p, z_b)`` with block-local seeds."""
    bs = structure.block_size
    zb = _block_shape(z, structure)
    dirs = np.eye(bs).reshape((bs,) + (1,) * (zb.ndim - 1) + (bs,))
    c = ad.taylor_coefficients(lambda j: fb(p, j), zb, dirs, 1, check=False)
    val = c[0, 0].sum(axis=-1)
    grad = np.moveaxis(c[1], 0, -1).reshape(z.shape)
    return val, grad


def _block_hessian(fb, p, z, structure):
    """Hessian blocks ``(B, nb, bs, bs)`` of ``sum_b fb(p, z_b)``."""
    bs = structure.block_size
    zb = _block_shape(z, structure)
    dirs, iu, ju = ad.hessian_directions(bs)
    dirs = dirs.reshape((dirs.shape[0],) + (1,) * (zb.ndim - 1) + (bs,))
    c2 = ad.taylor_coefficients(lambda j: fb(p, j), zb, dirs, 2, check=False)[2]
    return ad.assemble_hessian(c2, bs, iu, ju)


def _value_grad(model, p, z):
    """``log p*(z)`` and its gradient for a batch, shapes ``(B,)`` and ``(B, n)``."""
    if model.split_prior:
        val, grad = _block_value_grad(model.block_log_likelihood_p, p, z,
                                      model.likelihood_structure)
        m = model.prior_mean_p(p)
        Q = model.prior_precision_p(p)
        return val + model.log_latent_prior_p(p, z), grad - Q.matvec(z - m)
    if model.structure.kind == "block":
        return _block_value_grad(model.block_log_joint_p, p, z, model.structure)
    return ad.value_and_gradient(lambda zz: model.log_joint_p(p, zz), z, check=False)


def tridiag_coloring(f, z):
    """Band of the Hessian of ``f`` from three coloured Hessian-vector products.

    Seeds ``v_c`` are the indicators of ``i mod 3 == c``. Because a
    tridiagonal row ``i`` touches only columns ``i-1, i, i+1``, which have
    distinct colours, ``H_ii = (H v_{i mod 3})_i`` and
    ``H_{i,i+1} = (H v_{(i+1) mod 3})_i``.

    Parameters
    ----------
    f : callable
        Scalar function of ``(..., n)``.
    z : ndarray, shape (*batch, n)

    Returns
    -------
    diag : ndarray, shape (*batch, n)
    off : ndarray, shape (*batch, n - 1)
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[-1]
    idx = np.arange(n)
    colour = idx % 3
    seeds = (colour[None, :] == np.arange(3)[:, None]).astype(float)
    hv = [ad.hvp(f, z, np.broadcast_to(seeds[c], z.shape), check=False) for c in range(3)]
    hv = np.stack(hv, axis=-1)  # (*batch, n, 3)
    diag = hv[..., idx, colour]
    off = hv[..., idx[:-1], (idx[:-1] + 1) % 3]
    return diag, off


def _neg_hessian(model, p, z):
    """Structured negative Hessian of ``log p*`` at ``z`` (batched)."""
    kind = model.structure.kind
    if model.split_prior:
        lik = _block_hessian(model.block_log_likelihood_p, p, z, model.likelihood_structure)
        Q = model.prior_precision_p(p)
        if isinstance(Q, TridiagonalPrecision) and lik.shape[-1] == 1:
            return TridiagonalPrecision(Q.diag - lik[..., 0, 0], Q.off)
        return DensePrecision(Q.to_dense() - BlockPrecision(lik).to_dense())
    if kind == "block":
        return BlockPrecision(-_block_hessian(model.block_log_joint_p, p, z, model.structure))
    f = lambda zz: model.log_joint_p(p, zz)  # noqa: E731
    if kind == "tridiagonal":
        d, o = tridiag_coloring(f, z)
        return TridiagonalPrecision(-d, -o)
    return DensePrecision(-ad.hessian_dense(f, z, check=False))


def _dense_neg_hessian(model, p, z):
    """Unstructured negative Hessian by polarisation over all pairs."""
    return -ad.hessian_dense(lambda zz: model.log_joint_p(p, zz), z, check=False)


# ---------------------------------------------------------------------------
# Student-t pieces
# ---------------------------------------------------------------------------


def student_log_q0(nu):
    """Log density at zero of a unit-curvature Student-t.

    ``q(w) ∝ (1 + w^2 / (nu + 1))^{-(nu+1)/2}`` has ``-d^2 log q / dw^2 = 1`` at
    zero and ``log q(0) = lgamma((nu+1)/2) - lgamma(nu/2) - 0.5 log(pi (nu+1))``.
    The gamma-function difference is evaluated through ``betaln`` to stay
    accurate for very large ``nu``.

    Examples
    --------
    >>> abs(float(student_log_q0(1e12) + 0.5 * np.log(2 * np.pi))) < 1e-10
    True
    """
    nu = np.asarray(nu, dtype=float)
    return (special.gammaln(0.5) - special.betaln(0.5 * nu, 0.5)
            - 0.5 * np.log(np.pi * (nu + 1.0)))


def student_log_q(w, nu):
    """Unit-curvature Student-t log density at ``w``."""
    nu = np.asarray(nu, dtype=float)
    return student_log_q0(nu) - 0.5 * (nu + 1.0) * np.log1p(w * w / (nu + 1.0))


def _nu_from_coefficients(c2, c4, estimator):
    """Degrees of freedom from directional Taylor coefficients.

    Returns ``(nu_clamped, clamped_mask)``.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        if estimator == "taylor":
            raw = np.where(c4 > 0, c2 * c2 / c4 - 1.0, np.inf)
        else:
            kappa = 18.0 * c4 / (c2 * c2) - 3.0
            raw = np.where(kappa > 0, 4.0 + 6.0 / kappa, np.inf)
    raw = np.where(np.isnan(raw), np.inf, raw)
    nu = np.clip(raw, NU_MIN, NU_MAX)
    return nu, (raw < NU_MIN) | (raw > NU_MAX)


def _directional_coefficients(model, p, z_hat, factor):
    """Taylor coefficients ``(5, n, B)`` along the normalised columns of ``L^{-T}``."""
    cols = factor.inverse_transpose_columns()  # (B, n, n), column j = L^{-T} e_j
    u = np.moveaxis(cols, -1, 0)  # (n, B, n)
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    return ad.taylor_coefficients(lambda zz: model.log_joint_p(p, zz), z_hat, u, 4, check=False)


def estimate_nu(model, theta, z_hat, factor, estimator="taylor"):
    """Per-axis degrees of freedom at the conditional mode.

    Parameters
    ----------
    model : HierarchicalModel
    theta : ndarray, shape (d_theta,) or (B, d_theta)
    z_hat : ndarray, shape (d_z,) or (B, d_z)
    factor : Cholesky factor of the negative Hessian at ``z_hat``
    estimator : {"taylor", "as_written"}

    Returns
    -------
    nu : ndarray, shape (d_z,) or (B, d_z)
        Clamped to ``[NU_MIN, NU_MAX]``.

    Raises
    ------
    NonConcaveDirection
        If the log joint is not strictly concave along some axis.
    """
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    th = theta[None] if single else theta
    z = np.atleast_2d(z_hat)
    if single:
        factor = _expand_factor(factor)
    c = _directional_coefficients(model, model.params(th), z, factor)
    c2, c4 = c[2].T, c[4].T
    if np.any(~(c2 < 0)):
        j = int(np.argwhere(~(c2 < 0))[0, -1])
        raise NonConcaveDirection(f"second derivative along axis {j} is not negative")
    nu, _ = _nu_from_coefficients(c2, c4, estimator)
    return nu[0] if single else nu


def _expand_factor(factor):
    if isinstance(factor, DenseFactor):
        return DenseFactor(factor.L[None])
    if isinstance(factor, BlockFactor):
        return BlockFactor(factor.L[None])
    return TridiagonalFactor(factor.d[None], factor.e[None])


# ---------------------------------------------------------------------------
# batched collapse
# ---------------------------------------------------------------------------


def _valid_cache(cache, B, n):
    """Per-row mask of usable warm-start rows."""
    if cache is None:
        return np.zeros(B, dtype=bool)
    z_hat, factor = cache
    z_hat = np.asarray(z_hat, dtype=float)
    if z_hat.shape != (B, n) or getattr(factor, "dim", None) != n:
        return None
    piv = factor.pivots()
    if piv.shape[:1] != (B,):
        return None
    return (np.all(np.isfinite(z_hat), axis=-1)
            & np.all(np.isfinite(piv) & (piv > 0), axis=-1))


def collapse_batch(model, theta, cache=None, options=CollapseOptions()):
    """Collapse the latents for a batch of hyperparameters.

    Parameters
    ----------
    model : HierarchicalModel
    theta : ndarray, shape (B, d_theta)
    cache : tuple, optional
        ``(z_hat, factor)`` from an earlier call with the same batch size; rows
        with an unusable cache fall back to the prior and carry
        ``Flag.WARM_FALLBACK``.
    options : CollapseOptions

    Returns
    -------
    CollapseBatch
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    B, n = theta.shape[0], model.d_z
    p = model.params(theta)
    flags = np.zeros(B, dtype=int)
    pf = model.flags(p)
    if pf is not None:
        flags |= np.asarray(pf, dtype=int)

    m0 = model.prior_mean_p(p)
    prior_factor, prior_ok, _ = model.prior_precision_p(p).cholesky_batch()
    bad_prior = ~np.asarray(prior_ok, dtype=bool) | ~np.all(np.isfinite(m0), axis=-1)
    if bad_prior.any():
        flags[bad_prior] |= Flag.NONFINITE
        # placeholder whitening for rows that are discarded anyway
        m0 = np.where(bad_prior[:, None], 0.0, m0)
        prior_factor = prior_factor.put(bad_prior, _unit_factor(prior_factor, n))

    z0, factor0 = m0, prior_factor
    if cache is not None and options.warm_start:
        valid = _valid_cache(cache, B, n)
        if valid is None:
            flags |= Flag.WARM_FALLBACK
        else:
            flags[~valid] |= Flag.WARM_FALLBACK
            use = valid & ~bad_prior
            if use.any():
                z0 = np.where(use[:, None], cache[0], m0)
                factor0 = prior_factor.put(use, cache[1])
    active = np.flatnonzero(~bad_prior)
    z_hat = np.array(z0, dtype=float, copy=True)
    log_joint = np.full(B, -np.inf)
    n_iter = np.zeros(B, dtype=int)
    gnorm = np.full(B, np.nan)
    status = np.full(B, STATUS_NONFINITE)
    transform = WhiteningTransform(z0, factor0)
    rows = active
    for attempt in range(options.restarts + 1):
        if rows.size == 0:
            break
        res = _run_lbfgs(model, p, rows, transform.take(rows), options.lbfgs)
        z_hat[rows] = transform.take(rows).backward(res.x)
        log_joint[rows] = -res.fun
        n_iter[rows] += res.n_iter
        gnorm[rows] = res.grad_norm
        status[rows] = res.status
        # re-whiten with the local curvature where L-BFGS ran out of steps
        rows = rows[(res.status == STATUS_MAXITER) | (res.status == STATUS_STALLED)]
        if rows.size == 0 or attempt == options.restarts:
            break
        pr = take_params(p, rows)
        with np.errstate(all="ignore"):
            Hr = _neg_hessian(model, pr, z_hat[rows])
        fr, okr, _ = Hr.cholesky_batch()
        okr = np.asarray(okr, dtype=bool) & np.all(np.isfinite(z_hat[rows]), axis=-1)
        rows = rows[okr]
        if rows.size == 0:
            break
        mask = np.zeros(B, dtype=bool)
        mask[rows] = True
        transform = WhiteningTransform(np.where(mask[:, None], z_hat, transform.z0),
                                       transform.factor.put(mask, _scatter(fr, okr, B, mask)))
    flags[status == STATUS_MAXITER] |= Flag.NONCONVERGED
    flags[status == STATUS_STALLED] |= Flag.STALLED
    flags[(status == STATUS_NONFINITE) & ~bad_prior] |= Flag.NONFINITE

    with np.errstate(all="ignore"):
        H = _neg_hessian(model, p, np.where(np.isfinite(z_hat), z_hat, 0.0))
    factor, ok, _ = H.cholesky_batch()
    ok = np.asarray(ok, dtype=bool)
    flags[~ok & ~bad_prior] |= Flag.INDEFINITE
    failed = (flags & (Flag.INDEFINITE | Flag.NONFINITE)) != 0
    failed |= ~np.isfinite(log_joint)
    if failed.any():
        factor = factor.put(failed, _unit_factor(factor, n))
    hld = np.where(failed, np.nan, factor.half_logdet())

    out = CollapseBatch(logl=np.full(B, -np.inf), z_hat=z_hat, factor=factor, half_logdet=hld,
                        log_joint=log_joint, flags=flags, n_iter=n_iter, grad_norm=gnorm)
    good = ~failed
    if options.method == "gaussian":
        out.logl[good] = log_joint[good] + 0.5 * n * LOG_2PI - hld[good]
    else:
        _student_terms(model, p, out, good, options)
    bad_val = good & ~np.isfinite(out.logl)
    out.flags[bad_val] |= Flag.NONFINITE
    out.logl[bad_val] = -np.inf
    return out


def _run_lbfgs(model, p, rows, transform, opts):
    """L-BFGS on the whitened negative log joint for the subset ``rows``."""

    def fg(x, sub):
        pr = take_params(p, rows[sub])
        tr = transform.take(sub)
        z = tr.backward(x)
        with np.errstate(all="ignore"):
            val, grad = _value_grad(model, pr, z)
        return -val, tr.gradient_to_white(-grad)

    return lbfgs_batch(fg, np.zeros((rows.size, transform.dim)), opts)


def _scatter(factor, keep, B, mask):
    """Embed the ``keep`` rows of a subset factor into a batch of size ``B``."""
    sub = factor.take(np.flatnonzero(keep))
    if isinstance(sub, TridiagonalFactor):
        d = np.ones((B,) + sub.d.shape[1:])
        e = np.zeros((B,) + sub.e.shape[1:])
        d[mask], e[mask] = sub.d, sub.e
        return TridiagonalFactor(d, e)
    L = np.zeros((B,) + sub.L.shape[1:])
    L[mask] = sub.L
    return type(sub)(L)


def _unit_factor(factor, n):
    """Identity factor matching the layout of ``factor`` (for discarded rows)."""
    if isinstance(factor, DenseFactor):
        return DenseFactor(np.eye(n))
    if isinstance(factor, BlockFactor):
        bs = factor.L.shape[-1]
        return BlockFactor(np.broadcast_to(np.eye(bs), (n // bs, bs, bs)))
    return TridiagonalFactor(np.ones(n), np.zeros(n - 1))


def _student_terms(model, p, out, good, options):
    B, n = out.z_hat.shape
    out.nu = np.full((B, n), np.nan)
    out.nu_as_written = np.full((B, n), np.nan)
    out.log_q0 = np.full((B, n), np.nan)
    rows = np.flatnonzero(good)
    if rows.size == 0:
        return
    if options.nu is not None:
        nu = np.full((rows.size, n), float(options.nu))
        clamped = np.zeros(rows.size, dtype=bool)
    else:
        with np.errstate(all="ignore"):
            c = _directional_coefficients(model, take_params(p, rows), out.z_hat[rows],
                                          out.factor.take(rows))
        c2, c4 = c[2].T, c[4].T
        concave = np.all(c2 < 0, axis=-1)
        nu_t, cl_t = _nu_from_coefficients(c2, c4, "taylor")
        nu_w, cl_w = _nu_from_coefficients(c2, c4, "as_written")
        out.nu_as_written[rows] = nu_w
        nu, cl = (nu_t, cl_t) if options.nu_estimator == "taylor" else (nu_w, cl_w)
        clamped = np.any(cl, axis=-1)
        if not concave.all():
            out.flags[rows[~concave]] |= Flag.INDEFINITE
            good[rows[~concave]] = False
    out.nu[rows] = nu
    out.flags[rows[clamped]] |= Flag.NU_CLAMPED
    logq0 = student_log_q0(nu)
    out.log_q0[rows] = logq0
    r = np.flatnonzero(good)
    out.logl[r] = out.log_joint[r] - out.half_logdet[r] - np.sum(out.log_q0[r], axis=-1)


# ---------------------------------------------------------------------------
# single-theta API
# ---------------------------------------------------------------------------


def conditional_map(model, theta, cache=None, options=CollapseOptions()):
    """Conditional mode ``z_hat(theta)`` of the latent log joint.

    Returns
    -------
    OptResult
        ``x`` is the mode, ``fun`` the negative log joint there and
        ``grad_norm`` the Hessian-preconditioned gradient norm.

    Raises
    ------
    NonFiniteObjective
        If the log joint is not finite along the optimisation path.

    Examples
    --------
    >>> from collapsed_ns.models import get_model
    >>> res = conditional_map(get_model("linear_gaussian"), [0.0])
    >>> round(float(res.x[0]), 8)
    1.0
    """
    res = collapse_batch(model, np.atleast_2d(theta), _batch_cache(cache), options)
    if res.flags[0] & Flag.NONFINITE:
        raise NonFiniteObjective("log joint not finite during conditional optimisation")
    status = (STATUS_MAXITER if res.flags[0] & Flag.NONCONVERGED
              else STATUS_STALLED if res.flags[0] & Flag.STALLED else STATUS_CONVERGED)
    return OptResult(x=res.z_hat[0], fun=float(-res.log_joint[0]),
                     grad_norm=float(res.grad_norm[0]), n_iter=int(res.n_iter[0]),
                     converged=status == STATUS_CONVERGED, status=status)


def _batch_cache(cache):
    if cache is None:
        return None
    z_hat, factor = cache
    return np.asarray(z_hat)[None], _expand_factor(factor)


def latent_hessian(model, theta, z, structure=None, *, check=True, debug=False):
    """Negative Hessian of ``log p*`` at ``z`` in the requested structure.

    Parameters
    ----------
    structure : LatentStructure, optional
        Defaults to the model's own structure. Passing a dense structure
        forces full polarisation over all pairs, which is the reference the
        structured paths are checked against.
    check : bool
        Raise :class:`IndefiniteHessian` if the result is not positive definite.
    debug : bool
        For tridiagonal models, also build the dense Hessian and raise
        :class:`StructureViolation` if it has entries outside the band.
    """
    theta2 = np.atleast_2d(np.asarray(theta, dtype=float))
    z2 = np.atleast_2d(np.asarray(z, dtype=float))
    p = model.params(theta2)
    if structure is not None and structure.kind == "dense":
        H = DensePrecision(_dense_neg_hessian(model, p, z2))
    else:
        if debug and model.structure.kind == "tridiagonal":
            TridiagonalPrecision.from_dense(_dense_neg_hessian(model, p, z2)[0], check=True)
        H = _neg_hessian(model, p, z2)
    if check:
        H.cholesky()
    return H.take(0) if np.ndim(theta) == 1 else H


def half_logdet(H):
    """Half log-determinant of a structured SPD matrix (raises if indefinite).

    Examples
    --------
    >>> round(float(half_logdet(TridiagonalPrecision([2.0, 2, 2], [-1.0, -1]))), 6)
    0.693147
    """
    return H.half_logdet()


def collapsed_loglik_gaussian(model, theta, cache=None, options=None):
    """Gaussian-collapsed log likelihood at one ``theta``.

    ``result.cache`` warm-starts the next call.

    Examples
    --------
    >>> from collapsed_ns.models import get_model
    >>> round(collapsed_loglik_gaussian(get_model("linear_gaussian"), [0.0]).logl, 6)
    -2.265512
    """
    opts = options or CollapseOptions()
    if opts.method != "gaussian":
        opts = dataclasses.replace(opts, method="gaussian")
    return collapse_batch(model, np.atleast_2d(theta), _batch_cache(cache), opts).take(0)


def collapsed_loglik_student(model, theta, nu=None, cache=None, options=None):
    """Student-t collapsed log likelihood at one ``theta``.

    Parameters
    ----------
    nu : float, optional
        Fixed degrees of freedom; estimated per axis when omitted.
    """
    base = options or CollapseOptions()
    opts = dataclasses.replace(base, method="student", nu=nu if nu is not None else base.nu)
    return collapse_batch(model, np.atleast_2d(theta), _batch_cache(cache), opts).take(0)
