"""Forward-mode truncated Taylor arithmetic.

A :class:`Jet` carries the Taylor coefficients ``c_0, ..., c_K`` of a scalar
function along a seed direction, ``f(x + t v) = sum_r c_r t^r + O(t^{K+1})``.
Coefficients are stored in a single array of shape ``(K + 1, *shape)`` so that
many directions and many evaluation points propagate in one vectorised pass.

All derivative drivers in this module treat the last axis of ``x`` as the
differentiation axis. Functions may broadcast over leading axes, which is how
batched evaluation and block-local colouring are implemented.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .errors import InvalidDirection, NonFiniteDerivative

MAX_ORDER = 4

__all__ = [
    "Jet",
    "exp",
    "log",
    "tanh",
    "sqrt",
    "logistic",
    "lgamma",
    "power",
    "sum",
    "matvec",
    "dot",
    "value_of",
    "taylor_coefficients",
    "gradient",
    "value_and_gradient",
    "hvp",
    "hessian_dense",
    "directional_taylor",
]


def _conv(a, b, k):
    """Cauchy product coefficient ``sum_{j=0}^{k} a_j b_{k-j}``."""
    out = a[0] * b[k]
    for j in range(1, k + 1):
        out = out + a[j] * b[k - j]
    return out


class Jet:
    """Truncated Taylor polynomial with array-valued coefficients.

    Parameters
    ----------
    coeffs : array_like, shape (order + 1, *shape)
        Taylor coefficients; ``coeffs[0]`` is the primal value.
    """

    __slots__ = ("c",)
    __array_priority__ = 1000

    def __init__(self, coeffs):
        self.c = np.asarray(coeffs, dtype=float)

    @classmethod
    def seed(cls, x, directions, order):
        """Jet for ``x + t * d`` with one coefficient slice per direction.

        Parameters
        ----------
        x : ndarray, shape (*batch, n)
        directions : ndarray, shape (P, *batch', n)
            Broadcastable against ``x`` after prepending the direction axis.
        order : int
        """
        x = np.asarray(x, dtype=float)
        directions = np.asarray(directions, dtype=float)
        shape = np.broadcast_shapes(directions.shape, (1,) + x.shape)
        c = np.zeros((order + 1,) + shape)
        c[0] = x
        if order >= 1:
            c[1] = directions
        return cls(c)

    @property
    def order(self):
        return self.c.shape[0] - 1

    @property
    def shape(self):
        return self.c.shape[1:]

    @property
    def ndim(self):
        return self.c.ndim - 1

    @property
    def value(self):
        return self.c[0]

    def __repr__(self):
        return f"Jet(order={self.order}, shape={self.shape})"

    def __len__(self):
        return self.shape[0]

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Jet(self.c[(slice(None),) + idx])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Jet(self.c.reshape((self.c.shape[0],) + tuple(shape)))

    def sum(self, axis=None):
        return sum(self, axis=axis)

    # arithmetic -------------------------------------------------------
    def _const_add(self, other, sign=1.0):
        other = np.asarray(other, dtype=float)
        shape = np.broadcast_shapes(self.shape, other.shape)
        out = np.empty((self.c.shape[0],) + shape)
        out[0] = sign * self.c[0] + other
        out[1:] = sign * self.c[1:] if sign != 1.0 else self.c[1:]
        return Jet(out)

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.c + other.c)
        return self._const_add(other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            return Jet(self.c - other.c)
        return self._const_add(-np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return self._const_add(other, sign=-1.0)

    def __neg__(self):
        return Jet(-self.c)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if isinstance(other, Jet):
            a, b = self.c, other.c
            return Jet(np.stack([_conv(a, b, k) for k in range(a.shape[0])]))
        return Jet(self.c * np.asarray(other, dtype=float))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return _div(self.c, other.c)
        return Jet(self.c / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        other = np.asarray(other, dtype=float)
        a = np.zeros_like(self.c) + np.zeros(other.shape)
        a[0] = a[0] + other
        return _div(a, self.c)

    def __pow__(self, r):
        return power(self, r)


def _div(a, b):
    c = np.empty(np.broadcast_shapes(a.shape, b.shape))
    inv = 1.0 / b[0]
    for k in range(c.shape[0]):
        acc = a[k]
        for j in range(k):
            acc = acc - c[j] * b[k - j]
        c[k] = acc * inv
    return Jet(c)


def value_of(x):
    """Primal value of a jet or the array itself."""
    return x.c[0] if isinstance(x, Jet) else x


def exp(x):
    """Exponential."""
    if not isinstance(x, Jet):
        return np.exp(x)
    a = x.c
    b = np.empty_like(a)
    b[0] = np.exp(a[0])
    for k in range(1, a.shape[0]):
        acc = a[1] * b[k - 1]
        for j in range(2, k + 1):
            acc = acc + j * a[j] * b[k - j]
        b[k] = acc / k
    return Jet(b)


def log(x):
    """Natural logarithm."""
    if not isinstance(x, Jet):
        return np.log(x)
    a = x.c
    b = np.empty_like(a)
    b[0] = np.log(a[0])
    inv = 1.0 / a[0]
    for k in range(1, a.shape[0]):
        acc = a[k]
        for j in range(1, k):
            acc = acc - (j / k) * b[j] * a[k - j]
        b[k] = acc * inv
    return Jet(b)


def sqrt(x):
    """Square root."""
    if not isinstance(x, Jet):
        return np.sqrt(x)
    a = x.c
    b = np.empty_like(a)
    b[0] = np.sqrt(a[0])
    inv = 0.5 / b[0]
    for k in range(1, a.shape[0]):
        acc = a[k]
        for j in range(1, k):
            acc = acc - b[j] * b[k - j]
        b[k] = acc * inv
    return Jet(b)


def power(x, r):
    """Real power ``x**r`` for a constant exponent ``r``."""
    if not isinstance(x, Jet):
        return np.power(x, r)
    if float(r).is_integer() and 0 <= r <= 4:
        r = int(r)
        if r == 0:
            out = np.zeros_like(x.c)
            out[0] = 1.0
            return Jet(out)
        out = x
        for _ in range(r - 1):
            out = out * x
        return out
    a = x.c
    b = np.empty_like(a)
    b[0] = np.power(a[0], r)
    inv = 1.0 / a[0]
    for k in range(1, a.shape[0]):
        acc = r * k * a[k] * b[0]
        for j in range(1, k):
            acc = acc + (r * (k - j) - j) * a[k - j] * b[j]
        b[k] = acc * inv / k
    return Jet(b)


def tanh(x):
    """Hyperbolic tangent, via ``y' = (1 - y^2) x'``."""
    if not isinstance(x, Jet):
        return np.tanh(x)
    a = x.c
    y = np.empty_like(a)
    s = np.empty_like(a)
    y[0] = np.tanh(a[0])
    s[0] = 1.0 - y[0] * y[0]
    for k in range(1, a.shape[0]):
        acc = a[1] * s[k - 1]
        for j in range(2, k + 1):
            acc = acc + j * a[j] * s[k - j]
        y[k] = acc / k
        s[k] = -_conv(y, y, k)
    return Jet(y)


def logistic(x):
    """Logistic sigmoid, via ``y' = (y - y^2) x'``."""
    if not isinstance(x, Jet):
        return special.expit(x)
    a = x.c
    y = np.empty_like(a)
    u = np.empty_like(a)
    y[0] = special.expit(a[0])
    u[0] = y[0] * special.expit(-a[0])
    for k in range(1, a.shape[0]):
        acc = a[1] * u[k - 1]
        for j in range(2, k + 1):
            acc = acc + j * a[j] * u[k - j]
        y[k] = acc / k
        u[k] = y[k] - _conv(y, y, k)
    return Jet(y)


def _compose(x, derivs):
    """Taylor composition ``g(x)`` from derivatives ``g^{(r)}(x_0)``."""
    a = x.c
    h = a.copy()
    h[0] = 0.0
    out = np.zeros_like(a)
    out[0] = derivs[0]
    hp = Jet(h)
    power_r = hp
    for r in range(1, a.shape[0]):
        out = out + (derivs[r] / math.factorial(r)) * power_r.c
        if r + 1 < a.shape[0]:
            power_r = power_r * hp
    return Jet(out)


def lgamma(x):
    """Logarithm of the absolute gamma function.

    Derivatives are digamma and polygamma values from :mod:`scipy.special`,
    which are accurate to near machine precision for positive arguments.
    """
    if not isinstance(x, Jet):
        return special.gammaln(x)
    a0 = x.c[0]
    derivs = [special.gammaln(a0), special.digamma(a0)]
    derivs += [special.polygamma(r, a0) for r in range(1, x.order)]
    return _compose(x, derivs)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    """Sum over value axes."""
    if not isinstance(x, Jet):
        return np.sum(x, axis=axis)
    if axis is None:
        axis = tuple(range(1, x.c.ndim))
    elif isinstance(axis, tuple):
        axis = tuple(ax if ax < 0 else ax + 1 for ax in axis)
    elif axis >= 0:
        axis = axis + 1
    return Jet(x.c.sum(axis=axis))


def dot(x, w):
    """Inner product over the last axis."""
    return sum(x * w, axis=-1)


def matvec(A, x):
    """Matrix-vector product ``A @ x`` over the last axis of ``x``.

    ``A`` has shape ``(*batch, n, n)`` where ``batch`` matches the trailing
    batch axes of ``x``; extra leading axes of ``x`` (directions, orders)
    are folded into one matrix product.
    """
    A = np.asarray(A, dtype=float)
    if not isinstance(x, Jet):
        return np.matmul(A, np.asarray(x)[..., None])[..., 0]
    c = x.c
    if A.ndim == 2:
        return Jet(c @ A.T)
    nb = A.ndim - 2
    batch = c.shape[c.ndim - 1 - nb:-1]
    lead = c.shape[: c.ndim - 1 - nb]
    m = int(np.prod(lead))
    n = c.shape[-1]
    flat = c.reshape((m,) + batch + (n,))
    flat = np.moveaxis(flat, 0, -2)
    out = np.matmul(flat, np.swapaxes(A, -1, -2))
    out = np.moveaxis(out, -2, 0)
    return Jet(out.reshape(lead + batch + (out.shape[-1],)))


# ---------------------------------------------------------------------------
# derivative drivers
# ---------------------------------------------------------------------------


def _check_finite(c, what):
    bad = ~np.isfinite(c)
    if bad.any():
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteDerivative(
            f"non-finite {what} coefficient at (order, *index)={index}", index=index
        )


def _as_jet(out, like):
    if isinstance(out, Jet):
        return out
    # function did not depend on its input
    c = np.zeros((like.c.shape[0],) + np.broadcast_shapes(np.shape(out), like.shape[:-1]))
    c[0] = out
    return Jet(c)


def taylor_coefficients(f, x, directions, order, *, check=True):
    """Taylor coefficients of ``f`` along each direction.

    Parameters
    ----------
    f : callable
        Maps an array (or :class:`Jet`) of shape ``(..., n)`` to ``(...)``.
    x : ndarray, shape (*batch, n)
    directions : ndarray, shape (P, *batch', n)
    order : int
    check : bool
        Raise :class:`NonFiniteDerivative` on any non-finite coefficient.

    Returns
    -------
    ndarray, shape (order + 1, P, *batch)
    """
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in [0, {MAX_ORDER}], got {order}")
    jet = Jet.seed(x, directions, order)
    out = _as_jet(f(jet), jet)
    if check:
        _check_finite(out.c, "Taylor")
    return out.c


def value_and_gradient(f, x, *, check=True):
    """Value and gradient from ``n`` first-order directions in one pass.

    Returns
    -------
    value : ndarray, shape (*batch)
    grad : ndarray, shape (*batch, n)
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    eye = np.eye(n).reshape((n,) + (1,) * (x.ndim - 1) + (n,))
    c = taylor_coefficients(f, x, eye, 1, check=check)
    return c[0, 0], np.moveaxis(c[1], 0, -1)


def gradient(f, x, *, check=True):
    """Gradient of a scalar function.

    Examples
    --------
    >>> gradient(lambda x: x[..., 0] ** 2 + 3 * x[..., 1], [2.0, 5.0])
    array([4., 3.])
    """
    return value_and_gradient(f, x, check=check)[1]


def hvp(f, x, v, *, check=True):
    """Hessian-vector product by second-order polarisation.

    Uses ``(H v)_i = [D^2 f(v + e_i) - D^2 f(v - e_i)] / 4`` where ``D^2 f(d)``
    is the second directional derivative ``d^T H d``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = x.shape[-1]
    eye = np.eye(n).reshape((n,) + (1,) * (x.ndim - 1) + (n,))
    dirs = np.concatenate([v[None] + eye, v[None] - eye])
    c2 = taylor_coefficients(f, x, dirs, 2, check=check)[2]
    return np.moveaxis((c2[:n] - c2[n:]) / 2.0, 0, -1)


def hessian_directions(n):
    """Seed directions ``e_i`` then ``e_i + e_j`` (i < j) for dense Hessians."""
    iu, ju = np.triu_indices(n, 1)
    dirs = np.zeros((n + iu.size, n))
    dirs[np.arange(n), np.arange(n)] = 1.0
    rows = n + np.arange(iu.size)
    dirs[rows, iu] = 1.0
    dirs[rows, ju] = 1.0
    return dirs, iu, ju


def assemble_hessian(c2, n, iu, ju):
    """Assemble ``H`` from second coefficients of :func:`hessian_directions`.

    ``c2`` has the direction axis first and batch axes after it.
    """
    diag = 2.0 * c2[:n]
    batch = c2.shape[1:]
    H = np.empty(batch + (n, n))
    idx = np.arange(n)
    H[..., idx, idx] = np.moveaxis(diag, 0, -1)
    off = c2[n:] - 0.5 * (diag[iu] + diag[ju])
    off = np.moveaxis(off, 0, -1)
    H[..., iu, ju] = off
    H[..., ju, iu] = off
    return H


def hessian_dense(f, x, *, check=True, max_elements=4_000_000):
    """Dense Hessian from ``n(n+1)/2`` second-order directions.

    Diagonal entries come from ``e_i`` and off-diagonal entries from
    ``e_i + e_j`` by polarisation; the result is exactly symmetric.
    Directions are processed in chunks holding at most ``max_elements``
    coefficient entries.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    dirs, iu, ju = hessian_directions(n)
    per_dir = 3 * max(x.size, 1)
    chunk = max(1, max_elements // per_dir)
    pad = (1,) * (x.ndim - 1)
    parts = []
    for start in range(0, dirs.shape[0], chunk):
        d = dirs[start:start + chunk]
        d = d.reshape((d.shape[0],) + pad + (n,))
        parts.append(taylor_coefficients(f, x, d, 2, check=check)[2])
    c2 = np.concatenate(parts, axis=0)
    return assemble_hessian(c2, n, iu, ju)


def directional_taylor(f, x, v, order):
    """Taylor coefficients ``c_0..c_order`` of ``t -> f(x + t v)``.

    Parameters
    ----------
    v : ndarray
        Unit direction, ``| |v| - 1 | <= 1e-12``.

    Examples
    --------
    >>> directional_taylor(lambda x: x[..., 0] ** 4, [0.0], [1.0], 4)
    array([0., 0., 0., 0., 1.])
    """
    if order not in (1, 2, 3, 4):
        raise ValueError("order must be 1, 2, 3 or 4")
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise InvalidDirection(f"direction has norm {np.linalg.norm(v)!r}, expected 1")
    c = taylor_coefficients(f, x, v[None], order)
    return c[:, 0]
