"""Common interface for hierarchical models with marginalised latents.

Conventions
-----------
Hyperparameters ``theta`` are handled in batches of shape ``(B, d_theta)``.
:meth:`HierarchicalModel.params` turns a batch into a dictionary of arrays
whose leading axis is ``B`` and whose trailing shape broadcasts against the
latent axis, so the log densities accept latents of shape ``(..., B, d_z)``
(including :class:`~collapsed_ns.autodiff.Jet` values). Single ``theta``
vectors are accepted by the public wrappers for convenience.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .. import autodiff as ad
from ..structure import LatentStructure

SCHEMA_VERSION = "1.0"
LOG_2PI = math.log(2.0 * math.pi)

__all__ = ["HierarchicalModel", "SyntheticDataset", "take_params", "LOG_2PI"]


def take_params(p, rows):
    """Subset every batched parameter array."""
    return {k: v[rows] for k, v in p.items()}


def norm_logpdf(x, mean, var):
    """Gaussian log density, evaluable on jets."""
    r = x - mean
    return -0.5 * (r * r) / var - 0.5 * np.log(var) - 0.5 * LOG_2PI


def ndtri(u):
    """Standard normal quantile."""
    return special.ndtri(u)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


@dataclass
class SyntheticDataset:
    """Observations plus the parameters used to generate them."""

    seed: int
    observations: dict
    truth: dict = field(default_factory=dict)
    model: str = ""

    def to_json(self):
        return json.dumps({
            "schema_version": SCHEMA_VERSION,
            "model": self.model,
            "seed": self.seed,
            "observations": _to_jsonable(self.observations),
            "truth": _to_jsonable(self.truth),
        })

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        obs = {k: np.asarray(v) for k, v in obj["observations"].items()}
        return cls(seed=obj["seed"], observations=obs, truth=obj.get("truth", {}),
                   model=obj.get("model", ""))


class HierarchicalModel:
    """Base class for models ``p(D | theta, z) pi(z | theta) pi(theta)``.

    Subclasses implement :meth:`_generate`, :meth:`prior_transform`,
    :meth:`params`, :meth:`log_likelihood_p`, :meth:`log_latent_prior_p`,
    :meth:`prior_mean_p` and :meth:`prior_precision_p`. Block-structured
    models also implement :meth:`block_log_joint_p`.
    """

    name = "model"
    theta_names: tuple = ()
    #: latent prior is Gaussian with mean ``prior_mean`` and precision ``prior_precision``
    gaussian_latent_prior = True
    #: collapse may add the analytic Gaussian prior terms to autodiff likelihood derivatives
    split_prior = False
    #: structure of the likelihood-only Hessian used when ``split_prior`` is set
    likelihood_structure = None
    #: name of the exact reference, if any
    reference = None

    def __init__(self, data=None, seed=42):
        self.seed = seed
        if data is None:
            obs, truth = self._generate(np.random.default_rng(seed))
            data = SyntheticDataset(seed=seed, observations=obs, truth=truth, model=self.name)
        elif isinstance(data, dict):
            data = SyntheticDataset(seed=seed, observations=data, model=self.name)
        self.dataset = data
        self.data = data.observations
        self._setup()

    # -- to override -----------------------------------------------------
    def _generate(self, rng):
        raise NotImplementedError

    def _setup(self):
        """Derived constants computed once from the data."""

    structure: LatentStructure

    def prior_transform(self, u):
        raise NotImplementedError

    def params(self, theta):
        raise NotImplementedError

    def log_likelihood_p(self, p, z):
        raise NotImplementedError

    def log_latent_prior_p(self, p, z):
        raise NotImplementedError

    def prior_mean_p(self, p):
        raise NotImplementedError

    def prior_precision_p(self, p):
        raise NotImplementedError

    def block_log_joint_p(self, p, zb):
        """Per-block log joint for block-structured models, shape ``(..., B, nb)``."""
        raise NotImplementedError

    def block_log_likelihood_p(self, p, zb):
        raise NotImplementedError

    def exact_marginal_batch(self, theta):
        raise NotImplementedError(f"{self.name} has no exact marginal")

    # -- provided --------------------------------------------------------
    @property
    def d_theta(self):
        return len(self.theta_names)

    @property
    def d_z(self):
        return self.structure.dim

    @property
    def has_exact(self):
        return self.reference is not None

    def log_joint_p(self, p, z):
        return self.log_likelihood_p(p, z) + self.log_latent_prior_p(p, z)

    def _batched(self, theta):
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        return (theta[None] if single else theta), single

    def _wrap(self, fn, theta, z):
        theta2, single = self._batched(theta)
        p = self.params(theta2)
        out = fn(p, z)
        if single and not isinstance(z, ad.Jet) and np.ndim(z) == 1:
            return ad.value_of(out).reshape(()) * 1.0
        return out

    def log_joint(self, theta, z):
        """``log L(D | theta, z) + log pi(z | theta)``."""
        return self._wrap(self.log_joint_p, theta, z)

    def log_likelihood(self, theta, z):
        return self._wrap(self.log_likelihood_p, theta, z)

    def log_latent_prior(self, theta, z):
        return self._wrap(self.log_latent_prior_p, theta, z)

    def prior_mean(self, theta):
        theta2, single = self._batched(theta)
        m = self.prior_mean_p(self.params(theta2))
        return m[0] if single else m

    def prior_precision(self, theta):
        theta2, single = self._batched(theta)
        P = self.prior_precision_p(self.params(theta2))
        return P.take(0) if single else P

    def exact_marginal(self, theta):
        """Exact log marginal likelihood (collapse-free reference)."""
        theta2, single = self._batched(theta)
        out = self.exact_marginal_batch(theta2)
        return float(out[0]) if single else out

    def latent_from_unit(self, theta, u):
        """Map unit-cube coordinates to a latent draw from ``pi(z | theta)``.

        The default uses ``z = m + L^{-T} Phi^{-1}(u)`` for Gaussian priors
        with precision ``L L^T``.
        """
        theta2, single = self._batched(theta)
        u = np.atleast_2d(u)
        p = self.params(theta2)
        factor = self.prior_precision_p(p).cholesky()
        z = self.prior_mean_p(p) + factor.solve_lt(ndtri(u))
        return z[0] if single else z

    def flags(self, p):
        """Per-theta reason codes raised while building ``params`` (B,)."""
        return p.get("_flags", None)

    def describe(self):
        return {"name": self.name, "d_theta": self.d_theta, "d_z": self.d_z,
                "structure": self.structure.kind, "theta_names": list(self.theta_names),
                "reference": self.reference}
