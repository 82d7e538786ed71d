"""Hyperparameters of the per-cell gamma firing-rate prior.

Two routes: Hamiltonian Monte Carlo on ``(log a, log b)`` under a flat prior
on the logs, and an empirical-Bayes negative-binomial fit done once on the
raw counts.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import digamma, gammaln

from .distributions import GammaHyper, negbinom_logpmf
from .errors import DegenerateData, DomainError


@dataclass(frozen=True)
class HmcConfig:
    n_leapfrog: int = 10
    step_size: float = 0.14
    mass: float = 1.0

    def __post_init__(self):
        if self.n_leapfrog < 1 or not self.step_size > 0 or not self.mass > 0:
            raise DomainError(f"invalid HMC settings {self}")


def hyper_logpdf(pos, rates):
    """Log density of ``(log a, log b)`` given rates, up to a constant.

    ``pos`` has shape ``(..., 2)`` and ``rates`` shape ``(..., m)``; the
    leading dimensions index independent cells.
    """
    pos = np.asarray(pos, dtype=float)
    rates = np.asarray(rates, dtype=float)
    a = np.exp(pos[..., 0])
    b = np.exp(pos[..., 1])
    m = rates.shape[-1]
    return (m * (a * pos[..., 1] - gammaln(a))
            + (a - 1.0) * np.log(rates).sum(axis=-1) - b * rates.sum(axis=-1))


def hyper_grad(pos, rates):
    """Gradient of :func:`hyper_logpdf` with respect to ``(log a, log b)``."""
    pos = np.asarray(pos, dtype=float)
    rates = np.asarray(rates, dtype=float)
    a = np.exp(pos[..., 0])
    b = np.exp(pos[..., 1])
    m = rates.shape[-1]
    da = a * (m * (pos[..., 1] - digamma(a)) + np.log(rates).sum(axis=-1))
    db = b * (m * a / b - rates.sum(axis=-1))
    return np.stack([da, db], axis=-1)


def leapfrog(position, momentum, grad, step_size, n_steps, mass=1.0):
    """Run ``n_steps`` leapfrog steps on ``H = -logpdf + |p|^2 / (2 mass)``."""
    q = np.array(position, dtype=float)
    p = np.array(momentum, dtype=float)
    p = p + 0.5 * step_size * grad(q)
    for k in range(n_steps):
        q = q + step_size * p / mass
        if k < n_steps - 1:
            p = p + step_size * grad(q)
    p = p + 0.5 * step_size * grad(q)
    return q, p


def hmc_step(rng, logpdf, grad, position, config: HmcConfig = HmcConfig()):
    """One HMC transition with a Metropolis correction.

    ``position`` may be a single point of shape ``(d,)`` or a batch of
    independent points of shape ``(n, d)``; each row is accepted or
    rejected on its own. A trajectory with a non-finite Hamiltonian is
    rejected.

    Returns ``(new_position, accepted)``.
    """
    q0 = np.asarray(position, dtype=float)
    p0 = rng.standard_normal(q0.shape) * np.sqrt(config.mass)
    with np.errstate(all="ignore"):
        h0 = -logpdf(q0) + 0.5 * (p0 ** 2).sum(axis=-1) / config.mass
        q1, p1 = leapfrog(q0, p0, grad, config.step_size, config.n_leapfrog, config.mass)
        h1 = -logpdf(q1) + 0.5 * (p1 ** 2).sum(axis=-1) / config.mass
        log_u = np.log(rng.random(np.shape(h0)))
        ok = np.isfinite(h1) & np.all(np.isfinite(q1), axis=-1) & (log_u < h0 - h1)
    new = np.where(np.asarray(ok)[..., None], q1, q0)
    if q0.ndim == 1:
        return new, bool(ok)
    return new, ok


def _nb_profile_grad(a, exceed, T, mean):
    """d/da of the negative-binomial log-likelihood with the rate profiled out.

    Uses ``digamma(a + y) - digamma(a) = sum_{k<y} 1 / (a + k)`` for integer
    ``y``; ``exceed[k]`` is the number of counts greater than ``k``. This form
    has no cancellation when ``a`` is large.
    """
    k = np.arange(exceed.size)
    return float((exceed / (a + k)).sum() - T * np.log1p(mean / a))


def eb_fit(counts_row, a_bounds=(1e-6, 1e8)) -> GammaHyper:
    """Maximum-likelihood gamma prior for one cell's counts.

    The counts are modeled as i.i.d. negative binomial, the marginal of a
    Poisson with a ``Gamma(a, b)`` rate. For fixed ``a`` the maximizing rate
    is ``b = a / mean``, which leaves a 1-d root-finding problem in ``a``.
    Under-dispersed data push ``a`` to the upper bound (the Poisson limit).
    An all-zero row has no maximum and falls back to ``(1, 1)`` with a warning.
    """
    y = np.asarray(counts_row, dtype=float).ravel()
    if y.size == 0 or y.sum() == 0:
        warnings.warn(DegenerateData("all-zero counts; using Gamma(1, 1) prior"), stacklevel=2)
        return GammaHyper(1.0, 1.0)
    if np.any(y != np.round(y)) or np.any(y < 0):
        raise DomainError("eb_fit needs nonnegative integer counts")
    mean = y.mean()
    hist = np.bincount(y.astype(np.int64))
    exceed = (y.size - np.cumsum(hist))[:-1].astype(float)

    def g(log_a):
        return _nb_profile_grad(np.exp(log_a), exceed, y.size, mean)

    lo, hi = np.log(a_bounds[0]), np.log(a_bounds[1])
    if g(hi) > 0:
        a = a_bounds[1]
    elif g(lo) < 0:
        a = a_bounds[0]
    else:
        a = float(np.exp(brentq(g, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)))
    return GammaHyper(a, a / mean)


def nb_profile_loglik(a, counts_row):
    """Profile log-likelihood in ``a`` used by :func:`eb_fit`."""
    y = np.asarray(counts_row, dtype=float)
    b = a / y.mean()
    return float(negbinom_logpmf(y, a, 1.0 / (1.0 + b)).sum())
