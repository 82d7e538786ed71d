"""Samplers and log-densities shared by every inference routine.

Gamma distributions use the shape/rate parameterization throughout, so
``Gamma(a, b)`` has mean ``a / b``.

Random numbers come from :class:`numpy.random.Generator` objects built on
PCG64 seed sequences. A generator is owned by one consumer at a time;
parallel chains get independent children through :func:`split_rng`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DomainError

_TINY = np.finfo(float).tiny


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for ``(seed, stream)``; identical inputs give identical draws."""
    if seed < 0 or seed >= 2**64:
        raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child generators, e.g. one per parallel chain."""
    return rng.spawn(n)


@dataclass(frozen=True)
class GammaHyper:
    """Shape ``a`` and rate ``b`` of a gamma prior over firing rates."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise DomainError(f"gamma hyperparameters must be positive, got a={self.a}, b={self.b}")

    @property
    def mean(self) -> float:
        return self.a / self.b


# gamma

def gamma_sample(rng, shape, rate, size=None):
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise DomainError("gamma shape and rate must be positive")
    return rng.gamma(shape, 1.0 / rate, size=size)


def gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0) or np.any(x <= 0):
        raise DomainError("gamma_logpdf needs positive x, shape and rate")
    out = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    return out[()] if out.ndim == 0 else out


# dirichlet

def log_dirichlet_sample(rng, alpha):
    """Log of a Dirichlet draw, accurate even for very small concentrations.

    Uses ``G(a) = G(a + 1) * U**(1/a)`` so tiny shapes do not underflow to
    exact zeros before normalization. ``alpha`` may be 2-d (one row per draw).
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise DomainError("Dirichlet concentrations must be positive")
    g = rng.standard_gamma(alpha + 1.0)
    u = rng.random(alpha.shape)
    logg = np.log(g) + np.log(u) / alpha
    return logg - logsumexp(logg, axis=-1, keepdims=True)


def dirichlet_sample(rng, alpha):
    """Dirichlet draw on the simplex; entries are floored at the smallest normal float."""
    p = np.exp(log_dirichlet_sample(rng, alpha))
    p = np.maximum(p, _TINY)
    return p / p.sum(axis=-1, keepdims=True)


def dirichlet_logpdf(x, alpha):
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise DomainError("Dirichlet concentrations must be positive")
    if np.any(x < 0):
        raise DomainError("Dirichlet support is the probability simplex")
    norm = gammaln(alpha.sum(axis=-1)) - gammaln(alpha).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(alpha == 1.0, 0.0, (alpha - 1.0) * np.log(x))
    return norm + terms.sum(axis=-1)


# poisson

def poisson_sample(rng, rate, size=None):
    rate = np.asarray(rate, dtype=float)
    if np.any(rate < 0):
        raise DomainError("Poisson rate must be nonnegative")
    return rng.poisson(rate, size=size)


def poisson_logpmf(k, rate):
    k = np.asarray(k, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(rate < 0):
        raise DomainError("Poisson rate must be nonnegative")
    if np.any(k < 0) or np.any(k != np.floor(k)):
        raise DomainError("Poisson support is the nonnegative integers")
    with np.errstate(divide="ignore", invalid="ignore"):
        klog = np.where(k == 0, 0.0, k * np.log(rate))
    out = klog - rate - gammaln(k + 1.0)
    return out[()] if out.ndim == 0 else out


# beta / categorical

def beta_sample(rng, a, b, size=None):
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise DomainError("beta parameters must be positive")
    x = rng.beta(a, b, size=size)
    # keep strictly inside (0, 1)
    eps = np.finfo(float).eps
    return np.clip(x, _TINY, 1.0 - eps / 2)


def categorical_sample(rng, weights) -> int:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise DomainError("categorical weights must be nonnegative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise DomainError(f"categorical weights must sum to 1, got {w.sum()!r}")
    idx = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
    return min(idx, len(w) - 1)


# negative binomial

def negbinom_logpmf(k, r, p):
    """Log pmf of the gamma-Poisson mixture.

    ``pmf(k) = Gamma(k + r) / (Gamma(r) k!) * (1 - p)**r * p**k``, so a
    Poisson rate drawn from ``Gamma(a, b)`` gives ``r = a`` and
    ``p = 1 / (1 + b)``.
    """
    k = np.asarray(k, dtype=float)
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(r <= 0) or np.any(p <= 0) or np.any(p >= 1):
        raise DomainError("negbinom needs r > 0 and 0 < p < 1")
    if np.any(k < 0) or np.any(k != np.floor(k)):
        raise DomainError("negbinom support is the nonnegative integers")
    out = (gammaln(k + r) - gammaln(r) - gammaln(k + 1.0)
           + r * np.log1p(-p) + k * np.log(p))
    return out[()] if out.ndim == 0 else out


def gamma_poisson_logpmf(k, a, b):
    """Marginal count log-probability when the Poisson rate is ``Gamma(a, b)``."""
    return negbinom_logpmf(k, a, 1.0 / (1.0 + np.asarray(b, dtype=float)))
