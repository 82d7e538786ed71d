"""Synthetic data: stick-breaking weights, HDP-HMM parameter draws, simulated
count trajectories, spatially tagged trajectories and negative-binomial noise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DEFAULT_BIN_WIDTH, CountMatrix, PositionTrace
from .distributions import GammaHyper, beta_sample, dirichlet_sample, gamma_sample
from .errors import DomainError, ValidationError
from .gibbs import HdpParams
from .hmm import HmmParams


@dataclass(frozen=True)
class SpatialConfig:
    arena_radius: float = 60.0
    walk_step: float = 3.0  # s.d. (cm) of the isotropic jitter around a state's center


@dataclass(frozen=True)
class NoiseConfig:
    mean: float
    variance: float

    def __post_init__(self):
        if not (self.variance > self.mean > 0):
            raise DomainError("negative-binomial noise needs variance > mean > 0")


@dataclass(frozen=True)
class SimConfig:
    C: int = 30
    T: int = 1000
    M: int = 80
    alpha0: float = 4.0
    gamma: float = 8.0
    rate_prior: GammaHyper = GammaHyper(1.0, 0.2)
    seed: int = 0
    bin_width: float = DEFAULT_BIN_WIDTH
    spatial: Optional[SpatialConfig] = None
    nb_noise: Optional[NoiseConfig] = None

    def __post_init__(self):
        for name in ("C", "T", "M"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not (self.alpha0 > 0 and self.gamma > 0 and self.bin_width > 0):
            raise ValidationError("alpha0, gamma and bin_width must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "rate_prior" in d:
            d["rate_prior"] = GammaHyper(**d["rate_prior"])
        if d.get("spatial") is not None:
            d["spatial"] = SpatialConfig(**d["spatial"])
        if d.get("nb_noise") is not None:
            d["nb_noise"] = NoiseConfig(**d["nb_noise"])
        return cls(**d)


def gem_weights(fractions) -> np.ndarray:
    """Stick lengths from break fractions; the unbroken remainder goes to the last atom."""
    v = np.asarray(fractions, dtype=float)
    M = v.shape[0]
    w = np.empty(M)
    rest = 1.0
    for i in range(M - 1):
        w[i] = v[i] * rest
        rest -= w[i]
    w[M - 1] = rest
    return w


def sample_gem(rng, gamma_conc: float, M: int) -> np.ndarray:
    """First ``M`` stick-breaking weights with ``Beta(1, gamma)`` break fractions."""
    if not gamma_conc > 0 or M < 1:
        raise DomainError("GEM needs gamma > 0 and M >= 1")
    return gem_weights(beta_sample(rng, 1.0, gamma_conc, size=M))


def sample_hdp_hmm(rng, config: SimConfig):
    """Weak-limit draw: ``beta ~ Dir(gamma/M)``, then ``pi`` and rows of ``P`` from ``Dir(alpha0 beta)``."""
    M, C = config.M, config.C
    if M == 1:
        beta = np.ones(1)
        pi, P = np.ones(1), np.ones((1, 1))
    else:
        beta = dirichlet_sample(rng, np.full(M, config.gamma / M))
        w = config.alpha0 * beta
        pi = dirichlet_sample(rng, w)
        P = dirichlet_sample(rng, np.broadcast_to(w, (M, M)))
    Lambda = gamma_sample(rng, config.rate_prior.a, config.rate_prior.b, size=(C, M))
    return HmmParams(pi, P, Lambda), HdpParams(beta, config.alpha0, config.gamma)


def simulate_states(rng, params: HmmParams, T: int) -> np.ndarray:
    cum_pi = np.cumsum(params.pi)
    cum_P = np.cumsum(params.P, axis=1)
    u = rng.random(T)
    seq = np.empty(T, dtype=np.int64)
    M = params.M
    s = min(int(np.searchsorted(cum_pi, u[0] * cum_pi[-1], side="right")), M - 1)
    seq[0] = s
    for t in range(1, T):
        row = cum_P[s]
        s = min(int(np.searchsorted(row, u[t] * row[-1], side="right")), M - 1)
        seq[t] = s
    return seq


def simulate(rng, params: HmmParams, T: int, bin_width: float = DEFAULT_BIN_WIDTH):
    """Ancestral sample of a state path and its Poisson counts."""
    seq = simulate_states(rng, params, T)
    counts = rng.poisson(params.Lambda[:, seq])
    return seq, CountMatrix(counts, bin_width)


def simulate_spatial(rng, params: HmmParams, T: int, spatial: SpatialConfig = SpatialConfig(),
                     bin_width: float = DEFAULT_BIN_WIDTH):
    """Like :func:`simulate`, plus a position trace tied to the states.

    Every state gets a center drawn uniformly over the arena disc; each bin's
    position is its state's center plus Gaussian jitter of s.d.
    ``spatial.walk_step``, reflected back inside the arena. The arena is
    centered at the origin.
    """
    R = spatial.arena_radius
    M = params.M
    rc = R * np.sqrt(rng.random(M))
    tc = rng.uniform(-np.pi, np.pi, M)
    centers = np.stack([rc * np.cos(tc), rc * np.sin(tc)], axis=1)
    seq, counts = simulate(rng, params, T, bin_width)
    xy = centers[seq] + spatial.walk_step * rng.standard_normal((T, 2))
    r = np.hypot(xy[:, 0], xy[:, 1])
    out = r > R
    if out.any():
        r_new = np.clip(2 * R - r[out], 0.0, R)
        xy[out] *= (r_new / r[out])[:, None]
    step = np.hypot(*np.diff(xy, axis=0, prepend=xy[:1]).T)
    pos = PositionTrace(xy[:, 0], xy[:, 1], step / bin_width, (0.0, 0.0))
    return seq, counts, pos, centers


def inject_nb_noise(rng, counts: CountMatrix, mean: float, variance: float) -> CountMatrix:
    """Add an independent negative-binomial draw with the given mean and variance to every entry."""
    NoiseConfig(mean, variance)
    r = mean ** 2 / (variance - mean)
    p = mean / variance  # numpy convention: pmf ~ p**r (1 - p)**k
    noise = rng.negative_binomial(r, p, size=counts.counts.shape)
    return CountMatrix(counts.counts + noise, counts.bin_width, counts.cell_ids)


def truth_json(seq, params: HmmParams, hdp: HdpParams, config: SimConfig, centers=None) -> dict:
    d = {
        "states": np.asarray(seq).tolist(),
        "pi": params.pi.tolist(),
        "P": params.P.tolist(),
        "Lambda": params.Lambda.tolist(),
        "beta": hdp.beta.tolist(),
        "config": config.to_json(),
    }
    if centers is not None:
        d["centers"] = np.asarray(centers).tolist()
    return d


def write_truth(path, *args, **kwargs) -> None:
    Path(path).write_text(json.dumps(truth_json(*args, **kwargs), sort_keys=True))
