"""Weak-limit Gibbs sampling for the HDP-HMM and the finite Bayesian HMM.

One sweep updates, in order: the state path (forward filtering, backward
sampling), firing rates, initial and transition distributions, global
stick weights, the two concentration parameters and, in ``hmc`` mode, the
per-cell rate hyperparameters.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import CountMatrix
from .distributions import (GammaHyper, dirichlet_logpdf, dirichlet_sample, gamma_logpdf,
                            gamma_sample)
from .errors import NumericalError, ValidationError
from .hmc import HmcConfig, eb_fit, hyper_grad, hyper_logpdf, hmc_step
from .hmm import (HmmParams, backward_sample, emission_logliks, forward_messages, state_count,
                  states_covering)

log = logging.getLogger(__name__)

HYPER_MODES = ("hmc", "eb", "fixed")


@dataclass(frozen=True)
class HdpParams:
    beta: np.ndarray
    alpha0: float
    gamma: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if abs(beta.sum() - 1.0) > 1e-9 or np.any(beta <= 0):
            raise ValidationError("beta must be a strictly positive probability vector")
        if not (self.alpha0 > 0 and self.gamma > 0):
            raise ValidationError("concentrations must be positive")
        object.__setattr__(self, "beta", beta)

    @property
    def M(self) -> int:
        return self.beta.shape[0]


@dataclass
class SufficientStats:
    n: np.ndarray        # M x M transition counts
    occ: np.ndarray      # M state occupancies
    cellsum: np.ndarray  # C x M summed counts per state
    first: int           # state of the first bin

    @classmethod
    def from_sequence(cls, counts, seq, M: int) -> "SufficientStats":
        y = counts.counts if isinstance(counts, CountMatrix) else np.asarray(counts)
        seq = np.asarray(seq, dtype=np.int64)
        n = np.zeros((M, M), dtype=np.int64)
        if seq.size > 1:
            np.add.at(n, (seq[:-1], seq[1:]), 1)
        occ = np.bincount(seq, minlength=M)
        cellsum = np.zeros((y.shape[0], M), dtype=np.int64)
        for i in np.flatnonzero(occ):
            cellsum[:, i] = y[:, seq == i].sum(axis=1)
        return cls(n, occ, cellsum, int(seq[0]) if seq.size else 0)


@dataclass
class GibbsState:
    hmm: HmmParams
    hdp: HdpParams
    seq: np.ndarray
    hyper_a: np.ndarray  # per-cell gamma shape
    hyper_b: np.ndarray  # per-cell gamma rate
    iteration: int = 0

    @property
    def hypers(self) -> list[GammaHyper]:
        return [GammaHyper(a, b) for a, b in zip(self.hyper_a, self.hyper_b)]

    def permuted(self, perm) -> "GibbsState":
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return GibbsState(self.hmm.permuted(perm), replace(self.hdp, beta=self.hdp.beta[perm]),
                          inv[self.seq], self.hyper_a.copy(), self.hyper_b.copy(), self.iteration)

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "pi": self.hmm.pi.tolist(),
            "P": self.hmm.P.tolist(),
            "Lambda": self.hmm.Lambda.tolist(),
            "beta": self.hdp.beta.tolist(),
            "alpha0": self.hdp.alpha0,
            "gamma": self.hdp.gamma,
            "hyper_a": self.hyper_a.tolist(),
            "hyper_b": self.hyper_b.tolist(),
            "seq": self.seq.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GibbsState":
        return cls(HmmParams(np.array(d["pi"]), np.array(d["P"]), np.array(d["Lambda"])),
                   HdpParams(np.array(d["beta"]), d["alpha0"], d["gamma"]),
                   np.array(d["seq"], dtype=np.int64), np.array(d["hyper_a"]),
                   np.array(d["hyper_b"]), d.get("iteration", 0))


@dataclass(frozen=True)
class GibbsConfig:
    """Settings for :func:`run_chain` and :func:`run_finite_hmm_chain`.

    For the finite model ``M`` is the number of states ``m`` and ``alpha0``
    is the fixed symmetric Dirichlet concentration of each transition row.
    """

    M: int = 80
    n_iters: int = 300
    hyper_mode: str = "hmc"
    alpha0_prior: GammaHyper = GammaHyper(1.0, 1.0)
    gamma_prior: GammaHyper = GammaHyper(8.0, 1.0)
    rate_hyper: GammaHyper = GammaHyper(1.0, 1.0)
    alpha0: float = 1.0
    hmc: HmcConfig = HmcConfig()
    thin: int = 1
    init_states: int = 40

    def __post_init__(self):
        if self.M < 1:
            raise ValidationError("truncation level must be at least 1")
        if self.n_iters < 0 or self.thin < 1:
            raise ValidationError("n_iters must be >= 0 and thin >= 1")
        if self.hyper_mode not in HYPER_MODES:
            raise ValidationError(f"hyper_mode must be one of {HYPER_MODES}, got {self.hyper_mode!r}")


@dataclass
class ChainTrace:
    iters: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    logjoint: list = field(default_factory=list)
    n_states: list = field(default_factory=list)
    n_states_95: list = field(default_factory=list)
    alpha0: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    hmc_accept: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def __len__(self):
        return len(self.iters)

    def record(self, state: GibbsState, loglik: float, logjoint: float, accept=np.nan):
        self.iters.append(state.iteration)
        self.loglik.append(loglik)
        self.logjoint.append(logjoint)
        self.n_states.append(state_count(state.seq))
        self.n_states_95.append(states_covering(state.seq, 0.95))
        self.alpha0.append(state.hdp.alpha0)
        self.gamma.append(state.hdp.gamma)
        self.hmc_accept.append(accept)

    def last(self, n: int) -> list:
        return self.snapshots[-n:] if n else []

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "loglik", "n_states", "n_states_95", "alpha0", "gamma"])
            for row in zip(self.iters, self.loglik, self.n_states, self.n_states_95,
                           self.alpha0, self.gamma):
                w.writerow([row[0], repr(float(row[1])), row[2], row[3],
                            repr(float(row[4])), repr(float(row[5]))])

    def write_snapshots(self, path, n_keep: Optional[int] = None) -> None:
        snaps = self.snapshots if n_keep is None else self.last(n_keep)
        Path(path).write_text(json.dumps([s.to_json() for s in snaps]))


class ChainAborted(NumericalError):
    """Numerical failure mid-chain; ``trace`` holds the completed iterations."""

    def __init__(self, message, trace: ChainTrace):
        super().__init__(message)
        self.trace = trace


# conditional updates

def resample_rates(rng, stats: SufficientStats, hyper_a, hyper_b):
    """Draw ``Lambda[c, i] ~ Gamma(a_c + cellsum[c, i], b_c + occ[i])``."""
    a = np.asarray(hyper_a, dtype=float)[:, None] + stats.cellsum
    b = np.asarray(hyper_b, dtype=float)[:, None] + stats.occ[None, :]
    return gamma_sample(rng, a, b)


def resample_transitions(rng, stats: SufficientStats, weights):
    """Draw ``pi`` and the rows of ``P`` from their Dirichlet conditionals.

    ``weights`` is the prior concentration vector shared by every row:
    ``alpha0 * beta`` for the HDP-HMM and ``alpha0 * ones(m)`` for the finite HMM.
    """
    weights = np.asarray(weights, dtype=float)
    M = weights.shape[0]
    if M == 1:
        return np.ones(1), np.ones((1, 1))
    P = dirichlet_sample(rng, weights[None, :] + stats.n)
    init = weights.copy()
    init[stats.first] += 1.0
    return dirichlet_sample(rng, init), P


def sample_tables(rng, n, alpha0: float, beta) -> np.ndarray:
    """Auxiliary table counts for the Chinese restaurant franchise.

    ``m[i, j]`` is a sum of ``n[i, j]`` Bernoulli draws where customer ``k``
    (1-based) opens a table with probability ``alpha0 beta_j / (alpha0 beta_j + k - 1)``.
    """
    n = np.asarray(n, dtype=np.int64)
    nz = np.flatnonzero(n)
    if nz.size == 0:
        return np.zeros(n.shape, dtype=np.int64)
    reps = n.ravel()[nz]
    cell = np.repeat(nz, reps)
    starts = np.repeat(np.cumsum(reps) - reps, reps)
    k = np.arange(cell.size) - starts  # customers already seated
    conc = alpha0 * np.broadcast_to(beta, n.shape).ravel()[cell]
    opened = rng.random(cell.size) < conc / (conc + k)
    return np.bincount(cell[opened], minlength=n.size).reshape(n.shape)


def _with_initial_row(stats: SufficientStats) -> np.ndarray:
    """Transition counts with one extra row holding the first-state customer."""
    M = stats.n.shape[0]
    init = np.zeros((1, M), dtype=np.int64)
    init[0, stats.first] = 1
    return np.vstack([stats.n, init])


def resample_beta(rng, stats: SufficientStats, hdp: HdpParams, tables=None):
    """Draw ``beta ~ Dir(gamma / M + column sums of the table counts)``.

    Returns ``(beta, tables)``.
    """
    M = hdp.M
    if tables is None:
        tables = sample_tables(rng, _with_initial_row(stats), hdp.alpha0, hdp.beta)
    mbar = tables.sum(axis=0)
    return dirichlet_sample(rng, hdp.gamma / M + mbar), tables


def resample_dp_concentration(rng, conc: float, prior: GammaHyper, customers, tables: int,
                              n_iter: int = 1) -> float:
    """Auxiliary-variable update of a DP concentration shared by several groups.

    ``customers[j]`` counts the customers in group ``j``; ``tables`` is the
    total number of tables over all groups. With no customers the value is
    drawn from the gamma prior.
    """
    nj = np.asarray(customers, dtype=float)
    nj = nj[nj > 0]
    if nj.size == 0:
        return float(gamma_sample(rng, prior.a, prior.b))
    for _ in range(n_iter):
        w = rng.beta(conc + 1.0, nj)
        s = rng.random(nj.size) < nj / (nj + conc)
        shape = prior.a + tables - s.sum()
        rate = prior.b - np.log(w).sum()
        conc = float(gamma_sample(rng, shape, rate))
    return max(conc, np.finfo(float).tiny)


def resample_concentrations(rng, hdp: HdpParams, stats: SufficientStats, tables,
                            alpha0_prior: GammaHyper, gamma_prior: GammaHyper, n_iter: int = 1):
    """Resample ``(alpha0, gamma)`` given the table counts.

    ``alpha0`` uses one group per transition row plus the initial-state row;
    ``gamma`` treats all tables as customers of the top-level restaurant and
    the number of distinct dishes as its table count.
    """
    counts = _with_initial_row(stats)
    tables = np.asarray(tables)
    alpha0 = resample_dp_concentration(rng, hdp.alpha0, alpha0_prior, counts.sum(axis=1),
                                       int(tables.sum()), n_iter)
    mbar = tables.sum(axis=0)
    gamma = resample_dp_concentration(rng, hdp.gamma, gamma_prior, [mbar.sum()],
                                      int((mbar > 0).sum()), n_iter)
    return alpha0, gamma


def resample_states(rng, counts, hmm: HmmParams):
    """Exact joint draw of the state path given parameters.

    Returns ``(seq, log_evidence)``.
    """
    table = emission_logliks(counts, hmm.Lambda)
    la, ev = forward_messages(table, hmm.pi, hmm.P)
    if not np.isfinite(ev):
        raise NumericalError("data have zero probability under current parameters")
    return backward_sample(rng, la, hmm.P), ev


def resample_hypers_hmc(rng, Lambda, occ, hyper_a, hyper_b, config: HmcConfig):
    """One HMC update of every cell's ``(log a, log b)``.

    Rates of unoccupied states carry no data, so they are integrated out:
    the target conditions on occupied states only (all states when fewer
    than two are occupied) and the unoccupied rates are redrawn from the
    updated prior by the caller.
    """
    used = np.flatnonzero(occ > 0)
    if used.size < 2:
        used = np.arange(Lambda.shape[1])
    rates = np.maximum(Lambda[:, used], np.finfo(float).tiny)
    pos = np.stack([np.log(hyper_a), np.log(hyper_b)], axis=1)
    new, ok = hmc_step(rng, lambda q: hyper_logpdf(q, rates), lambda q: hyper_grad(q, rates),
                       pos, config)
    return np.exp(new[:, 0]), np.exp(new[:, 1]), ok


# joint density

def log_joint_terms(state: GibbsState, counts, config: GibbsConfig, finite: bool = False) -> dict:
    """Log joint density split into its additive pieces."""
    hmm, hdp, seq = state.hmm, state.hdp, state.seq
    table = emission_logliks(counts, hmm.Lambda)
    with np.errstate(divide="ignore"):
        logP = np.log(hmm.P)
        logpi = np.log(hmm.pi)
    weights = config.alpha0 * np.ones(hdp.M) if finite else hdp.alpha0 * hdp.beta
    terms = {
        "emissions": float(table[np.arange(seq.size), seq].sum()),
        "states": float(logpi[seq[0]] + logP[seq[:-1], seq[1:]].sum()),
        "rates": float(gamma_logpdf(hmm.Lambda, state.hyper_a[:, None], state.hyper_b[:, None]).sum()),
        "transitions": float(dirichlet_logpdf(hmm.pi, weights) + dirichlet_logpdf(hmm.P, weights).sum())
        if hdp.M > 1 else 0.0,
    }
    if not finite:
        terms["beta"] = float(dirichlet_logpdf(hdp.beta, np.full(hdp.M, hdp.gamma / hdp.M))) if hdp.M > 1 else 0.0
        terms["concentrations"] = float(
            gamma_logpdf(hdp.alpha0, config.alpha0_prior.a, config.alpha0_prior.b)
            + gamma_logpdf(hdp.gamma, config.gamma_prior.a, config.gamma_prior.b))
    return terms


def log_joint(state: GibbsState, counts, config: GibbsConfig, finite: bool = False) -> float:
    """``log p(y, S, params)`` under the model's priors; flat prior on the log hyperparameters."""
    return float(sum(log_joint_terms(state, counts, config, finite).values()))


# chain driver

def initial_hypers(counts: CountMatrix, config: GibbsConfig):
    if config.hyper_mode == "fixed":
        a = np.full(counts.C, config.rate_hyper.a)
        b = np.full(counts.C, config.rate_hyper.b)
    else:
        fits = [eb_fit(row) for row in counts.counts]
        a = np.array([f.a for f in fits])
        b = np.array([f.b for f in fits])
    return a, b


def initialize(rng, counts: CountMatrix, config: GibbsConfig, finite: bool = False) -> GibbsState:
    """Random start: uniform states over ``min(M, init_states)`` labels.

    Rates, ``pi`` and ``P`` are then drawn from their conditionals given that
    random path, so occupied states start near the pooled cell means and
    separate as the chain runs.
    """
    M = config.M
    a, b = initial_hypers(counts, config)
    seq = rng.integers(0, min(M, config.init_states), size=counts.T)
    stats = SufficientStats.from_sequence(counts, seq, M)
    Lambda = resample_rates(rng, stats, a, b)
    beta = np.full(M, 1.0 / M)
    if finite:
        hdp = HdpParams(beta, config.alpha0, config.gamma_prior.mean)
        weights = config.alpha0 * np.ones(M)
    else:
        alpha0 = float(gamma_sample(rng, config.alpha0_prior.a, config.alpha0_prior.b))
        gamma = float(gamma_sample(rng, config.gamma_prior.a, config.gamma_prior.b))
        hdp = HdpParams(beta, alpha0, gamma)
        weights = alpha0 * beta
    pi, P = resample_transitions(rng, stats, weights)
    return GibbsState(HmmParams(pi, P, Lambda), hdp, seq, a, b, 0)


def gibbs_sweep(rng, counts: CountMatrix, state: GibbsState, config: GibbsConfig,
                finite: bool = False):
    """One full sweep. Returns ``(new_state, hmc_acceptance_rate)``."""
    M = config.M
    seq, _ = resample_states(rng, counts, state.hmm)
    stats = SufficientStats.from_sequence(counts, seq, M)
    Lambda = resample_rates(rng, stats, state.hyper_a, state.hyper_b)
    hdp = state.hdp
    weights = config.alpha0 * np.ones(M) if finite else hdp.alpha0 * hdp.beta
    pi, P = resample_transitions(rng, stats, weights)
    if not finite:
        beta, tables = resample_beta(rng, stats, hdp)
        hdp = replace(hdp, beta=beta)
        alpha0, gamma = resample_concentrations(rng, hdp, stats, tables,
                                                config.alpha0_prior, config.gamma_prior)
        hdp = HdpParams(beta, alpha0, gamma)
    a, b = state.hyper_a, state.hyper_b
    accept = np.nan
    if config.hyper_mode == "hmc":
        a, b, ok = resample_hypers_hmc(rng, Lambda, stats.occ, a, b, config.hmc)
        accept = float(np.mean(ok))
        empty = stats.occ == 0
        if empty.any():
            shape = np.repeat(a[:, None], empty.sum(), axis=1)
            rate = np.repeat(b[:, None], empty.sum(), axis=1)
            Lambda[:, empty] = gamma_sample(rng, shape, rate)
    Lambda = np.maximum(Lambda, np.finfo(float).tiny)
    new = GibbsState(HmmParams(pi, P, Lambda), hdp, seq, a, b, state.iteration + 1)
    return new, accept


def _run(rng, counts: CountMatrix, config: GibbsConfig, finite: bool,
         state: Optional[GibbsState] = None) -> ChainTrace:
    counts.require_nonempty()
    trace = ChainTrace()
    if config.n_iters == 0:
        return trace
    if state is None:
        state = initialize(rng, counts, config, finite)
    for it in range(config.n_iters):
        try:
            state, accept = gibbs_sweep(rng, counts, state, config, finite)
            loglik = forward_messages(emission_logliks(counts, state.hmm.Lambda),
                                      state.hmm.pi, state.hmm.P)[1]
            lj = log_joint(state, counts, config, finite)
        except NumericalError as exc:
            raise ChainAborted(f"iteration {it + 1}: {exc}", trace) from exc
        trace.record(state, loglik, lj, accept)
        if (it + 1) % config.thin == 0:
            trace.snapshots.append(state)
        if log.isEnabledFor(logging.DEBUG):
            log.debug("iter %d loglik %.2f states %d", state.iteration, loglik, trace.n_states[-1])
    return trace


def run_chain(rng, counts: CountMatrix, config: GibbsConfig = GibbsConfig(),
              state: Optional[GibbsState] = None) -> ChainTrace:
    """Weak-limit HDP-HMM Gibbs chain with truncation ``config.M``."""
    return _run(rng, counts, config, False, state)


def run_finite_hmm_chain(rng, counts: CountMatrix, config: GibbsConfig,
                         state: Optional[GibbsState] = None) -> ChainTrace:
    """Finite ``m``-state Bayesian HMM chain; rows of ``P`` have a ``Dir(alpha0 1)`` prior."""
    return _run(rng, counts, config, True, state)
