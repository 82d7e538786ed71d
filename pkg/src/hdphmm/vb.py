"""Mean-field variational Bayes for the HDP-HMM with a direct-assignment truncation.

Factors: gamma distributions over rates, Dirichlet distributions over each
transition row and the initial distribution, an HMM over the state path,
and a point estimate ``beta_star`` of the global weights. Under the
truncation the Dirichlet factors have ``M + 1`` entries; the last collects
the mass of every state beyond ``M``. The finite HMM uses ``M`` entries and
a fixed symmetric prior instead.

``beta_star`` carries the truncated stick-breaking prior: with ``v_k`` the
break fractions, ``sum_k ln Beta(v_k | 1, gamma)`` telescopes to
``M ln gamma + (gamma - 1) ln beta_star[M]``, which only sees the overflow
entry. The bound is therefore invariant to relabeling the first ``M`` states.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .data import CountMatrix
from .errors import LineSearchStall, MonotonicityViolation, ValidationError
from .hmc import eb_fit
from .hmm import expected_stats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VBConfig:
    M: int = 80
    n_iters: int = 100
    alpha0: float = 4.0
    gamma_conc: float = 8.0
    finite: bool = False
    beta_steps: int = 30
    monotone_tol: float = 1e-8
    init_clusters: int = 25
    init_iters: int = 10

    def __post_init__(self):
        if self.M < 1 or self.n_iters < 0:
            raise ValidationError("M must be >= 1 and n_iters >= 0")
        if not (self.alpha0 > 0 and self.gamma_conc > 0):
            raise ValidationError("alpha0 and gamma_conc must be positive")


@dataclass
class VariationalState:
    a_tilde: np.ndarray       # C x M gamma shapes
    b_tilde: np.ndarray       # C x M gamma rates
    trans: np.ndarray         # M x K Dirichlet parameters (K = M + 1, or M when finite)
    init: np.ndarray          # K Dirichlet parameters for the initial state
    beta_star: np.ndarray     # K global weights
    gamma: np.ndarray         # T x M state marginals
    xi_sum: np.ndarray        # M x M expected transition counts, summed over t
    state_entropy: float      # entropy of q(S)
    hyper_a: np.ndarray
    hyper_b: np.ndarray
    alpha0: float
    gamma_conc: float
    finite: bool = False

    @property
    def M(self) -> int:
        return self.gamma.shape[1]

    @property
    def K(self) -> int:
        return self.trans.shape[1]

    def prior_weights(self, beta=None) -> np.ndarray:
        if self.finite:
            return np.full(self.K, self.alpha0)
        return self.alpha0 * (self.beta_star if beta is None else beta)

    def rate_means(self) -> np.ndarray:
        return self.a_tilde / self.b_tilde

    def permuted(self, perm) -> "VariationalState":
        """Relabel states; the overflow entry (if any) stays last."""
        perm = np.asarray(perm)
        full = np.concatenate([perm, np.arange(self.M, self.K)])
        return replace(self, a_tilde=self.a_tilde[:, perm], b_tilde=self.b_tilde[:, perm],
                       trans=self.trans[np.ix_(perm, full)], init=self.init[full],
                       beta_star=self.beta_star[full], gamma=self.gamma[:, perm],
                       xi_sum=self.xi_sum[np.ix_(perm, perm)])

    def to_json(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, d: dict) -> "VariationalState":
        d = dict(d)
        for k in ("a_tilde", "b_tilde", "trans", "init", "beta_star", "gamma", "xi_sum",
                  "hyper_a", "hyper_b"):
            d[k] = np.array(d[k], dtype=float)
        return cls(**d)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


@dataclass
class SurrogateHmm:
    """Log potentials of the HMM that defines ``q(S)``."""

    log_pi: np.ndarray  # M
    log_P: np.ndarray   # M x M, rows sub-normalized
    log_L: np.ndarray   # T x M

    @property
    def P(self):
        return np.exp(self.log_P)

    @property
    def pi(self):
        return np.exp(self.log_pi)

    @property
    def L(self):
        return np.exp(self.log_L)


def _counts(counts) -> np.ndarray:
    return counts.counts if isinstance(counts, CountMatrix) else np.asarray(counts)


def dirichlet_expected_log(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    return digamma(alpha) - digamma(alpha.sum(axis=-1, keepdims=True))


# coordinate updates

def update_rate_factors(counts, gamma, hyper_a, hyper_b):
    """``a~ = a0 + sum_t y gamma``, ``b~ = b0 + sum_t gamma``."""
    y = _counts(counts).astype(float)
    a = np.asarray(hyper_a, dtype=float)[:, None] + y @ gamma
    b = np.asarray(hyper_b, dtype=float)[:, None] + gamma.sum(axis=0)[None, :]
    return a, b


def _expected_log_emissions(counts, a_tilde, b_tilde):
    y = _counts(counts).astype(float)
    e_log = digamma(a_tilde) - np.log(b_tilde)
    e_lam = a_tilde / b_tilde
    return y.T @ e_log - e_lam.sum(axis=0)[None, :] - gammaln(y + 1.0).sum(axis=0)[:, None]


def build_surrogate(vstate: VariationalState, counts) -> SurrogateHmm:
    """Potentials ``exp E[ln P]``, ``exp E[ln pi]`` and ``exp E[ln p(y_t | lambda_i)]``."""
    M = vstate.M
    return SurrogateHmm(dirichlet_expected_log(vstate.init)[:M],
                        dirichlet_expected_log(vstate.trans)[:, :M],
                        _expected_log_emissions(counts, vstate.a_tilde, vstate.b_tilde))


def update_state_factor(surrogate: SurrogateHmm):
    """Marginals of ``q(S)``. Returns ``(gamma, xi_sum, log_z, entropy)``."""
    gamma, xi_sum, log_z = expected_stats(surrogate.log_L, np.exp(surrogate.log_pi),
                                          np.exp(surrogate.log_P))
    energy = (gamma[0] @ surrogate.log_pi + _finite_dot(xi_sum, surrogate.log_P)
              + _finite_dot(gamma, surrogate.log_L))
    return gamma, xi_sum, log_z, float(log_z - energy)


def _finite_dot(w, logv):
    mask = w > 0
    return float((w[mask] * logv[mask]).sum())


def update_transition_factors(gamma, xi_sum, weights):
    """Dirichlet factors: prior weights plus expected transition (and first-state) counts."""
    weights = np.asarray(weights, dtype=float)
    M = gamma.shape[1]
    trans = np.repeat(weights[None, :], M, axis=0)
    trans[:, :M] += xi_sum
    init = weights.copy()
    init[:M] += gamma[0]
    return trans, init


def stick_log_prior(beta, gamma_conc: float) -> float:
    """Log density of the break fractions of a truncated ``GEM(gamma)`` stick, as a function of the weights."""
    M = beta.shape[0] - 1
    return float(M * np.log(gamma_conc) + (gamma_conc - 1.0) * np.log(beta[-1]))


def expected_count_rows(gamma, xi_sum, K: int) -> np.ndarray:
    """Expected transition counts per row, padded to ``K`` columns, with the first-state row appended."""
    M = gamma.shape[1]
    rows = np.zeros((M + 1, K))
    rows[:M, :M] = xi_sum
    rows[M, :M] = gamma[0]
    return rows


def _beta_objective(beta, count_rows, alpha0, gamma_conc):
    """Bound terms that depend on ``beta_star`` once the Dirichlet factors are at their optimum.

    For fixed ``q(S)`` the best Dirichlet factor for a row with expected
    counts ``n`` contributes ``ln B(alpha0 beta + n) - ln B(alpha0 beta)``;
    the normalizers ``lnGamma(sum)`` do not depend on ``beta`` and are dropped.
    """
    w = alpha0 * beta
    val = (gammaln(w[None, :] + count_rows) - gammaln(w)[None, :]).sum()
    return float(val + stick_log_prior(beta, gamma_conc))


def _beta_grad(beta, count_rows, alpha0, gamma_conc):
    w = alpha0 * beta
    g = alpha0 * (digamma(w[None, :] + count_rows) - digamma(w)[None, :]).sum(axis=0)
    g[-1] += (gamma_conc - 1.0) / beta[-1]
    return g


def update_beta_star(beta_star, count_rows, alpha0: float, gamma_conc: float,
                     n_steps: int = 100, max_halvings: int = 50):
    """Gradient ascent on ``beta_star`` in softmax coordinates with backtracking.

    ``count_rows`` holds expected transition counts, one row per Dirichlet
    factor (see :func:`expected_count_rows`). Each step halves its length
    until the objective does not decrease. If no step length works after
    ``max_halvings`` the current value is kept.
    """
    count_rows = np.asarray(count_rows, dtype=float)
    beta = np.asarray(beta_star, dtype=float).copy()
    z = np.log(beta)
    f = _beta_objective(beta, count_rows, alpha0, gamma_conc)
    step = None
    for _ in range(n_steps):
        g = _beta_grad(beta, count_rows, alpha0, gamma_conc)
        gz = beta * (g - beta @ g)
        norm = np.abs(gz).max()
        if norm == 0.0 or not np.isfinite(norm):
            break
        s = 1.0 / norm if step is None else 2.0 * step
        for _halving in range(max_halvings):
            z_new = z + s * gz
            b_new = np.exp(z_new - z_new.max())
            b_new /= b_new.sum()
            if np.all(b_new > 0):
                f_new = _beta_objective(b_new, count_rows, alpha0, gamma_conc)
                if f_new >= f:
                    break
            s *= 0.5
        else:
            log.debug("%s", LineSearchStall("beta_star line search stalled"))
            break
        improvement = f_new - f
        z, beta, f, step = z_new - z_new.max(), b_new, f_new, s
        if improvement <= 1e-13 * max(1.0, abs(f)):
            break
    return beta


# bound

def elbo_terms(vstate: VariationalState, counts) -> dict:
    y = _counts(counts).astype(float)
    M = vstate.M
    a_t, b_t = vstate.a_tilde, vstate.b_tilde
    a0 = vstate.hyper_a[:, None]
    b0 = vstate.hyper_b[:, None]
    e_log = digamma(a_t) - np.log(b_t)
    e_lam = a_t / b_t
    g = vstate.gamma
    lik = ((y @ g) * e_log).sum() - (g.sum(axis=0)[None, :] * e_lam).sum() - gammaln(y + 1.0).sum()
    el_trans = dirichlet_expected_log(vstate.trans)
    el_init = dirichlet_expected_log(vstate.init)
    dyn = g[0] @ el_init[:M] + (vstate.xi_sum * el_trans[:, :M]).sum()
    rate_kl = ((a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * e_log - b0 * e_lam)
               - (a_t * np.log(b_t) - gammaln(a_t) + (a_t - 1.0) * e_log - b_t * e_lam)).sum()
    w = vstate.prior_weights()
    rows = np.vstack([vstate.trans, vstate.init[None, :]])
    el_rows = np.vstack([el_trans, el_init[None, :]])
    prior_dir = (gammaln(w.sum()) - gammaln(w).sum() + ((w - 1.0) * el_rows).sum(axis=1)).sum()
    q_dir = (gammaln(rows.sum(axis=1)) - gammaln(rows).sum(axis=1) + ((rows - 1.0) * el_rows).sum(axis=1)).sum()
    terms = {
        "likelihood": float(lik),
        "dynamics": float(dyn),
        "state_entropy": float(vstate.state_entropy),
        "rates": float(rate_kl),
        "transitions": float(prior_dir - q_dir),
    }
    if not vstate.finite:
        terms["beta"] = stick_log_prior(vstate.beta_star, vstate.gamma_conc)
    return terms


def elbo(vstate: VariationalState, counts) -> float:
    """Evidence lower bound (plus the log prior density of ``beta_star``)."""
    return float(sum(elbo_terms(vstate, counts).values()))


# driver

def cluster_init(rng, counts, K: int, n_iters: int = 10) -> np.ndarray:
    """Soft assignments from a few EM steps of a K-component Poisson mixture."""
    y = _counts(counts).astype(float)
    C, T = y.shape
    K = max(1, min(K, T))
    lam = y[:, rng.choice(T, size=K, replace=False)] + 0.5
    weights = np.full(K, 1.0 / K)
    for _ in range(n_iters):
        logp = y.T @ np.log(lam) - lam.sum(axis=0) + np.log(weights)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        nk = resp.sum(axis=0) + 1e-10
        lam = (y @ resp + 0.1) / (nk + 0.1)
        weights = nk / nk.sum()
    return resp


def initialize(rng, counts: CountMatrix, config: VBConfig, hyper_a=None, hyper_b=None,
               init_gamma=None) -> VariationalState:
    counts.require_nonempty()
    M = config.M
    if hyper_a is None or hyper_b is None:
        fits = [eb_fit(row) for row in counts.counts]
        hyper_a = np.array([f.a for f in fits])
        hyper_b = np.array([f.b for f in fits])
    if init_gamma is None:
        resp = cluster_init(rng, counts, min(M, config.init_clusters), config.init_iters)
        init_gamma = np.zeros((counts.T, M))
        init_gamma[:, :resp.shape[1]] = resp
    init_gamma = np.asarray(init_gamma, dtype=float)
    K = M if config.finite else M + 1
    beta = np.full(K, 1.0 / K)
    xi0 = init_gamma[:-1].T @ init_gamma[1:]
    a_t, b_t = update_rate_factors(counts, init_gamma, hyper_a, hyper_b)
    vs = VariationalState(a_t, b_t, np.ones((M, K)), np.ones(K), beta, init_gamma, xi0, 0.0,
                          np.asarray(hyper_a, float), np.asarray(hyper_b, float),
                          config.alpha0, config.gamma_conc, config.finite)
    vs.trans, vs.init = update_transition_factors(init_gamma, xi0, vs.prior_weights())
    vs.gamma, vs.xi_sum, _, vs.state_entropy = update_state_factor(build_surrogate(vs, counts))
    return vs


def vb_sweep(vs: VariationalState, counts, config: VBConfig) -> VariationalState:
    """State factor, rate factors, transition factors, then ``beta_star``."""
    vs = replace(vs)
    vs.gamma, vs.xi_sum, _, vs.state_entropy = update_state_factor(build_surrogate(vs, counts))
    vs.a_tilde, vs.b_tilde = update_rate_factors(counts, vs.gamma, vs.hyper_a, vs.hyper_b)
    vs.trans, vs.init = update_transition_factors(vs.gamma, vs.xi_sum, vs.prior_weights())
    if not vs.finite:
        rows = expected_count_rows(vs.gamma, vs.xi_sum, vs.K)
        vs.beta_star = update_beta_star(vs.beta_star, rows, vs.alpha0, vs.gamma_conc, config.beta_steps)
        vs.trans, vs.init = update_transition_factors(vs.gamma, vs.xi_sum, vs.prior_weights())
    return vs


def run_vb(counts: CountMatrix, config: VBConfig = VBConfig(), rng=None, hyper_a=None,
           hyper_b=None, init_gamma=None):
    """Coordinate ascent for ``config.n_iters`` sweeps.

    Returns ``(state, elbo_trace)`` where the trace starts with the bound
    at initialization. A decrease larger than ``config.monotone_tol`` raises
    :class:`MonotonicityViolation`.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    vs = initialize(rng, counts, config, hyper_a, hyper_b, init_gamma)
    trace = [elbo(vs, counts)]
    for it in range(config.n_iters):
        vs = vb_sweep(vs, counts, config)
        trace.append(elbo(vs, counts))
        drop = trace[-2] - trace[-1]
        if drop > config.monotone_tol * max(1.0, abs(trace[-2])):
            raise MonotonicityViolation(f"bound fell by {drop:.3e} at sweep {it + 1}")
    return vs, trace
