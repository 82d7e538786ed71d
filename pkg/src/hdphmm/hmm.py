"""Exact computations for an HMM with independent Poisson emissions per cell.

States are 0-based internally. All message passing happens in log space:
each step rescales by the running maximum before the matrix product, which
is a logsumexp reduction written as a dense mat-vec.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import gammaln, logsumexp

from .data import CountMatrix
from .errors import NumericalError, ShapeMismatch, ValidationError


@dataclass(frozen=True)
class HmmParams:
    """Initial distribution ``pi`` (M), transitions ``P`` (M x M) and rates ``Lambda`` (C x M)."""

    pi: np.ndarray
    P: np.ndarray
    Lambda: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        P = np.asarray(self.P, dtype=float)
        lam = np.asarray(self.Lambda, dtype=float)
        M = pi.shape[0]
        if P.shape != (M, M) or lam.ndim != 2 or lam.shape[1] != M:
            raise ShapeMismatch(f"pi {pi.shape}, P {P.shape}, Lambda {lam.shape} disagree")
        if abs(pi.sum() - 1.0) > 1e-9 or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("pi and rows of P must sum to 1")
        if np.any(pi < 0) or np.any(P < 0) or np.any(lam < 0):
            raise ValidationError("probabilities and rates must be nonnegative")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "Lambda", lam)

    @property
    def M(self) -> int:
        return self.pi.shape[0]

    @property
    def C(self) -> int:
        return self.Lambda.shape[0]

    def permuted(self, perm) -> "HmmParams":
        """Relabel states so new state ``k`` is old state ``perm[k]``."""
        perm = np.asarray(perm)
        return HmmParams(self.pi[perm], self.P[np.ix_(perm, perm)], self.Lambda[:, perm])


def _counts_array(counts) -> np.ndarray:
    if isinstance(counts, CountMatrix):
        return counts.counts
    return np.asarray(counts)


def emission_logliks(counts, Lambda) -> np.ndarray:
    """T x M table of ``sum_c log Poisson(y[c, t] | Lambda[c, i])``.

    A zero rate with a zero count contributes 0; with a positive count, -inf.
    """
    y = _counts_array(counts).astype(float)
    lam = np.asarray(Lambda, dtype=float)
    if lam.ndim != 2 or lam.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"Lambda has shape {lam.shape} but counts have {y.shape[0]} cells")
    zero = lam == 0
    with np.errstate(divide="ignore"):
        loglam = np.where(zero, 0.0, np.log(np.where(zero, 1.0, lam)))
    table = y.T @ loglam - lam.sum(axis=0)[None, :] - gammaln(y + 1.0).sum(axis=0)[:, None]
    if zero.any():
        impossible = ((y > 0).T.astype(float) @ zero.astype(float)) > 0
        table[impossible] = -np.inf
    return table


@numba.njit(cache=True)
def _forward(table, log_pi, P):
    T, M = table.shape
    la = np.empty((T, M))
    for i in range(M):
        la[0, i] = log_pi[i] + table[0, i]
    w = np.empty(M)
    for t in range(1, T):
        m = -np.inf
        for i in range(M):
            if la[t - 1, i] > m:
                m = la[t - 1, i]
        if not np.isfinite(m):
            for j in range(M):
                la[t, j] = np.nan if np.isnan(m) else -np.inf
            continue
        for i in range(M):
            w[i] = np.exp(la[t - 1, i] - m)
        for j in range(M):
            s = 0.0
            for i in range(M):
                s += w[i] * P[i, j]
            la[t, j] = (np.log(s) if s > 0 else -np.inf) + m + table[t, j]
    return la


@numba.njit(cache=True)
def _backward(table, P):
    T, M = table.shape
    lb = np.zeros((T, M))
    v = np.empty(M)
    for t in range(T - 2, -1, -1):
        m = -np.inf
        for j in range(M):
            v[j] = table[t + 1, j] + lb[t + 1, j]
            if v[j] > m:
                m = v[j]
        if not np.isfinite(m):
            for i in range(M):
                lb[t, i] = -np.inf
            continue
        for j in range(M):
            v[j] = np.exp(v[j] - m)
        for i in range(M):
            s = 0.0
            for j in range(M):
                s += P[i, j] * v[j]
            lb[t, i] = (np.log(s) if s > 0 else -np.inf) + m
    return lb


@numba.njit(cache=True)
def _sample_backward(log_alpha, P, u):
    T, M = log_alpha.shape
    seq = np.empty(T, dtype=np.int64)
    w = np.empty(M)
    t = T - 1
    nxt = -1
    while t >= 0:
        m = -np.inf
        for i in range(M):
            if nxt < 0:
                w[i] = log_alpha[t, i]
            else:
                w[i] = log_alpha[t, i] + (np.log(P[i, nxt]) if P[i, nxt] > 0 else -np.inf)
            if w[i] > m:
                m = w[i]
        if not np.isfinite(m):
            return seq, t
        tot = 0.0
        for i in range(M):
            w[i] = np.exp(w[i] - m)
            tot += w[i]
        target = u[t] * tot
        acc = 0.0
        k = M - 1
        for i in range(M):
            acc += w[i]
            if target < acc:
                k = i
                break
        # never land on a zero-weight state through round-off
        while w[k] == 0.0 and k > 0:
            k -= 1
        seq[t] = k
        nxt = k
        t -= 1
    return seq, -1


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


def _check_shapes(table, pi, P):
    T, M = table.shape
    if np.shape(pi) != (M,) or np.shape(P) != (M, M):
        raise ShapeMismatch(f"table {table.shape}, pi {np.shape(pi)}, P {np.shape(P)} disagree")


def forward_messages(table, pi, P):
    """Forward filter.

    Returns ``(log_alpha, log_evidence)`` where ``log_alpha[t, i] = log p(y[:t+1], S_t = i)``.
    ``P`` need not be row-normalized.
    """
    table = np.ascontiguousarray(table, dtype=float)
    _check_shapes(table, pi, P)
    la = _forward(table, _log(pi), np.ascontiguousarray(P, dtype=float))
    ev = float(logsumexp(la[-1])) if np.isfinite(la[-1]).any() else -np.inf
    if np.isnan(ev) or np.isnan(la).any():
        raise NumericalError("forward pass produced NaN")
    return la, ev


def backward_sample(rng, log_alpha, P) -> np.ndarray:
    """Draw a state path from the posterior given filtered messages."""
    log_alpha = np.ascontiguousarray(log_alpha, dtype=float)
    u = rng.random(log_alpha.shape[0])
    seq, bad = _sample_backward(log_alpha, np.ascontiguousarray(P, dtype=float), u)
    if bad >= 0:
        raise NumericalError(f"no state has positive probability at t={bad}")
    return seq


def _posteriors(table, pi, P, full_xi):
    table = np.ascontiguousarray(table, dtype=float)
    _check_shapes(table, pi, P)
    P = np.ascontiguousarray(P, dtype=float)
    la = _forward(table, _log(pi), P)
    if not np.isfinite(la[-1]).any() or np.isnan(la).any():
        raise NumericalError("data have zero probability under these parameters")
    log_z = float(logsumexp(la[-1]))
    lb = _backward(table, P)
    lg = la + lb
    gamma = np.exp(lg - logsumexp(lg, axis=1, keepdims=True))
    T, M = table.shape
    # pairwise marginals, normalized slice by slice
    a_hat = np.exp(la[:-1] - logsumexp(la[:-1], axis=1, keepdims=True))
    v = table[1:] + lb[1:]
    b_hat = np.exp(v - v.max(axis=1, keepdims=True))
    z = ((a_hat @ P) * b_hat).sum(axis=1)
    if full_xi:
        xi = a_hat[:, :, None] * P[None, :, :] * b_hat[:, None, :] / z[:, None, None]
    else:
        xi = ((a_hat / z[:, None]).T @ b_hat) * P
    return gamma, xi, log_z


def smoothed_marginals(table, pi, P):
    """Posterior marginals ``gamma`` (T x M) and pairwise marginals ``xi`` ((T-1) x M x M)."""
    gamma, xi, _ = _posteriors(table, pi, P, True)
    return gamma, xi


def expected_stats(table, pi, P):
    """``(gamma, sum_t xi[t], log_evidence)`` without materializing the full pairwise array."""
    return _posteriors(table, pi, P, False)


def log_evidence(counts, params: HmmParams) -> float:
    return forward_messages(emission_logliks(counts, params.Lambda), params.pi, params.P)[1]


def state_count(seq) -> int:
    return int(np.unique(np.asarray(seq)).size)


def occupancy(seq, M: int | None = None) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    if M is None:
        M = int(seq.max()) + 1 if seq.size else 0
    return np.bincount(seq, minlength=M)


def states_covering(seq, fraction: float = 0.95) -> int:
    """Smallest number of states, by decreasing occupancy, covering ``fraction`` of the bins."""
    occ = np.sort(occupancy(seq))[::-1]
    if occ.sum() == 0:
        return 0
    return int(np.searchsorted(np.cumsum(occ), fraction * occ.sum() - 1e-9) + 1)
