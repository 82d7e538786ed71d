"""Assessing fitted models: predictive likelihood, state alignment, position
decoding, place fields and mutual information.

Predictive log-likelihoods follow the homogeneous-Poisson baseline in
dropping the ``sum lnGamma(y + 1)`` terms, so their differences are free of
constants.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .data import CountMatrix, PositionTrace
from .errors import LengthMismatch, NoSpikes, UncoveredState, ValidationError, ZeroRateWithSpikes
from .hmm import HmmParams, emission_logliks, forward_messages, smoothed_marginals
from .vb import VariationalState, build_surrogate, update_state_factor


def _log_factorial_total(counts: CountMatrix) -> float:
    return float(gammaln(counts.counts + 1.0).sum())


# predictive likelihood

def baseline_rates(train: CountMatrix) -> np.ndarray:
    """Per-cell mean count over the training bins."""
    train.require_nonempty()
    return train.counts.mean(axis=1)


def baseline_predictive_ll(test: CountMatrix, rates) -> float:
    """``sum_c [-T_test rate_c + sum_t y_ct ln rate_c]``.

    A cell with zero training rate that spikes at test time makes the
    likelihood ``-inf``; this is returned with a :class:`ZeroRateWithSpikes` warning.
    """
    rates = np.asarray(rates, dtype=float)
    if rates.shape != (test.C,):
        raise LengthMismatch(f"{rates.shape[0]} rates for {test.C} cells")
    totals = test.counts.sum(axis=1).astype(float)
    bad = (rates == 0) & (totals > 0)
    if bad.any():
        warnings.warn(ZeroRateWithSpikes(f"cells {np.flatnonzero(bad).tolist()} have zero training rate"),
                      stacklevel=2)
        return -np.inf
    with np.errstate(divide="ignore"):
        log_rates = np.where(rates > 0, np.log(np.where(rates > 0, rates, 1.0)), 0.0)
    return float((-test.T * rates + totals * log_rates).sum())


def _log_mean_exp(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(logsumexp(values) - np.log(values.size))


def predictive_ll_mcmc(samples: Sequence[HmmParams], test: CountMatrix) -> float:
    """Log of the average test evidence over posterior samples.

    Each sample's evidence marginalizes the test states by forward filtering
    from the sample's initial distribution. The data-only term ``sum ln y!``
    is left out, matching :func:`baseline_predictive_ll`.
    """
    if len(samples) == 0:
        raise ValidationError("need at least one posterior sample")
    test.require_nonempty()
    ev = [forward_messages(emission_logliks(test, s.Lambda), s.pi, s.P)[1] for s in samples]
    return _log_mean_exp(ev) + _log_factorial_total(test)


def sample_variational_params(rng, vstate: VariationalState) -> HmmParams:
    """One draw of ``(pi, P, Lambda)`` from the variational factors.

    The overflow entry of each Dirichlet draw is discarded and the first
    ``M`` entries renormalized, so the draw is an ``M``-state HMM.
    """
    M = vstate.M
    lam = rng.gamma(vstate.a_tilde, 1.0 / vstate.b_tilde)
    rows = rng.gamma(np.vstack([vstate.trans, vstate.init[None, :]]))[:, :M]
    tiny = np.finfo(float).tiny
    rows = np.maximum(rows, tiny)
    rows /= rows.sum(axis=1, keepdims=True)
    return HmmParams(rows[M], rows[:M], np.maximum(lam, tiny))


def predictive_ll_vb(vstate: VariationalState, n_draws: int, rng, test: CountMatrix) -> float:
    """Monte Carlo predictive log-likelihood with parameters drawn from the factors."""
    if n_draws < 1:
        raise ValidationError("n_draws must be >= 1")
    return predictive_ll_mcmc([sample_variational_params(rng, vstate) for _ in range(n_draws)], test)


def bits_per_spike(model_ll: float, baseline_ll: float, test: CountMatrix) -> float:
    spikes = int(test.counts.sum())
    if spikes <= 0:
        raise NoSpikes("test set has no spikes")
    return float((model_ll - baseline_ll) / (np.log(2.0) * spikes))


# state alignment

@dataclass(frozen=True)
class StateMatch:
    mapping: list          # (true_state, inferred_state) pairs in the order they were matched
    overlap: np.ndarray    # K_true x K_inferred co-occupancy counts

    @property
    def matched_bins(self) -> int:
        return int(sum(self.overlap[i, j] for i, j in self.mapping))

    @property
    def matched_fraction(self) -> float:
        total = self.overlap.sum()
        return self.matched_bins / total if total else 0.0


def contingency(true_seq, inferred_seq) -> np.ndarray:
    a = np.asarray(true_seq, dtype=np.int64)
    b = np.asarray(inferred_seq, dtype=np.int64)
    if a.shape != b.shape:
        raise LengthMismatch(f"sequences have lengths {a.size} and {b.size}")
    ka = int(a.max()) + 1 if a.size else 0
    kb = int(b.max()) + 1 if b.size else 0
    table = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def greedy_match(overlap) -> list:
    """Repeatedly pair the unmatched row and column with the largest overlap.

    Ties go to the lower row, then the lower column. Stops when either side
    runs out or no unmatched pair shares any bins.
    """
    table = np.array(overlap, dtype=float)
    pairs = []
    for _ in range(min(table.shape)):
        # argmax returns the first maximum in row-major order, which is the tie rule
        i, j = np.unravel_index(int(np.argmax(table)), table.shape)
        if table[i, j] <= 0:
            break
        pairs.append((int(i), int(j)))
        table[i, :] = -np.inf
        table[:, j] = -np.inf
    return pairs


def greedy_state_match(true_seq, inferred_seq) -> StateMatch:
    table = contingency(true_seq, inferred_seq)
    return StateMatch(greedy_match(table), table)


# spatial maps

@dataclass(frozen=True)
class SpatialBinning:
    """Equal-area polar grid: ring edges ``R sqrt(k / n_radial)``, uniform angular sectors."""

    n_angular: int = 11
    n_radial: int = 11
    arena_radius: float = 60.0

    def __post_init__(self):
        if self.n_angular < 1 or self.n_radial < 1 or not self.arena_radius > 0:
            raise ValidationError("binning needs positive counts and radius")

    @property
    def n_bins(self) -> int:
        return self.n_angular * self.n_radial

    @property
    def radial_edges(self) -> np.ndarray:
        return self.arena_radius * np.sqrt(np.arange(self.n_radial + 1) / self.n_radial)

    @property
    def angular_edges(self) -> np.ndarray:
        return np.linspace(-np.pi, np.pi, self.n_angular + 1)

    def areas(self) -> np.ndarray:
        re, ae = self.radial_edges, self.angular_edges
        ring = 0.5 * (re[1:] ** 2 - re[:-1] ** 2)
        return (ring[:, None] * np.diff(ae)[None, :]).ravel()

    def bin_index(self, r, theta) -> np.ndarray:
        """Flat index ``ring * n_angular + sector``; radii past the wall go to the outer ring."""
        r = np.asarray(r, dtype=float)
        theta = np.asarray(theta, dtype=float)
        ring = np.clip(np.floor(self.n_radial * (r / self.arena_radius) ** 2).astype(np.int64),
                       0, self.n_radial - 1)
        sector = np.clip(np.floor((theta + np.pi) / (2 * np.pi) * self.n_angular).astype(np.int64),
                         0, self.n_angular - 1)
        return ring * self.n_angular + sector


@dataclass(frozen=True)
class StateLocationMap:
    mean_r: np.ndarray          # M, NaN where the state is never visited
    mean_theta: np.ndarray      # M, plain average of angles
    mean_theta_circ: np.ndarray # M, circular mean of angles
    location_dist: np.ndarray   # M x n_bins, rows sum to 1 for visited states, 0 otherwise
    occupancy: np.ndarray       # M, (expected) number of bins per state
    binning: SpatialBinning

    @property
    def covered(self) -> np.ndarray:
        return self.occupancy > 0


def _state_weights(states, M: Optional[int]) -> np.ndarray:
    states = np.asarray(states)
    if states.ndim == 2:
        if M is not None and states.shape[1] != M:
            raise LengthMismatch(f"marginals have {states.shape[1]} states, expected {M}")
        return states.astype(float)
    seq = states.astype(np.int64)
    M = int(seq.max()) + 1 if M is None else M
    w = np.zeros((seq.size, M))
    w[np.arange(seq.size), seq] = 1.0
    return w


def state_location_map(states, pos: PositionTrace, binning: SpatialBinning = SpatialBinning(),
                       M: Optional[int] = None) -> StateLocationMap:
    """Per-state mean location and location histogram.

    ``states`` is either a state sequence (hard assignment) or a ``T x M``
    array of marginals (each bin contributes fractionally).
    """
    w = _state_weights(states, M)
    if w.shape[0] != len(pos):
        raise LengthMismatch(f"{w.shape[0]} bins of states but {len(pos)} positions")
    occ = w.sum(axis=0)
    r, th = pos.r, pos.theta
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_r = (w.T @ r) / occ
        mean_th = (w.T @ th) / occ
        mean_th_c = np.arctan2(w.T @ np.sin(th), w.T @ np.cos(th))
        idx = binning.bin_index(r, th)
        onehot = np.zeros((len(pos), binning.n_bins))
        onehot[np.arange(len(pos)), idx] = 1.0
        hist = w.T @ onehot
        dist = np.where(occ[:, None] > 0, hist / occ[:, None], 0.0)
    empty = occ <= 0
    mean_r[empty] = np.nan
    mean_th[empty] = np.nan
    mean_th_c[empty] = np.nan
    return StateLocationMap(mean_r, mean_th, mean_th_c, dist, occ, binning)


def decode_positions(marginals, smap: StateLocationMap, circular: bool = False,
                     uncovered_tol: float = 1e-3):
    """Weighted means ``r_hat = sum_i r_i Pr(S_t = i)`` and likewise for the angle.

    By default the angle is the plain weighted average of the state angles.
    With ``circular=True`` both the state angles and the weighted average
    are circular means. Mass below ``uncovered_tol`` on states without a
    training location is dropped and the rest renormalized; more raises
    :class:`UncoveredState`.
    """
    w = np.asarray(marginals, dtype=float)
    if w.ndim != 2 or w.shape[1] != smap.mean_r.shape[0]:
        raise LengthMismatch(f"marginals of shape {w.shape} do not fit a {smap.mean_r.shape[0]}-state map")
    cov = smap.covered
    if (~cov).any():
        stray = w[:, ~cov].sum(axis=1)
        if stray.max(initial=0.0) > uncovered_tol:
            t = int(np.argmax(stray))
            raise UncoveredState(f"bin {t} puts mass {stray[t]:.3g} on states never seen in training")
        w = w[:, cov] / w[:, cov].sum(axis=1, keepdims=True)
    r_hat = w @ smap.mean_r[cov]
    if circular:
        th = smap.mean_theta_circ[cov]
        th_hat = np.arctan2(w @ np.sin(th), w @ np.cos(th))
    else:
        th_hat = w @ smap.mean_theta[cov]
    return r_hat, th_hat


@dataclass(frozen=True)
class DecodeSummary:
    mean_cm: float
    sd_cm: float


def decode_error(r_hat, theta_hat, pos: PositionTrace):
    """Per-bin Euclidean error (cm) after converting both positions to Cartesian."""
    r_hat = np.asarray(r_hat, dtype=float)
    theta_hat = np.asarray(theta_hat, dtype=float)
    if r_hat.shape != (len(pos),):
        raise LengthMismatch(f"{r_hat.size} decoded bins for {len(pos)} positions")
    dx = r_hat * np.cos(theta_hat) - (pos.x - pos.center[0])
    dy = r_hat * np.sin(theta_hat) - (pos.y - pos.center[1])
    err = np.hypot(dx, dy)
    return err, DecodeSummary(float(err.mean()), float(err.std()))


def place_field(smap: StateLocationMap, rates, state_probs) -> np.ndarray:
    """``field(l) ~ sum_i rate_i Pr(S = i) p(l | S = i)``, normalized over spatial bins."""
    wts = np.asarray(rates, dtype=float) * np.asarray(state_probs, dtype=float)
    field = wts @ smap.location_dist
    total = field.sum()
    if total <= 0:
        raise ValidationError("place field has no mass")
    return field / total


# information

def _entropy_bits(p) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _mi_from_joint(joint) -> float:
    joint = joint / joint.sum()
    ps = joint.sum(axis=1, keepdims=True)
    pl = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(max(0.0, (joint[nz] * np.log2(joint[nz] / (ps @ pl)[nz])).sum()))


def _location_bins(seq, pos, binning):
    seq = np.asarray(seq, dtype=np.int64)
    if seq.shape[0] != len(pos):
        raise LengthMismatch(f"{seq.shape[0]} states but {len(pos)} positions")
    return seq, binning.bin_index(pos.r, pos.theta)


def mutual_information(seq, pos: PositionTrace, binning: SpatialBinning = SpatialBinning()) -> float:
    """Plug-in ``I(S; L)`` in bits from co-occurrence counts."""
    seq, loc = _location_bins(seq, pos, binning)
    if seq.size == 0:
        return 0.0
    joint = np.zeros((int(seq.max()) + 1, binning.n_bins))
    np.add.at(joint, (seq, loc), 1.0)
    return _mi_from_joint(joint)


def per_state_information(seq, pos: PositionTrace, binning: SpatialBinning = SpatialBinning(),
                          M: Optional[int] = None) -> np.ndarray:
    """``I(1[S = i]; L)`` in bits for every state ``i``."""
    seq, loc = _location_bins(seq, pos, binning)
    M = (int(seq.max()) + 1 if seq.size else 0) if M is None else M
    out = np.zeros(M)
    for i in range(M):
        joint = np.zeros((2, binning.n_bins))
        np.add.at(joint, ((seq == i).astype(np.int64), loc), 1.0)
        if seq.size:
            out[i] = _mi_from_joint(joint)
    return out


def entropy_bits(labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    return _entropy_bits(np.bincount(labels) / labels.size)


# shuffle controls

def circular_shifts(rng, T: int, n: int = 100, min_frac: float = 0.05) -> np.ndarray:
    """Random circular shifts at least ``min_frac * T`` bins away from zero."""
    lo = max(1, int(min_frac * T))
    hi = max(lo, T - lo)
    return rng.integers(lo, hi + 1, size=n)


def shuffled_decode_errors(rng, r_hat, theta_hat, pos: PositionTrace, n: int = 100) -> np.ndarray:
    """Mean decoding error when the true trajectory is circularly shifted against the decoded one."""
    out = np.empty(n)
    for k, s in enumerate(circular_shifts(rng, len(pos), n)):
        idx = np.roll(np.arange(len(pos)), s)
        out[k] = decode_error(r_hat, theta_hat, pos.select(idx))[1].mean_cm
    return out


def shuffled_information(rng, seq, pos: PositionTrace, binning: SpatialBinning = SpatialBinning(),
                         n: int = 100) -> np.ndarray:
    out = np.empty(n)
    for k, s in enumerate(circular_shifts(rng, len(pos), n)):
        out[k] = mutual_information(seq, pos.select(np.roll(np.arange(len(pos)), s)), binning)
    return out


def chance_decode_error(rng, r_hat, theta_hat, pos: PositionTrace, n: int = 100) -> float:
    """Error that a real decoder must beat: better than 95% of the shuffles (their 5th percentile)."""
    return float(np.percentile(shuffled_decode_errors(rng, r_hat, theta_hat, pos, n), 5))


def chance_information(rng, seq, pos: PositionTrace, binning: SpatialBinning = SpatialBinning(),
                       n: int = 100) -> float:
    """95th percentile of the shuffled mutual information."""
    return float(np.percentile(shuffled_information(rng, seq, pos, binning, n), 95))


# state posteriors on new data

def marginals_mcmc(samples: Sequence[HmmParams], counts: CountMatrix) -> np.ndarray:
    """Smoothed state marginals averaged over posterior samples."""
    if len(samples) == 0:
        raise ValidationError("need at least one posterior sample")
    acc = None
    for s in samples:
        g, _ = smoothed_marginals(emission_logliks(counts, s.Lambda), s.pi, s.P)
        acc = g if acc is None else acc + g
    return acc / len(samples)


def marginals_vb(vstate: VariationalState, counts: CountMatrix) -> np.ndarray:
    """``q(S)`` marginals for new counts under the fitted factors."""
    return update_state_factor(build_surrogate(vstate, counts))[0]


# reports

@dataclass
class MetricsReport:
    baseline_ll: Optional[float] = None
    model_ll: Optional[float] = None
    bits_per_spike: Optional[float] = None
    decode_mean_cm: Optional[float] = None
    decode_sd_cm: Optional[float] = None
    mi_bits: Optional[float] = None
    n_states: Optional[int] = None
    n_states_95: Optional[int] = None

    def to_json(self) -> dict:
        return {k: (None if v is None else (float(v) if isinstance(v, float) else v))
                for k, v in asdict(self).items()}

    def write(self, path, extra: Optional[dict] = None) -> None:
        d = self.to_json()
        if extra:
            d.update(extra)
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def write_trajectory_csv(path, pos: PositionTrace, r_hat, theta_hat, err) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "r_true", "theta_true", "r_hat", "theta_hat", "err_cm"])
        for row in zip(pos.t_index, pos.r, pos.theta, r_hat, theta_hat, err):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
