"""Method dispatch shared by the command line and the acceptance checks.

Five fitting methods are available:

``mcmc-hmc``  HDP-HMM, Gibbs sampling, rate hyperparameters by HMC
``mcmc-eb``   HDP-HMM, Gibbs sampling, rate hyperparameters fixed by empirical Bayes
``vb``        HDP-HMM, variational Bayes, empirical-Bayes hyperparameters
``hmm-mcmc``  finite HMM with a given number of states, Gibbs sampling with HMC
``hmm-vb``    finite HMM with a given number of states, variational Bayes
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import CountMatrix
from .errors import ValidationError
from .evaluation import marginals_mcmc, marginals_vb, predictive_ll_mcmc, predictive_ll_vb
from .gibbs import ChainTrace, GibbsConfig, GibbsState, run_chain, run_finite_hmm_chain
from .hmm import HmmParams
from .vb import VariationalState, VBConfig, run_vb

METHODS = ("mcmc-hmc", "mcmc-eb", "vb", "hmm-mcmc", "hmm-vb")
MCMC_METHODS = ("mcmc-hmc", "mcmc-eb", "hmm-mcmc")


@dataclass(frozen=True)
class FitSettings:
    method: str = "mcmc-hmc"
    M: int = 80
    n_states: Optional[int] = None   # finite-HMM methods only
    n_iters: int = 300
    n_keep: int = 50                 # posterior samples retained for prediction
    vb_iters: int = 100
    alpha0: float = 4.0              # VB concentrations; finite-HMM row concentration uses finite_alpha0
    gamma: float = 8.0
    finite_alpha0: float = 1.0
    vb_draws: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.method.startswith("hmm-") and not (self.n_states and self.n_states >= 1):
            raise ValidationError(f"method {self.method} needs n_states >= 1")
        if self.n_keep < 1 or self.vb_draws < 1:
            raise ValidationError("n_keep and vb_draws must be >= 1")


@dataclass
class FitResult:
    settings: FitSettings
    trace: Optional[ChainTrace] = None
    vstate: Optional[VariationalState] = None
    elbo_trace: list = field(default_factory=list)

    @property
    def is_mcmc(self) -> bool:
        return self.trace is not None

    def samples(self) -> list:
        """Retained posterior samples (MCMC) as :class:`HmmParams`."""
        return [s.hmm for s in self.trace.last(self.settings.n_keep)]

    def last_seq(self) -> np.ndarray:
        return self.trace.snapshots[-1].seq


def gibbs_config(settings: FitSettings, **overrides) -> GibbsConfig:
    finite = settings.method == "hmm-mcmc"
    base = GibbsConfig(M=settings.n_states if finite else settings.M, n_iters=settings.n_iters,
                       hyper_mode="eb" if settings.method == "mcmc-eb" else "hmc",
                       alpha0=settings.finite_alpha0)
    return replace(base, **overrides)


def vb_config(settings: FitSettings, **overrides) -> VBConfig:
    finite = settings.method == "hmm-vb"
    base = VBConfig(M=settings.n_states if finite else settings.M, n_iters=settings.vb_iters,
                    alpha0=settings.finite_alpha0 if finite else settings.alpha0,
                    gamma_conc=settings.gamma, finite=finite)
    return replace(base, **overrides)


def fit(rng, train: CountMatrix, settings: FitSettings) -> FitResult:
    if settings.method in MCMC_METHODS:
        cfg = gibbs_config(settings)
        runner = run_finite_hmm_chain if settings.method == "hmm-mcmc" else run_chain
        return FitResult(settings, trace=runner(rng, train, cfg))
    vs, tr = run_vb(train, vb_config(settings), rng)
    return FitResult(settings, vstate=vs, elbo_trace=tr)


def predictive_ll(rng, result: FitResult, test: CountMatrix) -> float:
    if result.is_mcmc:
        return predictive_ll_mcmc(result.samples(), test)
    return predictive_ll_vb(result.vstate, result.settings.vb_draws, rng, test)


def state_marginals(result: FitResult, counts: CountMatrix) -> np.ndarray:
    """State marginals for ``counts``: averaged over retained samples, or ``q(S)`` for VB."""
    if result.is_mcmc:
        return marginals_mcmc(result.samples(), counts)
    return marginals_vb(result.vstate, counts)


def point_params(result: FitResult) -> HmmParams:
    """A single representative parameter set (last sample, or factor means)."""
    if result.is_mcmc:
        return result.trace.snapshots[-1].hmm
    vs = result.vstate
    M = vs.M
    rows = np.vstack([vs.trans, vs.init[None, :]])[:, :M]
    rows = rows / rows.sum(axis=1, keepdims=True)
    return HmmParams(rows[M], rows[:M], vs.rate_means())


# persistence

def save_fit(result: FitResult, out_dir) -> list:
    """Write a fit's artifacts into ``out_dir``; returns the file names written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "settings.json").write_text(json.dumps(asdict(result.settings), indent=2, sort_keys=True) + "\n")
    files = ["settings.json"]
    if result.is_mcmc:
        result.trace.write_csv(out / "trace.csv")
        result.trace.write_snapshots(out / "samples.json", result.settings.n_keep)
        files += ["trace.csv", "samples.json"]
    else:
        result.vstate.write(out / "factors.json")
        with (out / "elbo.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "elbo"])
            for i, v in enumerate(result.elbo_trace):
                w.writerow([i, repr(float(v))])
        files += ["factors.json", "elbo.csv"]
    return files


def load_fit(fit_dir) -> FitResult:
    d = Path(fit_dir)
    settings = FitSettings(**json.loads((d / "settings.json").read_text()))
    if settings.method in MCMC_METHODS:
        trace = ChainTrace()
        trace.snapshots = [GibbsState.from_json(s) for s in json.loads((d / "samples.json").read_text())]
        if not trace.snapshots:
            raise ValidationError(f"{d / 'samples.json'} holds no samples")
        return FitResult(settings, trace=trace)
    vs = VariationalState.from_json(json.loads((d / "factors.json").read_text()))
    return FitResult(settings, vstate=vs)
