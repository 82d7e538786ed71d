"""Batch command line: ``hdphmm simulate|fit|evaluate|decode --config <path>``.

Each command reads a JSON config, applies ``--seed``, ``--out`` and
``--set key=value`` overrides, and writes its outputs plus a
``manifest.json`` echoing the resolved config. Outputs depend only on the
inputs, the config and the seed.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import SplitSpec, load_counts, load_positions, save_counts, save_positions, split
from .distributions import make_rng
from .errors import NumericalError, ValidationError
from .evaluation import (
    MetricsReport,
    SpatialBinning,
    baseline_predictive_ll,
    baseline_rates,
    bits_per_spike,
    chance_decode_error,
    chance_information,
    decode_error,
    decode_positions,
    greedy_state_match,
    mutual_information,
    state_location_map,
    write_trajectory_csv,
)
from .hmm import state_count, states_covering
from .pipeline import FitSettings, fit, load_fit, predictive_ll, save_fit, state_marginals
from .synth import SimConfig, inject_nb_noise, sample_hdp_hmm, simulate, simulate_spatial, write_truth

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("hdphmm")

# RNG stream numbers, one per purpose, so commands never share draws
_STREAM_SIM, _STREAM_FIT, _STREAM_PRED, _STREAM_SHUFFLE = 0, 1, 2, 3


class ConfigError(ValidationError):
    pass


def load_config(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def apply_overrides(cfg: dict, pairs) -> dict:
    """``key=value`` pairs; values are parsed as JSON when possible, dotted keys reach nested objects."""
    cfg = json.loads(json.dumps(cfg))
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def _take(cfg: dict, allowed: set, section: str) -> None:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")


def _require(cfg: dict, key: str, section: str):
    if key not in cfg:
        raise ConfigError(f"{section}: missing required field {key!r}")
    return cfg[key]


def write_manifest(out: Path, command: str, cfg: dict, seed: int, outputs) -> None:
    manifest = {"command": command, "version": __version__, "seed": seed, "config": cfg,
                "outputs": sorted(outputs)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _split_for(counts, cfg):
    T_test = int(cfg.get("T_test", 0))
    if T_test < 0 or T_test >= counts.T:
        raise ConfigError(f"T_test must lie in [0, {counts.T - 1}], got {T_test}")
    return SplitSpec.holdout(counts.T, T_test)


# commands

def cmd_simulate(cfg: dict, seed: int, out: Path) -> tuple:
    sim_fields = {f.name for f in fields(SimConfig)}
    _take(cfg, sim_fields, "simulate")
    sc = SimConfig.from_json({**cfg, "seed": seed})
    rng = make_rng(seed, _STREAM_SIM)
    params, hdp = sample_hdp_hmm(rng, sc)
    files = ["counts.csv", "truth.json"]
    centers = None
    if sc.spatial is not None:
        seq, counts, pos, centers = simulate_spatial(rng, params, sc.T, sc.spatial, sc.bin_width)
        save_positions(pos, out / "positions.csv")
        files.append("positions.csv")
    else:
        seq, counts = simulate(rng, params, sc.T, sc.bin_width)
    if sc.nb_noise is not None:
        counts = inject_nb_noise(rng, counts, sc.nb_noise.mean, sc.nb_noise.variance)
    save_counts(counts, out / "counts.csv")
    write_truth(out / "truth.json", seq, params, hdp, sc, centers)
    return files, sc.to_json()


_FIT_KEYS = {f.name for f in fields(FitSettings)} | {"counts", "T_test", "chains"}


def _fit_one(args):
    train, settings, seed, chain, out = args
    result = fit(make_rng(seed, _STREAM_FIT + 16 * (chain or 0)), train, settings)
    return [str(Path(out.name) / f) if chain is not None else f for f in save_fit(result, out)]


def cmd_fit(cfg: dict, seed: int, out: Path) -> tuple:
    _take(cfg, _FIT_KEYS, "fit")
    counts = load_counts(_require(cfg, "counts", "fit"))
    settings = FitSettings(**{k: v for k, v in cfg.items() if k in {f.name for f in fields(FitSettings)}})
    train, _ = split(counts, _split_for(counts, cfg))
    chains = int(cfg.get("chains", 1))
    if chains < 1:
        raise ConfigError("fit: chains must be >= 1")
    resolved = {**asdict(settings), "counts": cfg["counts"], "T_test": int(cfg.get("T_test", 0)),
                "chains": chains}
    if chains == 1:
        return _fit_one((train, settings, seed, None, out)), resolved
    jobs = []
    for k in range(chains):
        d = out / f"chain_{k}"
        d.mkdir(parents=True, exist_ok=True)
        jobs.append((train, settings, seed, k, d))
    with ProcessPoolExecutor(max_workers=min(chains, 8)) as pool:
        return [f for files in pool.map(_fit_one, jobs) for f in files], resolved


def _fit_summary(result):
    if result.is_mcmc:
        seq = result.last_seq()
    else:
        seq = np.argmax(result.vstate.gamma, axis=1)
    return seq, state_count(seq), states_covering(seq, 0.95)


def cmd_evaluate(cfg: dict, seed: int, out: Path) -> tuple:
    _take(cfg, {"counts", "fit_dir", "T_test", "truth", "vb_draws"}, "evaluate")
    counts = load_counts(_require(cfg, "counts", "evaluate"))
    result = load_fit(_require(cfg, "fit_dir", "evaluate"))
    spec = _split_for(counts, cfg)
    if spec.test_range[1] == spec.test_range[0]:
        raise ConfigError("evaluate: T_test must be positive")
    train, test = split(counts, spec)
    if "vb_draws" in cfg:
        result.settings = replace(result.settings, vb_draws=int(cfg["vb_draws"]))
    base = baseline_predictive_ll(test, baseline_rates(train))
    model = predictive_ll(make_rng(seed, _STREAM_PRED), result, test)
    seq, n, n95 = _fit_summary(result)
    report = MetricsReport(baseline_ll=base, model_ll=model,
                           bits_per_spike=bits_per_spike(model, base, test),
                           n_states=n, n_states_95=n95)
    extra = {}
    if "truth" in cfg:
        truth = json.loads(Path(cfg["truth"]).read_text())
        true_seq = np.asarray(truth["states"], dtype=np.int64)[: train.T]
        if true_seq.size != seq.size:
            raise ConfigError("evaluate: truth states do not cover the training range")
        match = greedy_state_match(true_seq, seq)
        extra = {"true_n_states": state_count(true_seq), "matched_fraction": match.matched_fraction,
                 "matched_pairs": [list(p) for p in match.mapping]}
    report.write(out / "metrics.json", extra)
    return ["metrics.json"], {**cfg, "T_test": spec.test_range[1] - spec.test_range[0],
                              "vb_draws": result.settings.vb_draws}


def cmd_decode(cfg: dict, seed: int, out: Path) -> tuple:
    keys = {"counts", "positions", "fit_dir", "T_test", "arena_radius", "n_angular", "n_radial",
            "circular", "center", "n_shuffles"}
    _take(cfg, keys, "decode")
    counts = load_counts(_require(cfg, "counts", "decode"))
    pos = load_positions(_require(cfg, "positions", "decode"), center=cfg.get("center"))
    if len(pos) != counts.T:
        raise ConfigError(f"decode: {len(pos)} positions for {counts.T} bins")
    result = load_fit(_require(cfg, "fit_dir", "decode"))
    spec = _split_for(counts, cfg)
    if spec.test_range[1] == spec.test_range[0]:
        raise ConfigError("decode: zero-length test range (set T_test > 0)")
    train, test = split(counts, spec)
    pos_train = pos.select(slice(*spec.train_range))
    pos_test = pos.select(slice(*spec.test_range))
    binning = SpatialBinning(int(cfg.get("n_angular", 11)), int(cfg.get("n_radial", 11)),
                             float(cfg.get("arena_radius", 60.0)))
    circular = bool(cfg.get("circular", False))
    n_sh = int(cfg.get("n_shuffles", 100))
    smap = state_location_map(state_marginals(result, train), pos_train, binning)
    w_test = state_marginals(result, test)
    r_hat, th_hat = decode_positions(w_test, smap, circular=circular)
    err, summary = decode_error(r_hat, th_hat, pos_test)
    write_trajectory_csv(out / "trajectory.csv", pos_test, r_hat, th_hat, err)
    rng = make_rng(seed, _STREAM_SHUFFLE)
    seq_test = np.argmax(w_test, axis=1)
    d = {"mean_cm": summary.mean_cm, "sd_cm": summary.sd_cm,
         "chance_cm": chance_decode_error(rng, r_hat, th_hat, pos_test, n_sh),
         "mi_bits": mutual_information(seq_test, pos_test, binning),
         "chance_mi_bits": chance_information(rng, seq_test, pos_test, binning, n_sh)}
    (out / "decode.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    resolved = {**cfg, "T_test": spec.test_range[1] - spec.test_range[0], "n_angular": binning.n_angular,
                "n_radial": binning.n_radial, "arena_radius": binning.arena_radius, "circular": circular,
                "n_shuffles": n_sh, "center": list(pos.center)}
    return ["trajectory.csv", "decode.json"], resolved


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate, "decode": cmd_decode}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdphmm", description="HDP-HMM fitting for count time series")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON config file")
        s.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (default: config 'seed' or 0)")
        s.add_argument("--out", default=None, help="output directory (default: config 'out' or '.')")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args.set)
        seed = args.seed if args.seed is not None else int(cfg.pop("seed", 0))
        cfg.pop("seed", None)
        out = Path(args.out if args.out is not None else cfg.pop("out", "."))
        cfg.pop("out", None)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        out.mkdir(parents=True, exist_ok=True)
        outputs, resolved = COMMANDS[args.command](cfg, seed, out)
        write_manifest(out, args.command, resolved, seed, outputs)
    except ValidationError as exc:
        print(f"hdphmm {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"hdphmm {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"hdphmm {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
