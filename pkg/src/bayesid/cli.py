"""Command-line entry point ``bayesid``.

Exit codes: 0 on success, 2 on configuration or input errors, 3 on
numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .core import BayesIdError, NumericalError, PreconditionError
from .datasets import IngestionError, gen_allen_cahn, gen_duffing, gen_logistic, gen_pendulum, ingest_csv
from .era import era, realization_to_json
from .experiments import ConfigError, ExperimentConfig, run_experiment, build_settings
from .markov import MarkovSequence, ls_markov_subtraj

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

GENERATORS = ("pendulum", "logistic", "duffing", "allen_cahn")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def _out_dir(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def cmd_simulate(args):
    params = _load_json(args.config) if args.config else {}
    system = params.pop("system", args.system)
    if system not in GENERATORS:
        raise ConfigError(f"system must be one of {GENERATORS}")
    seed = args.seed if args.seed is not None else params.pop("seed", 0)
    params.pop("seed", None)
    try:
        if system == "pendulum":
            params.setdefault("dt", args.dt)
            params.setdefault("noise_ratio", args.noise_ratio)
            data = gen_pendulum(seed=seed, **params)
        elif system == "logistic":
            data = gen_logistic(**params)
        elif system == "duffing":
            data = gen_duffing(seed, **params)
        else:
            data = gen_allen_cahn(seed, **params)
    except TypeError as exc:
        raise ConfigError(f"bad generator parameters: {exc}") from None
    out = _out_dir(args, "simulated")
    path = os.path.join(out, f"{system}.csv")
    data.to_csv(path)
    meta = {k: v.tolist() if isinstance(v, np.ndarray) else v for k, v in data.meta.items()}
    meta.update({"system": system, "seed": seed})
    with open(path[:-4] + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, default=str)
    print(path)


def _fit_config(args, n_samples):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if cfg.experiment != "fit_generic":
            raise ConfigError("fit-map and sample need a fit_generic configuration")
        settings = json.loads(json.dumps(cfg.to_dict()["settings"]))
    else:
        settings = {}
    for key in ("data", "du", "dy", "model", "dx", "max_evals"):
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = v
    if args.normalize:
        settings["normalize"] = True
    if n_samples is not None:
        settings["n_samples"] = n_samples
        settings.setdefault("burn_in", n_samples // 4)
        if args.burn_in is not None:
            settings["burn_in"] = args.burn_in
    seed = args.seed if args.seed is not None else (cfg.seed if args.config else None)
    if seed is None:
        raise ConfigError("a seed is required (--seed or config)")
    return ExperimentConfig("fit_generic", seed, build_settings("fit_generic", settings), args.out)


def cmd_fit_map(args):
    cfg = _fit_config(args, 0)
    bundle = run_experiment(cfg, _out_dir(args, "fit"))
    print(json.dumps(bundle.summary))


def cmd_sample(args):
    cfg = _fit_config(args, args.n_samples)
    bundle = run_experiment(cfg, _out_dir(args, "sample"))
    print(json.dumps(bundle.summary))


def cmd_markov(args):
    data = ingest_csv(args.data, args.du, args.dy)
    G = ls_markov_subtraj(data, args.nbar)
    out = _out_dir(args, "markov")
    path = os.path.join(out, "markov.json")
    with open(path, "w") as fh:
        fh.write(G.to_json())
    print(path)


def cmd_era(args):
    with open(args.markov) as fh:
        G = MarkovSequence.from_json(fh.read())
    model = era(G, args.dx)
    out = _out_dir(args, "era")
    path = os.path.join(out, "realization.json")
    with open(path, "w") as fh:
        fh.write(realization_to_json(model))
    print(path)


def _experiment_from_args(args, name=None):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if name is not None and cfg.experiment != name:
            raise ConfigError(f"configuration is for {cfg.experiment!r}, expected {name!r}")
    else:
        if name is None:
            raise ConfigError("experiment needs --config")
        if args.seed is None:
            raise ConfigError("a seed is required (--seed or config)")
        cfg = ExperimentConfig(name, args.seed, build_settings(name, {}), args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    return cfg


def cmd_landscape(args):
    cfg = _experiment_from_args(args, "landscape")
    bundle = run_experiment(cfg, _out_dir(args, cfg.out or "landscape"))
    print(json.dumps(bundle.summary))


def cmd_experiment(args):
    cfg = _experiment_from_args(args)
    bundle = run_experiment(cfg, _out_dir(args, cfg.out or "results"))
    print(json.dumps(bundle.summary, default=str))
    if bundle.failures:
        print(f"{len(bundle.failures)} trial(s) failed; see metadata.json", file=sys.stderr)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="random seed (u64)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bayesid", description="Bayesian system identification tools")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--system", choices=GENERATORS, default="pendulum")
    s.add_argument("--dt", type=float, default=0.1)
    s.add_argument("--noise-ratio", type=float, default=0.0)
    s.set_defaults(func=cmd_simulate)

    for name, func, help_ in (("fit-map", cmd_fit_map, "MAP fit of a model family to a CSV record"),
                              ("sample", cmd_sample, "MAP then DRAM-within-Gibbs sampling")):
        f = sub.add_parser(name, parents=[common], help=help_)
        f.add_argument("--data")
        f.add_argument("--du", type=int)
        f.add_argument("--dy", type=int)
        f.add_argument("--dx", type=int)
        f.add_argument("--model", choices=("lti", "mlp"))
        f.add_argument("--max-evals", dest="max_evals", type=int)
        f.add_argument("--normalize", action="store_true")
        if name == "sample":
            f.add_argument("--n-samples", dest="n_samples", type=int, default=2000)
            f.add_argument("--burn-in", dest="burn_in", type=int)
        else:
            f.set_defaults(burn_in=None)
        f.set_defaults(func=func)

    m = sub.add_parser("markov", parents=[common], help="single-rollout LS Markov parameters")
    m.add_argument("--data", required=True)
    m.add_argument("--du", type=int, required=True)
    m.add_argument("--dy", type=int, required=True)
    m.add_argument("--nbar", type=int, required=True)
    m.set_defaults(func=cmd_markov)

    e = sub.add_parser("era", parents=[common], help="realization from Markov parameters")
    e.add_argument("--markov", required=True, help="Markov-parameter JSON")
    e.add_argument("--dx", type=int, required=True)
    e.set_defaults(func=cmd_era)

    ls = sub.add_parser("landscape", parents=[common], help="logistic-map objective landscapes")
    ls.set_defaults(func=cmd_landscape)

    x = sub.add_parser("experiment", parents=[common], help="run a configured experiment")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, PreconditionError, IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BayesIdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
