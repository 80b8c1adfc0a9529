"""Command-line interface: generate, train, observe, assimilate, bpf, evaluate.

Every command reads one JSON experiment config (see :mod:`sda.config`),
resolves relative paths against the experiment directory and writes a
``.json`` metadata sidecar next to each output. Exit codes: 0 success,
2 invalid configuration, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .composition import ComposedScore
from .config import ConfigError, load_config, parse_override
from .evaluation import (
    PosteriorEnsemble,
    config_hash,
    expected_log_likelihood,
    expected_log_prior,
    log_likelihood_terms,
    log_prior_terms,
    standard_error,
    wasserstein1,
    write_report,
)
from .guidance import GammaMatrix, PosteriorScore
from .lorenz import (
    LorenzModel,
    LorenzParams,
    TrajectoryStore,
    generate_dataset,
    load_store,
    load_trajectories,
    save_store,
    save_trajectories,
    standardize,
)
from .observation import ObservationProcess, load_observation, operator_from_descriptor, save_observation
from .oracle import bpf_sample
from .sampling import SamplerConfig, sample
from .scorenet import (
    NetworkConfig,
    NetworkScore,
    load_checkpoint,
    load_optimizer,
    save_checkpoint,
    save_optimizer,
)
from .training import TrainConfig, train

log = logging.getLogger("sda")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# independent random streams per command, all derived from the global seed
STREAMS = {"generate": 1, "observe": 2, "assimilate": 3, "bpf": 4, "evaluate": 5}


def versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    import scipy

    return {"sda": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_metadata(output: Path, command: str, config: dict, **extra) -> None:
    meta = {"command": command, "config_hash": config_hash(config), "seed": config["seed"],
            "versions": versions(), "config": config, **extra}
    Path(str(output) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


class Experiment:
    def __init__(self, config: dict, root: Path):
        self.config = config
        self.root = root

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def output(self, rel) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def rng(self, command: str):
        return np.random.default_rng([self.config["seed"], STREAMS[command]])

    def lorenz_params(self) -> LorenzParams:
        s = self.config["system"]
        return LorenzParams(s["sigma"], s["rho"], s["beta"], s["dt"], s["substeps"])

    def store(self) -> TrajectoryStore:
        path = self.path(self.config["dataset"]["path"])
        if not path.exists():
            raise FileNotFoundError(f"dataset {path} not found; run 'sda generate' first")
        return load_store(path)

    def model(self, store: TrajectoryStore | None = None) -> LorenzModel:
        store = self.store() if store is None else store
        return LorenzModel.from_store(store, self.lorenz_params())

    def observation(self, override=None) -> ObservationProcess:
        path = self.path(override or self.config["observation"]["path"])
        if not path.exists():
            raise FileNotFoundError(f"observation file {path} not found; run 'sda observe' first")
        return load_observation(path)

    def network(self):
        path = self.path(self.config["network"]["checkpoint"])
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found; run 'sda train' first")
        params = load_checkpoint(path)
        if params.config.window_radius != self.config["network"]["k"]:
            raise ConfigError(f"checkpoint radius k={params.config.window_radius} does not match "
                              f"network.k={self.config['network']['k']}")
        return params


def cmd_generate(exp: Experiment, args) -> int:
    ds = exp.config["dataset"]
    store = generate_dataset(ds["trajectories"], ds["length"], exp.rng("generate"),
                             burn_in=ds["burn_in"], params=exp.lorenz_params())
    store = standardize(store)
    out = exp.output(ds["path"])
    save_store(out, store)
    write_metadata(out, "generate", exp.config, splits=store.splits,
                   means=store.means.tolist(), stds=store.stds.tolist())
    log.info("wrote %s (%d trajectories x %d states)", out, *store.states.shape[:2])
    return EXIT_OK


def cmd_train(exp: Experiment, args) -> int:
    cfg, net, tr = exp.config, exp.config["network"], exp.config["training"]
    store = exp.store()
    if store.states.shape[1] < 2 * net["k"] + 1:
        raise ConfigError(f"dataset trajectories of length {store.states.shape[1]} are shorter "
                          f"than a window of radius k={net['k']}")
    net_config = NetworkConfig(net["k"], store.states.shape[-1], net["hidden_features"],
                               net["residual_blocks"], net["time_embedding_dim"], seed=cfg["seed"])
    train_config = TrainConfig(tr["epochs"], tr["batches_per_epoch"], tr["batch_size"], tr["learning_rate"],
                               tr["weight_decay"], net["k"], cfg["seed"], tr["valid_size"])
    ckpt = exp.output(net["checkpoint"])
    opt_path = Path(str(ckpt) + ".opt")
    params = state = None
    if args.resume or tr["resume"]:
        if not (ckpt.exists() and opt_path.exists()):
            raise FileNotFoundError(f"cannot resume: {ckpt} or {opt_path} is missing")
        params = load_checkpoint(ckpt)
        if params.config != replace(net_config, seed=params.config.seed):
            raise ConfigError("checkpoint architecture does not match the network config")
        state = load_optimizer(opt_path)
        log.info("resuming from step %d", state.step)
    result = train(store, net_config, train_config, params=params, state=state,
                   log_path=exp.output(tr["log"]))
    save_checkpoint(ckpt, result.params)
    save_optimizer(opt_path, result.state)
    write_metadata(ckpt, "train", cfg, step=result.state.step)
    return EXIT_OK


def cmd_observe(exp: Experiment, args) -> int:
    obs_cfg = exp.config["observation"]
    store = exp.store()
    held_out = store.split("eval")
    if len(held_out) == 0:
        raise ConfigError("the evaluation split is empty")
    if not 0 <= obs_cfg["trajectory"] < len(held_out):
        raise ConfigError(f"observation.trajectory must be in [0, {len(held_out)})")
    truth = held_out[obs_cfg["trajectory"], :obs_cfg["length"]]
    try:
        operator = operator_from_descriptor(obs_cfg["operator"])
    except TypeError as err:
        raise ConfigError(f"bad operator descriptor: {err}") from err
    obs = ObservationProcess.simulate(operator, obs_cfg["noise_std"] ** 2, truth, exp.rng("observe"))
    out = exp.output(obs_cfg["path"])
    save_observation(out, obs)
    write_metadata(out, "observe", exp.config)
    truth_out = exp.output(obs_cfg["truth"])
    save_trajectories(truth_out, truth[None], store.means, store.stds)
    write_metadata(truth_out, "observe", exp.config)
    return EXIT_OK


def cmd_assimilate(exp: Experiment, args) -> int:
    cfg, smp = exp.config, exp.config["sampler"]
    params = exp.network()
    store = exp.store()
    prior = ComposedScore(NetworkScore(params))
    obs = None
    if args.unconditional:
        score = prior
    else:
        obs = exp.observation(args.obs)
        score = PosteriorScore(prior, obs, GammaMatrix.scalar(cfg["guidance"]["gamma"]),
                               variant=cfg["guidance"]["variant"])
    length, dim = cfg["observation"]["length"], store.states.shape[-1]
    if obs is not None and obs.operator.output_size(length, dim) != obs.size:
        raise ConfigError("observation size does not match observation.length")
    sampler = SamplerConfig(smp["steps"], smp["corrections"], smp["tau"], cfg["seed"])
    start = time.perf_counter()
    x = sample(score, sampler, (smp["samples"], length, dim), exp.rng("assimilate"), event_ndim=2)
    wall = time.perf_counter() - start
    out = exp.output(smp["output"])
    save_trajectories(out, x, store.means, store.stds)
    write_metadata(out, "assimilate", cfg, unconditional=bool(args.unconditional))
    model = exp.model(store)
    prior_terms = log_prior_terms(x, model)
    stats = {"samples": len(x), "finite_fraction": float(np.mean(np.all(np.isfinite(x), axis=(1, 2)))),
             "expected_log_prior": float(prior_terms.mean()), "expected_log_prior_se": standard_error(prior_terms)}
    if obs is not None:
        ll = log_likelihood_terms(x, obs)
        stats.update(expected_log_likelihood=float(ll.mean()), expected_log_likelihood_se=standard_error(ll))
    report = exp.output(smp["report"])
    write_report(stats, str(report) + ".csv", str(report) + ".json",
                 {"config_hash": config_hash(cfg), "seed": cfg["seed"], "versions": versions()})
    # wall time lives apart so that every other output stays byte-identical
    Path(str(report) + ".timing.json").write_text(json.dumps({"wall_seconds": wall}) + "\n")
    log.info("sampled %d trajectories in %.1f s", len(x), wall)
    return EXIT_OK


def cmd_bpf(exp: Experiment, args) -> int:
    cfg = exp.config
    store = exp.store()
    obs = exp.observation(args.obs)
    x = bpf_sample(exp.model(store), obs, cfg["bpf"]["particles"], cfg["bpf"]["draws"], exp.rng("bpf"),
                   length=cfg["observation"]["length"], dim=store.states.shape[-1])
    out = exp.output(cfg["bpf"]["output"])
    save_trajectories(out, x, store.means, store.stds)
    write_metadata(out, "bpf", cfg)
    return EXIT_OK


def _provenance(path: Path) -> str:
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        return "SDA"
    meta = json.loads(sidecar.read_text())
    if meta.get("command") == "bpf":
        return "BPF"
    if meta.get("command") == "observe":
        return "DATA"
    if meta.get("unconditional"):
        return "PRIOR"
    return "DPS" if meta.get("config", {}).get("guidance", {}).get("variant") == "dps" else "SDA"


def _labels(paths) -> list[str]:
    stems = [Path(p).stem for p in paths]
    return [s if stems.count(s) == 1 else f"{s}{i}" for i, s in enumerate(stems)]


def cmd_evaluate(exp: Experiment, args) -> int:
    cfg = exp.config
    ensembles = []
    for p in args.ensembles:
        states, means, stds = load_trajectories(exp.path(p))
        ensembles.append(PosteriorEnsemble(states, _provenance(exp.path(p)), {"path": str(p)}))
    shapes = {e.trajectories.shape[1:] for e in ensembles}
    if len(shapes) != 1:
        raise ConfigError(f"ensembles have mismatched trajectory shapes: {sorted(shapes)}")
    store = exp.store()
    model = exp.model(store)
    obs = None if args.obs is None and not exp.path(cfg["observation"]["path"]).exists() else exp.observation(args.obs)
    labels = _labels(args.ensembles)
    stats = {}
    for label, ens in zip(labels, ensembles):
        stats[f"{label}.expected_log_prior"] = expected_log_prior(ens, model)
        if obs is not None:
            stats[f"{label}.expected_log_likelihood"] = expected_log_likelihood(ens, obs)
    rng = exp.rng("evaluate")
    for i in range(len(ensembles)):
        for j in range(i + 1, len(ensembles)):
            stats[f"w1.{labels[i]}.{labels[j]}"] = wasserstein1(ensembles[i], ensembles[j],
                                                                cap=cfg["evaluation"]["w1_cap"], rng=rng)
    report = exp.output(cfg["evaluation"]["report"])
    write_report(stats, str(report) + ".csv", str(report) + ".json",
                 {"config_hash": config_hash(cfg), "seed": cfg["seed"], "versions": versions(),
                  "w1_coordinates": "standardized", "inputs": [str(p) for p in args.ensembles]})
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "observe": cmd_observe,
            "assimilate": cmd_assimilate, "bpf": cmd_bpf, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help="experiment directory (default: the config's directory)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry by dotted path, e.g. training.epochs=8")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sda", description="Score-based data assimilation on Lorenz 63.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate and standardize a trajectory dataset")
    p = sub.add_parser("train", parents=[common], help="train the local score network")
    p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    sub.add_parser("observe", parents=[common], help="simulate an observation of a held-out trajectory")
    p = sub.add_parser("assimilate", parents=[common], help="sample trajectories from the posterior")
    p.add_argument("--obs", help="observation file (default: observation.path)")
    p.add_argument("--unconditional", action="store_true", help="sample the prior, ignoring observations")
    p.add_argument("--variant", choices=["sda", "dps"])
    p.add_argument("--corrections", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--samples", type=int)
    p = sub.add_parser("bpf", parents=[common], help="reference posterior from a bootstrap particle filter")
    p.add_argument("--obs", help="observation file (default: observation.path)")
    p.add_argument("--particles", type=int)
    p.add_argument("--draws", type=int)
    p = sub.add_parser("evaluate", parents=[common], help="statistics report for trajectory ensembles")
    p.add_argument("ensembles", nargs="+", help="SDAT ensemble files")
    p.add_argument("--obs", help="observation file (default: observation.path when present)")
    return parser


FLAG_KEYS = {"seed": "seed", "variant": "guidance.variant", "corrections": "sampler.corrections",
             "tau": "sampler.tau", "steps": "sampler.steps", "samples": "sampler.samples",
             "particles": "bpf.particles", "draws": "bpf.draws"}


def _run(args) -> int:
    overrides = [parse_override(text) for text in args.set]
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append((key, value))
    config_path = Path(args.config) if args.config else None
    if config_path is not None and not config_path.exists():
        raise FileNotFoundError(f"config file {config_path} not found")
    config = load_config(config_path, overrides)
    if args.out:
        root = Path(args.out)
    elif config_path is not None:
        root = config_path.parent
    else:
        root = Path.cwd()
    root.mkdir(parents=True, exist_ok=True)
    exp = Experiment(config, root)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](exp, args)
    return COMMANDS[args.command](exp, args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as err:
        print(f"sda: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as err:
        print(f"sda: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"sda: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"sda: invalid input: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
