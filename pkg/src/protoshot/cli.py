"""Command-line driver.

All randomness derives from one seed (``--seed`` or the config's ``seed``)
through the named streams in :mod:`protoshot.numerics`, so every output file
is reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .encoder import encoder_from_dict
from .episodes import MixtureSpec, make_gaussian_mixture, split_train_test_classes
from .errors import ContractError
from .experiments import export_distance_matrix, export_similarity_matrix, shot_sweep
from .io import load_dataset, load_json, save_dataset, save_json, write_csv, write_metrics_csv
from .numerics import STREAM_DATA, STREAM_EVAL, STREAM_INIT, Rng
from .training import TrainConfig, evaluate, make_encoder, radius_dynamics_run, train

log = logging.getLogger("protoshot")

COMMANDS = ("gen-data", "train", "eval", "grad-check", "radius-dynamics", "export-matrices", "shot-sweep")


class ConfigError(ValueError):
    pass


@dataclass
class RadiusSettings:
    anchor: int = 0
    warmup: int = 500
    total: int = 2000
    log_every: int = 50
    max_retries: int = 200


@dataclass
class ExportSettings:
    n_classes: int = 5
    n_per_class: int = 5
    distance: bool = True
    similarity: bool = True


@dataclass
class GradCheckSettings:
    configs: int = 100
    h: float = 1e-5


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict | None = None  # {"train": path, "test": path}
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    n_test_classes: int = 5
    checkpoint: str | None = None
    shots: list = field(default_factory=lambda: [1, 5])
    radius: RadiusSettings = field(default_factory=RadiusSettings)
    export: ExportSettings = field(default_factory=ExportSettings)
    grad_check: GradCheckSettings = field(default_factory=GradCheckSettings)


def _build(cls, d, where: str, skip=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ContractError) as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_run_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    train_keys = TrainConfig.field_names()
    sections = {"data", "mixture", "n_test_classes", "checkpoint", "shots", "radius", "export", "grad_check"}
    unknown = sorted(set(raw) - train_keys - sections)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}")
    rc = RunConfig(train=_build(TrainConfig, {k: v for k, v in raw.items() if k in train_keys}, "config"))
    if "mixture" in raw:
        # the mixture is always seeded from the run seed
        rc.mixture = _build(MixtureSpec, raw["mixture"], "mixture", skip=("seed",))
    for key, cls in (("radius", RadiusSettings), ("export", ExportSettings), ("grad_check", GradCheckSettings)):
        if key in raw:
            setattr(rc, key, _build(cls, raw[key], key))
    if "data" in raw:
        d = raw["data"]
        if not isinstance(d, dict) or set(d) != {"train", "test"}:
            raise ConfigError('data: expected {"train": path, "test": path}')
        rc.data = {k: str((base_dir / v)) for k, v in d.items()}
    if "checkpoint" in raw:
        rc.checkpoint = str(base_dir / raw["checkpoint"])
    if "n_test_classes" in raw:
        rc.n_test_classes = int(raw["n_test_classes"])
    if "shots" in raw:
        if not isinstance(raw["shots"], list) or not all(isinstance(s, int) and s >= 1 for s in raw["shots"]):
            raise ConfigError("shots: expected a list of positive integers")
        rc.shots = list(raw["shots"])
    return rc


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = load_json(p)
    except ValueError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    return parse_run_config(raw, p.parent)


# -- commands ------------------------------------------------------------------


def _datasets(rc: RunConfig, root: Rng):
    if rc.data is not None:
        return load_dataset(rc.data["train"]), load_dataset(rc.data["test"])
    spec = MixtureSpec(**{**rc.mixture.__dict__, "seed": rc.train.seed})
    full = make_gaussian_mixture(spec)
    return split_train_test_classes(full, rc.n_test_classes, root.fork(STREAM_DATA))


def _encoder_for_eval(rc: RunConfig, out: Path, ds, root: Rng):
    ckpt = Path(rc.checkpoint) if rc.checkpoint else out / "checkpoint.json"
    if ckpt.is_file():
        return encoder_from_dict(load_json(ckpt)["encoder"])
    if rc.checkpoint:
        raise ConfigError(f"checkpoint not found: {ckpt}")
    log.info("no checkpoint at %s; evaluating a freshly initialized encoder", ckpt)
    return make_encoder(rc.train, ds.dim, root.fork(STREAM_INIT).fork(0))


def cmd_gen_data(rc, out, root, jobs):
    tr, te = _datasets(rc, root)
    save_dataset(tr, out / "train.jsonl")
    save_dataset(te, out / "test.jsonl")


def cmd_train(rc, out, root, jobs):
    tr, _ = _datasets(rc, root)
    state, losses = train(rc.train, tr, root)
    save_json(state.to_dict(), out / "checkpoint.json")
    write_csv(out / "train_loss.csv", ["step", "loss"], [(i + 1, float(v)) for i, v in enumerate(losses)])


def cmd_eval(rc, out, root, jobs):
    _, te = _datasets(rc, root)
    enc = _encoder_for_eval(rc, out, te, root)
    metrics = evaluate(enc, te, rc.train, root.fork(STREAM_EVAL), jobs)
    write_metrics_csv(metrics, out / "metrics.csv")


def cmd_grad_check(rc, out, root, jobs):
    results = gradcheck.run_suite(rc.grad_check.configs, rc.train.seed, rc.grad_check.h)
    write_csv(
        out / "grad_check.csv",
        ["case", "max_rel_error", "tolerance", "n", "passed"],
        [(r.case, f"{r.max_rel_error:.3e}", f"{r.tolerance:.0e}", r.n_configs, str(int(r.passed))) for r in results],
    )
    bad = [r.case for r in results if not r.passed]
    if bad:
        raise ContractError(f"gradient check failed: {', '.join(bad)}")


def cmd_radius_dynamics(rc, out, root, jobs):
    tr, _ = _datasets(rc, root)
    s = rc.radius
    trace = radius_dynamics_run(rc.train, tr, s.anchor, s.warmup, s.total, s.log_every, s.max_retries, root)
    write_csv(
        out / "radius_trace.csv",
        ["step", "mean_distance", "radius", "accuracy"],
        list(zip(trace.steps, trace.mean_distance, trace.radius, trace.accuracy)),
    )


def cmd_export_matrices(rc, out, root, jobs):
    tr, te = _datasets(rc, root)
    enc = _encoder_for_eval(rc, out, te, root)
    e = rc.export
    if e.distance:
        export_distance_matrix(enc, te, e.n_classes, e.n_per_class, root.fork(10), out / "distance_matrix.csv")
    if e.similarity:
        export_similarity_matrix(enc, te, e.n_classes, e.n_per_class, root.fork(11), out / "similarity_matrix.csv")


def cmd_shot_sweep(rc, out, root, jobs):
    tr, te = _datasets(rc, root)
    shot_sweep(rc.train, tr, te, rc.shots, root, out / "shot_sweep.csv", jobs)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "radius-dynamics": cmd_radius_dynamics,
    "export-matrices": cmd_export_matrices,
    "shot-sweep": cmd_shot_sweep,
}


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; their defaults are suppressed so a
    # flag given before the subcommand is not overwritten by the default
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d(None), help="overrides the config seed")
    p.add_argument("--out", default=d("."), help="output directory (default: .)")
    p.add_argument("--jobs", type=int, default=d(1), help="parallel evaluation workers")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoshot", parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    flags = _global_flags(True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[flags])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = load_run_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            rc.train = rc.train.replace(seed=args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        np.seterr(over="ignore", under="ignore")
        HANDLERS[args.command](rc, out, Rng(rc.train.seed), args.jobs)
    except (ValueError, OSError, KeyError) as e:
        print(f"protoshot {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

