"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import typing
from dataclasses import fields
from pathlib import Path

from .data import SyntheticSpec, generate_synthetic, holdout_split, load_idx
from .errors import ConfigError, IsingPruneError, StructuralError, UsageError
from .ising import build_graph, dump_graph, gather_stats
from .model import load_checkpoint, materialize_pruned, save_checkpoint, toy_spec
from .report import write_report
from .trainer import TrainConfig, check_pruned_equivalence, final_metrics, init_network, run_ipruning

log = logging.getLogger("isingprune")

# CLI flag -> config key
FLAG_KEYS = {
    "--epochs": "epochs",
    "--batch-size": "batch_size",
    "--pop-size": "pop_size",
    "--mutation-factor": "mutation_factor",
    "--crossover": "crossover",
    "--seed": "seed",
    "--dataset": "dataset",
    "--early-threshold": "early_threshold",
    "--out": "out",
}


def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(TrainConfig)
    out = {}
    for f in fields(TrainConfig):
        t = hints[f.name]
        args = [a for a in typing.get_args(t) if a is not type(None)]
        out[f.name] = args[0] if args else t
    return out


def coerce(key: str, value: str):
    types = _field_types()
    if key not in types:
        raise UsageError(f"unknown config key {key!r}; valid keys: {', '.join(TrainConfig.keys())}")
    t = types[key]
    v = value.strip()
    if v.lower() in ("none", "null", "") and key in ("kl_ceiling", "data_seed", "out"):
        return None
    try:
        if t is int:
            return int(v)
        if t is float:
            return float(v)
    except ValueError:
        raise UsageError(f"config key {key!r} expects {t.__name__}, got {value!r}") from None
    return v


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


class _Record(argparse.Action):
    """Store the value (last one wins) and remember every occurrence."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        hist = getattr(namespace, "flag_history", None) or []
        hist.append([option_string, values])
        namespace.flag_history = hist


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for flag, key in FLAG_KEYS.items():
        p.add_argument(flag, dest=key, action=_Record, default=None)
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isingprune", description="Train and prune small CNNs with Ising-energy state evolution.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train with state evolution and write report/curves/checkpoint")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="full (F) and pruned (P) metrics of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--run", help="output directory of a train run (reads its report.json and model.iprn)")
    p.add_argument("--checkpoint")

    p = sub.add_parser("prune", help="materialize the compact pruned network of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True, help="path of the compact checkpoint")

    p = sub.add_parser("dump-graph", help="write the pruning graph of the first training batch")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--output", required=True)
    return parser


def resolve_config(args, base: dict | None = None) -> TrainConfig:
    values = dict(base or {})
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        values.update(parse_config_text(text))
    for key in FLAG_KEYS.values():
        v = getattr(args, key, None)
        if v is not None:
            values[key] = coerce(key, v)
    for item in getattr(args, "sets", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = coerce(k.strip(), v)
    if values.get("early_threshold") == "inf":
        values["early_threshold"] = math.inf
    try:
        return TrainConfig(**values).validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def load_datasets(cfg: TrainConfig):
    """(train, test) for the configured dataset selector."""
    sel = cfg.dataset
    data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    if sel == "synthetic":
        return generate_synthetic(SyntheticSpec(classes=cfg.classes, samples_per_class=cfg.samples_per_class,
                                                test_per_class=cfg.test_per_class, image_size=cfg.image_size,
                                                noise=cfg.noise, seed=data_seed))
    if sel.startswith("idx:"):
        paths = [s for s in sel[4:].split(",") if s]
        if len(paths) == 2:
            full = load_idx(*paths)
            return holdout_split(full, cfg.test_fraction, data_seed)
        if len(paths) == 4:
            train = load_idx(paths[0], paths[1])
            test = load_idx(paths[2], paths[3], split="test")
            classes = max(train.classes, test.classes)
            train.classes = test.classes = classes
            return train, test
        raise UsageError("--dataset idx: expects <img>,<lbl> or <img>,<lbl>,<test_img>,<test_lbl>")
    raise UsageError(f"unknown dataset selector {sel!r}; use 'synthetic' or 'idx:<img>,<lbl>'")


def _train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out or "run")
    train, test = load_datasets(cfg)
    spec = toy_spec(train.image_shape, train.classes)
    net = init_network(spec, cfg.seed)
    log.info("training %d units (%d parameters) on %d samples", net.D, net.num_params(), len(train))
    net, mask, report = run_ipruning(cfg, net, train)
    if cfg.epochs > 0:
        report.final = final_metrics(net, mask, train, test)
    report.extra["mask"] = "".join(str(int(b)) for b in mask)
    report.extra["flag_history"] = getattr(args, "flag_history", None) or []
    try:
        report.extra["pruned_logit_max_diff"] = check_pruned_equivalence(net, mask, test.images[:100])
    except StructuralError as exc:
        report.extra["materialize_error"] = str(exc)
        log.warning("pruned network cannot be materialized: %s", exc)
    write_report(report, out)
    save_checkpoint(out / "model.iprn", net, mask)
    log.info("wrote %s", out)
    return 0


def _evaluate(args) -> int:
    base = None
    ckpt = args.checkpoint
    if args.run:
        run = Path(args.run)
        base = json.loads((run / "report.json").read_text())["config"]
        ckpt = ckpt or run / "model.iprn"
    if ckpt is None:
        raise UsageError("evaluate needs --run or --checkpoint")
    cfg = resolve_config(args, base)
    net, mask = load_checkpoint(ckpt)
    train, test = load_datasets(cfg)
    metrics = final_metrics(net, mask, train, test)
    sys.stdout.write(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return 0


def _prune(args) -> int:
    net, mask = load_checkpoint(args.checkpoint)
    compact = materialize_pruned(net, mask)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.output, compact)
    log.info("compact network: %d -> %d parameters", net.num_params(), compact.num_params())
    return 0


def _dump_graph(args) -> int:
    cfg = resolve_config(args)
    train, _ = load_datasets(cfg)
    if args.checkpoint:
        net, _ = load_checkpoint(args.checkpoint)
    else:
        net = init_network(toy_spec(train.image_shape, train.classes), cfg.seed)
    stats = gather_stats(net, train.images[:cfg.batch_size], cfg.kl_eps)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    dump_graph(build_graph(net.registry, stats, cfg.kl_ceiling), args.output)
    return 0


COMMANDS = {"train": _train, "evaluate": _evaluate, "prune": _prune, "dump-graph": _dump_graph}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (IsingPruneError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
