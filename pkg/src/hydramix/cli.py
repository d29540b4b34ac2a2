"""``hydramix`` command line: generate | train | sweep | eval.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numerical failure.
This is the only module that terminates the process.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from . import data, training
from .errors import (
    CheckpointError,
    ConfigError,
    DataIOError,
    HydraMixError,
    NumericalError,
)
from .model import build, load_model

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


def exit_code_for(exc):
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (CheckpointError, DataIOError, OSError)):
        return EXIT_IO
    # config, argument and shape errors all come from bad inputs
    return EXIT_CONFIG


def _describe(exc):
    if isinstance(exc, CheckpointError) and exc.offset is not None and f"offset {exc.offset}" not in str(exc):
        return f"{exc} (offset {exc.offset})"
    if isinstance(exc, NumericalError) and exc.step is not None:
        return f"{exc} (step {exc.step})"
    if isinstance(exc, ConfigError) and exc.field:
        return f"{exc} [field: {exc.field}]"
    return str(exc)


def _parse_budget(raw):
    if raw == "full":
        return "full"
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"budget must be a positive integer or 'full', got {raw!r}", "budget") from None
    if value < 1:
        raise ConfigError(f"budget must be positive, got {value}", "budget")
    return value


def _csv(raw, convert=str):
    return [convert(part.strip()) for part in raw.split(",") if part.strip()]


def _load_dataset(path):
    if path is None:
        raise ConfigError("no dataset directory given (use --data or paths.data)", "paths.data")
    return data.load(path)


def _resolve_budget(budget, dataset):
    return dataset.n_train if budget == "full" else int(budget)


def cmd_generate(args):
    spec = config_mod.load_dataset_spec(args.spec)
    out = data.generate(spec, args.out)
    ds = data.load(out)
    counts = data.summarize(ds)
    for split, per_class in counts.items():
        print(f"{split}: " + ", ".join(f"{name}={n}" for name, n in per_class.items()))
    print(f"checksum: {data.checksum(out)}")
    return EXIT_OK


def _train_config(args):
    cfg = config_mod.load(args.config)
    if args.mode is not None:
        cfg.mode = args.mode
    if args.budget is not None:
        cfg.budget = _parse_budget(args.budget)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.hyperparams = replace(cfg.hyperparams, epochs=args.epochs)
    cfg.paths = config_mod.Paths(data=args.data or cfg.paths.data, out=args.out or cfg.paths.out)
    return config_mod.validate(cfg)


def cmd_train(args):
    cfg = _train_config(args)
    dataset = _load_dataset(cfg.paths.data)
    if cfg.paths.out is None:
        raise ConfigError("no run directory given (use --out or paths.out)", "paths.out")
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.json").write_text(cfg.dumps(), encoding="utf-8")

    budget = _resolve_budget(cfg.budget, dataset)
    split = data.make_split(dataset, budget, cfg.seed)
    model = build(cfg.model_config(dataset.num_classes), cfg.seed)
    _, records = training.train(
        model, dataset, split, cfg.hp(), out,
        on_epoch=lambda rec: print(f"epoch {rec.epoch} acc {rec.test_accuracy:.4f} loss {rec.train_loss['total']:.4f}", flush=True),
    )
    print(records[-1].to_json())
    return EXIT_OK


def cmd_sweep(args):
    cfg = config_mod.load(args.config)
    sweep_cfg = cfg.sweep
    if args.budgets is not None:
        sweep_cfg.budgets = _csv(args.budgets, _parse_budget)
    if args.modes is not None:
        sweep_cfg.modes = _csv(args.modes)
    if args.seeds is not None:
        sweep_cfg.seeds = args.seeds
    if args.epochs is not None:
        cfg.hyperparams = replace(cfg.hyperparams, epochs=args.epochs)
    cfg.paths = config_mod.Paths(data=args.data or cfg.paths.data, out=args.out or cfg.paths.out)
    config_mod.check_schema(cfg.to_dict())
    config_mod.validate(cfg)
    if sweep_cfg.seeds < 1:
        raise ConfigError("seeds must be >= 1", "sweep.seeds")

    dataset = _load_dataset(cfg.paths.data)
    if cfg.paths.out is None:
        raise ConfigError("no output directory given (use --out or paths.out)", "paths.out")
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.json").write_text(cfg.dumps(), encoding="utf-8")

    start = time.perf_counter()
    result = training.sweep(
        dataset,
        sweep_cfg.budgets,
        sweep_cfg.modes,
        list(range(sweep_cfg.seeds)),
        cfg.hyperparams,
        cfg.model_config(dataset.num_classes),
        out,
    )
    print(training.render_table(result.summary), end="")
    print(f"{len(result.rows)} cells in {time.perf_counter() - start:.1f}s, {len(result.failed)} failed")
    if result.failed:
        for row in result.failed:
            print(f"failed: {row.mode} budget={row.budget} seed={row.seed}: {row.status}", file=sys.stderr)
        return EXIT_NUMERICAL if any("NumericalError" in r.status for r in result.failed) else EXIT_CONFIG
    return EXIT_OK


def cmd_eval(args):
    model = load_model(args.ckpt)
    dataset = _load_dataset(args.data)
    if model.config.num_classes != dataset.num_classes:
        raise ConfigError(
            f"checkpoint has {model.config.num_classes} classes, dataset has {dataset.num_classes}", "num_classes"
        )
    rec = training.evaluate(model, dataset.test_set(), dataset.num_classes, dataset.background_index)
    print(rec.to_json())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hydramix", description="Semi-supervised nucleus classification and centroid regression.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic patch dataset")
    g.add_argument("--spec", required=True, help="dataset spec JSON")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", help="run config JSON (defaults when omitted)")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--budget", help="labelled records, or 'full'")
    t.add_argument("--mode", choices=training.MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run the labelled-budget grid")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--budgets", help="comma-separated, e.g. 50,100,300")
    s.add_argument("--modes", help="comma-separated subset of " + ",".join(training.SWEEP_MODES))
    s.add_argument("--seeds", type=int, help="number of seeds, run as 0..N-1")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HydraMixError, OSError) as exc:
        code = exit_code_for(exc)
        print(f"error: {_describe(exc)}", file=sys.stderr)
        return code


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
