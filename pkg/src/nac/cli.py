"""Command line: ``nac {construct,train,eval,baseline,worstcase,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .arch import ArchitectureError, load_architecture, serialize
from .baselines import InfeasibleError, random_equivalent
from .config import RunConfig, load_config
from .construct import ConstructionError, construct, construction_cost
from .engine.checkpoint import CheckpointError
from .engine.graph import build_graph
from .errors import ConfigError
from .fmstat import write_csv
from .pipeline import load_datasets, run_dtype, write_construction
from .report import COMPARISON_COLUMNS, WIDTH_COLUMNS, build_report, format_table
from .train import Trainer, evaluate, load_weights, single_threaded

METRIC_COLUMNS = ("epoch", "train_loss", "lr", "seconds", "test_loss", "test_error")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--out-dir", type=Path, default=Path("runs/out"))
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--dataset", choices=("synthetic", "cifar10"))
    p.add_argument("--data-dir")
    p.add_argument("--limit", type=int, help="cap on training images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nac", description="Grow CNN architectures by pruning and expanding an envelope network.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("construct", help="run the prune/expand construction loop")
    _common(p)
    p.add_argument("--measure-full", action="store_true",
                   help="also time full training of the result for the cost report")

    p = sub.add_parser("worstcase", help="construction that prunes the highest-statistic blocks")
    _common(p)

    p = sub.add_parser("train", help="train an architecture from scratch")
    _common(p)
    p.add_argument("--arch", required=True, help="notation string or architecture document")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common(p)
    p.add_argument("--arch", required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("baseline", help="random networks with the target's depths and block counts")
    _common(p)
    p.add_argument("--arch", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seeds", type=int, nargs="+", help="explicit seeds (overrides --count)")

    p = sub.add_parser("report", help="summarise construction runs and training metrics")
    p.add_argument("--out-dir", type=Path, default=Path("runs/report"))
    p.add_argument("--runs", type=Path, nargs="*", default=[], help="construction output directories")
    p.add_argument("--metrics", nargs="*", default=[], help="NAME=PATH metrics CSV files")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    data = cfg.data
    if args.dataset is not None:
        data = data.model_copy(update={"dataset": args.dataset})
    if args.data_dir is not None:
        data = data.model_copy(update={"data_dir": args.data_dir})
    if args.limit is not None:
        data = data.model_copy(update={"limit": args.limit})
    update = {"data": data}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.deterministic is not None:
        update["deterministic"] = args.deterministic
    cfg = cfg.model_copy(update=update)
    return type(cfg).model_validate(cfg.model_dump())


def _prepare_out(args, cfg: RunConfig) -> Path:
    out: Path = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    return out


def cmd_construct(args, worst_case: bool = False) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    envelope = load_architecture(cfg.construction.envelope, num_classes=cfg.data.classes)
    ccfg = cfg.construction_config()
    if worst_case:
        ccfg = replace(ccfg, prune_highest=True)
    train, test = load_datasets(cfg.data, cfg.seed)
    with single_threaded(cfg.deterministic):
        def progress(rec):
            print(f"iteration {rec.iteration}: depths {rec.depths_before} -> {rec.depths_after}, "
                  f"pruned {len(rec.pruned)}, train {rec.timing['train']:.1f}s", file=sys.stderr)

        net, trace = construct(envelope, ccfg, train, cfg.candidate_training.train_config(), run_dtype(cfg),
                               on_iteration=progress)
        write_construction(out, net, trace, cfg.deterministic)
        full_epochs = cfg.final_training.epochs
        if args.__dict__.get("measure_full"):
            from .pipeline import train_network

            res = train_network(net, train, test, full_epochs, cfg.final_training.train_config(), cfg.seed,
                                run_dtype(cfg))
            t_full, basis = res.seconds, "measured"
        elif trace.iterations:
            last = trace.iterations[-1]
            t_full = last.timing["train"] / ccfg.truncated_epochs * full_epochs
            basis = "extrapolated from the last truncated run"
        else:
            t_full, basis = 0.0, "no iterations"
    cost = construction_cost(trace, t_full, full_epochs, ccfg.truncated_epochs)
    (out / "cost.json").write_text(json.dumps({**cost.to_dict(), "t_train_full_basis": basis}, indent=2))
    print(cost.summary() + f" [t_train {basis}]")
    print(f"wrote {out / 'architecture.json'}")
    return 0


def _metrics_row(row: dict) -> dict:
    return {k: row.get(k, "") for k in METRIC_COLUMNS}


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    net = load_architecture(args.arch, num_classes=cfg.data.classes)
    train, test = load_datasets(cfg.data, cfg.seed)
    epochs = args.epochs or cfg.final_training.epochs
    with single_threaded(cfg.deterministic):
        graph = build_graph(net, train.image_shape, train.class_count, seed=cfg.seed, dtype=run_dtype(cfg))
        trainer = Trainer(graph, cfg.final_training.train_config(), seed=cfg.seed + 1)
        if args.resume is not None:
            trainer.load(args.resume)
            print(f"resumed at epoch {trainer.epoch}", file=sys.stderr)
        (out / "architecture.json").write_text(serialize(net))
        ckpt = out / "checkpoint.nacw"

        def on_epoch(row):
            print(f"epoch {row['epoch']}: loss {row['train_loss']:.4f} test error {row['test_error']:.4f}",
                  file=sys.stderr)
            write_csv(out / "metrics.csv", METRIC_COLUMNS, [_metrics_row(r) for r in trainer.history])
            trainer.save(ckpt)

        trainer.fit(train, max(0, epochs - trainer.epoch), test, on_epoch=on_epoch)
    write_csv(out / "metrics.csv", METRIC_COLUMNS, [_metrics_row(r) for r in trainer.history])
    if trainer.history:
        last = trainer.history[-1]
        print(f"final test error {last['test_error']:.4f} after {last['epoch']} epochs")
    return 0


def cmd_eval(args) -> int:
    from .engine.checkpoint import load_arrays

    cfg = resolve_config(args)
    net = load_architecture(args.arch, num_classes=cfg.data.classes)
    _, test = load_datasets(cfg.data, cfg.seed)
    graph = build_graph(net, test.image_shape, test.class_count, dtype=run_dtype(cfg))
    arrays, _ = load_arrays(args.checkpoint)
    load_weights(graph, arrays)
    loss, err = evaluate(graph, test)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    result = {"test_loss": loss, "test_error": err, "test_accuracy": 1.0 - err, "images": len(test)}
    (args.out_dir / "eval.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result))
    return 0


def cmd_baseline(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    target = load_architecture(args.arch, num_classes=cfg.data.classes)
    count = args.count if args.count is not None else cfg.baseline_count
    seeds = args.seeds if args.seeds else [cfg.seed * 1000 + i for i in range(count)]
    for i, seed in enumerate(seeds):
        path = out / f"random_{i:02d}.json"
        path.write_text(serialize(random_equivalent(target, seed)))
        print(path)
    return 0


def cmd_report(args) -> int:
    metrics = []
    for item in args.metrics:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).parent.name or item, item
        metrics.append((name, Path(path)))
    try:
        result = build_report(list(args.runs), metrics, args.out_dir)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if "widths" in result:
        print(format_table(result["widths"], WIDTH_COLUMNS))
    if "comparison" in result:
        print(format_table(result["comparison"], COMPARISON_COLUMNS))
    return 0


COMMANDS = {
    "construct": cmd_construct,
    "worstcase": lambda a: cmd_construct(a, worst_case=True),
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nac {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"nac {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except ConstructionError as exc:
        print(f"nac {args.command}: failed in {exc.phase}: {exc.__cause__ or exc}", file=sys.stderr)
        return 1
    except (ArchitectureError, InfeasibleError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"nac {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
