"""Command-line entry point: ``pmoe <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from ..archive import ArchiveFormatError
from ..model import PMoEModel, build_model, load_checkpoint, save_checkpoint
from ..numerics import NumericalError, Rng
from .config import ConfigError, Experiment, load_experiment
from .data import (
    DataFormatError,
    GenerationError,
    SyntheticTaskSpec,
    TaskData,
    expert_from_seed,
    generate_synthetic,
    load_idx_images,
    load_task,
    save_task,
)
from .gradcheck import TOY, full_model_grad_check
from .train import TrainingError, accuracy, collect_trace, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pmoe", description="Mixture-of-experts prompt tuning on frozen synthetic experts.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic task archive")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train from a config file; writes model.pmwa and metrics.csv")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    _data_args(e)
    e.add_argument("--split", choices=("train", "test"), default="test")

    c = sub.add_parser("grad-check", help="finite-difference check of the full model gradient")
    c.add_argument("--config", help="config file (default: the toy configuration)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)

    r = sub.add_parser("trace", help="write dispatch traces as CSV")
    r.add_argument("--checkpoint", required=True)
    _data_args(r)
    r.add_argument("--split", choices=("train", "test"), default="test")
    r.add_argument("--limit", type=int, help="number of images (forwards) to trace")
    r.add_argument("--out", required=True)
    return p


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="task archive written by gen-data")
    p.add_argument("--images", help="IDX images file (alternative to --data)")
    p.add_argument("--labels", help="IDX labels file")


def _require_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _data_from_args(args) -> TaskData:
    if args.data:
        _require_file(args.data, "data file")
        return load_task(args.data)
    if args.images and args.labels:
        _require_file(args.images, "images file")
        _require_file(args.labels, "labels file")
        ds = load_idx_images(args.images, args.labels)
        return TaskData(ds, ds)
    raise UsageError("give --data or both --images and --labels")


def _spec_from(exp: Experiment) -> SyntheticTaskSpec:
    x = exp.extra
    kw = dict(
        seed=int(x.get("data_seed", exp.train.seed)),
        num_classes=exp.model.num_classes,
        samples_per_class=int(x.get("samples_per_class", 64)),
        test_per_class=int(x.get("test_per_class", 64)),
        kind=x.get("data_kind", "plain"),
        backbone=exp.model.backbone,
    )
    if kw["kind"] == "complementary":
        if len(exp.expert_seeds) < 2:
            raise ConfigError("the complementary task needs two expert_seeds")
        kw.update(expert_a_seed=exp.expert_seeds[0], expert_b_seed=exp.expert_seeds[1])
    if "data_signal" in x:
        kw["signal"] = float(x["data_signal"])
    if "data_noise" in x:
        kw["noise"] = float(x["data_noise"])
    return SyntheticTaskSpec(**kw)


def _task_for(exp: Experiment, base: Path) -> TaskData:
    x = exp.extra
    if "data" in x:
        path = (base / x["data"]) if not os.path.isabs(x["data"]) else Path(x["data"])
        _require_file(str(path), "data file")
        return load_task(path)
    if "train_images" in x:
        paths = {k: base / x[k] for k in ("train_images", "train_labels", "test_images", "test_labels") if k in x}
        if len(paths) != 4:
            raise ConfigError("IDX data needs train_images, train_labels, test_images and test_labels")
        for p in paths.values():
            _require_file(str(p), "IDX file")
        return TaskData(
            load_idx_images(paths["train_images"], paths["train_labels"]),
            load_idx_images(paths["test_images"], paths["test_labels"]),
        )
    return generate_synthetic(_spec_from(exp))


def _cmd_gen_data(args) -> int:
    _require_file(args.config, "config file")
    exp = load_experiment(args.config)
    data = generate_synthetic(_spec_from(exp))
    save_task(args.out, data)
    print(f"wrote {len(data.train)} train / {len(data.test)} test samples to {args.out}")
    for k, v in data.meta.items():
        print(f"  {k} = {v}")
    return EXIT_OK


def _cmd_train(args) -> int:
    _require_file(args.config, "config file")
    exp = load_experiment(args.config)
    data = _task_for(exp, Path(args.config).resolve().parent)
    experts = [expert_from_seed(exp.model.backbone, s) for s in exp.expert_seeds]
    model = build_model(exp.model, experts, Rng(exp.train.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = train(model, data.train, exp.train, data.test, log=lambda m: print(
        f"epoch {m.epoch:3d}  loss {m.train_loss:.4f}  train_acc {m.train_acc:.3f}"
        + ("" if m.eval_acc is None else f"  eval_acc {m.eval_acc:.3f}")
    ))
    save_checkpoint(model, out / "model.pmwa")
    report.to_csv(out / "metrics.csv")
    print(f"wrote {out / 'model.pmwa'} and {out / 'metrics.csv'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    data = _data_from_args(args)
    split = data.test if args.split == "test" else data.train
    print(f"accuracy {accuracy(model, split):.6f} on {len(split)} {args.split} samples")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    config = TOY
    if args.config:
        _require_file(args.config, "config file")
        config = load_experiment(args.config).model
    report = full_model_grad_check(config, seed=args.seed, tol=args.tol)
    print(f"checked {report.checked} elements; max relative error {report.max_rel_error:.3e}")
    print(f"worst: parameter {report.worst_param} index {report.worst_index} analytic {report.analytic:.6e} numeric {report.numeric:.6e}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _cmd_trace(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, PMoEModel) or model.config.mode != "pmoe":
        raise UsageError("trace needs a pmoe checkpoint")
    data = _data_from_args(args)
    images = (data.test if args.split == "test" else data.train).images
    if args.limit is not None:
        images = images[: args.limit]
    trace = collect_trace(model, images)
    trace.to_csv(args.out)
    print(f"wrote {len(trace)} trace rows for {len(images)} forwards to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "trace": _cmd_trace,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"pmoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ArchiveFormatError, GenerationError, OSError) as exc:
        print(f"pmoe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericalError, FloatingPointError) as exc:
        print(f"pmoe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
