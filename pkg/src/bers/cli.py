"""``bers`` command line: data generation, both training phases, inference, evaluation, benchmark, flow export.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import instrument
from .errors import BersError
from .flow import Tvl1Params, clip_flow_stack, write_bflo
from .synthvid import DatasetSpec, generate, read_dataset, write_dataset, dataset_checksum

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _spec_from_args(args) -> DatasetSpec:
    values = {}
    if args.spec:
        values.update(json.loads(Path(args.spec).read_text()))
    for f in fields(DatasetSpec):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return DatasetSpec(**values)


def _train_config(args, lam: float = 0.0):
    from .train import TrainConfig

    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum, lam=lam,
        seed=args.seed, lr_decay=args.lr_decay, milestones=tuple(int(m) for m in args.milestones),
        distance=args.distance,
    )


def _flow_params(args) -> Tvl1Params:
    values = json.loads(Path(args.params).read_text()) if getattr(args, "params", None) else {}
    return Tvl1Params(**values)


def _print_epoch(rec) -> None:
    print(
        f"epoch {rec.epoch:3d}  L_a {rec.L_a:.4f}  Loss1 {rec.Loss1:.4f}  total {rec.total:.4f}  "
        f"train {rec.train_acc:.3f}  val {rec.val_acc:.3f}  ({rec.seconds:.1f}s)",
        flush=True,
    )


def _log_path(args) -> Path:
    return Path(args.log) if args.log else Path(args.out).with_suffix(".csv")


def _select(ds, split: str, clip_id: int | None):
    clips = ds.subset(split)
    if clip_id is not None:
        clips = [c for c in ds.clips if c.clip_id == clip_id]
        if not clips:
            raise BersError(f"no clip with id {clip_id}")
    return clips


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    spec = _spec_from_args(args)
    ds = generate(spec)
    write_dataset(args.out, ds)
    print(f"wrote {len(ds)} clips ({spec.kind}, {spec.num_classes} classes) to {args.out}")
    print(f"crc32 {dataset_checksum(args.out):08x}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    from .checkpoint import save_checkpoint
    from .train import FlowSource, default_net_config, train_teacher

    ds = read_dataset(args.data)
    cfg = _train_config(args)
    net_cfg = _net_config(args, default_net_config(ds))
    flows = FlowSource(_flow_params(args), args.flow_cache)
    teacher, log = train_teacher(ds, cfg, net_cfg, flows, _log_path(args), _print_epoch)
    save_checkpoint(teacher, args.out)
    print(f"teacher checkpoint: {args.out}; log: {_log_path(args)}")
    return EXIT_OK


def _net_config(args, base):
    from dataclasses import replace

    changes = {k: getattr(args, k) for k in ("base_width", "cardinality", "tap2") if getattr(args, k, None) is not None}
    if getattr(args, "stage_blocks", None):
        changes["stage_blocks"] = tuple(int(b) for b in args.stage_blocks.split(","))
    return replace(base, **changes)


def cmd_train_student(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .train import FlowSource, grid_search_lambda, train_student

    if (args.lam is None) == (args.grid is None):
        raise UsageError("train-student: give exactly one of --lambda or --grid")
    ds = read_dataset(args.data)
    teacher = load_checkpoint(args.teacher, expect="teacher")
    flows = FlowSource(_flow_params(args), args.flow_cache)
    if args.lam is not None:
        student, log = train_student(ds, teacher, _train_config(args, args.lam), flows, _log_path(args), _print_epoch)
        save_checkpoint(student, args.out)
        print(f"student checkpoint (lambda={args.lam:g}): {args.out}; log: {_log_path(args)}")
        return EXIT_OK

    log_dir = _log_path(args).parent
    log_dir.mkdir(parents=True, exist_ok=True)

    def on_epoch(lam, rec):
        print(f"[lambda={lam:g}] ", end="")
        _print_epoch(rec)

    result = grid_search_lambda(ds, teacher, _train_config(args), args.grid, flows, log_dir, on_epoch)
    with open(_log_path(args), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "val_acc", "chosen"])
        for lam, acc in result.table.items():
            w.writerow([repr(lam), repr(acc), int(lam == result.best_lam)])
    save_checkpoint(result.students[result.best_lam], args.out)
    for lam, acc in result.table.items():
        print(f"lambda {lam:g}: val_acc {acc:.4f}")
    print(f"chosen lambda {result.best_lam:g}; student checkpoint: {args.out}; grid log: {_log_path(args)}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import predict_proba

    ds = read_dataset(args.data)
    clips = _select(ds, args.split, args.clip)
    with instrument.counting() as delta:
        student = load_checkpoint(args.model, expect="student")
        proba = predict_proba(student, clips, batch_size=args.batch_size)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "label", "prediction"] + [f"p{k}" for k in range(proba.shape[1])])
        for c, p in zip(clips, proba):
            w.writerow([c.clip_id, c.label, int(np.argmax(p))] + [repr(float(v)) for v in p])
    print("counters " + " ".join(f"{k}={v}" for k, v in delta.items()))
    if args.counters:
        Path(args.counters).write_text(json.dumps(delta, indent=2))
    acc = float(np.mean(np.argmax(proba, axis=1) == np.array([c.label for c in clips])))
    print(f"{len(clips)} predictions written to {args.out}; accuracy {acc:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench
    from .checkpoint import load_checkpoint

    if args.repeat < 3:
        raise UsageError("bench: --repeat must be >= 3")
    ds = read_dataset(args.data)
    student = load_checkpoint(args.student, expect="student")
    teacher = load_checkpoint(args.teacher, expect="teacher")
    clips = ds.subset(args.split)[: args.clips] if args.clips else ds.subset(args.split)
    report = run_bench(student, teacher, clips, args.repeat, _flow_params(args))
    if args.out:
        report.write_csv(args.out)
    print(report.summary())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import FlowSource, predict_proba, score

    ds = read_dataset(args.data)
    clips = ds.subset(args.split)
    labels = np.array([c.label for c in clips])
    flows = FlowSource(_flow_params(args), args.flow_cache)
    probs = {}
    for item in args.model:
        name, _, path = item.partition("=")
        if not path:
            raise UsageError(f"eval: --model expects NAME=PATH, got {item!r}")
        probs[name] = predict_proba(load_checkpoint(path), clips, flows)
    for item in args.combine or []:
        parts = item.split("+")
        if len(parts) < 2 or any(p not in probs for p in parts):
            raise UsageError(f"eval: --combine expects NAME+NAME of loaded models, got {item!r}")
        probs[item] = np.mean([probs[p] for p in parts], axis=0)
    rows = []
    for name, p in probs.items():
        res = score(np.argmax(p, axis=1), labels, p)
        rows.append((name, "all", res.accuracy, len(labels)))
        if args.per_class:
            for k, acc in res.per_class.items():
                rows.append((name, ds.spec.class_names()[k], acc, res.counts[k]))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stream", "class", "accuracy", "count"])
            for r in rows:
                w.writerow([r[0], r[1], repr(r[2]), r[3]])
    print(f"{'stream':<24}{'class':<12}{'accuracy':>10}{'count':>7}")
    for name, cls, acc, n in rows:
        print(f"{name:<24}{cls:<12}{acc:>10.4f}{n:>7}")
    return EXIT_OK


def cmd_flow(args) -> int:
    ds = read_dataset(args.data)
    clips = [c for c in ds.clips if c.clip_id == args.clip]
    if not clips:
        raise BersError(f"no clip with id {args.clip} in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, field in enumerate(clip_flow_stack(clips[0].clip, _flow_params(args))):
        write_bflo(out / f"clip{args.clip:06d}_{t:03d}.bflo", field, args.bound)
    print(f"wrote {clips[0].frames.shape[0] - 1} .bflo files to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_training_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--milestones", type=int, nargs="*", default=[20])
    p.add_argument("--distance", choices=("mse", "sq_l2", "l2"), default="mse")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="CSV log path (default: --out with .csv suffix)")
    p.add_argument("--flow-cache", help="directory for cached TV-L1 flow")
    p.add_argument("--params", help="JSON file of TV-L1 parameters")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bers", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic .bvds dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file of dataset spec fields (flags override)")
    p.add_argument("--kind", choices=("motion", "static", "mixed"))
    p.add_argument("--classes", dest="num_classes", type=int)
    p.add_argument("--clips-per-class", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--size-min", type=int)
    p.add_argument("--size-max", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--speed", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="phase 1: train the flow teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base-width", type=int)
    p.add_argument("--cardinality", type=int)
    p.add_argument("--stage-blocks", help="comma-separated block counts for the 4 stages")
    p.add_argument("--tap2", choices=("final", "pre_relu"))
    _add_training_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="phase 2: distil the teacher into an RGB student")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--grid", type=_floats, help='comma-separated lambda candidates, e.g. "0.1,1,10,50"')
    _add_training_flags(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("infer", help="RGB-only predictions from a student checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--clip", type=int, help="single clip id (overrides --split)")
    p.add_argument("--out", required=True)
    p.add_argument("--counters", help="write instrumentation counters as JSON")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="latency of RGB-only versus TV-L1 + teacher pipelines")
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--clips", type=int, default=16, help="number of clips to time (0 = whole split)")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--params", help="JSON file of TV-L1 parameters")
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="accuracy table for one or more checkpoints")
    p.add_argument("--model", action="append", required=True, help="NAME=PATH, repeatable")
    p.add_argument("--combine", action="append", help="NAME+NAME: mean-softmax fusion row, repeatable")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--flow-cache")
    p.add_argument("--params", help="JSON file of TV-L1 parameters")
    p.add_argument("--out", help="CSV table path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flow", help="export TV-L1 flow of one clip as .bflo files")
    p.add_argument("--data", required=True, help="clip source: a .bvds dataset")
    p.add_argument("--clip", type=int, required=True, help="clip id")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--params", help="JSON file of TV-L1 parameters")
    p.add_argument("--bound", type=float, default=20.0, help="quantization bound in px")
    p.set_defaults(func=cmd_flow)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except BersError as exc:
        print(f"bers: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"bers: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
