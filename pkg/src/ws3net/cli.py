"""Command-line entry point: train, prune, eval, bench, count, report.

Exit codes: 0 success, 1 runtime failure (I/O, corrupt checkpoint,
diverged run), 2 usage or configuration error. `--threads 1` pins the
BLAS pool for byte-reproducible reference runs.
"""

import argparse
import contextlib
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, make_datasets
from .errors import ConfigError, ValidationError, Ws3Error
from .network import NetworkSpec, build_network, count_params, param_breakdown
from .pruning import (
    DENSITY_COLUMNS,
    PRUNE_LOG_COLUMNS,
    PruneCriterion,
    PruneSchedule,
    iterative_prune,
    kernel_density_rows,
    structural_axis_prune,
    write_csv,
)
from .sparse_tensor import save_voxset
from .training import Trainer
from .ws3 import BENCH_COLUMNS, bench_layer, bench_network

TRAIN_LOG_COLUMNS = ("iteration", "lr", "loss", "loss_sem", "loss_off")
EVAL_COLUMNS = ("miou", "macc", "loss")
BREAKDOWN_COLUMNS = ("name", "kind", "surviving", "total")


def _threads_ctx(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _out_dir(args, cfg=None) -> str:
    path = args.output_dir or (cfg.output_dir if cfg else None)
    if not path:
        raise ConfigError("no output directory (flag --output-dir or config)")
    os.makedirs(path, exist_ok=True)
    return path


def _print_table(rows, columns):
    widths = [
        max(len(c), *(len(_fmt(r[c])) for r in rows)) if rows else len(c)
        for c in columns
    ]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(_fmt(r[c]).ljust(w) for c, w in zip(columns, widths)))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


# ----- commands -----


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.iterations is not None:
        if args.iterations < 1:
            raise ConfigError("--iterations must be >= 1")
        cfg.trainer.iterations = args.iterations
    if args.seed is not None:
        cfg.network.seed = args.seed
    out = _out_dir(args, cfg)

    net = build_network(cfg.network)
    train_ds, eval_ds = make_datasets(cfg)
    trainer = Trainer(net, train_ds, cfg.trainer)
    rows = trainer.run()
    write_csv(os.path.join(out, "train_log.csv"), rows, TRAIN_LOG_COLUMNS)

    metrics = trainer.evaluate(eval_ds)
    write_csv(os.path.join(out, "eval.csv"),
              [{k: metrics[k] for k in EVAL_COLUMNS}], EVAL_COLUMNS)
    ckpt = os.path.join(out, "checkpoint.wsck")
    save_checkpoint(ckpt, net)
    print(f"trained {cfg.trainer.iterations} iterations "
          f"({count_params(net)} parameters)")
    print(f"eval: miou {metrics['miou']:.4f} macc {metrics['macc']:.4f} "
          f"loss {metrics['loss']:.4f}")
    print(f"wrote {ckpt}")
    return 0


def _resolve_schedule(args, cfg) -> PruneSchedule | None:
    """Schedule from flags/config; None signals an explicit zero target."""
    steps = args.steps if args.steps is not None else cfg.prune.steps
    ft = (args.finetune_iterations if args.finetune_iterations is not None
          else cfg.prune.finetune_iterations)
    target = (args.target_rate if args.target_rate is not None
              else cfg.prune.target_rate)
    per_step = (args.per_step if args.per_step is not None
                else cfg.prune.per_step)
    try:
        if target is not None:
            if target == 0:
                return None
            return PruneSchedule.from_target(target, steps, ft)
        if per_step is not None:
            return PruneSchedule(per_step, steps, ft)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    raise ConfigError("prune needs a target_rate or per_step rate")


def cmd_prune(args) -> int:
    cfg = load_config(args.config)
    net = load_checkpoint(args.checkpoint)
    out = _out_dir(args, cfg)
    pruned_path = os.path.join(out, "pruned.wsck")
    density_path = os.path.join(out, "density.csv")

    structural = args.structural or list(cfg.prune.structural_layers)
    if structural:
        rows = structural_axis_prune(net, structural,
                                     axis=cfg.prune.structural_axis)
        for r in rows:
            print(f"{r['layer']}: kept {r['kept_offsets']}/{r['total_offsets']} "
                  f"offsets, {r['remaining_weights']}/{r['total_weights']} weights")
        ft = (args.finetune_iterations if args.finetune_iterations is not None
              else cfg.prune.finetune_iterations)
        if ft > 0:
            train_ds, _ = make_datasets(cfg)
            trainer = Trainer(net, train_ds, cfg.trainer)
            loss = trainer.fine_tune(ft)
            print(f"fine-tuned {ft} iterations, final loss {loss:.4f}")
    else:
        try:
            criterion = PruneCriterion.from_tag(
                args.criterion or cfg.prune.criterion)
        except ValidationError as e:
            raise ConfigError(str(e)) from e
        schedule = _resolve_schedule(args, cfg)
        if schedule is None:
            print("warning: target rate 0, nothing to prune")
            return 0
        print(f"criterion {criterion.tag}: {schedule.steps} steps at "
              f"per-step rate {schedule.per_step:.6f} "
              f"(compound {schedule.target_rate:.4f})")

        finetune_fn = None
        grad_source = None
        eval_fn = None
        needs_data = (schedule.finetune_iterations > 0
                      or criterion.kind == "fg" or args.eval_each_step)
        if needs_data:
            train_ds, eval_ds = make_datasets(cfg)
            trainer = Trainer(net, train_ds, cfg.trainer)
            finetune_fn = trainer.fine_tune
            grad_source = trainer.average_gradients
            if args.eval_each_step:
                held_out = eval_ds or train_ds
                eval_fn = lambda: {
                    k: trainer.evaluate(held_out)[k] for k in ("miou", "macc")
                }
        log_rows = iterative_prune(net, schedule, criterion,
                                   finetune_fn=finetune_fn,
                                   grad_source=grad_source, eval_fn=eval_fn)
        columns = PRUNE_LOG_COLUMNS + (("miou", "macc") if eval_fn else ())
        write_csv(os.path.join(out, "prune_log.csv"), log_rows, columns)
        last = log_rows[-1]
        print(f"remaining weights {last['remaining']} "
              f"(density {last['density']:.4f})")

    write_csv(density_path, kernel_density_rows(net), DENSITY_COLUMNS)
    save_checkpoint(pruned_path, net)
    print(f"wrote {pruned_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    net = load_checkpoint(args.checkpoint)
    out = _out_dir(args, cfg)
    train_ds, eval_ds = make_datasets(cfg)
    ds = eval_ds or train_ds
    trainer = Trainer(net, ds, cfg.trainer)
    if args.weight_mode == "ws3":
        net.compile_ws3()
    metrics = trainer.evaluate(ds, weight_mode=args.weight_mode)
    write_csv(os.path.join(out, "eval.csv"),
              [{k: metrics[k] for k in EVAL_COLUMNS}], EVAL_COLUMNS)
    print(f"miou {metrics['miou']:.4f} macc {metrics['macc']:.4f} "
          f"loss {metrics['loss']:.4f} ({args.weight_mode} weights)")
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        if not args.config:
            raise ConfigError("network benchmark needs --config for input scenes")
        cfg = load_config(args.config)
        net = load_checkpoint(args.checkpoint)
        train_ds, _ = make_datasets(cfg)
        rows = bench_network(net, train_ds.batches[0].tensor, reps=args.reps)
    else:
        rows = [
            bench_layer(args.channels, args.channels, args.voxels, s,
                        kernel_size=args.kernel_size, reps=args.reps)
            for s in args.sparsity
        ]
    _print_table(rows, BENCH_COLUMNS)
    if args.output:
        write_csv(args.output, rows, BENCH_COLUMNS)
        print(f"wrote {args.output}")
    return 0


def cmd_count(args) -> int:
    if bool(args.checkpoint) == bool(args.arch):
        raise ConfigError("count needs exactly one of --checkpoint or --arch")
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
    else:
        try:
            spec = NetworkSpec(architecture=args.arch,
                               width_multiplier=args.width,
                               in_channels=args.in_channels,
                               num_classes=args.num_classes)
        except (ConfigError, ValidationError) as e:
            raise ConfigError(str(e)) from e
        net = build_network(spec)
    rows = [dict(zip(BREAKDOWN_COLUMNS, r)) for r in param_breakdown(net)]
    conv = [r for r in rows if r["kind"] == "conv"]
    fixed = [r for r in rows if r["kind"] != "conv"]
    surviving = sum(r["surviving"] for r in rows)
    prunable_total = sum(r["total"] for r in conv)
    prunable_left = sum(r["surviving"] for r in conv)
    print(f"total parameters (surviving): {surviving}")
    print(f"prunable conv weights: {prunable_left} of {prunable_total} "
          f"(density {prunable_left / prunable_total:.4f})")
    print(f"never pruned (heads + batch norm): "
          f"{sum(r['surviving'] for r in fixed)}")
    if args.breakdown:
        write_csv(args.breakdown, rows, BREAKDOWN_COLUMNS)
        print(f"wrote {args.breakdown}")
    return 0


def cmd_report(args) -> int:
    net = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    density_path = os.path.join(out, "density.csv")
    params_path = os.path.join(out, "params.csv")
    write_csv(density_path, kernel_density_rows(net), DENSITY_COLUMNS)
    rows = [dict(zip(BREAKDOWN_COLUMNS, r)) for r in param_breakdown(net)]
    write_csv(params_path, rows, BREAKDOWN_COLUMNS)
    print(f"wrote {density_path}")
    print(f"wrote {params_path}")
    if args.export_scenes:
        if not args.config:
            raise ConfigError("--export-scenes needs --config for the dataset")
        cfg = load_config(args.config)
        train_ds, _ = make_datasets(cfg)
        scene_dir = os.path.join(out, "scenes")
        os.makedirs(scene_dir, exist_ok=True)
        for i, b in enumerate(train_ds.batches[: args.export_scenes]):
            path = os.path.join(scene_dir, f"batch_{i:03d}.voxset")
            save_voxset(path, b.tensor, b.labels, b.offsets)
        n = min(args.export_scenes, len(train_ds.batches))
        print(f"wrote {n} voxset batches to {scene_dir}")
    return 0


# ----- parser -----


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (1 = reference determinism)")
    common.add_argument("--output-dir", default=None,
                        help="where results are written")

    p = argparse.ArgumentParser(
        prog="ws3net",
        description="Sparse 3D segmentation networks: training, magnitude "
                    "and structural pruning, weight-sparse inference.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common],
                       help="train a network from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--seed", type=int, default=None,
                   help="override the network init seed")
    t.set_defaults(handler=cmd_train)

    pr = sub.add_parser("prune", parents=[common],
                        help="magnitude or structural pruning of a checkpoint")
    pr.add_argument("--config", required=True)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--criterion", default=None,
                    help="L1|FG|L1S + G|L, e.g. L1G")
    pr.add_argument("--steps", type=int, default=None)
    pr.add_argument("--target-rate", type=float, default=None,
                    help="compound pruned fraction; solves the per-step rate")
    pr.add_argument("--per-step", type=float, default=None)
    pr.add_argument("--finetune-iterations", type=int, default=None)
    pr.add_argument("--structural", nargs="+", default=None, metavar="LAYER",
                    help="switch off non-gravity-axis offsets of these layers")
    pr.add_argument("--eval-each-step", action="store_true")
    pr.set_defaults(handler=cmd_prune)

    e = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on the configured dataset")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--weight-mode", choices=("dense", "ws3"), default="dense")
    e.set_defaults(handler=cmd_eval)

    b = sub.add_parser("bench", parents=[common],
                       help="time dense vs weight-sparse convolution")
    b.add_argument("--checkpoint", default=None,
                   help="benchmark a whole checkpointed network")
    b.add_argument("--config", default=None)
    b.add_argument("--channels", type=int, default=256)
    b.add_argument("--voxels", type=int, default=10000)
    b.add_argument("--sparsity", type=float, nargs="+", default=[0.99])
    b.add_argument("--kernel-size", type=int, default=3)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--output", default=None, help="CSV path")
    b.set_defaults(handler=cmd_bench)

    c = sub.add_parser("count", parents=[common],
                       help="parameter counts of a checkpoint or fresh preset")
    c.add_argument("--checkpoint", default=None)
    c.add_argument("--arch", default=None)
    c.add_argument("--width", type=float, default=1.0)
    c.add_argument("--in-channels", type=int, default=3)
    c.add_argument("--num-classes", type=int, default=20)
    c.add_argument("--breakdown", default=None,
                   help="also write a per-layer CSV here")
    c.set_defaults(handler=cmd_count)

    r = sub.add_parser("report", parents=[common],
                       help="kernel density and parameter reports")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--export-scenes", type=int, default=0, metavar="N",
                   help="also dump the first N dataset batches as voxset")
    r.set_defaults(handler=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else int(e.code)
    try:
        with _threads_ctx(args.threads):
            return args.handler(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (Ws3Error, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
