"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation/verification failure,
3 I/O or container-format error. Every run echoes its resolved configuration
before doing work so artifacts can be traced back to exact flags. The
``SLIMGRAPH_SEED`` environment variable supplies the default ``--seed``.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import depgraph, fakequant, metrics, modelio, pipeline, pruner
from .builders import PRESETS, build_mini_net
from .errors import ModelFormatError, PlanError, SlimgraphError
from .executor import forward_arrays
from .graph import infer_shapes


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _default_seed() -> int:
    return int(os.environ.get("SLIMGRAPH_SEED", "0"))


def _echo_config(cmd: str, args: argparse.Namespace) -> None:
    pairs = " ".join(f"{k}={v!r}" for k, v in sorted(vars(args).items()) if k != "func")
    print(f"[slimgraph] {cmd}: {pairs}")


def _build_parser() -> _Parser:
    p = _Parser(prog="slimgraph", description=__doc__ and __doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, **kw):
        sp = sub.add_parser(name, **kw)
        return sp

    sp = add("build", help="construct a preset graph and save it")
    sp.add_argument("--preset", required=True, choices=PRESETS)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--input-size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.add_argument("--out", required=True)

    sp = add("train", help="train a model on the toy task")
    sp.add_argument("--model", required=True)
    sp.add_argument("--epochs", type=int, required=True)
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.add_argument("--lr", type=float, default=0.015)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--log", default=None)
    sp.add_argument("--out", default=None)

    sp = add("prune", help="score channels, build a plan, emit the slim model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--fraction", type=float, required=True)
    sp.add_argument("--plan-out", default=None)
    sp.add_argument("--out", required=True)

    sp = add("calibrate", help="instrument (if needed) and calibrate quantizers")
    sp.add_argument("--model", required=True)
    sp.add_argument("--batches", type=int, default=2)
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.add_argument("--calib-out", default=None)
    sp.add_argument("--out", required=True)

    sp = add("qat", help="insert + calibrate quantizers, then train under them")
    sp.add_argument("--model", required=True)
    sp.add_argument("--epochs", type=int, required=True)
    sp.add_argument("--batches", type=int, default=2)
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.add_argument("--lr", type=float, default=0.015)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--log", default=None)
    sp.add_argument("--out", required=True)

    sp = add("pipeline", help="integrated train -> prune -> recalibrate -> finetune -> export")
    sp.add_argument("--preset", required=True, choices=PRESETS)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--fraction", type=float, default=0.0)
    sp.add_argument("--prune-epoch", type=int, default=None)
    sp.add_argument("--epochs", type=int, required=True)
    sp.add_argument("--qat", action="store_true")
    sp.add_argument("--calibration-batches", type=int, default=2)
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.add_argument("--lr", type=float, default=0.015)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--out-dir", required=True)

    sp = add("verify", help="prune-equivalence check of a slim model against its dense source")
    sp.add_argument("--dense", required=True)
    sp.add_argument("--slim", required=True)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=_default_seed())

    sp = add("report", help="emit a compression report for one or more models")
    sp.add_argument("--models", nargs="+", required=True)
    sp.add_argument("--csv", default=None)

    sp = add("inspect", help="dump the resolved channel groups of a model")
    sp.add_argument("--model", required=True)
    return p


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_build(args) -> int:
    shape = (1, 3, args.input_size, args.input_size)
    g = build_mini_net(args.preset, shape, args.classes, seed=args.seed)
    n = modelio.save(g, 32, args.out)
    print(f"built {args.preset}: {metrics.count_params(g)} params, wrote {n} bytes to {args.out}")
    return 0


def _make_task(graph, seed):
    return pipeline.ToyTask(n_classes=graph.meta.get("n_classes", 3), seed=seed)


def _cmd_train(args) -> int:
    g, _ = modelio.load(args.model)
    cfg = pipeline.TrainConfig(epochs=args.epochs, seed=args.seed, lr=args.lr,
                               momentum=args.momentum, batch_size=args.batch_size)
    task = _make_task(g, args.seed)
    trained, rows = pipeline.train(g, task, cfg)
    if args.log:
        pipeline.write_metric_log(rows, args.log)
    if args.out:
        modelio.save(trained, 32, args.out)
    print(f"trained {args.epochs} epochs; final val_acc={rows[-1][2]:.4f}")
    return 0


def _cmd_prune(args) -> int:
    g, _ = modelio.load(args.model)
    groups = depgraph.resolve_groups(g)
    plan = pruner.build_plan(g, args.fraction, groups)
    slim = pruner.apply_prune(g, plan, groups)
    if args.plan_out:
        pruner.write_plan(plan, args.plan_out)
    modelio.save(slim, 32, args.out)
    dense_p, slim_p = metrics.count_params(g), metrics.count_params(slim)
    print(f"pruned fraction={args.fraction}: {dense_p} -> {slim_p} params "
          f"({pruner.ratio_percent(dense_p, slim_p):.1f}%)")
    return 0


def _cmd_calibrate(args) -> int:
    g, _ = modelio.load(args.model)
    if not fakequant.quantizer_ids(g):
        g = fakequant.insert_fakequant(g)
    task = _make_task(g, args.seed)
    g = fakequant.calibrate(g, task.calibration_batches(args.batches, 16))
    if args.calib_out:
        fakequant.write_calibration(g, args.calib_out)
    modelio.save(g, 32, args.out)
    print(f"calibrated {len(fakequant.quantizer_ids(g))} quantizers over {args.batches} batches")
    return 0


def _cmd_qat(args) -> int:
    g, _ = modelio.load(args.model)
    if not fakequant.quantizer_ids(g):
        g = fakequant.insert_fakequant(g)
    task = _make_task(g, args.seed)
    g = fakequant.calibrate(g, task.calibration_batches(args.batches, args.batch_size))
    cfg = pipeline.TrainConfig(epochs=args.epochs, seed=args.seed, lr=args.lr,
                               momentum=args.momentum, batch_size=args.batch_size,
                               qat_enabled=True, calibration_batches=args.batches)
    trained, rows = pipeline.train(g, task, cfg)
    if args.log:
        pipeline.write_metric_log(rows, args.log)
    modelio.save(trained, 32, args.out)
    print(f"qat-trained {args.epochs} epochs; final val_acc={rows[-1][2]:.4f}")
    return 0


def _cmd_pipeline(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    cfg = pipeline.TrainConfig(
        epochs=args.epochs, prune_epoch=args.prune_epoch,
        channel_fraction=args.fraction, qat_enabled=args.qat,
        calibration_batches=args.calibration_batches, lr=args.lr,
        batch_size=args.batch_size, seed=args.seed)
    task = pipeline.ToyTask(n_classes=args.classes, seed=args.seed)
    result = pipeline.run_compression_pipeline(args.preset, task, cfg)

    out = lambda name: os.path.join(args.out_dir, name)
    with open(out("model_fp32.twnm"), "wb") as f:
        f.write(result.fp32_bytes)
    with open(out("model_fp16.twnm"), "wb") as f:
        f.write(result.fp16_bytes)
    if result.plan is not None:
        pruner.write_plan(result.plan, out("plan.txt"))
    if args.qat:
        fakequant.write_calibration(result.slim_graph, out("calib.txt"))
    pipeline.write_metric_log(result.log, out("metrics.csv"))
    csv_text, table = metrics.emit_report([result.dense_report, result.slim_report])
    with open(out("report.csv"), "w") as f:
        f.write(csv_text)
    with open(out("report.txt"), "w") as f:
        f.write(table)
    print(table, end="")
    print(f"fp16 val_acc={result.fp16_accuracy:.4f} (fp32 {result.final_accuracy:.4f})")
    return 0


def _cmd_verify(args) -> int:
    dense, _ = modelio.load(args.dense)
    slim, _ = modelio.load(args.slim)
    plan = pruner.read_plan(args.plan)
    groups = depgraph.resolve_groups(dense)
    pruner.validate_plan(groups, plan)  # PlanError -> exit 2 with the group id
    embedded = pruner.zero_embed_oracle(dense, plan, groups)
    expected = pruner.apply_prune(dense, plan, groups)
    if metrics.count_params(expected) != metrics.count_params(slim):
        print("verify: slim model parameter count does not match the plan", file=sys.stderr)
        return 2
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        x = rng.normal(0.5, 0.25, (1,) + dense.input_shape[1:]).astype(np.float32)
        ya = forward_arrays(embedded, x)
        yb = forward_arrays(slim, x)
        for k in ya:
            denom = max(float(np.abs(ya[k]).max()), 1e-12)
            rel = float(np.abs(ya[k] - yb[k]).max()) / denom
            worst = max(worst, rel)
    print(f"verify: {args.trials} trials, worst relative deviation {worst:.3e} (tol {args.tol})")
    return 0 if worst <= args.tol else 2


def _cmd_report(args) -> int:
    reports = []
    dense_params = None
    for path in args.models:
        g, bits = modelio.load(path)
        if dense_params is None:
            dense_params = metrics.count_params(g)  # first model is the baseline
        reports.append(metrics.build_report(g, dense_params=dense_params,
                                            precision_bits=bits))
    csv_text, table = metrics.emit_report(reports)
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(csv_text)
    print(table, end="")
    return 0


def _cmd_inspect(args) -> int:
    g, _ = modelio.load(args.model)
    infer_shapes(g)
    print(depgraph.format_groups(g), end="")
    return 0


_COMMANDS = {
    "build": _cmd_build,
    "train": _cmd_train,
    "prune": _cmd_prune,
    "calibrate": _cmd_calibrate,
    "qat": _cmd_qat,
    "pipeline": _cmd_pipeline,
    "verify": _cmd_verify,
    "report": _cmd_report,
    "inspect": _cmd_inspect,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    _echo_config(args.cmd, args)
    try:
        return _COMMANDS[args.cmd](args)
    except PlanError as e:
        print(f"plan error: {e}", file=sys.stderr)
        return 2
    except (ModelFormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except SlimgraphError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
