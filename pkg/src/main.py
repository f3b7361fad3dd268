"""Command-line entry point for axial-lab.

Subcommands:
  verify          fast kernels against the nested-loop references
  gradcheck       analytic gradients against central differences
  count           parameters and multiply-adds of a model
  bench           wall-clock timing of an attention kernel
  sweep           span or width sweeps of the cost model
  train           train a model on the synthetic long-range task
  eval            accuracy of a checkpoint, optionally at other resolutions
  dump-attention  export the attention weights of one layer

Exit codes: 0 success, 1 verification failure or runtime error, 2 usage or configuration error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from src.analysis.bench import TARGETS, bench_runtime
from src.analysis.costs import count_madds
from src.analysis.sweep import model_span_sweep, span_sweep, width_sweep
from src.core.config import config
from src.core.errors import AxialError, ConfigError
from src.core.models import AxialAttentionConfig, Axis, ModelSpec, OracleReport, Precision, Span, StemType
from src.model.resnet import build_axial_resnet
from src.storage.checkpoint import atomic_write, load_dataset, load_model, save_dataset, save_model
from src.storage.export import dump_attention
from src.storage.run_config import RunConfig, load_run_config
from src.train.loop import evaluate, train
from src.train.optimizer import MomentumSGD
from src.train.task import SyntheticLongRangeTask, generate_task
from src.verify.harness import (
    DEFAULT_KERNELS,
    ShapeCase,
    block_target,
    gradcheck,
    kernel_target,
    linear_target,
    model_target,
    verify_kernels,
)

logger = logging.getLogger("axial_lab")

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]

PRESETS: Dict[str, Callable[[], ModelSpec]] = {
    "resnet50": ModelSpec.resnet50,
    "axial-resnet-s": lambda: ModelSpec.axial_resnet(0.5),
    "axial-resnet-m": lambda: ModelSpec.axial_resnet(0.75),
    "axial-resnet-l": lambda: ModelSpec.axial_resnet(1.0),
    "full-axial-resnet-s": lambda: ModelSpec.axial_resnet(0.5, StemType.FULL_AXIAL),
    "full-axial-resnet-l": lambda: ModelSpec.axial_resnet(1.0, StemType.FULL_AXIAL),
    "ps-resnet": ModelSpec.ps_resnet,
}


# Helpers ---------------------------------------------------------------

def _run_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config) if getattr(args, "config", None) else RunConfig()


def _emit(args: argparse.Namespace, run: RunConfig, seed: int, payload: Dict[str, Any], table: str,
          csv: Optional[str] = None) -> None:
    """Print in the requested format; every output carries the config hash and seed."""
    fmt = getattr(args, "format", "table")
    if fmt == "json":
        print(json.dumps({"config_hash": run.hash, "seed": seed, **payload}, indent=2, default=str))
    elif fmt == "csv" and csv is not None:
        print(f"# config_hash={run.hash} seed={seed}")
        print(csv, end="")
    else:
        print(f"# config_hash={run.hash} seed={seed}")
        print(table)


def _oracle_table(reports: Sequence[OracleReport]) -> str:
    lines = [f"{'check':32s} {'cases':>6s} {'max_abs':>11s} {'max_rel':>11s} {'threshold':>10s}  result"]
    for r in reports:
        worst = max(r.groups.values()) if r.groups else r.max_abs
        lines.append(f"{r.kernel:32s} {len(r.shapes) or len(r.groups):6d} {worst:11.3e} {r.max_rel:11.3e} "
                     f"{r.threshold:10.1e}  {'pass' if r.passed else 'FAIL'}")
        for name, err in sorted(r.groups.items()):
            lines.append(f"    {name:28s} {err:11.3e}")
    return "\n".join(lines)


def _spec(args: argparse.Namespace, run: RunConfig) -> ModelSpec:
    if getattr(args, "preset", None):
        return PRESETS[args.preset]()
    return run.model.to_spec()


def _task(run: RunConfig) -> SyntheticLongRangeTask:
    return SyntheticLongRangeTask(**run.task.task_fields(), seed=run.seeds.data)


# Subcommands -----------------------------------------------------------

def cmd_verify(args: argparse.Namespace) -> int:
    run = _run_config(args)
    kernels = [k for k in DEFAULT_KERNELS if not args.kernel or k.name in args.kernel]
    if not kernels:
        raise ConfigError(f"no kernel matches {args.kernel}; choose from {[k.name for k in DEFAULT_KERNELS]}")
    reports = verify_kernels(args.seeds, kernels=kernels, threshold=args.threshold, seed=args.seed)
    _emit(args, run, args.seed, {"reports": [r.to_dict() for r in reports]}, _oracle_table(reports))
    return 0 if all(r.passed for r in reports) else 1


def cmd_gradcheck(args: argparse.Namespace) -> int:
    run = _run_config(args)
    reports = []
    for name in args.target:
        if name == "linear":
            target, tolerance = linear_target(seed=args.seed), args.tolerance
        elif name == "model":
            target, tolerance = model_target(seed=args.seed), max(args.tolerance, 1e-3)
        elif name == "block":
            target, tolerance = block_target(seed=args.seed), args.tolerance
        else:
            target, tolerance = kernel_target(name, seed=args.seed), args.tolerance
        reports.append(gradcheck(target, tolerance, max_elements=args.max_elements, seed=args.seed))
    _emit(args, run, args.seed, {"reports": [r.to_dict() for r in reports]}, _oracle_table(reports))
    return 0 if all(r.passed for r in reports) else 1


def cmd_count(args: argparse.Namespace) -> int:
    run = _run_config(args)
    spec = _spec(args, run)
    report = count_madds(spec, args.resolution)
    _emit(args, run, run.seeds.init, report.to_dict(), report.to_table(), report.to_csv())
    return 0


def _bench_layer(run: RunConfig) -> AxialAttentionConfig:
    b = run.bench
    d_out = max(1, b.d_in // b.heads)
    return AxialAttentionConfig(Axis.WIDTH, Span.global_(), b.heads, b.d_in, max(1, d_out // 2), d_out)


def cmd_bench(args: argparse.Namespace) -> int:
    run = _run_config(args)
    b = run.bench
    layer = _bench_layer(run)
    resolution = args.resolution or b.resolution
    spans = args.spans or b.spans
    shapes = [ShapeCase(1, resolution, resolution, layer.d_in, layer.heads, layer.d_q, layer.d_out, Span.parse(m))
              for m in spans]
    result = bench_runtime(args.target or b.target, shapes, args.repetitions or b.repetitions, b.warmup,
                           args.workers or b.workers, seed=run.seeds.init)
    _emit(args, run, run.seeds.init, result.to_dict(), result.to_table(), result.to_csv())
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    run = _run_config(args)
    if args.kind == "span":
        result = span_sweep(_bench_layer(run), args.spans or run.bench.spans, args.resolution or run.bench.resolution)
    elif args.kind == "model-span":
        result = model_span_sweep(_spec(args, run), args.spans or run.bench.spans, args.resolution)
    else:
        result = width_sweep(_spec(args, run), args.multipliers, args.resolution)
    _emit(args, run, run.seeds.init, result.to_dict(), result.to_table(), result.to_csv())
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run = _run_config(args)
    out = Path(args.out or config.paths.output_dir)
    spec = run.model.to_spec()
    task = _task(run)
    data = generate_task(task, run.task.train_samples, seed=run.seeds.data)
    model = build_axial_resnet(spec, seed=run.seeds.init, precision=Precision(run.model.precision or config.train.precision))
    opt = run.optimizer
    optimizer = MomentumSGD(model.parameters(), opt.learning_rate, opt.momentum, opt.warmup_steps, opt.weight_decay)
    steps = args.steps if args.steps is not None else opt.steps
    records = train(model, data, optimizer, steps, seed=run.seeds.train, batch_size=opt.batch_size,
                    checkpoint_every=opt.checkpoint_every or config.train.checkpoint_every,
                    checkpoint_dir=out / "checkpoints", config_hash=run.hash)
    final = save_model(model, out / f"{spec.name}.axck", run.hash, {"steps": steps, "seed": run.seeds.train,
                                                                     "optimizer": optimizer.state.to_dict()})
    held_out = generate_task(task, run.task.eval_samples, seed=run.seeds.eval)
    save_dataset(held_out, out / "eval.axds")
    result = evaluate(model, held_out)
    atomic_write(out / "records.json", json.dumps([r.to_dict() for r in records], indent=2))
    last = records[-1].to_dict() if records else {}
    payload = {"checkpoint": str(final), "steps": steps, "final": last, "eval": result.to_dict()}
    table = (f"trained {spec.name} for {steps} steps: loss {last.get('loss', float('nan')):.4f}, "
             f"eval accuracy {result.accuracy:.4f}\ncheckpoint {final}")
    _emit(args, run, run.seeds.train, payload, table)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = _run_config(args)
    model = load_model(args.checkpoint)
    if args.dataset:
        data = load_dataset(args.dataset)
    else:
        data = generate_task(_task(run), run.task.eval_samples, seed=run.seeds.eval)
    resolutions = args.resolutions or run.task.eval_resolutions
    result = evaluate(model, data, resolutions)
    table = "\n".join(f"{res:>6d}px  {acc:.4f}" for res, acc in result.per_resolution.items())
    _emit(args, run, run.seeds.eval, result.to_dict(), f"{model.name} on {result.samples} samples\n{table}")
    return 0


def cmd_dump_attention(args: argparse.Namespace) -> int:
    run = _run_config(args)
    model = load_model(args.checkpoint)
    data = load_dataset(args.dataset) if args.dataset else generate_task(_task(run), args.sample + 1, seed=run.seeds.eval)
    x = data.images[args.sample:args.sample + 1]
    index = dump_attention(model, x, args.layer, args.out, args.heads)
    _emit(args, run, run.seeds.eval, {"index": str(index)}, f"attention maps indexed in {index}")
    return 0


# Parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="axial-lab",
        description="Position-sensitive axial attention: verification, cost models, benchmarks and training.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  axial-lab verify --seeds 100
  axial-lab count --preset resnet50 --resolution 224
  axial-lab sweep span --spans 5 9 17 33 65
  axial-lab train --config configs/toy_longrange.json --out runs/toy
        """,
    )
    parser.add_argument("--log-level", default=None, type=str.upper, choices=LOG_LEVELS, help="Override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command")

    def add(name: str, handler: Callable[[argparse.Namespace], int], help_text: str,
            formats: Sequence[str] = ("table", "json")) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--format", choices=list(formats), default="table")
        p.set_defaults(handler=handler)
        return p

    p = add("verify", cmd_verify, "compare fast kernels with the nested-loop references")
    p.add_argument("--seeds", type=int, default=100, help="random shapes per kernel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-10)
    p.add_argument("--kernel", action="append", help="restrict to a kernel (repeatable)")

    p = add("gradcheck", cmd_gradcheck, "check analytic gradients by central differences")
    p.add_argument("--target", nargs="+", default=["linear", "axial_attention_width", "axial_attention_height"],
                   help="linear, block, model, or a kernel name")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-elements", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = add("count", cmd_count, "parameters and M-Adds per layer", ("table", "json", "csv"))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--resolution", type=int, default=None)

    p = add("bench", cmd_bench, "time an attention kernel across spans", ("table", "json", "csv"))
    p.add_argument("--target", choices=sorted(TARGETS))
    p.add_argument("--spans", nargs="+")
    p.add_argument("--resolution", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--workers", type=int, help="lanes for the parallel-over-lines mode")

    p = add("sweep", cmd_sweep, "cost sweeps over span or width", ("table", "json", "csv"))
    p.add_argument("kind", choices=["span", "model-span", "width"])
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--spans", nargs="+", type=int)
    p.add_argument("--multipliers", nargs="+", type=float, default=[0.375, 0.5, 0.75, 1.0])
    p.add_argument("--resolution", type=int)

    p = add("train", cmd_train, "train on the synthetic long-range task")
    p.add_argument("--out", help="output directory")
    p.add_argument("--steps", type=int)

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset container written by train")
    p.add_argument("--resolutions", nargs="+", type=int)

    p = add("dump-attention", cmd_dump_attention, "export attention weights of one layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", required=True, help="layer name, e.g. stage1.block0.attn_w")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--heads", nargs="+", type=int)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=(args.log_level or config.log_level).upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        config.validate()
    except ValueError as e:
        logger.error(f"invalid environment: {e}")
        return 2
    try:
        return args.handler(args)
    except (ConfigError, ValidationError) as e:
        logger.error(f"configuration error: {e}")
        return 2
    except AxialError as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
