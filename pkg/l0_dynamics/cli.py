import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence
import numpy as np
from pydantic import ValidationError
from l0_dynamics.config import config, setup_logging
from l0_dynamics.exceptions import (
    DataFormatException,
    EmptyBufferException,
    ModelException,
    NumericalAbortException,
    ShapeMismatchException,
)
from l0_dynamics.models import (
    Model,
    build_model,
    extract_equation,
    load_checkpoint,
    save_checkpoint,
)
from l0_dynamics.my_types import (
    EpochMetrics,
    EvalResult,
    FourierLibrarySpec,
    GateConfig,
    GeneralizedLibrarySpec,
    LibrarySpec,
    Metrics,
    MetricsSummary,
    ModelSpec,
    PolynomialLibrarySpec,
    ReportRow,
    TrainConfig,
)
from l0_dynamics.pendulum import (
    collect_dataset,
    export_csv,
    load_dataset,
    save_dataset,
)
from l0_dynamics.training import evaluate, sweep_lambda, train_model
from l0_dynamics.types.enums import (
    GateGranularity,
    LibraryChoice,
    ModelKind,
    Target,
)
from l0_dynamics.utils.helper import resolve_seed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="l0-dynamics",
        description="Sparse pendulum dynamics models with L0 hard-concrete gates.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", help="Collect a random-policy pendulum dataset.")
    gen.add_argument("--episodes", type=int, default=1000)
    gen.add_argument("--steps", type=int, default=200)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--csv", type=Path, default=None, help="Also export the records as CSV.")
    gen.add_argument("--jobs", type=int, default=config.max_workers)

    train = subparsers.add_parser("train", help="Train a transition or reward model.")
    train.add_argument("--model", type=ModelKind, choices=list(ModelKind), default=ModelKind.L0_SINDY)
    train.add_argument("--target", type=Target, choices=list(Target), default=Target.TRANSITION)
    train.add_argument(
        "--library", type=LibraryChoice, choices=list(LibraryChoice), default=LibraryChoice.POLYNOMIAL
    )
    train.add_argument("--degree", type=int, default=3)
    train.add_argument("--frequencies", type=int, default=1)
    train.add_argument(
        "--lambda",
        dest="lambdas",
        type=float,
        nargs="+",
        default=[1.0],
        help="Several values run an independent sweep, one sub-directory per value.",
    )
    train.add_argument("--epochs", type=int, default=500)
    train.add_argument("--batch", type=int, default=256)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--lr-decay", type=float, default=1.0)
    train.add_argument("--iterations", type=int, default=None)
    train.add_argument("--mc-samples", type=int, default=1)
    train.add_argument("--h-dim", type=int, default=256)
    train.add_argument("--weight-decay", type=float, default=0.0)
    train.add_argument(
        "--granularity",
        type=GateGranularity,
        choices=list(GateGranularity),
        default=GateGranularity.PER_INPUT_ROW,
    )
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--train", dest="train_file", type=Path, required=True)
    train.add_argument("--test", dest="test_file", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--jobs", type=int, default=config.max_workers)

    ev = subparsers.add_parser("eval", help="Evaluate a checkpoint on a dataset.")
    ev.add_argument("--ckpt", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)

    extract = subparsers.add_parser("extract", help="Print the equations of an l0-sindy checkpoint.")
    extract.add_argument("--ckpt", type=Path, required=True)
    extract.add_argument("--threshold", type=float, default=None)

    report = subparsers.add_parser("report", help="Compare metrics CSV files.")
    report.add_argument("--metrics", type=Path, nargs="+", required=True)
    report.add_argument("--out", type=Path, default=None, help="Also write the table as JSON.")

    return parser


def _library(args: argparse.Namespace) -> LibrarySpec:
    polynomial = PolynomialLibrarySpec(degree=args.degree)
    fourier = FourierLibrarySpec(n_frequencies=args.frequencies)
    match args.library:
        case LibraryChoice.POLYNOMIAL:
            return polynomial
        case LibraryChoice.FOURIER:
            return fourier
        case LibraryChoice.POLYFOURIER:
            return GeneralizedLibrarySpec(libraries=[polynomial, fourier])


def _write_run(model: Model, metrics: Metrics, out_dir: Path, seed: int, target: Target):
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "checkpoint.npz", seed, target)
    metrics.to_csv(out_dir / "metrics.csv", config.record_wall_time)
    (out_dir / "summary.json").write_text(metrics.summary().model_dump_json(indent=4))
    if model.kind == ModelKind.L0_SINDY:
        (out_dir / "equations.json").write_text(
            json.dumps(extract_equation(model), indent=4)
        )
    logger.info(f"Wrote run outputs to {out_dir}")


def gen_data(args: argparse.Namespace):
    if args.episodes < 1 or args.steps < 1:
        raise ValueError("--episodes and --steps must be positive")
    seed = resolve_seed(args.seed)
    buffer = collect_dataset(args.episodes, args.steps, seed, jobs=args.jobs)
    save_dataset(buffer, args.out)
    if args.csv is not None:
        export_csv(buffer, args.csv)


def train(args: argparse.Namespace):
    seed = resolve_seed(args.seed)
    train_buffer = load_dataset(args.train_file)
    test_buffer = load_dataset(args.test_file)
    if (train_buffer.obs_dim, train_buffer.act_dim) != (test_buffer.obs_dim, test_buffer.act_dim):
        raise ShapeMismatchException(
            (train_buffer.obs_dim, train_buffer.act_dim),
            (test_buffer.obs_dim, test_buffer.act_dim),
            "test dataset dims",
        )

    spec = ModelSpec(
        kind=args.model,
        input_dim=train_buffer.obs_dim + train_buffer.act_dim,
        output_dim=train_buffer.obs_dim if args.target == Target.TRANSITION else 1,
        h_dim=args.h_dim,
        library=_library(args) if args.model == ModelKind.L0_SINDY else None,
        gate_config=GateConfig(lambda_=args.lambdas[0]),
        granularity=args.granularity,
        weight_decay=args.weight_decay,
    )
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        iterations_per_epoch=args.iterations,
        lambda_=args.lambdas[0],
        mc_samples=args.mc_samples,
        seed=seed,
        target=args.target,
        lr_decay=args.lr_decay,
    )

    if len(args.lambdas) == 1:
        model = build_model(spec, seed)
        try:
            model, metrics = train_model(model, train_buffer, test_buffer, cfg)
        except NumericalAbortException:
            # fit has already rolled the model back to its last good state
            save_checkpoint(model, args.out / "checkpoint.npz", seed, cfg.target)
            raise
        _write_run(model, metrics, args.out, seed, cfg.target)
        return

    results = sweep_lambda(spec, train_buffer, test_buffer, cfg, args.lambdas, args.jobs)
    aborted = []
    for lambda_, result in results.items():
        out_dir = args.out / f"lambda_{lambda_:g}"
        if result.error is not None:
            save_checkpoint(result.model, out_dir / "checkpoint.npz", seed, cfg.target)
            aborted.append(result.error)
            continue
        _write_run(result.model, result.metrics, out_dir, seed, cfg.target)
    if aborted:
        raise aborted[0]


def eval_checkpoint(args: argparse.Namespace):
    model, _, target = load_checkpoint(args.ckpt)
    buffer = load_dataset(args.data)
    result = EvalResult(target=target, records=buffer.count, mse=evaluate(model, buffer, target))
    print(result.model_dump_json())


def extract(args: argparse.Namespace):
    model, _, _ = load_checkpoint(args.ckpt)
    for equation in extract_equation(model, args.threshold):
        print(equation)


def _initial_active_gates(metrics_path: Path) -> int | None:
    """Pre-training gate count from the summary written next to a metrics CSV."""
    summary_path = metrics_path.with_name("summary.json")
    if not summary_path.exists():
        return None
    try:
        return MetricsSummary.model_validate_json(summary_path.read_text()).initial_active_gates
    except ValidationError as e:
        raise DataFormatException(f"Malformed summary {summary_path}: {e}") from e


def read_metrics_csv(path: Path) -> Metrics:
    if not path.exists():
        raise FileNotFoundError(f"Metrics file {path} not found")
    header = path.read_text().splitlines()[:1]
    if header != [Metrics.CSV_HEADER]:
        raise DataFormatException(f"{path} is not a metrics CSV")
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as e:
        raise DataFormatException(f"Malformed metrics CSV {path}: {e}") from e
    if table.shape[0] == 0 or table.shape[1] != 6:
        raise DataFormatException(f"{path} has no metric rows")

    return Metrics(
        initial_active_gates=_initial_active_gates(path),
        epochs=[
            EpochMetrics(
                epoch=int(row[0]),
                train_mse=float(row[1]),
                test_mse=float(row[2]),
                penalty=float(row[3]),
                active_gates=int(row[4]),
                wall_time=float(row[5]),
            )
            for row in table
        ]
    )


def report(args: argparse.Namespace):
    rows = [
        ReportRow(run=str(path), **read_metrics_csv(path).summary().model_dump())
        for path in args.metrics
    ]
    columns = list(ReportRow.model_fields)
    columns.insert(0, columns.pop(columns.index("run")))
    print(",".join(columns))
    for row in rows:
        print(",".join(str(getattr(row, column)) for column in columns))
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(
            json.dumps([row.model_dump() for row in rows], indent=4)
        )


COMMANDS = {
    "gen-data": gen_data,
    "train": train,
    "eval": eval_checkpoint,
    "extract": extract,
    "report": report,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Parse `argv`, run one subcommand and return its exit code."""
    try:
        args = build_arg_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    setup_logging()
    try:
        COMMANDS[args.command](args)
    except (ValidationError, ValueError, ModelException, ShapeMismatchException) as e:
        logger.error(f"Invalid arguments: {e}")
        return EXIT_USAGE
    except (DataFormatException, EmptyBufferException, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except NumericalAbortException as e:
        logger.error(f"Numerical abort: {e}")
        return EXIT_NUMERICAL
    return EXIT_OK


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
