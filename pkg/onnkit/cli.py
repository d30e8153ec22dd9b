"""Command-line entry point: onnkit {train,gis,eval,gradcheck,make-data}"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from .errors import NumericalError, ONNError
from .logger import run_log, setup_logger
from .models import NUM_OPERATOR_SETS, BatchPolicy, ExperimentConfig, PaddingMode, TaskKind
from .operators import parse_library
from .runner import DEFAULT_GRADCHECK_SEEDS, DEFAULT_TOLERANCE, ExperimentRunner, gradcheck_table
from .storage import RUN_LOG_FILE

logger = setup_logger("onnkit.cli")

EXIT_OK = 0
EXIT_GRADCHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ERROR = 3


def parse_layers(text: str) -> List[Dict[str, Any]]:
    """
    Parse "N:sampling[:set],..." into layer dicts

    Example: "16:-2,32:2,1:1:0" is the In x 16 x 32 x 1 network with the output
    layer pinned to set 0.
    """
    layers = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        fields = part.split(":")
        if len(fields) not in (2, 3):
            raise ValueError(f"layer {part!r}: expected N:sampling[:set]")
        try:
            values = [int(f) for f in fields]
        except ValueError:
            raise ValueError(f"layer {part!r}: fields must be integers")
        layer = {"neuron_count": values[0], "sampling": values[1]}
        if len(values) == 3:
            layer["operator_set"] = values[2]
        layers.append(layer)
    if not layers:
        raise ValueError("at least one layer is required")
    return layers


def parse_frozen(text: str) -> Dict[int, int]:
    """Parse "layer:set,..."; "none" clears every pin"""
    if text.strip().lower() in ("", "none"):
        return {}
    frozen = {}
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        try:
            layer, set_index = (int(f) for f in part.split(":"))
        except ValueError:
            raise ValueError(f"frozen layer {part!r}: expected layer:set")
        frozen[layer] = set_index
    return frozen


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="root seed")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--task", choices=[t.value for t in TaskKind], default=None)
    parser.add_argument("--dataset", type=str, default=None, help="dataset directory")
    parser.add_argument("--threads", type=int, default=None, help="worker threads")
    parser.add_argument("--size", type=int, default=None, help="image side")
    parser.add_argument("--progress", action="store_true", help="show progress bars")


def _add_network(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--layers", type=str, default=None, help="N:sampling[:set],...")
    parser.add_argument("--padding", choices=[p.value for p in PaddingMode], default=None)
    parser.add_argument("--cut", type=float, default=None, help="lin-cut threshold")
    parser.add_argument("--eval-dataset", type=str, default=None, help="evaluation dataset")
    parser.add_argument("--threshold", type=float, default=None, help="segmentation threshold")


def _add_training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--iters", type=int, default=None, help="BP iterations")
    parser.add_argument("--lr", type=float, default=None, help="initial learning rate")
    parser.add_argument("--target", type=float, default=None, help="CP* target MSE")
    parser.add_argument("--batch-policy", choices=[b.value for b in BatchPolicy], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onnkit", description="Operational Neural Networks: BP training and operator search"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="BP-train a network with fixed operator sets")
    _add_common(train)
    _add_network(train)
    _add_training(train)
    train.add_argument("--runs", type=int, default=None, help="BP runs, the best is kept")

    gis = sub.add_parser("gis", help="greedy iterative search of layerwise operator sets")
    _add_common(gis)
    _add_network(gis)
    _add_training(gis)
    gis.add_argument("--opset-library", type=str, default=None, help="candidate set indices")
    gis.add_argument("--frozen", type=str, default=None, help="layer:set,... or none")
    gis.add_argument("--passes", type=int, default=None, help="GIS passes")
    gis.add_argument("--n-bp", type=int, default=None, help="BP runs per candidate")
    gis.add_argument("--short-iters", type=int, default=None, help="iterations per search run")
    gis.add_argument("--final-iters", type=int, default=None, help="iterations of the final run")

    evaluate = sub.add_parser("eval", help="evaluate a saved model")
    _add_common(evaluate)
    evaluate.add_argument("--model", type=str, required=True, help="model.json to evaluate")
    evaluate.add_argument("--threshold", type=float, default=None, help="segmentation threshold")

    gradcheck = sub.add_parser("gradcheck", help="analytic vs numerical gradients")
    gradcheck.add_argument("--seed", type=int, default=None, help="root seed")
    gradcheck.add_argument("--out", type=str, default=None, help="output directory")
    gradcheck.add_argument("--sets", type=str, default=None, help="set indices (all by default)")
    gradcheck.add_argument("--gradcheck-seeds", type=int, default=DEFAULT_GRADCHECK_SEEDS)
    gradcheck.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    gradcheck.add_argument(
        "--padding", choices=[p.value for p in PaddingMode], default=None, help="only this mode"
    )

    make_data = sub.add_parser("make-data", help="generate a desk-scale dataset")
    make_data.add_argument("--task", choices=[t.value for t in TaskKind], default="denoise")
    make_data.add_argument("--seed", type=int, default=None, help="generator seed")
    make_data.add_argument("--out", type=str, required=True, help="dataset directory")
    make_data.add_argument("--size", type=int, default=None, help="image side")
    make_data.add_argument("--items", type=int, default=None, help="number of items")
    return parser


def _set(target: Dict[str, Any], key: str, value: Any) -> None:
    if value is not None:
        target[key] = value


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (if any) overlaid with the flags that were given"""
    data: Dict[str, Any] = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"config {config_path}: {e}")

    train = dict(data.get("train", {}))
    gis = dict(data.get("gis", {}))
    params = dict(data.get("operator_params", {}))
    opt = vars(args)

    _set(data, "seed", opt.get("seed"))
    _set(data, "out_dir", opt.get("out"))
    _set(data, "task", opt.get("task"))
    _set(data, "dataset", opt.get("dataset"))
    _set(data, "eval_dataset", opt.get("eval_dataset"))
    _set(data, "model_path", opt.get("model"))
    _set(data, "threads", opt.get("threads"))
    _set(data, "image_size", opt.get("size"))
    _set(data, "items", opt.get("items"))
    _set(data, "threshold", opt.get("threshold"))
    _set(data, "runs", opt.get("runs"))
    if opt.get("progress"):
        data["show_progress"] = True

    if opt.get("layers"):
        data["layers"] = parse_layers(opt["layers"])
    if opt.get("padding") and opt.get("command") != "gradcheck":
        layers = data.get("layers") or ExperimentConfig().model_dump(mode="json")["layers"]
        data["layers"] = [{**layer, "padding": opt["padding"]} for layer in layers]
    if opt.get("opset_library"):
        data["library"] = parse_library(opt["opset_library"])
    if opt.get("frozen") is not None:
        data["frozen_layers"] = parse_frozen(opt["frozen"])

    _set(train, "iter_max", opt.get("iters"))
    _set(train, "epsilon0", opt.get("lr"))
    _set(train, "target_metric", opt.get("target"))
    _set(train, "batch_policy", opt.get("batch_policy"))
    _set(gis, "passes", opt.get("passes"))
    _set(gis, "n_bp", opt.get("n_bp"))
    _set(gis, "short_iter_max", opt.get("short_iters"))
    _set(gis, "final_iter_max", opt.get("final_iters"))
    _set(gis, "target_metric", opt.get("target"))
    _set(params, "cut", opt.get("cut"))

    data.update(train=train, gis=gis, operator_params=params)
    return ExperimentConfig.model_validate(data)


def _gradcheck(runner: ExperimentRunner, args: argparse.Namespace) -> int:
    sets = parse_library(args.sets) if args.sets else list(range(NUM_OPERATOR_SETS))
    paddings = [PaddingMode(args.padding)] if args.padding else list(PaddingMode)
    rows, passed = runner.gradcheck(sets, args.gradcheck_seeds, args.tolerance, paddings)
    sys.stdout.write(gradcheck_table(rows))
    if not passed:
        failed = [str(row.set_index) for row in rows if not row.passed]
        logger.error(f"Gradient check failed for set(s) {', '.join(failed)}")
        return EXIT_GRADCHECK_FAILED
    logger.info(f"Gradient check passed for {len(rows)} set(s)")
    return EXIT_OK


def run(args: argparse.Namespace) -> int:
    runner = ExperimentRunner(build_config(args))
    if args.command == "make-data":
        manifest = runner.make_data()
        logger.info(f"Dataset manifest: {len(manifest.ids)} items")
        return EXIT_OK
    with run_log(runner.store.path(RUN_LOG_FILE)):
        return _dispatch(runner, args)


def _dispatch(runner: ExperimentRunner, args: argparse.Namespace) -> int:
    if args.command == "train":
        outcome = runner.train()
        logger.info(f"Trained model written to {runner.store.root}")
        if outcome.reports:
            mean_mse = sum(r.mse for r in outcome.reports) / len(outcome.reports)
            logger.info(f"Mean MSE {mean_mse:.6g}")
    elif args.command == "gis":
        search = runner.gis()
        logger.info(
            f"GIS assignment {search.log.assignment}, target reached: {search.log.target_reached}"
        )
    elif args.command == "eval":
        reports = runner.evaluate()
        for report in reports:
            sys.stdout.write(report.model_dump_json() + "\n")
    elif args.command == "gradcheck":
        return _gradcheck(runner, args)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes"""
    args = build_parser().parse_args(argv)
    if args.command == "make-data" and args.out:
        args.dataset = args.out
    try:
        return run(args)
    except NumericalError as e:
        location = f" at {e.location}" if e.location else ""
        logger.error(f"Numerical failure{location}: {e}")
        return EXIT_NUMERICAL_ERROR
    except (ONNError, ValidationError, ValueError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
