"""Command-line entry point.

Exit code 0 on success, 1 on any error; errors go to stderr as
``error: <code>: <message>``.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from aws_lambda_powertools import Logger
from pydantic import ValidationError

from checkpoint import save_model
from classifier import train_classifier
from config import load_config
from datasets import gen_toy_dataset, load_cifar10
from errors import InvalidArgumentError, RobustUAPError
from experiment import RESULTS_CSV, RESULTS_MD, evaluate_perturbation, run_experiment
from gradcheck import run_gradcheck, tolerance_for
from models import AttackName, ErrorResponse, TrainConfig
from report_writer import parse_results_csv, render_report_text, render_results_markdown

logger = Logger(service="robust-uap")

TOY_DATA = "toy"
TOY_TRAIN_SIZE = 1000


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors become ``invalid_argument`` failures instead of exit code 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise InvalidArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="robust-uap",
        description="Universal adversarial perturbations robust to semantic transformations",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train-model", help="train the reference classifier")
    train.add_argument("--data", required=True, help="CIFAR-10 binary file, or 'toy'")
    train.add_argument("--out", required=True, help="checkpoint path")
    train.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    train.add_argument("--seed", type=int, default=0)

    attack = commands.add_parser("attack", help="run one attack and evaluate it")
    attack.add_argument("--algo", required=True, choices=[name.value for name in AttackName])
    attack.add_argument("--config", required=True)
    attack.add_argument("--out", required=True, help="output directory")

    evaluate = commands.add_parser("evaluate", help="evaluate a stored perturbation")
    evaluate.add_argument("--perturbation", required=True)
    evaluate.add_argument("--config", required=True)

    report = commands.add_parser("report", help="re-render results.md from results.csv")
    report.add_argument("--dir", required=True)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient checks")
    gradcheck.add_argument("--seed", type=int, default=0)
    return parser


def _train_model(args: argparse.Namespace) -> int:
    data = gen_toy_dataset(TOY_TRAIN_SIZE, args.seed) if args.data == TOY_DATA else load_cifar10(args.data)
    model = train_classifier(data, TrainConfig(epochs=args.epochs, seed=args.seed))
    save_model(model, args.out)
    print(f"train accuracy: {model.accuracy(data):.4f}")
    return 0


def _attack(args: argparse.Namespace) -> int:
    cfg = load_config(args.config).model_copy(update={"attacks": [AttackName(args.algo)]})
    result = run_experiment(cfg, output_dir=args.out)
    sets = {tset.notation(): tset for tset in cfg.transform_sets}
    for (notation, name), report in result.reports.items():
        print(render_report_text(name.value, sets[notation], report), end="")
    return 0


def _evaluate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    reports = evaluate_perturbation(cfg, args.perturbation)
    for tset in cfg.transform_sets:
        print(render_report_text(Path(args.perturbation).stem, tset, reports[tset.notation()]), end="")
    return 0


def _report(args: argparse.Namespace) -> int:
    directory = Path(args.dir)
    try:
        content = (directory / RESULTS_CSV).read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidArgumentError(f"cannot read {directory / RESULTS_CSV}: {e}")
    rows = parse_results_csv(content)
    markdown = render_results_markdown(rows)
    (directory / RESULTS_MD).write_text(markdown)
    print(markdown, end="")
    return 0


def _gradcheck(args: argparse.Namespace) -> int:
    errors = run_gradcheck(args.seed)
    failed = []
    for name, error in errors.items():
        print(f"{name}: {error:.3e}")
        if error > tolerance_for(name):
            failed.append(name)
    if failed:
        _print_error(ErrorResponse(error="internal", message=f"gradient check failed: {', '.join(failed)}"))
        return 1
    return 0


COMMANDS = {
    "train-model": _train_model,
    "attack": _attack,
    "evaluate": _evaluate,
    "report": _report,
    "gradcheck": _gradcheck,
}


def _print_error(response: ErrorResponse) -> None:
    print(response.render(), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Global exception handler around every subcommand."""
    command = "robust-uap"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        return COMMANDS[command](args)
    except RobustUAPError as e:
        logger.error(f"{command} failed: {e.message}")
        _print_error(ErrorResponse(error=e.code, message=e.message))
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        _print_error(ErrorResponse(error="invalid_argument", message=f"{location}: {first['msg']}"))
    except Exception as e:
        logger.exception(f"{command} failed unexpectedly")
        _print_error(ErrorResponse(error="internal", message=str(e) or type(e).__name__))
    return 1


def run(argv: Optional[List[str]] = None) -> None:
    sys.exit(main(argv))


if __name__ == "__main__":
    run()
