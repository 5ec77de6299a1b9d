"""End-to-end experiment runner: data, model, attacks, evaluation and reports."""

import time
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from aws_lambda_powertools import Logger

from attacks import run_attack
from checkpoint import load_model, load_perturbation, save_model, save_perturbation
from classifier import Classifier, train_classifier
from core import ImageTensor
from datasets import LabeledDataset, gen_toy_dataset, load_cifar10
from errors import RobustUAPError, ShapeError
from estimator import full_report
from models import AttackName, AttackTrace, ExperimentConfig, ResultRow, RobustnessReport
from report_writer import (
    format_results_csv,
    format_runtime_csv,
    format_trace_csv,
    render_report_text,
    render_results_markdown,
    result_rows,
)

logger = Logger(service="robust-uap")

TOY_DATASET = "toy"
MODEL_FILE = "model.ruap"
RESULTS_CSV = "results.csv"
RESULTS_MD = "results.md"
RUNTIME_CSV = "runtime.csv"


# (transform set notation, attack)
RunKey = Tuple[str, AttackName]


class ExperimentResult(NamedTuple):
    rows: List[ResultRow]
    reports: Dict[RunKey, RobustnessReport]
    traces: Dict[RunKey, AttackTrace]
    output_dir: Path


def load_splits(cfg: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    Train split is the first ``train_n`` records; eval split follows it, or comes
    from ``eval_dataset`` when one is configured.

    Args:
        cfg: Experiment configuration

    Returns:
        Tuple of (train split, eval split)
    """
    if cfg.dataset == TOY_DATASET:
        toy_eval = cfg.eval_dataset == TOY_DATASET
        total = cfg.train_n if toy_eval else cfg.train_n + cfg.eval_n
        data = gen_toy_dataset(total, cfg.seed)
    else:
        data = load_cifar10(cfg.dataset)

    train = data.subset(0, cfg.train_n, name=f"{data.name}[train]")
    if cfg.eval_dataset is None:
        return train, data.subset(cfg.train_n, cfg.eval_n, name=f"{data.name}[eval]")

    if cfg.eval_dataset == TOY_DATASET:
        # distinct seed so the eval split does not repeat the train images
        eval_source = gen_toy_dataset(cfg.eval_n, cfg.seed + 1)
    else:
        eval_source = load_cifar10(cfg.eval_dataset)
    return train, eval_source.subset(0, cfg.eval_n, name=f"{eval_source.name}[eval]")


def prepare_model(cfg: ExperimentConfig, train: LabeledDataset, output_dir: Path) -> Classifier:
    """Train (and checkpoint) the model when requested, otherwise load the configured checkpoint."""
    if cfg.train_model:
        model = train_classifier(train, cfg.train)
        model_path = Path(cfg.model) if cfg.model else output_dir / MODEL_FILE
        save_model(model, model_path)
        logger.info(f"Trained model reaches {model.accuracy(train):.4f} accuracy on {train.name}")
    else:
        model = load_model(cfg.model)

    if model.input_shape != train.image_shape:
        raise ShapeError(
            f"model expects inputs of shape {model.input_shape}, dataset has {train.image_shape}"
        )
    return model


def _with_context(context: str, error: RobustUAPError) -> RobustUAPError:
    wrapped = type(error)(f"{context}: {error.message}")
    wrapped.__cause__ = error
    return wrapped


def artifact_stem(name: AttackName, set_index: int, set_count: int) -> str:
    """``<attack>`` for a single transformation set, ``<attack>_set<k>`` (1-based) otherwise."""
    return name.value if set_count == 1 else f"{name.value}_set{set_index + 1}"


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None) -> ExperimentResult:
    """
    Run every configured attack against every transformation set on the train split
    and evaluate each perturbation on the eval split under the set it was built for.

    Writes results.csv, results.md, runtime.csv, one ``<stem>.rupt`` dump and one
    ``<stem>_trace.csv`` per (set, attack) pair into the output directory; see
    ``artifact_stem``.

    Args:
        cfg: Experiment configuration
        output_dir: Overrides ``cfg.output_dir``

    Returns:
        ExperimentResult with the rows, reports and traces that were written, the
        latter two keyed by (set notation, attack)
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, evaluation = load_splits(cfg)
    model = prepare_model(cfg, train, out)
    logger.info(
        f"Running {len(cfg.attacks)} attack(s) x {len(cfg.transform_sets)} transform set(s) on {train.name}",
        extra={
            "train_n": len(train),
            "eval_n": len(evaluation),
            "transforms": [tset.notation() for tset in cfg.transform_sets],
        },
    )

    rows: List[ResultRow] = []
    reports: Dict[RunKey, RobustnessReport] = {}
    traces: Dict[RunKey, AttackTrace] = {}
    runtimes: List[Tuple[str, AttackTrace, float]] = []

    for set_index, tset in enumerate(cfg.transform_sets):
        notation = tset.notation()
        for name in cfg.attacks:
            name = AttackName(name)
            stem = artifact_stem(name, set_index, len(cfg.transform_sets))
            started = time.perf_counter()
            try:
                u, trace = run_attack(name, model, train.images, tset, cfg.attack)
            except RobustUAPError as e:
                raise _with_context(f"attack {name.value} under {notation}", e)
            runtime = time.perf_counter() - started if cfg.record_timing else 0.0

            try:
                report = full_report(
                    model,
                    evaluation.images,
                    tset,
                    u,
                    cfg.gammas,
                    cfg.attack.estimator,
                    cfg.attack.norm,
                    clamp_diagnostic=cfg.report_clamped,
                )
            except RobustUAPError as e:
                raise _with_context(f"evaluating {name.value} under {notation} on {evaluation.name}", e)

            save_perturbation(u, out / f"{stem}.rupt")
            (out / f"{stem}_trace.csv").write_text(format_trace_csv(trace, cfg.record_timing))
            logger.info(f"Evaluation of {stem}\n{render_report_text(name.value, tset, report)}")

            rows.extend(result_rows(name.value, tset, report, runtime))
            reports[(notation, name)] = report
            traces[(notation, name)] = trace
            runtimes.append((notation, trace, runtime))

    (out / RESULTS_CSV).write_text(format_results_csv(rows))
    (out / RESULTS_MD).write_text(render_results_markdown(rows))
    (out / RUNTIME_CSV).write_text(format_runtime_csv(runtimes))
    logger.info(f"Wrote {len(rows)} result rows to {out / RESULTS_CSV}")
    return ExperimentResult(rows=rows, reports=reports, traces=traces, output_dir=out)


def evaluate_perturbation(
    cfg: ExperimentConfig, perturbation: Union[str, Path, ImageTensor]
) -> Dict[str, RobustnessReport]:
    """Evaluate a stored (or in-memory) perturbation on the eval split under every configured set."""
    u = perturbation if isinstance(perturbation, np.ndarray) else load_perturbation(perturbation)
    train, evaluation = load_splits(cfg)
    model = prepare_model(cfg, train, Path(cfg.output_dir))
    if u.shape != evaluation.image_shape:
        raise ShapeError(f"perturbation shape {u.shape} does not match images {evaluation.image_shape}")
    return {
        tset.notation(): full_report(
            model,
            evaluation.images,
            tset,
            u,
            cfg.gammas,
            cfg.attack.estimator,
            cfg.attack.norm,
            clamp_diagnostic=cfg.report_clamped,
        )
        for tset in cfg.transform_sets
    }
