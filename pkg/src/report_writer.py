"""Result tables: results.csv, results.md, runtime.csv and attack traces."""

import csv
import io
import os
from typing import Dict, Iterable, List, Sequence, Tuple

from aws_lambda_powertools import Logger
from jinja2 import Environment, FileSystemLoader, StrictUndefined
from pydantic import ValidationError

from errors import InvalidArgumentError
from models import AttackTrace, RobustnessReport, ResultRow, TransformSet

logger = Logger(service="robust-uap")

RESULTS_HEADER = [
    "attack",
    "transform_set",
    "gamma",
    "asr_r",
    "avg_asr_u",
    "asr_u_clean",
    "norm_violations",
    "runtime_seconds",
]
CLAMPED_COLUMN = "asr_u_clean_clamped"
RUNTIME_HEADER = ["attack", "transform_set", "epochs", "inner_loops", "final_norm", "runtime_seconds"]
TRACE_HEADER = [
    "record",
    "epoch",
    "batch",
    "metric",
    "entry_estimate",
    "estimate",
    "iterations",
    "cap_hit",
    "seconds",
]

template_dir = os.path.join(os.path.dirname(__file__), "templates")
jinja_env = Environment(
    loader=FileSystemLoader(template_dir),
    trim_blocks=True,
    lstrip_blocks=True,
    undefined=StrictUndefined,
)


def _decimal(value: float) -> str:
    return f"{value:.4f}"


def result_rows(
    attack: str,
    tset: TransformSet,
    report: RobustnessReport,
    runtime_seconds: float,
) -> List[ResultRow]:
    """One row per gamma of ``report``, in ascending gamma order."""
    return [
        ResultRow(
            attack=attack,
            transform_set=tset.notation(),
            gamma=gamma,
            asr_r=asr_r,
            avg_asr_u=report.avg_asr_u,
            asr_u_clean=report.asr_u_clean,
            norm_violations=report.norm_violations,
            runtime_seconds=runtime_seconds,
            asr_u_clean_clamped=report.asr_u_clean_clamped,
        )
        for gamma, asr_r in sorted(report.asr_r_by_gamma.items())
    ]


def format_results_csv(rows: Sequence[ResultRow]) -> str:
    """
    Serialize result rows with a fixed header and 4 fractional digits.

    The clamped column is appended only when every row carries a clamped rate.

    Args:
        rows: Result rows in output order

    Returns:
        CSV text with ``\\n`` line endings
    """
    clamped = bool(rows) and all(row.asr_u_clean_clamped is not None for row in rows)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RESULTS_HEADER + ([CLAMPED_COLUMN] if clamped else []))
    for row in rows:
        record = [
            row.attack,
            row.transform_set,
            _decimal(row.gamma),
            _decimal(row.asr_r),
            _decimal(row.avg_asr_u),
            _decimal(row.asr_u_clean),
            str(row.norm_violations),
            _decimal(row.runtime_seconds),
        ]
        if clamped:
            record.append(_decimal(row.asr_u_clean_clamped))
        writer.writerow(record)
    return buffer.getvalue()


def parse_results_csv(content: str) -> List[ResultRow]:
    """
    Read results.csv back, rejecting any header other than the fixed one.

    Args:
        content: CSV text

    Returns:
        List of validated ResultRow models
    """
    reader = csv.reader(io.StringIO(content))
    header = next(reader, None)
    if header not in (RESULTS_HEADER, RESULTS_HEADER + [CLAMPED_COLUMN]):
        raise InvalidArgumentError(f"results.csv header mismatch: {header}")

    rows = []
    for line_number, record in enumerate(reader, start=2):
        if len(record) != len(header):
            raise InvalidArgumentError(
                f"results.csv line {line_number}: expected {len(header)} fields, got {len(record)}"
            )
        try:
            rows.append(ResultRow(**dict(zip(header, record))))
        except ValidationError as e:
            raise InvalidArgumentError(f"results.csv line {line_number}: {e.errors()[0]['msg']}")
    return rows


def render_results_markdown(rows: Sequence[ResultRow]) -> str:
    """Grid of ASR_R with transformation sets as rows and attacks as columns, one per gamma."""
    attacks = list(dict.fromkeys(row.attack for row in rows))
    transform_sets = list(dict.fromkeys(row.transform_set for row in rows))
    gammas = sorted({row.gamma for row in rows})
    cells: Dict[tuple, str] = {
        (row.transform_set, row.attack, row.gamma): _decimal(row.asr_r) for row in rows
    }

    tables = [
        {
            "gamma": _decimal(gamma),
            "rows": [
                {
                    "transform_set": tset,
                    "cells": [cells.get((tset, attack, gamma), "-") for attack in attacks],
                }
                for tset in transform_sets
            ],
        }
        for gamma in gammas
    ]

    details = []
    seen = set()
    for row in rows:
        if (row.attack, row.transform_set) in seen:
            continue
        seen.add((row.attack, row.transform_set))
        details.append(
            {
                "attack": row.attack,
                "transform_set": row.transform_set,
                "avg_asr_u": _decimal(row.avg_asr_u),
                "asr_u_clean": _decimal(row.asr_u_clean),
                "clamped": "-" if row.asr_u_clean_clamped is None else _decimal(row.asr_u_clean_clamped),
                "norm_violations": row.norm_violations,
                "runtime": _decimal(row.runtime_seconds),
            }
        )

    template = jinja_env.get_template("results.md.j2")
    return template.render(
        attacks=attacks,
        tables=tables,
        details=details,
        clamped=any(row.asr_u_clean_clamped is not None for row in rows),
    )


def render_report_text(attack: str, tset: TransformSet, report: RobustnessReport) -> str:
    template = jinja_env.get_template("report.txt.j2")
    return template.render(attack=attack, transform_set=tset.notation(), report=report)


def format_runtime_csv(entries: Iterable[Tuple[str, AttackTrace, float]]) -> str:
    """One line per (transform set notation, trace, runtime seconds) entry."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RUNTIME_HEADER)
    for notation, trace, runtime in entries:
        writer.writerow(
            [
                trace.algorithm,
                notation,
                len(trace.epochs),
                len(trace.inner_loops),
                _decimal(trace.final_norm),
                _decimal(runtime),
            ]
        )
    return buffer.getvalue()


def format_trace_csv(trace: AttackTrace, record_timing: bool = True) -> str:
    """Epoch records followed by inner-loop records (robust-uap only)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for epoch in trace.epochs:
        writer.writerow(
            [
                "epoch",
                epoch.epoch,
                epoch.batches,
                epoch.metric,
                "",
                _decimal(epoch.estimate),
                "",
                "",
                _decimal(epoch.seconds if record_timing else 0.0),
            ]
        )
    for loop in trace.inner_loops:
        writer.writerow(
            [
                "inner",
                loop.epoch,
                loop.batch,
                "robustness",
                _decimal(loop.entry_estimate),
                _decimal(loop.exit_estimate),
                loop.iterations,
                str(loop.cap_hit).lower(),
                "",
            ]
        )
    return buffer.getvalue()
