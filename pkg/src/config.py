"""Experiment configuration files.

Flat UTF-8 ``key = value`` lines with ``#`` comments. Transformation sets are
written in table notation, e.g. ``R(10), T(2,2), Sh(2), Sc(2), B(2, 0.001)``;
several sets are separated by ``;``.
"""

import re
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Tuple, Union

from aws_lambda_powertools import Logger
from pydantic import ValidationError

from errors import ConfigError
from models import (
    AttackConfig,
    AttackName,
    EstimatorConfig,
    ExperimentConfig,
    NormOrder,
    NormSpec,
    TrainConfig,
    TransformSet,
)

logger = Logger(service="robust-uap")

TOY_EPSILON = 1.0
CIFAR_EPSILON = 10.0

_TOKEN = re.compile(r"\s*(?:(?P<number>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z]+)|(?P<punct>[(),]))")


class _Token(NamedTuple):
    kind: str
    text: str
    column: int


# family -> (arity, TransformSet fields)
_FAMILIES: Dict[str, Tuple[str, ...]] = {
    "R": ("rotation_deg",),
    "T": ("translate_x", "translate_y"),
    "Sh": ("shear_pct",),
    "Sc": ("scale_pct",),
    "B": ("contrast_pct", "brightness_abs"),
}


def _tokenize(text: str) -> List[_Token]:
    tokens = []
    position = 0
    stripped_end = len(text.rstrip())
    while position < stripped_end:
        match = _TOKEN.match(text, position)
        if not match:
            raise ValueError(f"unexpected character {text[position:].strip()[0]!r} at column {position + 1}")
        kind = match.lastgroup or "punct"
        tokens.append(_Token(kind, match.group(kind), match.start(kind) + 1))
        position = match.end()
    return tokens


class _TransformParser:
    """set := "none" | family ("," family)* ;  family := NAME "(" number ("," number)* ")" """

    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.index = 0

    def _peek(self) -> Union[_Token, None]:
        return self.tokens[self.index] if self.index < len(self.tokens) else None

    def _expect(self, kind: str, text: Union[str, None] = None) -> _Token:
        token = self._peek()
        if token is None:
            raise ValueError(f"expected {text or kind} but the transform set ended")
        if token.kind != kind or (text is not None and token.text != text):
            raise ValueError(f"expected {text or kind} at column {token.column}, got {token.text!r}")
        self.index += 1
        return token

    def parse(self) -> TransformSet:
        if not self.tokens:
            raise ValueError("empty transform set")
        first = self.tokens[0]
        if first.kind == "name" and first.text.lower() == "none" and len(self.tokens) == 1:
            return TransformSet()

        values: Dict[str, float] = {}
        seen = set()
        while True:
            name, args = self._family()
            if name in seen:
                raise ValueError(f"duplicate transformation family {name}")
            seen.add(name)
            values.update(zip(_FAMILIES[name], args))
            if self._peek() is None:
                break
            self._expect("punct", ",")
        return TransformSet(**values)

    def _family(self) -> Tuple[str, List[float]]:
        token = self._expect("name")
        if token.text not in _FAMILIES:
            raise ValueError(f"unknown transformation family {token.text!r} at column {token.column}")
        self._expect("punct", "(")
        args = [float(self._expect("number").text)]
        while self._peek() is not None and self._peek().text == ",":
            self.index += 1
            args.append(float(self._expect("number").text))
        self._expect("punct", ")")
        arity = len(_FAMILIES[token.text])
        if len(args) != arity:
            raise ValueError(f"{token.text} takes {arity} argument(s), got {len(args)}")
        return token.text, args


def parse_transform_set(text: str) -> TransformSet:
    """Parse table notation such as ``R(10), T(2,2), B(2, 0.001)``; ``none`` is the identity."""
    try:
        return _TransformParser(text).parse()
    except ValidationError as e:
        raise ValueError(f"invalid transform range: {e.errors()[0]['msg']}")


def parse_transform_sets(text: str) -> List[TransformSet]:
    """Parse one or more ``;``-separated transformation sets."""
    parts = [part.strip() for part in text.split(";")]
    if not all(parts):
        raise ValueError("empty transform set in list")
    return [parse_transform_set(part) for part in parts]


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _parse_list(parse: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse_items(text: str) -> List[Any]:
        items = [item.strip() for item in text.split(",")]
        if not all(items):
            raise ValueError("empty list item")
        return [parse(item) for item in items]

    return parse_items


# key -> (section, field, value parser)
_KEYS: Dict[str, Tuple[str, str, Callable[[str], Any]]] = {
    "dataset": ("experiment", "dataset", str),
    "eval_dataset": ("experiment", "eval_dataset", str),
    "train_n": ("experiment", "train_n", int),
    "eval_n": ("experiment", "eval_n", int),
    "model": ("experiment", "model", str),
    "train_model": ("experiment", "train_model", _parse_bool),
    "transforms": ("experiment", "transform_sets", parse_transform_sets),
    "attacks": ("experiment", "attacks", _parse_list(AttackName)),
    "gammas": ("experiment", "gammas", _parse_list(float)),
    "output_dir": ("experiment", "output_dir", str),
    "seed": ("experiment", "seed", int),
    "record_timing": ("experiment", "record_timing", _parse_bool),
    "report_clamped": ("experiment", "report_clamped", _parse_bool),
    "train_epochs": ("train", "epochs", int),
    "train_learning_rate": ("train", "learning_rate", float),
    "train_momentum": ("train", "momentum", float),
    "train_batch_size": ("train", "batch_size", int),
    "norm": ("norm", "order", NormOrder),
    "epsilon": ("norm", "epsilon", float),
    "gamma": ("attack", "gamma", float),
    "zeta": ("attack", "zeta", float),
    "step_size": ("attack", "step_size", float),
    "momentum": ("attack", "momentum", float),
    "learning_rate": ("attack", "learning_rate", float),
    "batch_size": ("attack", "batch_size", int),
    "max_inner_iters": ("attack", "max_inner_iters", int),
    "max_epochs": ("attack", "max_epochs", int),
    "lambda_penalty": ("attack", "lambda_penalty", float),
    "transforms_per_step": ("attack", "transforms_per_step", int),
    "psi": ("estimator", "psi", float),
    "phi": ("estimator", "phi", float),
}


def _split_line(raw: str) -> Union[Tuple[str, str], None]:
    line = raw.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ValueError("expected 'key = value'")
    key, value = (part.strip() for part in line.split("=", 1))
    if not key:
        raise ValueError("missing key")
    if not value:
        raise ValueError(f"missing value for {key}")
    return key, value


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse config text into an ``ExperimentConfig``.

    Every error names ``source:line``. The seed also seeds training, the attacks
    and the estimator; epsilon defaults to 1 on the toy dataset and 10 otherwise.
    """
    sections: Dict[str, Dict[str, Any]] = {
        "experiment": {},
        "train": {},
        "norm": {},
        "attack": {},
        "estimator": {},
    }
    lines: Dict[str, int] = {}

    for number, raw in enumerate(text.splitlines(), start=1):
        try:
            parsed = _split_line(raw)
            if parsed is None:
                continue
            key, value = parsed
            if key not in _KEYS:
                raise ValueError(f"unknown key {key!r}")
            if key in lines:
                raise ValueError(f"duplicate key {key!r} (first set on line {lines[key]})")
            section, field, parse = _KEYS[key]
            sections[section][field] = parse(value)
            lines[key] = number
        except ValueError as e:
            error_msg = f"{source}:{number}: {e}"
            logger.error(error_msg)
            raise ConfigError(error_msg)

    experiment = sections["experiment"]
    seed = experiment.get("seed", 0)
    dataset = experiment.get("dataset", "toy")
    sections["norm"].setdefault("epsilon", TOY_EPSILON if dataset == "toy" else CIFAR_EPSILON)

    try:
        attack = AttackConfig(
            norm=NormSpec(**sections["norm"]),
            seed=seed,
            estimator=EstimatorConfig(seed=seed, **sections["estimator"]),
            **sections["attack"],
        )
        return ExperimentConfig(
            train=TrainConfig(seed=seed, **sections["train"]),
            attack=attack,
            **experiment,
        )
    except ValidationError as e:
        first = e.errors()[0]
        field = str(first["loc"][-1]) if first["loc"] else ""
        key = next((k for k, spec in _KEYS.items() if spec[1] == field and k in lines), None)
        where = f"{source}:{lines[key]}" if key else source
        error_msg = f"{where}: {field or 'config'}: {first['msg']}"
        logger.error(error_msg)
        raise ConfigError(error_msg)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        error_msg = f"Failed to read config {path}: {e}"
        logger.error(error_msg)
        raise ConfigError(error_msg)
    cfg = parse_config(text, source=str(path))
    logger.info(f"Loaded experiment config from {path}", extra={"attacks": [a.value for a in cfg.attacks]})
    return cfg
