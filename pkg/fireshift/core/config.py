"""Experiment configuration: `key = value` lines, `#` comments, dotted keys.

    mode = batch
    seed = 7
    dataset.kind = two_moons
    train.lambda = 0.1
    train.fisher.variant_kind = lowrank
    fed.fim_exchange_period = 5

Lists are written `[a, b]` or `a, b`. Quoted values are always strings.
`seed` is inherited by `train.seed`, `fed.seed` and `theory.convergence.seed`
unless they are set.
"""
import logging
import re
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, PositiveInt, ValidationError, model_validator

from .batchfire import ConvergenceConfig, TrainConfig
from .datasets import DatasetSpec
from .errors import ConfigError, StorageError
from .fedsim import FedConfig
from .model import ModelSpec
from .shiftlab import ShiftSpec

logger = logging.getLogger("Config")

Mode = Literal["batch", "folds", "federated", "diagnostics", "verify_theory"]

_KEY_RE = re.compile(r"^[A-Za-z_]\w*(\.[A-Za-z_]\w*)*$")
_INT_RE = re.compile(r"^[+-]?\d+$")


# ----------------------------------------------------
# MODELS
# ----------------------------------------------------

class TheorySpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    trials: PositiveInt = 10_000
    workers: Optional[PositiveInt] = None
    # none skips the convergence trend
    convergence: Optional[ConvergenceConfig] = ConvergenceConfig()


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Mode
    seed: int = 0
    output_dir: str = "runs/latest"
    # a list runs every count and adds a comparison in summary.csv (batch and folds only)
    num_fragments: Union[PositiveInt, tuple[PositiveInt, ...]] = 10
    dataset: DatasetSpec = DatasetSpec()
    shift: Optional[ShiftSpec] = None
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    fed: Optional[FedConfig] = None
    theory: TheorySpec = TheorySpec()

    @model_validator(mode="after")
    def _fed_iff_federated(self):
        if (self.fed is not None) != (self.mode == "federated"):
            raise ValueError("the fed section is required for mode=federated and only allowed there")
        return self

    @model_validator(mode="after")
    def _fragment_counts(self):
        if isinstance(self.num_fragments, tuple):
            if not self.num_fragments:
                raise ValueError("num_fragments must not be an empty list")
            if self.mode not in ("batch", "folds"):
                raise ValueError("a list of num_fragments is only allowed for mode=batch or folds")
        return self

    @property
    def fragment_counts(self) -> tuple[int, ...]:
        if isinstance(self.num_fragments, tuple):
            return self.num_fragments
        return (self.num_fragments,)

    def resolved(self) -> dict:
        """Every field, defaults included, in config-file spelling."""
        return self.model_dump(mode="json", by_alias=True)


# ----------------------------------------------------
# PARSING
# ----------------------------------------------------

def _parse_scalar(text: str) -> Any:
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    if _INT_RE.match(t):
        return int(t)
    try:
        return float(t)
    except ValueError:
        return t


def _parse_value(text: str, lineno: int) -> Any:
    t = text.strip()
    if not t:
        raise ConfigError(f"line {lineno}: empty value")
    if t.startswith("["):
        if not t.endswith("]"):
            raise ConfigError(f"line {lineno}: unterminated list {t!r}")
        inner = t[1:-1].strip()
        return [_parse_scalar(p) for p in inner.split(",")] if inner else []
    if "," in t and t[0] not in "\"'":
        return [_parse_scalar(p) for p in t.split(",")]
    return _parse_scalar(t)


def _insert(tree: dict, key: str, value: Any, lineno: int) -> None:
    *parents, leaf = key.split(".")
    node = tree
    for part in parents:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"line {lineno}: {key!r} conflicts with an earlier scalar value")
        node = child
    if leaf in node:
        raise ConfigError(f"line {lineno}: duplicate key {key!r}")
    node[leaf] = value


def _parse_lines(text: str) -> dict:
    tree: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not _KEY_RE.match(key):
            raise ConfigError(f"line {lineno}: invalid key {key!r}")
        _insert(tree, key, _parse_value(value, lineno), lineno)
    return tree


def parse_config(text: str) -> ExperimentConfig:
    tree = _parse_lines(text)
    if "mode" not in tree:
        raise ConfigError("mode is mandatory")

    seed = tree.get("seed", 0)
    if tree["mode"] == "federated":
        tree.setdefault("fed", {})
    tree.setdefault("train", {})
    for section in ("train", "fed"):
        if isinstance(tree.get(section), dict):
            tree[section].setdefault("seed", seed)
    theory = tree.setdefault("theory", {})
    if isinstance(theory, dict) and theory.get("convergence", {}) is not None:
        convergence = theory.setdefault("convergence", {})
        if isinstance(convergence, dict):
            convergence.setdefault("seed", seed)

    try:
        config = ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"invalid config:\n{e}") from e
    logger.info(f"✅ Parsed config: mode={config.mode}, seed={config.seed}")
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read config {path}: {e}") from e
    return parse_config(text)
