"""CSV and manifest writers. Every real is written with 17 significant digits."""
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any

import pandas as pd

from .datasets import FLOAT_FORMAT
from .errors import StorageError

logger = logging.getLogger("Reporting")


def write_frame(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    logger.info(f"💾 Wrote {len(frame)} rows to {path}")
    return path


def records_frame(records, columns: list[str] | None = None) -> pd.DataFrame:
    """Frame from a list of flat dataclass records."""
    return pd.DataFrame([asdict(r) for r in records], columns=columns)


# ----------------------------------------------------
# MANIFEST
# ----------------------------------------------------

def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"'
    return str(value)


def flatten(tree: dict, prefix: str = "") -> list[tuple[str, Any]]:
    """Dotted `key = value` pairs; a None section is kept as a single `key = none`."""
    items = []
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(flatten(value, f"{dotted}."))
        else:
            items.append((dotted, value))
    return items


def manifest_text(resolved: dict, header: dict[str, Any]) -> str:
    lines = [f"# {key}: {value}" for key, value in header.items()]
    lines += [f"{key} = {_format_value(value)}" for key, value in flatten(resolved)]
    return "\n".join(lines) + "\n"


def write_manifest(resolved: dict, header: dict[str, Any], path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest_text(resolved, header), encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    logger.info(f"💾 Wrote manifest to {path}")
    return path
