import logging
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt, model_validator
from sklearn.datasets import make_blobs, make_moons
from sklearn.preprocessing import StandardScaler

from .errors import DataError, StorageError
from .model import Fragment, Provenance
from .numkernel import Rng

logger = logging.getLogger("Datasets")

FLOAT_FORMAT = "%.17g"


# ----------------------------------------------------
# DATASET SPEC
# ----------------------------------------------------

class DatasetSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["synthetic_blobs", "two_moons", "csv"] = "synthetic_blobs"
    n_samples: PositiveInt = 600
    n_features: PositiveInt = 2
    centers: int = Field(2, ge=2)
    cluster_std: PositiveFloat = 1.0
    noise: NonNegativeFloat = 0.1
    path: Optional[str] = None
    label_column: str = "label"
    val_fraction: float = Field(0.2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.kind == "csv" and not self.path:
            raise ValueError("dataset.kind = csv needs dataset.path")
        return self


def _sklearn_seed(seed: int, tag: str) -> int:
    return int(Rng.derive(seed, tag).integers(0, 2**31 - 1))


def synthetic_blobs(
    n_samples: int,
    n_features: int = 2,
    centers: int | Sequence[Sequence[float]] = 2,
    cluster_std: float = 1.0,
    seed: int = 0,
) -> Fragment:
    """Gaussian blobs; `centers` is a count (random centers) or explicit coordinates."""
    x, y = make_blobs(
        n_samples=n_samples,
        n_features=n_features,
        centers=centers,
        cluster_std=cluster_std,
        random_state=_sklearn_seed(seed, "blobs"),
    )
    return Fragment("blobs", x, y)


def two_moons(n_samples: int, noise: float = 0.1, seed: int = 0) -> Fragment:
    x, y = make_moons(n_samples=n_samples, noise=noise, random_state=_sklearn_seed(seed, "moons"))
    return Fragment("moons", x, y)


# ----------------------------------------------------
# SPLITS + SCALING
# ----------------------------------------------------

def holdout_split(frag: Fragment, val_fraction: float, rng: Rng) -> tuple[Fragment, Fragment]:
    """Shuffle once and hold out `val_fraction` of the examples for validation."""
    n_val = int(round(val_fraction * frag.n))
    if n_val < 1 or n_val >= frag.n:
        raise DataError(f"val_fraction={val_fraction} leaves an empty split of {frag.n} examples")
    order = rng.permutation(frag.n)
    val = frag.subset(np.sort(order[:n_val]), f"{frag.id}/val", Provenance("validation"))
    train = frag.subset(np.sort(order[n_val:]), f"{frag.id}/train", Provenance("dataset"))
    return train, val


def standardize(train: Fragment, *others: Fragment) -> list[Fragment]:
    """Zero-mean, unit-variance features using statistics of `train` only."""
    scaler = StandardScaler().fit(train.features)
    return [f.with_features(scaler.transform(f.features)) for f in (train, *others)]


# ----------------------------------------------------
# CSV
# ----------------------------------------------------

def _read_table(path: str | Path, label_column: str) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={label_column: str}, keep_default_na=True)
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: malformed CSV ({e})") from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path}: file is empty") from e
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e

    if label_column not in df.columns:
        raise DataError(f"{path}: no label column {label_column!r}")
    if df.empty:
        raise DataError(f"{path}: no data rows")
    if df[label_column].isna().any():
        raise DataError(f"{path}: missing label in row {int(df[label_column].isna().idxmax()) + 1}")

    features = df.drop(columns=[label_column])
    for col in features.columns:
        if not pd.api.types.is_numeric_dtype(features[col]):
            raise DataError(f"{path}: non-numeric value in feature column {col!r}")
    if features.isna().any().any():
        raise DataError(f"{path}: missing feature value (ragged or empty cell)")
    return df


def read_csv_dataset(path: str | Path, label_column: str, class_order: list[str] | None = None) -> tuple[Fragment, list[str]]:
    """Raw features plus class names; ids follow first appearance after `class_order`."""
    df = _read_table(path, label_column)
    names = list(class_order or [])
    for value in df[label_column]:
        if value not in names:
            names.append(value)
    codes = df[label_column].map({name: i for i, name in enumerate(names)}).to_numpy()
    features = df.drop(columns=[label_column]).to_numpy(dtype=np.float64)
    logger.info(f"✅ Loaded {len(df)} rows, {features.shape[1]} features, {len(names)} classes from {path}")
    return Fragment(Path(path).stem, features, codes), names


def load_csv_dataset(path: str | Path, label_column: str, standardize_features: bool = True) -> Fragment:
    frag, _ = read_csv_dataset(path, label_column)
    if standardize_features:
        (frag,) = standardize(frag)
    return frag


def load_csv_pair(train_path, val_path, label_column: str) -> tuple[Fragment, Fragment]:
    """Train and validation files sharing one label mapping and the train scaling."""
    train, names = read_csv_dataset(train_path, label_column)
    val, _ = read_csv_dataset(val_path, label_column, class_order=names)
    if val.input_dim != train.input_dim:
        raise DataError(f"{val_path} has {val.input_dim} features, {train_path} has {train.input_dim}")
    train, val = standardize(train, val)
    return train, val


def write_csv_dataset(frag: Fragment, path: str | Path, label_column: str = "label") -> Path:
    path = Path(path)
    df = pd.DataFrame(frag.features, columns=[f"x{i}" for i in range(frag.input_dim)])
    df[label_column] = frag.labels
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


# ----------------------------------------------------
# BUILD
# ----------------------------------------------------

def build_dataset(ds: DatasetSpec, seed: int) -> tuple[Fragment, Fragment]:
    """(train, validation) for an experiment."""
    if ds.kind == "synthetic_blobs":
        full = synthetic_blobs(ds.n_samples, ds.n_features, ds.centers, ds.cluster_std, seed)
    elif ds.kind == "two_moons":
        full = two_moons(ds.n_samples, ds.noise, seed)
    else:
        full, _ = read_csv_dataset(ds.path, ds.label_column)

    train, val = holdout_split(full, ds.val_fraction, Rng.derive(seed, "holdout"))
    if ds.kind == "csv":
        train, val = standardize(train, val)
    return train, val
