import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from fireshift.core.datasets import (
    DatasetSpec,
    build_dataset,
    holdout_split,
    load_csv_dataset,
    load_csv_pair,
    read_csv_dataset,
    synthetic_blobs,
    two_moons,
    write_csv_dataset,
)
from fireshift.core.errors import DataError, StorageError
from fireshift.core.reporting import write_frame


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ----------------------------------------------------
# GENERATORS + SPLITS
# ----------------------------------------------------

def test_generators_are_seeded():
    assert_array_equal(synthetic_blobs(50, seed=3).features, synthetic_blobs(50, seed=3).features)
    assert not np.array_equal(two_moons(50, seed=3).features, two_moons(50, seed=4).features)


def test_holdout_split_sizes(rng):
    train, val = holdout_split(synthetic_blobs(100, seed=0), 0.2, rng)
    assert (train.n, val.n) == (80, 20)
    assert val.provenance.kind == "validation"


def test_holdout_split_needs_both_sides(rng):
    with pytest.raises(DataError):
        holdout_split(synthetic_blobs(3, seed=0), 0.1, rng)


def test_build_dataset_deterministic():
    spec = DatasetSpec(kind="two_moons", n_samples=200)
    a_train, a_val = build_dataset(spec, 5)
    b_train, b_val = build_dataset(spec, 5)
    assert_array_equal(a_train.features, b_train.features)
    assert_array_equal(a_val.labels, b_val.labels)


# ----------------------------------------------------
# CSV
# ----------------------------------------------------

def test_labels_coded_by_first_appearance(tmp_path):
    path = _write(tmp_path, "x0,x1,label\n1.0,2.0,B\n3.0,4.0,A\n5.0,6.0,B\n")
    frag, names = read_csv_dataset(path, "label")
    assert_array_equal(frag.labels, [0, 1, 0])
    assert names == ["B", "A"]


def test_features_are_standardized(tmp_path):
    path = _write(tmp_path, "x0,x1,label\n1.0,10.0,a\n2.0,30.0,b\n3.0,20.0,a\n6.0,0.0,b\n")
    frag = load_csv_dataset(path, "label")
    assert_allclose(frag.features.mean(axis=0), 0.0, atol=1e-12)
    assert_allclose(frag.features.std(axis=0), 1.0, rtol=1e-12)


def test_write_then_read_keeps_values(tmp_path, rng, make_fragment):
    frag = make_fragment(rng, 25, 3, 2)
    path = write_csv_dataset(frag, tmp_path / "out.csv")
    back, names = read_csv_dataset(path, "label")
    assert np.max(np.abs(back.features - frag.features)) <= 1e-15
    assert_array_equal(np.array(names)[back.labels], frag.labels.astype(str))


def test_pair_shares_label_mapping(tmp_path):
    train = _write(tmp_path, "x0,label\n1.0,cat\n2.0,dog\n3.0,cat\n", "train.csv")
    val = _write(tmp_path, "x0,label\n5.0,dog\n0.0,cat\n", "val.csv")
    train_frag, val_frag = load_csv_pair(train, val, "label")
    assert_array_equal(val_frag.labels, [1, 0])
    assert val_frag.features[0, 0] > train_frag.features.max()


@pytest.mark.parametrize(
    "text",
    [
        "x0,label\n1.0,a\nfoo,b\n",
        "x0,label\n1.0,a\n2.0,\n",
        "x0,x1,label\n1,2,a\n3,4,5,b\n",
        "x0,x1,label\n1,2,a\n3,,b\n",
        "x0,x1\n1,2\n",
        "",
    ],
)
def test_malformed_csv(tmp_path, text):
    with pytest.raises(DataError):
        read_csv_dataset(_write(tmp_path, text), "label")


def test_missing_csv_file(tmp_path):
    with pytest.raises(StorageError):
        read_csv_dataset(tmp_path / "missing.csv", "label")


def test_frames_use_seventeen_digits(tmp_path):
    path = write_frame(pd.DataFrame({"v": [0.1, 1.0 / 3.0]}), tmp_path / "f.csv")
    lines = path.read_text().splitlines()
    assert lines == ["v", "0.10000000000000001", "0.33333333333333331"]
