import gzip
import struct

import numpy as np
import pytest

from structdrop.data import DataError, cubic, load_dataset, read_csv, read_idx, two_cluster


def write_idx(path, arr, type_code=0x08, compress=False):
    arr = np.asarray(arr)
    header = bytes([0, 0, type_code, arr.ndim]) + b"".join(struct.pack(">I", d) for d in arr.shape)
    blob = header + arr.astype(np.uint8 if type_code == 0x08 else ">f8").tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(blob)


def test_cubic_generator():
    X, y = cubic(20, seed=0)
    assert X.shape == (20, 1) and y.shape == (20,)
    assert X.min() >= -4 and X.max() <= 4
    X2, y2 = cubic(20, seed=0)
    np.testing.assert_array_equal(y, y2)
    # noise sd 3 around x^3
    assert 1.0 < np.std(y - X[:, 0] ** 3) < 5.0


def test_two_cluster_leaves_a_gap():
    X, _ = two_cluster(40, seed=1)
    assert np.sum(np.abs(X) < 1.5) == 0
    assert np.sum(X < 0) == 20


def test_csv_parsing_and_label_column(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("a,b,target\n1,2,3\n4,5,6\n")
    X, y, header = read_csv(f)
    np.testing.assert_array_equal(X, [[1, 2], [4, 5]])
    np.testing.assert_array_equal(y, [3, 6])
    X, y, _ = read_csv(f, label_column="a")
    np.testing.assert_array_equal(y, [1, 4])
    assert header == ["a", "b", "target"]


@pytest.mark.parametrize("text,match", [
    ("a,b\n1,2,3\n", "expected 2 fields"),
    ("a,b\n1,x\n", "non-numeric"),
    ("a,b\n", "at least one row"),
])
def test_csv_errors(tmp_path, text, match):
    f = tmp_path / "bad.csv"
    f.write_text(text)
    with pytest.raises(DataError, match=match):
        read_csv(f)


def test_csv_missing_file(tmp_path):
    with pytest.raises(DataError):
        read_csv(tmp_path / "none.csv")


def test_idx_round_trip(tmp_path):
    arr = np.arange(24).reshape(2, 3, 4)
    write_idx(tmp_path / "a.idx", arr)
    write_idx(tmp_path / "a.idx.gz", arr, compress=True)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx.gz"), arr)
    write_idx(tmp_path / "f.idx", np.array([1.5, -2.0]), type_code=0x0E)
    np.testing.assert_array_equal(read_idx(tmp_path / "f.idx"), [1.5, -2.0])


def test_idx_errors_name_byte_offset(tmp_path):
    bad_magic = tmp_path / "m.idx"
    bad_magic.write_bytes(bytes([1, 0, 8, 1, 0, 0, 0, 1, 7]))
    with pytest.raises(DataError, match="byte 0"):
        read_idx(bad_magic)
    bad_type = tmp_path / "t.idx"
    bad_type.write_bytes(bytes([0, 0, 0x42, 1, 0, 0, 0, 1, 7]))
    with pytest.raises(DataError, match="byte 2"):
        read_idx(bad_type)
    short = tmp_path / "s.idx"
    short.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 3, 7]))
    with pytest.raises(DataError, match="byte 8"):
        read_idx(short)


def test_normalization_uses_training_split_only(tmp_path):
    f = tmp_path / "d.csv"
    rows = ["x1,x2,y"] + [f"{i},{2 * i + 1},{i % 2}" for i in range(20)]
    f.write_text("\n".join(rows) + "\n")
    h = load_dataset({"source": "csv-classification", "path": str(f), "test_fraction": 0.25, "split_seed": 3})
    assert h.task == "classification" and h.n_classes == 2
    np.testing.assert_allclose(h.X_train.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(h.X_train.std(axis=0), 1.0, atol=1e-12)
    assert len(h.X_train) == 15 and len(h.X_test) == 5
    raw_test = (h.X_test * h.x_std) + h.x_mean
    assert set(raw_test[:, 0]).issubset(set(range(20)))


def test_idx_dataset(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(6, 4, 4))
    write_idx(tmp_path / "img", imgs)
    write_idx(tmp_path / "lab", np.array([0, 1, 2, 0, 1, 2]))
    h = load_dataset({"source": "idx-images", "root": str(tmp_path), "images": "img", "labels": "lab",
                      "normalize": False})
    assert h.X_train.shape == (6, 16) and h.X_train.max() <= 1.0 and h.n_classes == 3
    write_idx(tmp_path / "lab5", np.array([0, 1, 2, 0, 1]))
    with pytest.raises(DataError, match="mismatch"):
        load_dataset({"source": "idx-images", "root": str(tmp_path), "images": "img", "labels": "lab5"})


def test_descriptor_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset({"source": "imagenet"})
    with pytest.raises(DataError):
        load_dataset({"source": "csv-regression"})
    f = tmp_path / "neg.csv"
    f.write_text("x,y\n1,-1\n2,0\n")
    with pytest.raises(DataError):
        load_dataset({"source": "csv-classification", "path": str(f)})


def test_synthetic_sources():
    h = load_dataset({"source": "synthetic-cubic", "n": 20, "seed": 0})
    assert h.X_train.shape == (20, 1) and h.x_mean is None
    m = load_dataset({"source": "synthetic-moons", "n": 100, "n_test": 50, "seed": 0})
    assert m.X_train.shape == (100, 2) and m.X_test.shape == (50, 2) and m.n_classes == 2
