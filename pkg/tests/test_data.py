import struct

import numpy as np
import pytest

from mlnt.data import (
    METRICS_COLUMNS, BenchmarkSpec, Checkpoint, Dataset, MetricsRow, append_metrics, checkpoint_bytes,
    load_checkpoint, load_dataset, make_synthetic_benchmark, read_metrics, read_noisy_labels,
    save_checkpoint, save_dataset, write_noisy_labels,
)
from mlnt.exceptions import DimensionError, FormatError, InputError
from mlnt.nn import MlpSpec, ParamSet
from mlnt.random_streams import RandomStreams
from mlnt.training import MlntHyper, accuracy, train_iteration


def write(path, text):
    path.write_text(text)
    return path


def test_load_small_csv(tmp_path):
    p = write(tmp_path / "d.csv", "id,label,f0,f1\n0,1,0.5,1.5\n1,0,2.0,3.0\n7,1,-1.0,0.0\n")
    ds = load_dataset(p, n_classes=2)
    assert len(ds) == 3 and ds.n_features == 2 and ds.n_classes == 2
    assert ds.ids.tolist() == [0, 1, 7]
    np.testing.assert_array_equal(ds.labels, [1, 0, 1])


def test_label_out_of_range(tmp_path):
    p = write(tmp_path / "d.csv", "id,label,f0\n0,2,0.5\n")
    with pytest.raises(InputError, match="label 2"):
        load_dataset(p, n_classes=2)


def test_duplicate_ids_and_bad_rows(tmp_path):
    with pytest.raises(InputError):
        load_dataset(write(tmp_path / "a.csv", "id,label,f0\n3,0,0.5\n3,1,0.1\n"))
    with pytest.raises(FormatError):
        load_dataset(write(tmp_path / "b.csv", "id,label,f0\n3,0\n"))
    with pytest.raises(FormatError):
        load_dataset(write(tmp_path / "c.csv", "id,lbl,f0\n3,0,1\n"))
    with pytest.raises(FormatError):
        load_dataset(write(tmp_path / "d.csv", "id,label,f0\n3,0,abc\n"))


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(50, 4)) * 10.0 ** rng.integers(-8, 8, size=(50, 4)),
                 rng.integers(0, 3, 50), 3, ids=[f"s{i}" for i in range(50)])
    save_dataset(ds, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv", n_classes=3)
    assert back.features.tobytes() == ds.features.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.ids.tolist() == ds.ids.tolist()


def test_dataset_invariants():
    with pytest.raises(DimensionError):
        Dataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 2)), [0, 1], 2, ids=[4, 4])
    with pytest.raises(InputError):
        Dataset(np.full((1, 1), np.nan), [0], 2)
    ds = Dataset(np.zeros((3, 1)), [0, 1, 1], 2)
    assert len(ds.subset([])) == 0
    noisy = ds.with_labels([1, 1, 0])
    np.testing.assert_array_equal(noisy.clean_labels, [0, 1, 1])


def test_noisy_label_file_round_trip(tmp_path):
    write_noisy_labels(tmp_path / "n.csv", [5, 6], [0, 1], [1, 1])
    assert (tmp_path / "n.csv").read_text().splitlines()[0] == "sample_id,original_label,noisy_label"
    ids, orig, noisy = read_noisy_labels(tmp_path / "n.csv")
    assert ids.tolist() == [5, 6] and orig.tolist() == [0, 1] and noisy.tolist() == [1, 1]


# -- benchmarks ----------------------------------------------------------------------

@pytest.mark.parametrize("gen", ["gaussian_blobs", "concentric_rings", "image_patches"])
def test_benchmark_determinism_and_splits(gen):
    spec = BenchmarkSpec(generator=gen, n_train=1003, n_test=100, n_classes=4, seed=5)
    a, b = make_synthetic_benchmark(spec), make_synthetic_benchmark(spec)
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        np.testing.assert_array_equal(x.labels, y.labels)
    train, val, test = a
    assert len(val) == 100 and len(train) == 903 and len(test) == 100
    assert not set(train.ids.tolist()) & set(val.ids.tolist())
    assert set(np.unique(train.labels).tolist()) == {0, 1, 2, 3}


def test_benchmark_is_class_balanced():
    train, val, _ = make_synthetic_benchmark(BenchmarkSpec(n_train=4000))
    counts = np.bincount(np.concatenate([train.labels, val.labels]))
    assert counts.tolist() == [1000] * 4


def test_benchmark_validation():
    with pytest.raises(InputError):
        BenchmarkSpec(n_classes=1)
    with pytest.raises(InputError):
        BenchmarkSpec(separation=0.0)
    with pytest.raises(InputError):
        BenchmarkSpec(generator="cifar")


def test_well_separated_blobs_are_learnable():
    train, val, test = make_synthetic_benchmark(BenchmarkSpec(n_train=2000, n_test=2000, separation=6.0))
    spec = MlpSpec((10, 32, 4))
    hp = MlntHyper(n_synthetic=0, meta_lr=0.0, epochs=10, lr_decay_epoch=7)
    res = train_iteration(train, val, spec, hp, None, RandomStreams(0))
    assert accuracy(spec, res.student.params, test) >= 0.99


# -- checkpoints -------------------------------------------------------------------

def make_checkpoint():
    spec = MlpSpec((3, 5, 2), "tanh")
    return Checkpoint(spec, ParamSet.initialize(spec, np.random.default_rng(1)), 7, "teacher", 0.8125)


def test_checkpoint_round_trip(tmp_path):
    ck = make_checkpoint()
    save_checkpoint(ck, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.spec == ck.spec and back.params.equals(ck.params)
    assert (back.epoch, back.role, back.val_accuracy) == (7, "teacher", 0.8125)
    assert not (tmp_path / "c.bin.tmp").exists()


def test_checkpoint_layout():
    ck = make_checkpoint()
    raw = checkpoint_bytes(ck)
    assert raw[:8] == b"MLNTCKPT"
    version, hlen = struct.unpack("<II", raw[8:16])
    assert version == 1
    np.testing.assert_array_equal(np.frombuffer(raw[16 + hlen:], "<f8"), ck.params.flat())
    np.testing.assert_array_equal(np.frombuffer(raw[16 + hlen:16 + hlen + 8 * 15], "<f8"),
                                  ck.params.weights[0].ravel())


def test_truncated_checkpoint(tmp_path):
    raw = checkpoint_bytes(make_checkpoint())
    for cut in (4, 20, len(raw) - 8):
        (tmp_path / "t.bin").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.bin")


def test_unknown_checkpoint_version(tmp_path):
    raw = bytearray(checkpoint_bytes(make_checkpoint()))
    raw[8:12] = struct.pack("<I", 2)
    (tmp_path / "v.bin").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version 2"):
        load_checkpoint(tmp_path / "v.bin")


# -- metrics -------------------------------------------------------------------------

def row(i):
    return MetricsRow(1, i, 0.2, 0.4, 0.99, 1.0, 0.5, 0.6, 0.7, 1.1, 0.01, 100)


def test_metrics_header_and_appends(tmp_path):
    p = tmp_path / "m.csv"
    p.touch()
    append_metrics(row(0), p)
    assert p.read_text().splitlines() == [",".join(METRICS_COLUMNS), "1,0,0.2,0.4,0.99,1.0,0.5,0.6,0.7,1.1,0.01,100"]
    append_metrics(row(1), p)
    append_metrics(row(2), p)
    assert len(p.read_text().splitlines()) == 4
    assert read_metrics(p) == [row(0), row(1), row(2)]


def test_metrics_errors(tmp_path):
    p = tmp_path / "m.csv"
    with pytest.raises(FormatError):
        append_metrics([1, 2, 3], p)
    write(p, "a,b\n")
    with pytest.raises(FormatError):
        append_metrics(row(0), p)
