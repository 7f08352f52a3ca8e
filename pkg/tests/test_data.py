"""Dataset loading, synthetic generation, and eval-set sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferbench import data as D


# ---------------------------------------------------------------------------
# CIFAR-10 binary layout
# ---------------------------------------------------------------------------


def _write_records(path, n, label_fn=lambda i: i % 10, pixel=7):
    rec = bytearray()
    for i in range(n):
        rec.append(label_fn(i))
        rec.extend(bytes([pixel]) * 3072)
    path.write_bytes(bytes(rec))


def test_cifar_record_count(tmp_path):
    p = tmp_path / "batch.bin"
    _write_records(p, 12)
    ds = D.load_cifar10_binary(p)
    assert len(ds) == p.stat().st_size // D.CIFAR_RECORD_BYTES == 12


def test_cifar_all_zero_record(tmp_path):
    p = tmp_path / "batch.bin"
    p.write_bytes(bytes(D.CIFAR_RECORD_BYTES))
    ds = D.load_cifar10_binary(p)
    assert ds.labels[0] == 0
    assert ds.images.min() == ds.images.max() == 0.0


def test_cifar_truncated_file(tmp_path):
    p = tmp_path / "batch.bin"
    p.write_bytes(bytes(D.CIFAR_RECORD_BYTES * 2 - 5))
    with pytest.raises(D.DataError, match="multiple"):
        D.load_cifar10_binary(p)


def test_cifar_bad_label_names_record(tmp_path):
    p = tmp_path / "batch.bin"
    _write_records(p, 3, label_fn=lambda i: 99 if i == 1 else 0)
    with pytest.raises(D.DataError, match="record 1"):
        D.load_cifar10_binary(p)


def test_cifar_channel_planar_order(tmp_path):
    # first pixel byte is red channel of pixel (0, 0); green plane follows
    rec = bytearray([3])
    rec.extend(bytes([255]) + bytes(1023))  # red plane: only (0,0) set
    rec.extend(bytes([0]) * 1024)  # green plane empty
    rec.extend(bytes([128]) * 1024)  # blue plane constant
    p = tmp_path / "batch.bin"
    p.write_bytes(bytes(rec))
    ds = D.load_cifar10_binary(p)
    assert ds.images[0, 0, 0, 0] == pytest.approx(1.0)
    assert ds.images[0, 0, 0, 1] == 0.0
    assert ds.images[0, 1].max() == 0.0
    assert ds.images[0, 2].min() == ds.images[0, 2].max() == pytest.approx(128 / 255)


def test_cifar_round_trip(tmp_path):
    ds = D.generate_synthetic_dataset(10, 4, 32, seed=5)
    p = tmp_path / "export.bin"
    D.save_cifar10_binary(ds, p)
    back = D.load_cifar10_binary(p)
    np.testing.assert_array_equal(back.labels, ds.labels)
    # quantization to bytes loses at most half a step
    assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-6


def test_cifar_export_rejects_other_geometry():
    ds = D.generate_synthetic_dataset(4, 2, 16, seed=0)
    with pytest.raises(D.DataError, match="CIFAR layout"):
        D.save_cifar10_binary(ds, "/tmp/never-written.bin")


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


def test_synthetic_deterministic():
    a = D.generate_synthetic_dataset(5, 3, 32, seed=1)
    b = D.generate_synthetic_dataset(5, 3, 32, seed=1)
    assert a.images.tobytes() == b.images.tobytes()
    c = D.generate_synthetic_dataset(5, 3, 32, seed=2)
    assert a.images.tobytes() != c.images.tobytes()


def test_synthetic_label_histogram_uniform():
    ds = D.generate_synthetic_dataset(7, 11, 32, seed=0)
    counts = np.bincount(ds.labels, minlength=7)
    assert (counts == 11).all()


def test_synthetic_pixels_in_range():
    ds = D.generate_synthetic_dataset(10, 5, 32, seed=3)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_synthetic_rejects_single_class():
    with pytest.raises(D.DataError, match="at least 2"):
        D.generate_synthetic_dataset(1, 5)


def test_synthetic_split_changes_content():
    tr = D.generate_synthetic_dataset(4, 3, 32, seed=1, split="train")
    te = D.generate_synthetic_dataset(4, 3, 32, seed=1, split="test")
    assert tr.images.tobytes() != te.images.tobytes()


def test_subset_balanced():
    ds = D.generate_synthetic_dataset(10, 20, 16, seed=0)
    sub = ds.subset(50, seed=1)
    counts = np.bincount(sub.labels, minlength=10)
    assert (counts == 5).all()


# ---------------------------------------------------------------------------
# eval-set sampling
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def testset():
    return D.generate_synthetic_dataset(10, 6, 16, seed=9, split="test")


def test_eval_set_full_derangement(testset):
    es = D.sample_eval_set(testset, 10, seed=0)
    trues = es.true_labels()
    targets = es.target_labels()
    assert sorted(trues) == list(range(10))
    assert sorted(targets) == list(range(10))
    assert (trues != targets).all()


def test_eval_set_two_classes_is_swap(testset):
    es = D.sample_eval_set(testset, 2, seed=4)
    trues, targets = es.true_labels(), es.target_labels()
    assert targets[0] == trues[1] and targets[1] == trues[0]


def test_eval_set_rejects_oversample(testset):
    with pytest.raises(D.DataError, match="10"):
        D.sample_eval_set(testset, 11, seed=0)


def test_eval_set_derangement_property_1000_draws(testset):
    for seed in range(1000):
        es = D.sample_eval_set(testset, 10, seed=seed)
        trues, targets = es.true_labels(), es.target_labels()
        assert (trues != targets).all()
        assert sorted(targets.tolist()) == sorted(trues.tolist())


@settings(max_examples=60, deadline=None)
@given(n=st.integers(min_value=2, max_value=10), seed=st.integers(0, 10_000))
def test_eval_set_derangement_hypothesis(n, seed):
    ds = D.generate_synthetic_dataset(10, 2, 8, seed=0, split="test")
    es = D.sample_eval_set(ds, n, seed=seed)
    trues, targets = es.true_labels(), es.target_labels()
    assert len(set(trues.tolist())) == n
    assert (trues != targets).all()
    assert sorted(targets.tolist()) == sorted(trues.tolist())


def test_eval_set_deterministic(testset):
    a = D.sample_eval_set(testset, 10, seed=17)
    b = D.sample_eval_set(testset, 10, seed=17)
    assert [i.index for i in a.items] == [i.index for i in b.items]
    assert a.target_labels().tolist() == b.target_labels().tolist()


# ---------------------------------------------------------------------------
# representation eval sampling
# ---------------------------------------------------------------------------


def test_representation_eval_task_counts(testset):
    rs = D.sample_representation_eval(testset, 10, 40, seed=0)
    assert rs.task_count == 400
    desk = D.sample_representation_eval(testset, 10, 50, seed=0)
    assert desk.task_count == 500


def test_representation_eval_paper_scale_arithmetic():
    ds = D.generate_synthetic_dataset(10, 110, 8, seed=0, split="test")
    rs = D.sample_representation_eval(ds, 10, 990, seed=0)
    assert rs.task_count == 9900


def test_representation_eval_disjoint(testset):
    rs = D.sample_representation_eval(testset, 8, 30, seed=3)
    assert not set(rs.target_indices) & set(rs.initial_indices)
    assert len(set(rs.target_indices)) == 8
    assert len(set(rs.initial_indices)) == 30


def test_representation_eval_target_classes_distinct(testset):
    rs = D.sample_representation_eval(testset, 10, 10, seed=1)
    classes = testset.labels[np.array(rs.target_indices)]
    assert len(set(classes.tolist())) == 10


def test_representation_eval_deterministic(testset):
    a = D.sample_representation_eval(testset, 5, 20, seed=8)
    b = D.sample_representation_eval(testset, 5, 20, seed=8)
    assert a.target_indices == b.target_indices
    assert a.initial_indices == b.initial_indices


def test_representation_eval_insufficient_data():
    ds = D.generate_synthetic_dataset(3, 2, 8, seed=0)
    with pytest.raises(D.DataError, match="distinct images"):
        D.sample_representation_eval(ds, 3, 10, seed=0)
