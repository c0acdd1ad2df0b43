import numpy as np
import pytest

from vflopt.data import (
    DataError,
    VerticalDataset,
    gen_synthetic,
    load_csv,
    load_dataset,
    sample_balanced_probe,
    save_dataset,
    split_train_test,
)


def test_synthetic_shape_and_balance():
    ds = gen_synthetic(2000, 5, 5, 2, seed=0)
    assert ds.active_features.shape == (2000, 5)
    assert ds.passive_features.shape == (2000, 5)
    assert ds.class_counts().tolist() == [1000, 1000]
    assert np.array_equal(ds.instance_ids, np.arange(2000))


def test_synthetic_class_sizes_differ_by_at_most_one():
    ds = gen_synthetic(1001, 2, 3, 4, seed=3)
    counts = ds.class_counts()
    assert counts.max() - counts.min() <= 1
    assert counts.sum() == 1001


def test_synthetic_is_seeded():
    a = gen_synthetic(100, 2, 2, 3, seed=7)
    b = gen_synthetic(100, 2, 2, 3, seed=7)
    c = gen_synthetic(100, 2, 2, 3, seed=8)
    assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_zero_noise_points_sit_on_distinct_vertices():
    ds = gen_synthetic(60, 2, 2, 3, noise=0.0, seed=1)
    rows = {tuple(r) for r in ds.features}
    assert len(rows) == 3
    assert all(set(np.abs(r)) == {1.0} for r in rows)


@pytest.mark.parametrize(
    "args",
    [(1, 2, 2, 2), (10, 0, 2, 2), (10, 2, 0, 2), (10, 2, 2, 1), (10, 1, 1, 5), (10, 40, 30, 2)],
)
def test_synthetic_rejects_bad_shapes(args):
    with pytest.raises(DataError):
        gen_synthetic(*args)


def test_dataset_validation():
    a = np.zeros((3, 1))
    with pytest.raises(DataError):
        VerticalDataset(a, np.zeros((2, 1)), np.zeros(3, dtype=int), 2, np.arange(3))
    with pytest.raises(DataError):
        VerticalDataset(a, a, np.array([0, 1, 2]), 2, np.arange(3))
    with pytest.raises(DataError):
        VerticalDataset(a, a, np.zeros(3, dtype=int), 2, np.array([0, 0, 1]))


def test_dataset_arrays_are_read_only():
    ds = gen_synthetic(10, 1, 1, 2)
    with pytest.raises(ValueError):
        ds.labels[0] = 1


def test_save_load_round_trip(tmp_path):
    ds = gen_synthetic(50, 2, 3, 3, seed=2)
    save_dataset(ds, tmp_path / "d.csv", seed=2)
    back = load_dataset(tmp_path / "d.csv")
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert back.passive_names == ds.passive_names
    assert back.num_classes == 3


def test_load_csv_assigns_leftover_columns_to_active(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("f1,f2,g1,y\n1,2,3,no\n4,5,6,yes\n7,8,9,no\n")
    ds = load_csv(p, "y", ["g1"])
    assert ds.active_names == ("f1", "f2")
    assert ds.labels.tolist() == [0, 1, 0]
    assert ds.passive_features[:, 0].tolist() == [3.0, 6.0, 9.0]


def test_load_csv_errors_name_file_and_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,y\n1,2,0\n1,oops,1\n")
    with pytest.raises(DataError, match=r"bad\.csv:3"):
        load_csv(p, "y", ["b"])
    with pytest.raises(DataError, match="missing column"):
        load_csv(p, "label", ["b"])


def test_split_is_disjoint_and_sized():
    ds = gen_synthetic(300, 2, 2, 2, seed=0)
    tr, te = split_train_test(ds, seed=1)
    assert len(tr) == 200 and len(te) == 100
    assert not set(tr.instance_ids) & set(te.instance_ids)
    with pytest.raises(DataError):
        split_train_test(ds, 1.0)


def test_probe_is_balanced_and_from_train():
    ds = gen_synthetic(300, 2, 2, 3, seed=0)
    tr, _ = split_train_test(ds, seed=0)
    probe = sample_balanced_probe(tr, 20, seed=4)
    assert np.bincount(probe.probe_labels).tolist() == [20, 20, 20]
    rows = tr.rows_for_ids(probe.probe_ids)
    assert np.array_equal(tr.labels[rows], probe.probe_labels)
    with pytest.raises(DataError, match="class 0"):
        sample_balanced_probe(tr, 1000)
