import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pev.data import PartitionSpec, load_csv, make_blobs, partition_dirichlet, train_test_split
from pev.errors import ConfigError, DatasetError


def test_blob_counts_and_determinism():
    a = make_blobs(4, 20, 250, 1.0, 7)
    b = make_blobs(4, 20, 250, 1.0, 7)
    assert len(a) == 1000 and a.dim == 20 and a.class_count == 4
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.inputs, make_blobs(4, 20, 250, 1.0, 8).inputs)


def test_tight_blobs_are_separable_by_nearest_centroid():
    data = make_blobs(5, 8, 40, 1e-9, 3)
    centroids = np.stack([data.inputs[data.labels == c].mean(axis=0) for c in range(5)])
    dist = ((data.inputs[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert np.mean(dist.argmin(axis=1) == data.labels) == 1.0


def test_split_is_stratified_and_disjoint():
    data = make_blobs(3, 4, 50, 1.0, 0)
    train, test = train_test_split(data, 0.2, 0)
    assert len(train) + len(test) == len(data)
    assert np.bincount(test.labels).tolist() == [10, 10, 10]
    rows = {tuple(r) for r in train.inputs} & {tuple(r) for r in test.inputs}
    assert not rows


def test_huge_alpha_matches_global_label_proportions():
    data = make_blobs(4, 3, 250, 1.0, 0)
    global_p = np.bincount(data.labels, minlength=4) / len(data)
    worst = 0.0
    for seed in range(20):
        for shard in partition_dirichlet(data, PartitionSpec(10, 1e6, seed)):
            p = np.bincount(shard.labels, minlength=4) / len(shard)
            worst = max(worst, np.abs(p - global_p).max())
    assert worst <= 0.05


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 30), alpha=st.floats(0.05, 100.0), seed=st.integers(0, 10**6))
def test_partition_is_a_disjoint_cover(n, alpha, seed):
    data = make_blobs(3, 2, 20, 1.0, 1)
    shards = partition_dirichlet(data, PartitionSpec(n, alpha, seed))
    assert len(shards) == n
    assert sum(len(s) for s in shards) == len(data)
    assert all(len(s) >= 1 for s in shards)
    rows = np.concatenate([s.inputs for s in shards])
    assert len({tuple(r) for r in rows}) == len(data)
    again = partition_dirichlet(data, PartitionSpec(n, alpha, seed))
    assert all(np.array_equal(x.inputs, y.inputs) for x, y in zip(shards, again))


def test_partition_falls_back_under_extreme_skew():
    data = make_blobs(2, 2, 10, 1.0, 0)
    shards = partition_dirichlet(data, PartitionSpec(20, 1e-3, 0))
    assert sorted(len(s) for s in shards) == [1] * 20


def test_partition_rejects_too_few_rows():
    with pytest.raises(ConfigError):
        partition_dirichlet(make_blobs(2, 2, 2, 1.0, 0), PartitionSpec(5, 1.0, 0))


def test_csv_two_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,x,y\n0,1.5,2\n1,-1,0.25\n")
    data = load_csv(p)
    assert len(data) == 2 and data.dim == 2 and data.class_count == 2
    assert data.inputs[1].tolist() == [-1.0, 0.25]


def test_csv_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(DatasetError, match="empty dataset"):
        load_csv(empty)
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("0,1,2,3,4\n1,1,2,3,4\n0,1,2,3\n")
    with pytest.raises(DatasetError, match="row 2"):
        load_csv(ragged)
    with pytest.raises(DatasetError, match="not found"):
        load_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1\n1,x\n")
    with pytest.raises(DatasetError, match="non-numeric"):
        load_csv(bad)
