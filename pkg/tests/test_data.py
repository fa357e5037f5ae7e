import numpy as np
import pytest

from loraprune_lab.data import KINDS, gen_dataset
from loraprune_lab.errors import ConfigError


@pytest.mark.parametrize("kind", KINDS)
def test_same_seed_same_bytes(kind):
    a = gen_dataset(kind, 200, 8, 3, seed=4, task_seed=1)
    b = gen_dataset(kind, 200, 8, 3, seed=4, task_seed=1)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != gen_dataset(kind, 200, 8, 3, seed=5, task_seed=1).to_bytes()


@pytest.mark.parametrize("kind", KINDS)
def test_splits_partition(kind):
    ds = gen_dataset(kind, 101, 4, 2, seed=0)
    idx = np.concatenate([ds.train, ds.val, ds.test])
    assert sorted(idx.tolist()) == list(range(101))
    assert len(ds.train) == 61 and len(ds.val) == 20


def test_well_separated_blobs_are_linearly_separable():
    ds = gen_dataset("blobs", 1200, 10, 4, seed=0, spread=4.0)
    X, y = ds.split("train")
    # least-squares one-vs-rest probe
    Xb = np.hstack([X, np.ones((len(X), 1))])
    W, *_ = np.linalg.lstsq(Xb, np.eye(4)[y], rcond=None)
    Xt, yt = ds.split("test")
    acc = np.mean((np.hstack([Xt, np.ones((len(Xt), 1))]) @ W).argmax(axis=1) == yt)
    assert acc > 0.95


def test_shift_changes_task_not_samples():
    a = gen_dataset("lowrank-teacher", 300, 6, 3, seed=0, hidden=4)
    b = gen_dataset("lowrank-teacher", 300, 6, 3, seed=0, hidden=4, shift=2.0)
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize("args", [(0, 4, 2), (10, 0, 2), (10, 4, 1)])
def test_bad_sizes(args):
    with pytest.raises(ConfigError):
        gen_dataset("blobs", *args, seed=0)


def test_unknown_kind():
    with pytest.raises(ConfigError):
        gen_dataset("moons", 10, 2, 2, seed=0)
