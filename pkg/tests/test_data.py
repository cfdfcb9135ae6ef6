from __future__ import annotations

import math

import numpy as np
import pytest

from pushsum_fl.data import (
    Dataset,
    Partition,
    dirichlet_partition,
    label_entropy,
    largest_remainder,
    load_idx,
    make_quadratic,
    make_synthetic,
    mean_label_entropy,
    write_idx,
)
from pushsum_fl.errors import (
    BadMagicError,
    CountMismatchError,
    EmptyDatasetError,
    PartitionError,
    TruncatedFileError,
)
from pushsum_fl.objectives import LocalObjective, build_model
from pushsum_fl.vecmath import SeededRng


def _labelled(counts: list[int], d: int = 2) -> Dataset:
    labels = np.concatenate([np.full(c, k, dtype=np.int64) for k, c in enumerate(counts)])
    return Dataset(features=np.zeros((labels.size, d)), labels=labels, n_classes=len(counts))


# -------------------- synthetic --------------------


def test_synthetic_split_sizes():
    train, test = make_synthetic(2, 10, 2, 3.0, SeededRng(0))
    assert (len(train), len(test)) == (16, 4)
    assert train.n_features == 2
    np.testing.assert_array_equal(train.class_counts(), [8, 8])
    np.testing.assert_array_equal(test.class_counts(), [2, 2])


def test_synthetic_is_reproducible():
    a, _ = make_synthetic(3, 20, 5, 2.0, SeededRng(9))
    b, _ = make_synthetic(3, 20, 5, 2.0, SeededRng(9))
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_well_separated_blobs_are_linearly_separable():
    train, test = make_synthetic(2, 50, 2, 10.0, SeededRng(1))
    model = build_model("logistic", 2, 2)
    obj = LocalObjective(model=model, features=train.features, labels=train.labels)
    test_obj = LocalObjective(model=model, features=test.features, labels=test.labels)
    x = model.init(SeededRng(1))
    for _ in range(300):
        x = x - 0.5 * obj.gradient(x)
    assert test_obj.accuracy(x) == 1.0


def test_quadratic_centres_per_client():
    ds, part = make_quadratic(4, 3, 2, 1.0, SeededRng(0))
    assert len(ds) == 12
    assert part.sizes() == [3, 3, 3, 3]
    assert part.iid


# -------------------- IDX --------------------


@pytest.fixture
def idx_pair(tmp_path):
    gen = np.random.default_rng(0)
    images = gen.integers(0, 256, size=(12, 4, 4), dtype=np.uint8)
    labels = (np.arange(12) % 10).astype(np.uint8)
    return tmp_path, images, labels


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_idx_roundtrip(idx_pair, suffix):
    root, images, labels = idx_pair
    img_path, lbl_path = root / f"img{suffix}", root / f"lbl{suffix}"
    write_idx(img_path, lbl_path, images, labels)
    ds = load_idx(img_path, lbl_path, limit=5)
    assert ds.features.shape == (5, 16)
    np.testing.assert_array_equal(ds.labels, labels[:5])
    np.testing.assert_allclose(ds.features, images[:5].reshape(5, -1) / 255.0)
    assert ds.features.max() <= 1.0


def test_idx_limit_zero_is_empty(idx_pair):
    root, images, labels = idx_pair
    write_idx(root / "i", root / "l", images, labels)
    with pytest.raises(EmptyDatasetError):
        load_idx(root / "i", root / "l", limit=0)


def test_idx_bad_magic(idx_pair):
    root, images, labels = idx_pair
    write_idx(root / "i", root / "l", images, labels)
    # an images file where labels are expected
    with pytest.raises(BadMagicError) as err:
        load_idx(root / "i", root / "i", limit=3)
    assert err.value.got == 0x00000803


def test_idx_truncated(idx_pair):
    root, images, labels = idx_pair
    write_idx(root / "i", root / "l", images, labels)
    raw = (root / "i").read_bytes()
    (root / "i").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        load_idx(root / "i", root / "l", limit=3)


def test_idx_count_mismatch(idx_pair):
    root, images, labels = idx_pair
    write_idx(root / "i", root / "l", images, labels[:7])
    with pytest.raises(CountMismatchError):
        load_idx(root / "i", root / "l", limit=3)


def test_mnist_files_load(mnist_dir):
    ds = load_idx(
        mnist_dir / "train-images-idx3-ubyte.gz",
        mnist_dir / "train-labels-idx1-ubyte.gz",
        limit=1000,
    )
    assert ds.features.shape == (1000, 784)
    assert set(np.unique(ds.labels)) <= set(range(10))


# -------------------- partition --------------------


def test_largest_remainder_conserves_total():
    counts = largest_remainder(np.array([0.5, 0.3, 0.2]), 7)
    assert counts.sum() == 7
    np.testing.assert_array_equal(counts, [4, 2, 1])


def _assert_exact_cover(part: Partition, n: int) -> None:
    allidx = np.concatenate(part.client_shards)
    assert allidx.size == n
    assert np.unique(allidx).size == n


def test_iid_partition_matches_global_histogram():
    ds = _labelled([40, 25, 35])
    part = dirichlet_partition(ds, 4, None, SeededRng(0))
    _assert_exact_cover(part, len(ds))
    hist = part.histograms(ds.labels, 3)
    expected = ds.class_counts() / 4
    assert np.all(np.abs(hist - expected) <= 1)
    assert max(part.sizes()) - min(part.sizes()) <= 1


def test_infinite_alpha_means_iid():
    ds = _labelled([10, 10])
    assert dirichlet_partition(ds, 2, math.inf, SeededRng(0)).iid


def test_single_client_owns_everything():
    ds = _labelled([5, 6, 7])
    part = dirichlet_partition(ds, 1, 0.3, SeededRng(0))
    np.testing.assert_array_equal(part.client_shards[0], np.arange(18))


def test_dirichlet_partition_is_reproducible_and_non_empty():
    ds = _labelled([100] * 10)
    a = dirichlet_partition(ds, 16, 0.3, SeededRng(5))
    b = dirichlet_partition(ds, 16, 0.3, SeededRng(5))
    _assert_exact_cover(a, len(ds))
    assert all(s.size > 0 for s in a.client_shards)
    assert all(np.array_equal(x, y) for x, y in zip(a.client_shards, b.client_shards))


def test_too_many_clients_exhausts_retries():
    ds = _labelled([3, 3])
    with pytest.raises(PartitionError, match="larger"):
        dirichlet_partition(ds, 10, None, SeededRng(0))


def test_non_positive_alpha_rejected():
    with pytest.raises(ValueError):
        dirichlet_partition(_labelled([5, 5]), 2, 0.0, SeededRng(0))


def test_label_entropy_of_balanced_pair():
    ds = _labelled([2, 2])
    part = Partition(client_shards=(np.array([0, 2]), np.array([1, 3])), alpha=None)
    np.testing.assert_allclose(label_entropy(part, ds.labels, 2), [math.log(2)] * 2)


def test_dirichlet_lowers_label_entropy():
    ds = _labelled([160] * 10)
    for seed in range(5):
        skewed = mean_label_entropy(dirichlet_partition(ds, 16, 0.3, SeededRng(seed)), ds.labels, 10)
        iid = mean_label_entropy(dirichlet_partition(ds, 16, None, SeededRng(seed)), ds.labels, 10)
        assert skewed < iid


def test_smaller_alpha_does_not_raise_entropy_on_average():
    ds = _labelled([160] * 10)
    e = {
        alpha: np.mean(
            [mean_label_entropy(dirichlet_partition(ds, 16, alpha, SeededRng(s)), ds.labels, 10) for s in range(5)]
        )
        for alpha in (0.3, 0.6)
    }
    assert e[0.3] <= e[0.6]
