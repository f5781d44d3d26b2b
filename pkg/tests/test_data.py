import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodekd.data import (
    BadMagicError, CountMismatchError, CsvParseError, Dataset, EmptyDatasetError, TruncatedFileError,
    augment, batch_iter, channel_stats, gen_synthetic, load_csv, load_idx, normalize, save_csv, save_idx,
    train_test_split,
)
from nodekd.rng import stream


def write_idx(tmp_path, pixels, labels, img_magic=0x803, lbl_magic=0x801, n_labels=None):
    n, h, w = pixels.shape
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    ip.write_bytes(struct.pack(">IIII", img_magic, n, h, w) + pixels.astype(np.uint8).tobytes())
    lp.write_bytes(struct.pack(">II", lbl_magic, n if n_labels is None else n_labels)
                   + np.asarray(labels, np.uint8).tobytes())
    return ip, lp


# synthetic ------------------------------------------------------------------------

def test_moons_noiseless_one_nn_is_perfect_on_train():
    ds = gen_synthetic("moons", 200, noise=0.0, seed=0)
    x = ds.images.reshape(len(ds), 2)
    d = ((x[:, None] - x[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    # exclude self-matches, so the nearest other point must share the label
    assert np.mean(ds.labels[d.argmin(1)] == ds.labels) == 1.0


def test_spirals_balance_and_shape():
    ds = gen_synthetic("spirals", 1000, noise=0.05, seed=3)
    assert np.bincount(ds.labels).tolist() == [500, 500]
    assert ds.images.shape == (1000, 1, 1, 2)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


@pytest.mark.parametrize("kind", ["moons", "spirals", "gaussians"])
def test_synthetic_deterministic(kind):
    a, b = gen_synthetic(kind, 101, 0.1, seed=7), gen_synthetic(kind, 101, 0.1, seed=7)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_synthetic(kind, 101, 0.1, seed=8).images)


def test_gaussians_class_count():
    ds = gen_synthetic("gaussians", 90, 0.2, seed=0, classes=5)
    assert ds.num_classes == 5 and np.bincount(ds.labels).tolist() == [18] * 5


def test_synthetic_preconditions():
    with pytest.raises(ValueError):
        gen_synthetic("spirals", 1, 0.1)
    with pytest.raises(ValueError):
        gen_synthetic("spirals", 10, -0.1)
    with pytest.raises(ValueError):
        gen_synthetic("rings", 10, 0.1)


def test_train_test_split_partitions():
    ds = gen_synthetic("spirals", 200, 0.1, seed=0)
    train, test = train_test_split(ds, 0.25, seed=1)
    assert len(train) == 150 and len(test) == 50
    assert train.split == "train" and test.split == "test"
    rows = np.concatenate([train.images, test.images]).reshape(-1, 2)
    assert len(np.unique(rows, axis=0)) == 200


# IDX --------------------------------------------------------------------------------

def test_idx_shape_and_scaling(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, size=(5, 28, 28))
    ds = load_idx(*write_idx(tmp_path, pixels, [0, 1, 2, 3, 9]))
    assert ds.images.shape == (5, 1, 28, 28)
    np.testing.assert_array_equal(ds.images[:, 0], pixels / 255.0)
    assert ds.labels[-1] == 9


def test_idx_zero_image(tmp_path):
    ds = load_idx(*write_idx(tmp_path, np.zeros((2, 4, 4)), [1, 2]))
    assert np.array_equal(ds.images, np.zeros((2, 1, 4, 4)))


def test_idx_errors_are_distinct(tmp_path):
    px = np.zeros((3, 2, 2))
    with pytest.raises(BadMagicError):
        load_idx(*write_idx(tmp_path, px, [0, 0, 0], img_magic=0x804))
    with pytest.raises(BadMagicError):
        load_idx(*write_idx(tmp_path, px, [0, 0, 0], lbl_magic=0x803))
    with pytest.raises(CountMismatchError):
        load_idx(*write_idx(tmp_path, px, [0, 0], n_labels=2))
    ip, lp = write_idx(tmp_path, px, [0, 0, 0])
    ip.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(TruncatedFileError):
        load_idx(ip, lp)


def test_idx_round_trip(tmp_path):
    pixels = np.random.default_rng(1).integers(0, 256, size=(4, 3, 5))
    ds = Dataset(pixels[:, None] / 255.0, [3, 1, 4, 1], 10)
    save_idx(ds, tmp_path / "a", tmp_path / "b")
    back = load_idx(tmp_path / "a", tmp_path / "b")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


# CSV --------------------------------------------------------------------------------

def test_csv_single_row(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("3,0,0.5,1,0.25\n")
    ds = load_csv(p, (1, 2, 2), num_classes=10)
    assert ds.labels.tolist() == [3]
    assert ds.images[0, 0].tolist() == [[0, 0.5], [1, 0.25]]


def test_csv_wrong_column_count_names_row(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("0,0,0,0,0\n1,0,0,0\n")
    with pytest.raises(CsvParseError, match=":2:"):
        load_csv(p, (1, 2, 2))


def test_csv_empty_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("")
    with pytest.raises(EmptyDatasetError):
        load_csv(p, (1, 2, 2))


def test_csv_rejects_out_of_range_pixels(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("0,0,0,0,1.5\n")
    with pytest.raises(CsvParseError):
        load_csv(p, (1, 2, 2))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_csv_round_trip_exact(n, seed):
    import tempfile
    rng = np.random.default_rng(seed)
    ds = Dataset(rng.random((n, 2, 2, 3)), rng.integers(0, 4, n), 4)
    with tempfile.TemporaryDirectory() as d:
        save_csv(ds, f"{d}/x.csv")
        back = load_csv(f"{d}/x.csv", (2, 2, 3), num_classes=4)
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


# normalization ----------------------------------------------------------------------

def test_constant_channel_normalizes_to_zero():
    ds = Dataset(np.full((4, 2, 3, 3), 0.3), np.zeros(4), 2)
    out, stats = normalize(ds)
    assert np.array_equal(out.images, np.zeros_like(ds.images))
    assert np.all(stats.std == 1e-6)


def test_train_mean_is_zero_and_test_uses_train_stats():
    rng = np.random.default_rng(2)
    train = Dataset(rng.random((50, 3, 4, 4)), np.zeros(50), 2)
    test = Dataset(rng.random((20, 3, 4, 4)) * 0.5, np.zeros(20), 2)
    ntrain, stats = normalize(train)
    np.testing.assert_allclose(ntrain.images.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    ntest, same = normalize(test, stats)
    assert same is stats
    expected = (test.images - stats.mean[:, None, None]) / stats.std[:, None, None]
    assert np.array_equal(ntest.images, expected)
    assert np.array_equal(stats.mean, channel_stats(train).mean)


def test_channel_stats_empty():
    with pytest.raises(EmptyDatasetError):
        channel_stats(Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0), 2))


# augmentation -----------------------------------------------------------------------

def test_augment_identity():
    x = np.random.default_rng(0).random((5, 3, 6, 6))
    assert np.array_equal(augment(x, pad=0, flip_prob=0.0, rng=np.random.default_rng(1)), x)


def test_double_forced_flip_is_identity():
    x = np.random.default_rng(0).random((5, 3, 6, 6))
    once = augment(x, pad=0, flip_prob=1.0)
    assert np.array_equal(once, x[..., ::-1])
    assert np.array_equal(augment(once, pad=0, flip_prob=1.0), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5), st.floats(0, 1), st.integers(0, 1000))
def test_augment_preserves_shape_and_range(pad, flip, seed):
    x = np.random.default_rng(seed).random((4, 2, 5, 7))
    out = augment(x, pad=pad, flip_prob=flip, rng=stream(seed, "augment"))
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1


def test_crop_is_a_shifted_window():
    x = np.arange(16.0).reshape(1, 1, 4, 4) / 16
    out = augment(x, pad=1, flip_prob=0.0, rng=np.random.default_rng(3))
    padded = np.pad(x[0, 0], 1)
    windows = [padded[i:i + 4, j:j + 4] for i in range(3) for j in range(3)]
    assert any(np.array_equal(out[0, 0], w) for w in windows)


# batching ---------------------------------------------------------------------------

def _ds(n):
    return Dataset(np.zeros((n, 1, 1, 2)), np.arange(n) % 2, 2)


def test_batch_sizes():
    assert [len(b.labels) for b in batch_iter(_ds(10), 3)] == [3, 3, 3, 1]


def test_no_shuffle_keeps_order():
    idx = np.concatenate([b.indices for b in batch_iter(_ds(10), 4)])
    assert idx.tolist() == list(range(10))


@given(st.integers(1, 60), st.integers(1, 17), st.integers(0, 10**6))
def test_batches_form_a_permutation(n, bs, seed):
    idx = np.concatenate([b.indices for b in batch_iter(_ds(n), bs, np.random.default_rng(seed))])
    assert sorted(idx.tolist()) == list(range(n))


def test_batch_size_must_be_positive():
    with pytest.raises(ValueError):
        list(batch_iter(_ds(3), 0))


def test_dataset_invariants():
    with pytest.raises(CountMismatchError):
        Dataset(np.zeros((3, 1, 1, 2)), [0, 1], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 1, 2)), [0, 2], 2)


def test_named_streams_are_independent_and_reproducible():
    a = stream(0, "shuffle").random(4)
    assert np.array_equal(a, stream(0, "shuffle").random(4))
    assert not np.array_equal(a, stream(0, "augment").random(4))
    assert not np.array_equal(stream(0, "attack", 1).random(2), stream(0, "attack", 2).random(2))
