import numpy as np
import pytest

from wnll_lab.data import (
    RECORD_BYTES,
    Dataset,
    gen_synthetic,
    gen_synthetic_images,
    load_cifar10,
    read_cifar_records,
    train_test_split,
    write_cifar_records,
)


@pytest.fixture(scope="module")
def cifar_file(tmp_path_factory):
    rng = np.random.default_rng(0)
    labels = np.arange(10_000) % 10
    px = rng.integers(0, 256, size=(10_000, 3, 32, 32)).astype(np.uint8)
    px[0, 0, 0, 0] = 255
    path = tmp_path_factory.mktemp("cifar") / "data_batch_1.bin"
    write_cifar_records(path, px / 255.0, labels)
    return path, labels, px


def test_cifar_record_layout(cifar_file):
    path, labels, px = cifar_file
    assert path.stat().st_size == 10_000 * RECORD_BYTES == 10_000 * 3073
    lab, raw = read_cifar_records(path)
    assert np.array_equal(lab, labels)
    assert np.array_equal(raw[5], px[5].reshape(-1))


def test_cifar_load_full(cifar_file):
    path, labels, px = cifar_file
    data = load_cifar10(str(path))
    assert data.x.shape == (10_000, 3, 32, 32) and data.n_classes == 10
    assert data.x[0, 0, 0, 0] == 1.0
    assert data.x.min() >= 0.0 and data.x.max() <= 1.0
    np.testing.assert_array_equal(data.x[7], px[7] / 255.0)


def test_cifar_subset_remap_and_cap(cifar_file):
    path, labels, px = cifar_file
    data, keep = load_cifar10(str(path), class_subset=(9, 1), per_class_cap=30, return_indices=True)
    assert data.n_classes == 2
    assert np.array_equal(data.class_counts(), [30, 30])
    assert np.array_equal(data.y, np.where(labels[keep] == 1, 0, 1))
    assert np.array_equal(data.x, px[keep] / 255.0)


def test_cifar_directory_split(cifar_file, tmp_path):
    path, labels, px = cifar_file
    (tmp_path / "data_batch_1.bin").write_bytes(path.read_bytes())
    assert len(load_cifar10(str(tmp_path), class_subset=(0,))) == 1000
    with pytest.raises(FileNotFoundError):
        load_cifar10(str(tmp_path), split="test")


def test_cifar_malformed_size(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 3074)
    with pytest.raises(ValueError, match="3074 bytes.*3073"):
        load_cifar10(str(bad))


@pytest.mark.parametrize("kind", ["blobs", "moons"])
def test_synthetic_balance_and_determinism(kind):
    a = gen_synthetic(kind, 101, 0.1, seed=3)
    b = gen_synthetic(kind, 101, 0.1, seed=3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert np.array_equal(a.class_counts(), [51, 50])
    assert not np.array_equal(a.x, gen_synthetic(kind, 101, 0.1, seed=4).x)


def test_blobs_without_noise_linearly_separable():
    data = gen_synthetic("blobs", 200, 0.0, seed=0)
    xa = np.hstack([data.x, np.ones((200, 1))])
    s = 2 * data.y - 1
    w = np.zeros(3)
    for _ in range(1000):
        wrong = np.flatnonzero(s * (xa @ w) <= 0)
        if wrong.size == 0:
            break
        w += s[wrong[0]] * xa[wrong[0]]
    assert np.all(s * (xa @ w) > 0)


def test_synthetic_validation():
    with pytest.raises(ValueError):
        gen_synthetic("spirals", 10)
    with pytest.raises(ValueError):
        gen_synthetic("blobs", 1)


def test_synthetic_images():
    d = gen_synthetic_images(40, seed=1)
    assert d.x.shape == (40, 3, 32, 32)
    assert d.x.min() >= 0.0 and d.x.max() <= 1.0
    assert np.array_equal(d.class_counts(), [20, 20])
    assert np.array_equal(d.x, gen_synthetic_images(40, seed=1).x)


def test_train_test_split_stratified():
    d = gen_synthetic_images(60, seed=0)
    tr, te, itr, ite = train_test_split(d, 10, seed=2, return_indices=True)
    assert np.array_equal(te.class_counts(), [10, 10])
    assert len(tr) == 40
    assert np.intersect1d(itr, ite).size == 0
    assert np.array_equal(np.sort(np.concatenate([itr, ite])), np.arange(60))


def test_dataset_checks():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2), 2)
