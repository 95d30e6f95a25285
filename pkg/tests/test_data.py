import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcl.data import (Dataset, class_histogram, client_distributions, dirichlet_partition, gen_synthetic,
                        largest_remainder, load_idx, mean_pairwise_tv, sample_proxy, total_variation, write_idx)
from fedcl.errors import DomainError, FormatError
from fedcl.nn import Batch, ModelSpec, accuracy, init_params, loss_and_grad, sgd_step


def idx_images(n, rows=28, cols=28, fill=None, magic=0x803):
    pixels = bytes(range(256)) * (n * rows * cols // 256 + 1) if fill is None else bytes([fill]) * (n * rows * cols)
    return struct.pack(">IIII", magic, n, rows, cols) + pixels[:n * rows * cols]


def idx_labels(labels, magic=0x801, count=None):
    return struct.pack(">II", magic, len(labels) if count is None else count) + bytes(labels)


@pytest.fixture
def idx_pair(tmp_path):
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    img.write_bytes(idx_images(4))
    lab.write_bytes(idx_labels([3, 1, 4, 1]))
    return img, lab


def test_load_handmade_idx(idx_pair):
    data = load_idx(*idx_pair)
    assert (data.n, data.d, data.num_classes) == (4, 784, 5)
    np.testing.assert_array_equal(data.labels, [3, 1, 4, 1])
    # pixel stream is 0, 1, ..., 255, 0, 1, ...; 784 = 3 * 256 + 16
    assert data.inputs[0, 255] == 1.0
    assert data.inputs[1, 0] == 16 / 255
    assert data.inputs.min() >= 0 and data.inputs.max() <= 1


def test_idx_wrong_magic(tmp_path, idx_pair):
    img, _ = idx_pair
    bad = tmp_path / "bad.idx"
    bad.write_bytes(idx_labels([0, 1, 2, 3], magic=0x803))
    with pytest.raises(FormatError) as err:
        load_idx(img, bad)
    assert err.value.offset == 0


def test_idx_count_mismatch(tmp_path):
    img, lab = tmp_path / "i", tmp_path / "l"
    img.write_bytes(idx_images(5))
    lab.write_bytes(idx_labels([0, 1, 2, 3]))
    with pytest.raises(FormatError, match="count"):
        load_idx(img, lab)


def test_idx_truncated(tmp_path):
    img, lab = tmp_path / "i", tmp_path / "l"
    img.write_bytes(idx_images(4)[:-10])
    lab.write_bytes(idx_labels([0, 1, 2, 3]))
    with pytest.raises(FormatError) as err:
        load_idx(img, lab)
    assert err.value.offset == 16 + 4 * 784 - 10
    img.write_bytes(b"\x00\x00\x08")
    with pytest.raises(FormatError):
        load_idx(img, lab)


def test_idx_round_trip_bit_exact(tmp_path, idx_pair):
    first = load_idx(*idx_pair)
    write_idx(first, tmp_path / "a", tmp_path / "b", (28, 28))
    assert (tmp_path / "a").read_bytes() == idx_pair[0].read_bytes()
    assert (tmp_path / "b").read_bytes() == idx_pair[1].read_bytes()
    second = load_idx(tmp_path / "a", tmp_path / "b")
    np.testing.assert_array_equal(first.inputs, second.inputs)
    np.testing.assert_array_equal(first.labels, second.labels)


def test_synthetic_deterministic_and_balanced():
    a, b = gen_synthetic(100, 8, 10, seed=3), gen_synthetic(100, 8, 10, seed=3)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(class_histogram(a), [10] * 10)
    assert a.inputs.min() >= 0 and a.inputs.max() <= 1
    assert np.ptp(np.bincount(gen_synthetic(103, 2, 10, 0).labels)) <= 1


def test_synthetic_is_learnable():
    data = gen_synthetic(200, 20, 4, seed=0)
    spec = ModelSpec(20, (16,), 4)
    params = init_params(spec, np.random.default_rng(0))
    batch = data.as_batch()
    for _ in range(200):
        _, g = loss_and_grad(spec, params, batch)
        params = sgd_step(params, g, 0.5)
    assert accuracy(spec, params, batch) >= 0.9


def test_class_histogram():
    assert list(class_histogram(Dataset(np.zeros((0, 2)), [], 3))) == [0, 0, 0]
    assert list(class_histogram(Dataset(np.zeros((3, 2)), [0, 0, 1], 3))) == [2, 1, 0]


def test_largest_remainder_conserves():
    assert list(largest_remainder(10, [1, 1, 1])) == [4, 3, 3]
    assert largest_remainder(7, [0.0, 0.0]).sum() == 7
    assert list(largest_remainder(5, [0.2, 0.8])) == [1, 4]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 1e4), st.integers(0, 2**31 - 1))
def test_partition_conserves_examples(k, alpha, seed):
    data = gen_synthetic(150, 3, 5, seed=1)
    plan, shards = dirichlet_partition(data, k, alpha, seed)
    assert sum(s.train.n + s.test.n for s in shards) == data.n
    every = np.sort(np.concatenate([np.r_[s.train_indices, s.test_indices] for s in shards]))
    np.testing.assert_array_equal(every, np.arange(data.n))
    total = sum(class_histogram(s.train) + class_histogram(s.test) for s in shards)
    np.testing.assert_array_equal(total, class_histogram(data))
    np.testing.assert_allclose(plan.proportions.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(plan.proportions >= 0)
    for s in shards:
        assert not set(s.train_indices) & set(s.test_indices)
        np.testing.assert_array_equal(plan.assignment[s.train_indices], s.client_id)


def test_single_client_holds_everything():
    data = gen_synthetic(50, 3, 5, seed=2)
    _, [shard] = dirichlet_partition(data, 1, 0.5, seed=0)
    assert (shard.train.n, shard.test.n) == (40, 10)
    np.testing.assert_array_equal(np.sort(np.r_[shard.train_indices, shard.test_indices]), np.arange(50))


def test_partition_errors():
    data = gen_synthetic(5, 2, 2, seed=0)
    with pytest.raises(DomainError):
        dirichlet_partition(data, 6, 1.0, 0)
    with pytest.raises(DomainError):
        dirichlet_partition(data, 2, 0.0, 0)


def test_partition_deterministic():
    data = gen_synthetic(300, 3, 10, seed=0)
    a, _ = dirichlet_partition(data, 7, 0.3, 11)
    b, _ = dirichlet_partition(data, 7, 0.3, 11)
    np.testing.assert_array_equal(a.assignment, b.assignment)


def test_uniform_partition_is_balanced():
    data = gen_synthetic(1000, 3, 10, seed=0)
    _, shards = dirichlet_partition(data, 10, float("inf"), 0)
    dists = client_distributions(shards, 10)
    assert max(total_variation(d, np.full(10, 0.1)) for d in dists) < 1e-12
    assert {s.train.n + s.test.n for s in shards} == {100}


def test_smaller_alpha_is_more_skewed():
    data = gen_synthetic(2000, 2, 10, seed=0)
    skew = {a: np.mean([mean_pairwise_tv(client_distributions(dirichlet_partition(data, 10, a, s)[1], 10))
                        for s in range(5)]) for a in (0.1, 1.0, 100.0)}
    assert skew[0.1] > skew[1.0] > skew[100.0]


def test_proxy_sampling():
    data = gen_synthetic(1000, 2, 10, seed=0)
    assert len(sample_proxy(data, 0.01, 0)) == 10
    assert len(sample_proxy(data, 1e-6, 0)) == 1
    full = sample_proxy(data, 1.0, 4)
    np.testing.assert_array_equal(np.sort(full.indices), np.arange(1000))
    np.testing.assert_array_equal(sample_proxy(data, 0.05, 9).indices, sample_proxy(data, 0.05, 9).indices)
    with pytest.raises(DomainError):
        sample_proxy(data, 0.0, 0)
    with pytest.raises(DomainError):
        sample_proxy(data, 1.5, 0)


def test_dataset_rejects_bad_labels():
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 2)), [0, 3], 3)
    assert isinstance(gen_synthetic(4, 2, 2, 0).as_batch(), Batch)
