import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmpdd.data import (
    Dataset,
    IdxParseError,
    load_idx_dataset,
    parse_idx,
    partition,
    synth_logistic,
)
from fedmpdd.models import Batch, Logistic, ModelState, evaluate, loss_and_grad, sgd_step


def idx_images(n, rows, cols, payload=None):
    body = payload if payload is not None else bytes(range(256)) * (n * rows * cols // 256 + 1)
    return struct.pack(">IIII", 0x803, n, rows, cols) + body[: n * rows * cols]


def idx_labels(labels):
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


def train_logistic(train: Dataset, steps=300, eta=0.5):
    model = Logistic(train.class_count, train.inputs.shape[1])
    state = ModelState.zeros(model.num_params)
    batch = Batch(train.inputs, train.labels)
    for _ in range(steps):
        _, g = loss_and_grad(model, state, batch)
        state = sgd_step(state, g, eta)
    return model, state


class TestSynth:
    def test_deterministic(self):
        a = synth_logistic(50, 3, 4, 2.0, seed=9)
        b = synth_logistic(50, 3, 4, 2.0, seed=9)
        assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)

    def test_balanced(self):
        ds = synth_logistic(103, 2, 4, 1.0, seed=0)
        counts = np.bincount(ds.labels, minlength=4)
        assert counts.max() - counts.min() <= 1

    def test_pairwise_mean_distance(self):
        ds = synth_logistic(40_000, 5, 3, 4.0, seed=1)
        means = np.stack([ds.inputs[ds.labels == c].mean(0) for c in range(3)])
        for a in range(3):
            for b in range(a + 1, 3):
                assert np.linalg.norm(means[a] - means[b]) == pytest.approx(4.0, abs=0.1)

    def test_no_separation_is_chance(self):
        train, test = synth_logistic(6000, 5, 4, 0.0, seed=2).split(3000)
        model, state = train_logistic(train)
        _, acc = evaluate(model, state, test)
        assert abs(acc - 0.25) <= 0.05

    def test_wide_separation_is_learnable(self):
        train, test = synth_logistic(2000, 5, 2, 10.0, seed=3).split(1000)
        model, state = train_logistic(train)
        _, acc = evaluate(model, state, test)
        assert acc > 0.99

    @pytest.mark.parametrize("args", [(1, 2, 2), (10, 0, 2), (10, 2, 1)])
    def test_invalid(self, args):
        n, p, C = args
        with pytest.raises(ValueError):
            synth_logistic(n, p, C, 1.0, seed=0)


class TestParseIdx:
    def test_images(self):
        arr = parse_idx(idx_images(2, 28, 28))
        assert arr.shape == (2, 784)
        assert arr.min() >= 0 and arr.max() <= 1
        assert arr[0, 255] == 1.0 and arr[0, 1] == pytest.approx(1 / 255)

    def test_row_major(self):
        arr = parse_idx(idx_images(1, 2, 3, bytes([0, 1, 2, 3, 4, 5])))
        assert np.allclose(arr * 255, [[0, 1, 2, 3, 4, 5]])

    def test_labels(self):
        assert parse_idx(idx_labels([3, 1, 4])).tolist() == [3, 1, 4]

    def test_unknown_magic(self):
        with pytest.raises(IdxParseError, match="unknown IDX magic"):
            parse_idx(struct.pack(">II", 0x999, 0))

    def test_truncated_payload(self):
        with pytest.raises(IdxParseError, match="truncated"):
            parse_idx(idx_images(2, 28, 28)[:-1])

    @pytest.mark.parametrize("cut", [0, 3, 6, 11])
    def test_truncated_header(self, cut):
        with pytest.raises(IdxParseError, match="truncated"):
            parse_idx(idx_images(1, 2, 2)[:cut])

    def test_dimension_overflow(self):
        data = struct.pack(">IIII", 0x803, 2**31, 2**16, 2**16)
        with pytest.raises(IdxParseError, match="overflow"):
            parse_idx(data)

    def test_trailing_bytes(self):
        with pytest.raises(IdxParseError):
            parse_idx(idx_labels([1, 2]) + b"\x00")

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=64))
    def test_total_over_garbage(self, blob):
        try:
            parse_idx(blob)
        except IdxParseError:
            pass

    def test_load_pair(self, tmp_path):
        (tmp_path / "img").write_bytes(idx_images(3, 2, 2))
        (tmp_path / "lab").write_bytes(idx_labels([0, 9, 5]))
        ds = load_idx_dataset(tmp_path / "img", tmp_path / "lab")
        assert ds.inputs.shape == (3, 4) and ds.labels.tolist() == [0, 9, 5]

    def test_load_count_mismatch(self, tmp_path):
        (tmp_path / "img").write_bytes(idx_images(3, 2, 2))
        (tmp_path / "lab").write_bytes(idx_labels([0, 9]))
        with pytest.raises(IdxParseError):
            load_idx_dataset(tmp_path / "img", tmp_path / "lab")


def assert_cover(shards, n):
    joined = np.concatenate([s.indices for s in shards])
    assert np.array_equal(np.sort(joined), np.arange(n))


class TestPartition:
    def test_iid_equal(self):
        ds = synth_logistic(100, 2, 2, 1.0, seed=0)
        shards = partition(ds, 10, "iid", seed=1)
        assert [len(s) for s in shards] == [10] * 10
        assert_cover(shards, 100)

    def test_iid_remainder_goes_first(self):
        ds = synth_logistic(23, 2, 2, 1.0, seed=0)
        assert [len(s) for s in partition(ds, 5, "iid", seed=1)] == [5, 5, 5, 4, 4]

    def test_two_class_mnist_shape(self):
        ds = synth_logistic(6000, 2, 10, 1.0, seed=4)
        shards = partition(ds, 100, "two_class", seed=2024)
        assert_cover(shards, 6000)
        assert all(len(s.classes) == 2 for s in shards)
        assert sorted(s.owner for s in shards) == list(range(100))

    def test_inventory_matches_labels(self):
        ds = synth_logistic(500, 2, 5, 1.0, seed=5)
        for s in partition(ds, 20, "two_class", seed=0):
            assert s.classes == frozenset(ds.labels[s.indices].tolist())

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(2, 12),
        st.integers(1, 40),
        st.integers(0, 2**32 - 1),
        st.lists(st.integers(0, 11), min_size=1, max_size=300),
    )
    def test_two_class_at_most_two(self, C, N, seed, raw):
        labels = np.array([x % C for x in raw])
        n = labels.size
        ds = Dataset(np.zeros((n, 1)), labels, C)
        try:
            shards = partition(ds, N, "two_class", seed)
        except ValueError:
            present = len(set(labels.tolist()))
            assert 2 * N > n or present > 2 * N
            return
        assert_cover(shards, n)
        assert max(len(s.classes) for s in shards) <= 2

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 50), st.integers(0, 2**32 - 1))
    def test_iid_cover(self, n, N, seed):
        ds = Dataset(np.zeros((n, 1)), np.zeros(n, dtype=int), 2)
        if N > n:
            with pytest.raises(ValueError):
                partition(ds, N, "iid", seed)
            return
        shards = partition(ds, N, "iid", seed)
        assert_cover(shards, n)
        sizes = [len(s) for s in shards]
        assert max(sizes) - min(sizes) <= 1

    def test_deterministic(self):
        ds = synth_logistic(300, 2, 3, 1.0, seed=6)
        a = partition(ds, 7, "two_class", seed=3)
        b = partition(ds, 7, "two_class", seed=3)
        assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))

    def test_errors(self):
        ds = synth_logistic(10, 2, 2, 1.0, seed=0)
        with pytest.raises(ValueError):
            partition(ds, 11, "iid", 0)
        with pytest.raises(ValueError):
            partition(ds, 0, "iid", 0)
        with pytest.raises(ValueError):
            partition(ds, 2, "shuffled", 0)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), [0, 3], 3)
