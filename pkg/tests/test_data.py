import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsel import data
from fedsel.errors import ConfigError, IdxFormatError


def small_spec(**overrides):
    base = dict(alpha=1.0, beta=1.0, clients=5, total_samples=500, min_shard=20, seed=11)
    base.update(overrides)
    return data.SyntheticSpec(**base)


class TestPowerlawSizes:
    def test_hand_computed_zipf_allocation(self):
        # Oracle: weights k**-1.5 normalized, scaled to 300, floored, deficit
        # of 1 after flooring goes to client 0.
        sizes = data.powerlaw_sizes(3, 300, 1.5, 10)
        weights = np.array([1.0, 2.0**-1.5, 3.0**-1.5])
        raw = 300 * weights / weights.sum()
        assert np.floor(raw).astype(int).tolist() == [194, 68, 37]
        assert sizes.tolist() == [195, 68, 37]
        assert sizes.sum() == 300

    def test_sum_and_floor_and_monotone(self):
        for clients, total, exponent, floor in [(30, 6000, 1.5, 25), (7, 70, 3.0, 10), (10, 1000, 0.5, 5)]:
            sizes = data.powerlaw_sizes(clients, total, exponent, floor)
            assert sizes.sum() == total
            assert sizes.min() >= floor
            assert np.all(np.diff(sizes) <= 0)

    def test_exact_minimum_budget(self):
        sizes = data.powerlaw_sizes(4, 40, 2.0, 10)
        assert sizes.tolist() == [10, 10, 10, 10]

    def test_total_too_small(self):
        with pytest.raises(ConfigError):
            data.powerlaw_sizes(5, 40, 1.5, 10)


class TestGenerateSynthetic:
    def test_benchmark_shape(self):
        ds = data.generate_synthetic(
            data.SyntheticSpec(alpha=1.0, beta=1.0, clients=30, total_samples=6000, min_shard=25, seed=7)
        )
        assert ds.num_clients == 30
        assert ds.feature_dim == 60
        assert ds.num_classes == 10
        assert ds.sizes.sum() == 6000

    def test_deterministic(self):
        a = data.generate_synthetic(small_spec())
        b = data.generate_synthetic(small_spec())
        for sa, sb in zip(a.shards, b.shards):
            assert np.array_equal(sa.data.features, sb.data.features)
            assert np.array_equal(sa.data.labels, sb.data.labels)
        assert np.array_equal(a.test_set.features, b.test_set.features)

    def test_labels_recomputable_from_generator_params(self):
        ds, params = data.generate_synthetic(small_spec(), return_params=True)
        for shard, client in zip(ds.shards, params["clients"]):
            logits = shard.data.features @ client["weights"] + client["biases"]
            assert np.array_equal(np.argmax(logits, axis=1), shard.data.labels)

    def test_zero_spread_hyperparameters(self):
        _, params = data.generate_synthetic(small_spec(alpha=0.0, beta=0.0), return_params=True)
        assert np.all(params["param_centers"] == 0.0)
        assert np.all(params["input_shifts"] == 0.0)

    def test_fractions_sum_to_one(self):
        ds = data.generate_synthetic(small_spec())
        assert abs(ds.fractions.sum() - 1.0) < 1e-12
        assert np.all(ds.fractions > 0)

    def test_seed_changes_data(self):
        a = data.generate_synthetic(small_spec(seed=1))
        b = data.generate_synthetic(small_spec(seed=2))
        assert not np.array_equal(a.shards[0].data.features, b.shards[0].data.features)

    def test_test_set_is_quarter_of_train(self):
        ds = data.generate_synthetic(small_spec())
        assert len(ds.test_set) == sum(s.size // 4 for s in ds.shards)


class TestFractions:
    def test_symmetric(self):
        shards = [
            data.ClientShard(0, data.SampleSet(np.zeros((50, 2)), np.zeros(50, dtype=int))),
            data.ClientShard(1, data.SampleSet(np.zeros((50, 2)), np.zeros(50, dtype=int))),
        ]
        assert data.fractions(shards).tolist() == [0.5, 0.5]

    def test_hand_arithmetic(self):
        shards = [
            data.ClientShard(i, data.SampleSet(np.zeros((n, 2)), np.zeros(n, dtype=int)))
            for i, n in enumerate([10, 30, 60])
        ]
        assert data.fractions(shards).tolist() == [0.1, 0.3, 0.6]

    def test_single_client(self):
        shards = [data.ClientShard(0, data.SampleSet(np.zeros((100, 2)), np.zeros(100, dtype=int)))]
        assert data.fractions(shards).tolist() == [1.0]


def make_pool(counts: dict[int, int], dim=4, seed=0) -> data.SampleSet:
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c, dtype=np.int64) for c, n in counts.items()])
    return data.SampleSet(rng.normal(size=(labels.size, dim)), labels)


class TestPartitionDirichlet:
    def test_disjoint_cover(self):
        pool = make_pool({0: 120, 1: 80, 2: 55})
        ds = data.partition_dirichlet(pool, clients=4, alpha=0.5, min_shard=1, seed=3)
        rows = np.concatenate([s.data.features for s in ds.shards])
        assert rows.shape[0] == len(pool)
        # multisets equal: sort rows lexicographically on both sides
        key = lambda arr: arr[np.lexsort(arr.T)]
        assert np.array_equal(key(rows), key(pool.features))

    def test_deterministic(self):
        pool = make_pool({0: 100, 1: 100})
        a = data.partition_dirichlet(pool, clients=3, alpha=1.0, min_shard=1, seed=5)
        b = data.partition_dirichlet(pool, clients=3, alpha=1.0, min_shard=1, seed=5)
        for sa, sb in zip(a.shards, b.shards):
            assert np.array_equal(sa.data.features, sb.data.features)

    def test_replay_oracle(self):
        # Reproduce the exact split by replaying the documented RNG sequence:
        # per ascending class, one permutation then one Dirichlet draw.
        pool = make_pool({0: 100, 1: 100})
        alpha, clients, seed = 1.0, 2, 5
        ds = data.partition_dirichlet(pool, clients=clients, alpha=alpha, min_shard=1, seed=seed)

        rng = np.random.default_rng(seed)
        expected = [[] for _ in range(clients)]
        for c in (0, 1):
            idx = rng.permutation(np.flatnonzero(pool.labels == c))
            props = rng.dirichlet(np.full(clients, alpha))
            boundaries = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for cid, chunk in enumerate(np.split(idx, boundaries)):
                expected[cid].append(chunk)
        for cid, shard in enumerate(ds.shards):
            want = pool.subset(np.concatenate(expected[cid]))
            assert np.array_equal(shard.data.features, want.features)
            assert np.array_equal(shard.data.labels, want.labels)

    def test_concentration_limit_matches_global_histogram(self):
        pool = make_pool({c: 1000 for c in range(10)})
        ds = data.partition_dirichlet(pool, clients=5, alpha=1e6, min_shard=1, seed=0)
        global_hist = np.bincount(pool.labels, minlength=10) / len(pool)
        for shard in ds.shards:
            hist = np.bincount(shard.data.labels, minlength=10) / shard.size
            assert 0.5 * np.abs(hist - global_hist).sum() < 0.05

    def test_high_skew_setting_produces_skewed_shards(self):
        pool = make_pool({c: 300 for c in range(10)})
        ds = data.partition_dirichlet(pool, clients=100, alpha=0.3, min_shard=1, seed=1)
        assert ds.num_clients == 100
        # under heavy skew shards concentrate in few classes; a uniform
        # partition would put the mean dominant-class share near 0.1
        dominant = [
            np.bincount(s.data.labels, minlength=10).max() / s.size
            for s in ds.shards
            if s.size >= 10
        ]
        assert np.mean(dominant) > 0.3

    def test_infeasible_min_shard(self):
        pool = make_pool({0: 20})
        with pytest.raises(ConfigError):
            data.partition_dirichlet(pool, clients=10, alpha=0.05, min_shard=5, seed=0, max_attempts=20)


class TestIdx:
    def test_hand_built_fixture(self, tmp_path):
        images = tmp_path / "img.idx"
        labels = tmp_path / "lab.idx"
        images.write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 255, 0, 255]))
        labels.write_bytes(struct.pack(">II", 0x801, 1) + bytes([7]))
        got = data.load_idx(images, labels)
        assert len(got) == 1
        assert got.features.tolist() == [[0.0, 1.0, 0.0, 1.0]]
        assert got.labels.tolist() == [7]

    def test_empty_file(self, tmp_path):
        images = tmp_path / "img.idx"
        labels = tmp_path / "lab.idx"
        images.write_bytes(b"")
        labels.write_bytes(b"")
        with pytest.raises(IdxFormatError, match="truncated header"):
            data.load_idx(images, labels)

    def test_bad_magic(self, tmp_path):
        images = tmp_path / "img.idx"
        images.write_bytes(struct.pack(">IIII", 0xDEAD, 1, 2, 2) + bytes(4))
        (tmp_path / "lab.idx").write_bytes(struct.pack(">II", 0x801, 1) + bytes([0]))
        with pytest.raises(IdxFormatError, match="bad magic"):
            data.load_idx(images, tmp_path / "lab.idx")

    def test_count_mismatch(self, tmp_path):
        images = tmp_path / "img.idx"
        labels = tmp_path / "lab.idx"
        images.write_bytes(struct.pack(">IIII", 0x803, 2, 1, 1) + bytes([1, 2]))
        labels.write_bytes(struct.pack(">II", 0x801, 3) + bytes([0, 1, 2]))
        with pytest.raises(IdxFormatError, match="does not match"):
            data.load_idx(images, labels)

    def test_truncated_pixels(self, tmp_path):
        images = tmp_path / "img.idx"
        images.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(3))
        (tmp_path / "lab.idx").write_bytes(struct.pack(">II", 0x801, 2) + bytes([0, 1]))
        with pytest.raises(IdxFormatError, match="truncated image data"):
            data.load_idx(images, tmp_path / "lab.idx")

    def test_save_load_roundtrip_with_gzip(self, tmp_path):
        import gzip

        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(5, 3, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, size=5, dtype=np.uint8)
        data.save_idx(tmp_path / "img.idx", tmp_path / "lab.idx", images, labels)
        plain = data.load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")
        assert np.allclose(plain.features, images.reshape(5, 9) / 255.0)
        assert np.array_equal(plain.labels, labels)

        (tmp_path / "img.idx.gz").write_bytes(gzip.compress((tmp_path / "img.idx").read_bytes()))
        (tmp_path / "lab.idx.gz").write_bytes(gzip.compress((tmp_path / "lab.idx").read_bytes()))
        zipped = data.load_idx(tmp_path / "img.idx.gz", tmp_path / "lab.idx.gz")
        assert np.array_equal(zipped.features, plain.features)
        assert np.array_equal(zipped.labels, plain.labels)


class TestCache:
    def test_roundtrip(self, tmp_path):
        ds = data.generate_synthetic(small_spec())
        data.save_cache(ds, tmp_path / "ds.bin")
        back = data.load_cache(tmp_path / "ds.bin")
        assert back.num_clients == ds.num_clients
        assert back.num_classes == ds.num_classes
        for sa, sb in zip(ds.shards, back.shards):
            assert sa.client_id == sb.client_id
            assert np.array_equal(sa.data.features, sb.data.features)
            assert np.array_equal(sa.data.labels, sb.data.labels)
        assert np.array_equal(ds.test_set.features, back.test_set.features)

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "junk.bin").write_bytes(b"not a cache")
        with pytest.raises(ValueError, match="not a fedsel dataset cache"):
            data.load_cache(tmp_path / "junk.bin")


@settings(max_examples=30, deadline=None)
@given(
    sizes=st.lists(st.integers(min_value=1, max_value=40), min_size=1, max_size=8),
)
def test_fraction_vector_properties(sizes):
    shards = [
        data.ClientShard(i, data.SampleSet(np.zeros((n, 2)), np.zeros(n, dtype=int)))
        for i, n in enumerate(sizes)
    ]
    p = data.fractions(shards)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p > 0)
    assert np.allclose(p * sum(sizes), sizes)
