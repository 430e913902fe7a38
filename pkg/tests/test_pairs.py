import numpy as np
import pytest

from scene_context.pairs import (
    AffinityMatrix,
    PairSampler,
    build_affinity,
    default_rank_bound,
    load_affinity,
    load_pairs,
    neighbor_order,
    rank_of,
    sample_pairs,
    save_affinity,
    save_pairs,
)
import oracles


def random_distances(rng, n):
    dist = rng.uniform(0.1, 10.0, size=(n, n))
    dist = (dist + dist.T) / 2.0
    np.fill_diagonal(dist, 0.0)
    return dist


class TestBuildAffinity:
    def test_rows_sum_to_k(self):
        rng = np.random.default_rng(1)
        for _ in range(6):
            n = int(rng.integers(4, 30))
            k = int(rng.integers(1, n - 1))
            affinity = build_affinity(random_distances(rng, n), k)
            np.testing.assert_array_equal(affinity.entries.sum(axis=1), np.full(n, k))
            assert np.all(np.diag(affinity.entries) == 0)

    def test_three_node_example(self):
        dist = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [2.0, 3.0, 0.0]])
        affinity = build_affinity(dist, k_a=1)
        assert affinity.entries[0, 1] == 1
        assert affinity.entries[0, 2] == 0

    def test_ties_resolve_by_ascending_index(self):
        dist = np.ones((4, 4))
        np.fill_diagonal(dist, 0.0)
        affinity = build_affinity(dist, k_a=2)
        np.testing.assert_array_equal(affinity.entries[0], [0, 1, 1, 0])

    def test_rejects_asymmetric_or_offset_diagonal(self):
        bad = np.array([[0.0, 1.0], [2.0, 0.0]])
        with pytest.raises(ValueError, match="symmetric"):
            build_affinity(bad, 1)
        bad = np.array([[0.5, 1.0], [1.0, 0.0]])
        with pytest.raises(ValueError, match="diagonal"):
            build_affinity(bad, 1)

    def test_k_bounds(self):
        dist = random_distances(np.random.default_rng(0), 5)
        with pytest.raises(ValueError):
            build_affinity(dist, 0)
        with pytest.raises(ValueError):
            build_affinity(dist, 5)


class TestNeighborOrder:
    def test_excludes_self_and_sorts(self):
        rng = np.random.default_rng(9)
        dist = random_distances(rng, 12)
        for i in range(12):
            order = neighbor_order(dist, i)
            assert i not in order
            assert len(order) == 11
            ds = dist[i, order]
            assert np.all(np.diff(ds) >= 0)


class TestRankOf:
    def test_closest_and_farthest(self):
        rng = np.random.default_rng(13)
        dist = random_distances(rng, 9)
        for i in range(9):
            order = neighbor_order(dist, i)
            assert rank_of(dist, i, int(order[0])) == 1
            assert rank_of(dist, i, int(order[-1])) == 8

    def test_agrees_with_sort_oracle(self):
        rng = np.random.default_rng(19)
        dist = random_distances(rng, 8)
        for i in range(8):
            expected = oracles.naive_ranks(dist, i)
            for j, rank in expected.items():
                assert rank_of(dist, i, j) == rank

    def test_ties_rank_by_index(self):
        dist = np.ones((4, 4))
        np.fill_diagonal(dist, 0.0)
        assert rank_of(dist, 3, 0) == 1
        assert rank_of(dist, 3, 1) == 2
        assert rank_of(dist, 3, 2) == 3

    def test_self_rank_undefined(self):
        with pytest.raises(ValueError):
            rank_of(np.zeros((2, 2)), 1, 1)


class TestDefaultRankBound:
    def test_half_floor(self):
        assert default_rank_bound(20) == 10
        assert default_rank_bound(21) == 10
        assert default_rank_bound(7) == 3


class TestPairSampler:
    def test_negatives_stay_in_the_hard_band(self):
        rng = np.random.default_rng(29)
        for _ in range(4):
            n = int(rng.integers(12, 40))
            k = int(rng.integers(1, 5))
            bound = int(rng.integers(k + 2, n - 1))
            dist = random_distances(rng, n)
            sampler = PairSampler(build_affinity(dist, k), dist, bound)
            for i, j in sampler.negatives:
                assert k < rank_of(dist, int(i), int(j)) <= bound

    def test_positive_pool_is_the_affinity(self):
        rng = np.random.default_rng(31)
        dist = random_distances(rng, 15)
        affinity = build_affinity(dist, 3)
        sampler = PairSampler(affinity, dist, 7)
        pool = {(int(i), int(j)) for i, j in sampler.positives}
        marked = {(i, j) for i in range(15) for j in range(15) if affinity.entries[i, j]}
        assert pool == marked

    def test_same_seed_same_batch(self):
        rng = np.random.default_rng(37)
        dist = random_distances(rng, 20)
        affinity = build_affinity(dist, 2)
        first = sample_pairs(affinity, dist, 8, 8, 10, seed=99)
        second = sample_pairs(affinity, dist, 8, 8, 10, seed=99)
        assert first == second

    def test_batch_counts(self):
        rng = np.random.default_rng(41)
        dist = random_distances(rng, 20)
        batch = sample_pairs(build_affinity(dist, 2), dist, 8, 8, 10, seed=0)
        assert len(batch.pairs) == 16
        labels = [label for _, _, label in batch.pairs]
        assert labels.count(1) == 8 and labels.count(0) == 8
        # positives lead the batch
        assert labels == [1] * 8 + [0] * 8

    def test_no_repeats_within_a_batch(self):
        rng = np.random.default_rng(43)
        dist = random_distances(rng, 16)
        sampler = PairSampler(build_affinity(dist, 3), dist, 8)
        batch = sampler.sample(np.random.default_rng(5), 10, 10)
        assert len(set(batch)) == 20

    def test_pool_exhaustion_raises(self):
        rng = np.random.default_rng(47)
        dist = random_distances(rng, 6)
        sampler = PairSampler(build_affinity(dist, 1), dist, 3)
        with pytest.raises(ValueError, match="positives"):
            sampler.sample(np.random.default_rng(0), 100, 1)

    def test_bound_must_exceed_k(self):
        rng = np.random.default_rng(53)
        dist = random_distances(rng, 8)
        affinity = build_affinity(dist, 3)
        with pytest.raises(ValueError):
            PairSampler(affinity, dist, 3)


class TestSerialization:
    def test_affinity_round_trip(self, tmp_path):
        rng = np.random.default_rng(59)
        affinity = build_affinity(random_distances(rng, 10), 4)
        path = tmp_path / "affinity.jsonl"
        save_affinity(path, affinity)
        back = load_affinity(path)
        np.testing.assert_array_equal(back.entries, affinity.entries)
        assert back.k == 4

    def test_pairs_round_trip(self, tmp_path):
        rng = np.random.default_rng(61)
        dist = random_distances(rng, 14)
        batch = sample_pairs(build_affinity(dist, 2), dist, 5, 5, 7, seed=3)
        path = tmp_path / "pairs.jsonl"
        save_pairs(path, batch)
        assert load_pairs(path) == list(batch.pairs)

    def test_affinity_validates_on_load(self, tmp_path):
        path = tmp_path / "affinity.jsonl"
        path.write_text("")
        with pytest.raises(ValueError):
            load_affinity(path)
