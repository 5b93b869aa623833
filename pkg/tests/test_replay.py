"""Episode buffer: capacity, eviction order and weighted sampling without replacement."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpursuit.replay import EpisodeTransitionSet, GlobalBuffer, sample_indices, sample_personalized


def episode(tag=0.0, length=3, agent=0):
    return EpisodeTransitionSet(agent=agent, states=np.full((length, 2), tag), actions=np.zeros(length, int),
                                rewards=np.full(length, tag), next_states=np.full((length, 2), tag),
                                terminals=np.eye(length, dtype=bool)[-1])


class TestEpisode:
    def test_validation(self):
        with pytest.raises(ValueError):
            EpisodeTransitionSet(0, np.zeros((0, 2)), [], [], np.zeros((0, 2)), [])
        with pytest.raises(ValueError):
            EpisodeTransitionSet(0, np.zeros((3, 2)), [0, 0, 0], [1.0, 2.0], np.zeros((3, 2)), [0, 0, 1])

    def test_summary(self):
        e = episode(2.0, length=4)
        s = e.summary()
        assert s["length"] == 4 and s["total_reward"] == 8.0 and s["mean_reward"] == 2.0


class TestBuffer:
    def test_append_and_evict(self):
        buf = GlobalBuffer(4)
        buf.append(episode(0))
        assert len(buf) == 1 and not buf.full
        for i in range(1, 5):
            buf.append(episode(i))
        assert len(buf) == 4 and buf.full
        assert [e.rewards[0] for e in buf] == [1, 2, 3, 4]

    def test_ids_are_chronological(self):
        buf = GlobalBuffer(3)
        for i in range(7):
            buf.append(episode(i))
        assert [e.entry_id for e in buf] == [4, 5, 6]

    def test_capacity_must_be_positive(self):
        with pytest.raises(ValueError):
            GlobalBuffer(0)

    @given(st.integers(1, 10), st.integers(0, 40))
    @settings(max_examples=50, deadline=None)
    def test_size_never_exceeds_capacity(self, cap, n):
        buf = GlobalBuffer(cap)
        for i in range(n):
            buf.append(episode(i))
            assert len(buf) <= cap
        assert [e.entry_id for e in buf] == list(range(max(0, n - cap), n))

    def test_snapshot(self):
        buf = GlobalBuffer(4)
        for i in range(3):
            buf.append(episode(i, length=i + 1))
        snap = buf.snapshot()
        assert snap["size"] == 3 and snap["max_cap"] == 4
        assert snap["mean_length"] == 2.0
        assert [r["entry_id"] for r in snap["entries"]] == [0, 1, 2]


class TestSampling:
    def _buf(self, n):
        buf = GlobalBuffer(n)
        for i in range(n):
            buf.append(episode(i))
        return buf

    def test_one_hot(self):
        buf = self._buf(4)
        for seed in range(10):
            got = sample_personalized(buf, [0, 0, 1.0, 0], 1, np.random.default_rng(seed))
            assert got[0] is buf[2]

    def test_uniform_all_entries(self):
        buf = self._buf(4)
        idx = sample_indices(buf, [0.25] * 4, 4, np.random.default_rng(0))
        assert sorted(idx) == [0, 1, 2, 3]

    def test_reproducible(self):
        buf = self._buf(8)
        P = np.arange(1, 9) / 36
        a = sample_indices(buf, P, 5, np.random.default_rng(3))
        b = sample_indices(buf, P, 5, np.random.default_rng(3))
        assert a == b

    @pytest.mark.parametrize("P,k", [([0.5, 0.6, -0.1, 0.0], 1), ([0.3, 0.3, 0.3, 0.3], 1),
                                     ([0.25] * 4, 5), ([0.25] * 4, 0), ([0.5, 0.5], 1), ([np.nan, 1, 0, 0], 1)])
    def test_invalid(self, P, k):
        with pytest.raises(ValueError):
            sample_indices(self._buf(4), P, k, np.random.default_rng(0))

    def test_single_draw_frequencies(self):
        buf = self._buf(4)
        rng = np.random.default_rng(11)
        P = [0.7, 0.1, 0.1, 0.1]
        counts = np.zeros(4)
        for _ in range(20000):
            counts[sample_indices(buf, P, 1, rng)[0]] += 1
        np.testing.assert_allclose(counts / counts.sum(), P, atol=0.01)

    def test_ordered_pairs_follow_draw_and_renormalize(self):
        # oracle: P(i then j) = P_i * P_j / (1 - P_i)
        buf = self._buf(3)
        P = np.array([0.5, 0.3, 0.2])
        rng = np.random.default_rng(4)
        counts = {}
        n = 20000
        for _ in range(n):
            key = tuple(sample_indices(buf, P, 2, rng))
            counts[key] = counts.get(key, 0) + 1
        for i, j in itertools.permutations(range(3), 2):
            want = P[i] * P[j] / (1 - P[i])
            assert abs(counts.get((i, j), 0) / n - want) < 0.015

    def test_zero_mass_entries_drawn_only_when_forced(self):
        buf = self._buf(3)
        idx = sample_indices(buf, [1.0, 0.0, 0.0], 3, np.random.default_rng(0))
        assert idx[0] == 0 and sorted(idx) == [0, 1, 2]

    @given(st.integers(1, 12), st.data())
    @settings(max_examples=60, deadline=None)
    def test_distinct_and_counted(self, n, data):
        buf = self._buf(n)
        w = np.array(data.draw(st.lists(st.floats(0.01, 10), min_size=n, max_size=n)))
        k = data.draw(st.integers(1, n))
        idx = sample_indices(buf, w / w.sum(), k, np.random.default_rng(data.draw(st.integers(0, 999))))
        assert len(idx) == k == len(set(idx))
        assert all(0 <= i < n for i in idx)
