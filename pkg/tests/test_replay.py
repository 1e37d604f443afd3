import numpy as np
import pytest

from bitweave.replay import PrioritizedReplay, SumTree, Transition


def tr(i):
    z = np.zeros((2, 2), np.int8)
    return Transition(z, i, float(i), z, False, np.ones(2, bool))


def test_sum_tree_prefix_search():
    t = SumTree(5)
    for i, v in enumerate([1.0, 2.0, 0.0, 3.0, 4.0]):
        t.update(i, v)
    assert t.total == 10.0
    # cumulative bounds 1, 3, 3, 6, 10
    assert [t.find(m) for m in (0.0, 0.99, 1.0, 2.99, 3.0, 5.99, 6.0, 9.99)] == [0, 0, 1, 1, 3, 3, 4, 4]
    t.update(1, 0.5)
    assert t.total == 8.5 and t[1] == 0.5


def test_sum_tree_bounds():
    with pytest.raises(ValueError):
        SumTree(0)
    with pytest.raises(IndexError):
        SumTree(3).update(3, 1.0)


def test_new_entries_get_max_priority():
    r = PrioritizedReplay(8, alpha=0.6)
    r.add(tr(0))
    r.update_priorities([0], [3.0])
    r.add(tr(1))
    assert r.tree[1] == pytest.approx((3.0 + 1e-6) ** 0.6)


def test_sampling_frequencies_follow_priorities():
    r = PrioritizedReplay(4, alpha=0.5, seed=1)
    for i in range(4):
        r.add(tr(i))
    r.update_priorities(range(4), [1.0, 4.0, 9.0, 16.0])
    expect = np.sqrt(np.array([1.0, 4.0, 9.0, 16.0]) + 1e-6)
    expect /= expect.sum()
    np.testing.assert_allclose(r.probabilities(), expect, rtol=1e-12)
    counts = np.zeros(4)
    for _ in range(2000):
        idx, _, _ = r.sample(5, beta=0.4)
        np.add.at(counts, idx, 1)
    np.testing.assert_allclose(counts / counts.sum(), expect, atol=0.02)


def test_importance_weights():
    r = PrioritizedReplay(4, alpha=1.0, priority_eps=0.0, seed=0)
    for i in range(4):
        r.add(tr(i))
    r.update_priorities(range(4), [1.0, 1.0, 1.0, 5.0])
    idx, batch, w = r.sample(64, beta=1.0)
    probs = np.array([1, 1, 1, 5])[idx] / 8.0
    expect = (4 * probs) ** -1.0
    np.testing.assert_allclose(w, expect / expect.max(), rtol=1e-12)
    assert [t.action for t in batch] == list(idx)


def test_ring_buffer_overwrites_oldest():
    r = PrioritizedReplay(3, seed=0)
    for i in range(5):
        r.add(tr(i))
    assert len(r) == 3
    assert sorted(t.action for t in r.data[:3]) == [2, 3, 4]


def test_empty_sample_rejected():
    with pytest.raises(ValueError):
        PrioritizedReplay(3).sample(2)
