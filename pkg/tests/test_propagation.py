import numpy as np
import pytest

from ccp.core import angular_similarity, clip_credibility, credibility_adjust, one_hot
from ccp.propagation import BatchContractError, class_similarities, propagate_batch
from oracles import propagate_loops


def random_batch(rng, n, K):
    """Anchors for every class plus random soft/zero credibilities."""
    q = clip_credibility(credibility_adjust(rng.random((n, K))))
    q[rng.random(n) < 0.4] = 0.0
    q[:K] = one_hot(np.arange(K), K)
    return rng.normal(size=(2 * n, 5)), q


def test_single_anchor_per_class_gives_similarity():
    rng = np.random.default_rng(0)
    K = 3
    q = np.vstack([one_hot(np.arange(K), K), np.zeros((1, K))])
    z = rng.normal(size=(8, 4))
    psi = class_similarities(z, q)
    n = 4
    for k in range(K):
        # target view 3 sees anchor k through both of its views
        expected = (angular_similarity(z[3], z[k]) + angular_similarity(z[3], z[k + n])) / 2
        assert psi[3, k] == pytest.approx(expected, abs=1e-12)


def test_fig3_values_through_adjustment():
    # two anchors and a target whose views both sit at similarities (0.99, 0.98)
    K = 2
    q = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    a0 = np.array([1.0, 0.0])
    ang = lambda s: (1 - s) * np.pi
    # target direction t with angle to a0 of ang(0.99); a1 placed at angle ang(0.98) on the other side
    t = np.array([np.cos(ang(0.99)), np.sin(ang(0.99))])
    theta1 = ang(0.99) + ang(0.98)
    a1 = np.array([np.cos(theta1), np.sin(theta1)])
    z = np.vstack([a0, a1, t, a0, a1, t])
    out = propagate_batch(z, q, [2])
    np.testing.assert_allclose(out[0], [0.01, -0.01], atol=1e-12)


def test_matches_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(4, 10))
        K = int(rng.integers(2, 4))
        z, q = random_batch(rng, n, K)
        unl = np.flatnonzero(rng.random(n) < 0.7)
        fast = propagate_batch(z, q, unl)
        slow = propagate_loops(z, q, unl)
        assert np.max(np.abs(fast - slow)) < 1e-10


def test_output_is_raw_credibility():
    rng = np.random.default_rng(2)
    z, q = random_batch(rng, 12, 4)
    out = propagate_batch(z, q, np.arange(12))
    assert np.all(out <= 1.0) and np.all(out >= -1.0)
    per_view = np.stack([credibility_adjust(class_similarities(z, q)[v]) for v in range(24)])
    lo = np.minimum(per_view[:12], per_view[12:])
    hi = np.maximum(per_view[:12], per_view[12:])
    assert np.all(out >= lo - 1e-15) and np.all(out <= hi + 1e-15)


def test_scale_invariance():
    rng = np.random.default_rng(3)
    z, q = random_batch(rng, 8, 3)
    c = rng.uniform(0.1, 10, size=(16, 1))
    np.testing.assert_allclose(propagate_batch(z * c, q, np.arange(8)), propagate_batch(z, q, np.arange(8)), atol=1e-12)


def test_self_view_excluded_twin_included():
    rng = np.random.default_rng(4)
    z, q = random_batch(rng, 6, 2)
    j = 5
    q1 = q.copy()
    q1[j] = [0.0, 0.0]
    q2 = q.copy()
    q2[j] = [0.7, 0.0]
    p1 = class_similarities(z, q1)
    p2 = class_similarities(z, q2)
    # numerator of view j changes only through its twin j+n
    num1 = p1[j, 0] * (q1[:, 0].sum() * 2 - q1[j, 0])
    num2 = p2[j, 0] * (q2[:, 0].sum() * 2 - q2[j, 0])
    assert num2 - num1 == pytest.approx(0.7 * angular_similarity(z[j], z[j + 6]), abs=1e-12)


def test_missing_class_is_contract_error():
    z = np.random.default_rng(5).normal(size=(6, 3))
    q = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(BatchContractError) as err:
        propagate_batch(z, q, [2])
    assert err.value.cls == 1
