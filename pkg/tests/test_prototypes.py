import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
import hypothesis.extra.numpy as nph

from protodistill.autoencoder import LatentBatch
from protodistill.numerics import stream
from protodistill.prototypes import (
    KMeansState, PrototypeSet, assign, fit_category, init_centers, learn_prototypes, sse, update,
)


def brute_nearest(centers, z):
    best, best_d = 0, None
    for c in range(len(centers)):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(z, centers[c]))
        if best_d is None or d < best_d:
            best, best_d = c, d
    return best


def lloyd(points, centers, iters=300):
    centers = centers.copy()
    for _ in range(iters):
        lab = np.array([brute_nearest(centers, p) for p in points])
        new = np.array([points[lab == c].mean(axis=0) if np.any(lab == c) else centers[c]
                        for c in range(len(centers))])
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def blobs(seed, means, n=200, std=0.5):
    """Gaussian blobs whose sample means equal ``means`` exactly."""
    rng = np.random.default_rng(seed)
    parts = []
    for m in means:
        noise = rng.normal(0.0, std, size=(n, len(m)))
        parts.append(m + (noise - noise.mean(axis=0)))
    return np.concatenate(parts), n, std


class TestInit:
    def test_all_points_is_permutation(self):
        pts = np.arange(20.0).reshape(10, 2)
        st_ = init_centers(pts, 10, stream(1, "i"))
        assert sorted(map(tuple, st_.centers)) == sorted(map(tuple, pts))
        assert np.array_equal(st_.counts, np.zeros(10))

    def test_deterministic(self):
        pts = np.random.default_rng(0).normal(size=(30, 3))
        a = init_centers(pts, 5, stream(2, "i"))
        b = init_centers(pts, 5, stream(2, "i"))
        assert np.array_equal(a.centers, b.centers)

    def test_single_center_is_a_point(self):
        pts = np.random.default_rng(0).normal(size=(30, 3))
        c = init_centers(pts, 1, stream(2, "i")).centers[0]
        assert any(np.array_equal(c, p) for p in pts)

    def test_too_many(self):
        with pytest.raises(ValueError, match="cannot pick 4"):
            init_centers(np.zeros((3, 2)), 4, stream(0, "i"))


class TestAssign:
    def test_forced(self):
        s = KMeansState(np.array([[0.0, 0.0], [10.0, 10.0]]), np.zeros(2, int))
        assert assign(s, np.array([1.0, 1.0])) == 0

    def test_tie_goes_low(self):
        s = KMeansState(np.array([[0.0, 0.0], [2.0, 0.0]]), np.zeros(2, int))
        assert assign(s, np.array([1.0, 5.0])) == 0

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_exhaustive_scan(self, seed):
        rng = np.random.default_rng(seed)
        centers = rng.normal(size=(5, 4))
        s = KMeansState(centers, np.zeros(5, int))
        for z in rng.normal(size=(50, 4)):
            assert assign(s, z) == brute_nearest(centers, z)


class TestUpdate:
    def test_fresh_center_jumps(self):
        s = KMeansState(np.array([[5.0, 5.0]]), np.zeros(1, int))
        update(s, 0, np.array([1.0, -2.0]))
        assert np.array_equal(s.centers[0], [1.0, -2.0]) and s.counts[0] == 1

    def test_half_step(self):
        s = KMeansState(np.array([[2.0, 2.0]]), np.array([1]))
        update(s, 0, np.array([4.0, 4.0]))
        assert np.array_equal(s.centers[0], [3.0, 3.0])

    @given(nph.arrays(np.float64, st.tuples(st.integers(1, 60), st.integers(1, 4)),
                      elements=st.floats(-1e3, 1e3)))
    def test_running_mean_exact(self, pts):
        s = KMeansState(np.full((1, pts.shape[1]), 7.0), np.zeros(1, int))
        running = np.zeros(pts.shape[1])
        for i, z in enumerate(pts):
            update(s, 0, z)
            running = running + (z - running) / (i + 1)
        np.testing.assert_allclose(s.centers[0], running, rtol=0, atol=1e-9)
        np.testing.assert_allclose(s.centers[0], pts.mean(axis=0), rtol=1e-12, atol=1e-9)

    @given(nph.arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
                      elements=st.floats(-100, 100)),
           nph.arrays(np.float64, 3, elements=st.floats(-100, 100)),
           st.integers(0, 5))
    def test_convex_containment(self, pts, c0, prior):
        s = KMeansState(c0[None].copy(), np.array([prior]))
        lo = np.minimum(c0, pts.min(axis=0))
        hi = np.maximum(c0, pts.max(axis=0))
        for z in pts:
            update(s, 0, z)
            assert np.all(s.centers[0] >= lo - 1e-9) and np.all(s.centers[0] <= hi + 1e-9)


class TestFit:
    def test_single_center_is_mean(self):
        pts = np.random.default_rng(3).normal(size=(137, 5))
        s = fit_category(pts, 1, passes=5, batch_size=16, seed=4)
        np.testing.assert_allclose(s.centers[0], pts.mean(axis=0), rtol=0, atol=1e-12)
        assert s.counts[0] == 5 * 137

    @pytest.mark.parametrize("seed", range(20))
    def test_blob_recovery(self, seed):
        means = np.array([[0.0, 0.0, 0.0], [8.0, -8.0, 4.0]])
        pts, n, std = blobs(seed, means)
        s = fit_category(pts, 2, seed=seed)
        order = np.argsort(s.centers[:, 0])
        bound = 3 * std / np.sqrt(n)
        assert np.all(np.abs(s.centers[order] - means) < bound)

    @pytest.mark.parametrize("seed", range(30))
    def test_sse_close_to_lloyd(self, seed):
        means = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0], [6.0, 6.0]])
        pts, _, _ = blobs(seed, means, n=100)
        s0 = init_centers(pts, 4, stream(seed, "kmeans", "init"))
        ref = lloyd(pts, s0.centers)
        s = fit_category(pts, 4, seed=seed)
        assert sse(pts, s.centers) <= 1.10 * sse(pts, ref)

    def test_lifetime_counts(self):
        pts = np.random.default_rng(0).normal(size=(50, 2))
        s = fit_category(pts, 3, passes=4, batch_size=8, seed=0)
        assert s.counts.sum() == 4 * 50
        assert s.seen.sum() == 50

    def test_deterministic(self):
        pts = np.random.default_rng(3).normal(size=(100, 4))
        a = fit_category(pts, 3, seed=2)
        b = fit_category(pts, 3, seed=2)
        assert np.array_equal(a.centers, b.centers)

    def test_empty_cluster_reseeded(self):
        # duplicates guarantee that one initial center can never win a point
        pts = np.array([[0.0, 0.0]] * 10 + [[10.0, 0.0]] * 5)
        s = fit_category(pts, 3, passes=1, batch_size=4, seed=0)
        assert np.all(np.isfinite(s.centers))
        assert sse(pts, s.centers) == 0.0


class TestLearnPrototypes:
    def _latents(self, K=4, n=30, d=6, seed=0):
        rng = np.random.default_rng(seed)
        labels = np.arange(K * n) % K
        z = rng.normal(size=(K * n, d)) + labels[:, None] * 3.0
        return LatentBatch(z, labels)

    def test_counts(self):
        p = learn_prototypes(self._latents(), K=4, C=10, seed=1)
        assert len(p) == 40
        assert np.array_equal(np.bincount(p.labels), [10] * 4)

    def test_single_prototype_is_category_mean(self):
        lat = self._latents()
        p = learn_prototypes(lat, K=4, C=1, seed=1)
        for k in range(4):
            np.testing.assert_allclose(p.of_category(k)[0], lat.of_category(k).mean(axis=0),
                                       atol=1e-12, rtol=0)

    def test_category_order_independent(self):
        lat = self._latents()
        p = learn_prototypes(lat, K=4, C=3, seed=2)
        # relabel categories in reverse; each category's prototypes must follow it
        rev = LatentBatch(lat.z, 3 - lat.labels)
        q = learn_prototypes(rev, K=4, C=3, seed=2)
        for k in range(4):
            a = fit_category(lat.of_category(k), 3, seed=2, key=k)
            assert np.array_equal(p.of_category(k), a.centers)
        # same points under a different category key draw a different substream,
        # but the fit for a key never depends on the other categories
        assert np.array_equal(q.of_category(0), fit_category(lat.of_category(3), 3, seed=2, key=0).centers)

    def test_undersized_category(self):
        lat = LatentBatch(np.zeros((5, 2)), [0, 0, 0, 1, 1])
        with pytest.raises(ValueError, match="category 1 has 2 latents"):
            learn_prototypes(lat, K=2, C=3)

    def test_state_dict_round_trip(self):
        p = learn_prototypes(self._latents(), K=4, C=2, seed=1)
        sd = p.state_dict()
        assert "proto.3.1" in sd
        q = PrototypeSet.from_state_dict(sd)
        assert np.array_equal(q.centers, p.centers) and np.array_equal(q.labels, p.labels)
