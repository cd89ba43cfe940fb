"""Anchor clustering and the located anchor grid."""

import itertools

import numpy as np
import pytest

from ppgn.anchors import (
    AnchorSet,
    build_anchor_set,
    kmeans_anchors,
    run_kmeans,
    wh_iou_distance,
)
from ppgn.errors import InvalidInputError
from ppgn.geometry import Box, iou


class TestWhIouDistance:
    def test_identical_sizes(self):
        assert wh_iou_distance((0.2, 0.2), (0.2, 0.2)) == 0.0

    def test_small_vs_unit(self):
        # IoU = 0.04 / (0.04 + 1.0 - 0.04) = 0.04 -> distance 0.96
        assert wh_iou_distance((0.2, 0.2), (1.0, 1.0)) == pytest.approx(0.96, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = tuple(rng.uniform(0.01, 1.0, size=2))
            b = tuple(rng.uniform(0.01, 1.0, size=2))
            assert wh_iou_distance(a, b) == wh_iou_distance(b, a)

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidInputError):
            wh_iou_distance((0.0, 0.1), (0.2, 0.2))


def _partition_objective(sizes, labels):
    """Objective for a fixed assignment with median-induced centroids."""
    total = 0.0
    for c in (0, 1):
        members = sizes[labels == c]
        centroid = np.median(members, axis=0)
        total += sum(wh_iou_distance(tuple(m), tuple(centroid)) for m in members)
    return total / len(sizes)


class TestKmeans:
    def test_separable_duplicates(self):
        sizes = [(0.1, 0.1)] * 5 + [(0.5, 0.5)] * 5
        got = kmeans_anchors(sizes, 2, seed=0)
        assert got == [(0.1, 0.1), (0.5, 0.5)]

    def test_exact_cover(self):
        distinct = [(0.1, 0.12), (0.2, 0.18), (0.4, 0.35), (0.6, 0.55)]
        sizes = distinct * 3
        got = kmeans_anchors(sizes, 4, seed=1)
        assert sorted(got) == sorted(distinct)
        state = run_kmeans(sizes, 4, seed=1)
        assert state.objective == pytest.approx(0.0, abs=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        sizes = rng.uniform(0.05, 0.5, size=(40, 2))
        a = kmeans_anchors(sizes, 5, seed=3)
        b = kmeans_anchors(sizes, 5, seed=3)
        assert a == b  # bitwise identical

    def test_sorted_ascending_by_area(self):
        rng = np.random.default_rng(10)
        sizes = rng.uniform(0.05, 0.5, size=(60, 2))
        got = kmeans_anchors(sizes, 6, seed=2)
        areas = [w * h for w, h in got]
        assert areas == sorted(areas)

    def test_objective_monotone_on_random_instances(self):
        rng = np.random.default_rng(11)
        for trial in range(50):
            n = int(rng.integers(8, 40))
            k = int(rng.integers(2, min(6, n)))
            sizes = rng.uniform(0.02, 0.8, size=(n, 2))
            state = run_kmeans(sizes, k, seed=trial)
            hist = state.objective_history
            assert len(hist) >= 1
            for prev, nxt in zip(hist, hist[1:]):
                assert nxt <= prev + 1e-12

    def test_rejects_too_few_boxes(self):
        with pytest.raises(InvalidInputError):
            kmeans_anchors([(0.1, 0.1)], 2, seed=0)

    def test_rejects_nonpositive_sizes(self):
        with pytest.raises(InvalidInputError):
            kmeans_anchors([(0.1, 0.1), (0.0, 0.2), (0.3, 0.3)], 2, seed=0)

    def test_local_optimality_against_exhaustive_partitions(self):
        """Every box ends on its nearest centroid, and seeding from the best
        brute-force partition never ends worse than that partition."""
        rng = np.random.default_rng(12)
        for trial in range(10):
            n = int(rng.integers(5, 9))
            sizes = rng.uniform(0.05, 0.8, size=(n, 2))
            state = run_kmeans(sizes, 2, seed=trial)

            dist = np.array([
                [wh_iou_distance(tuple(s), tuple(c)) for c in state.centroids]
                for s in sizes
            ])
            nearest = dist.min(axis=1)
            assigned = dist[np.arange(n), state.assignment]
            np.testing.assert_allclose(assigned, nearest, atol=1e-12)

            best_obj, best_labels = None, None
            for bits in itertools.product((0, 1), repeat=n):
                labels = np.asarray(bits)
                if labels.min() == labels.max():
                    continue
                obj = _partition_objective(sizes, labels)
                if best_obj is None or obj < best_obj:
                    best_obj, best_labels = obj, labels
            seeded = run_kmeans(
                sizes, 2, seed=0,
                init=[
                    np.median(sizes[best_labels == c], axis=0) for c in (0, 1)
                ],
            )
            assert seeded.objective <= best_obj + 1e-12


class TestAnchorSet:
    def test_located_count_full_scale(self):
        priors = [(0.05 * i, 0.05 * i) for i in range(1, 10)]
        aset = build_anchor_set(priors, (8, 16, 32))
        assert len(aset) == 4032

    def test_located_count_toy_scale(self):
        priors = [(0.05 * i, 0.05 * i) for i in range(1, 10)]
        aset = build_anchor_set(priors, (4, 8, 16))
        assert len(aset) == 3 * (16 + 64 + 256)

    def test_first_anchor_is_cell_midpoint(self):
        priors = [(0.1, 0.1)] * 9
        aset = build_anchor_set(priors, (4, 8, 16))
        first = aset.anchor_box(0)
        g = 4  # first scale in the list
        assert first.cx == pytest.approx(0.5 / g)
        assert first.cy == pytest.approx(0.5 / g)

    def test_all_centers_are_cell_midpoints(self):
        priors = [(0.02 * i, 0.03 * i) for i in range(1, 7)]
        aset = build_anchor_set(priors, (2, 4), anchors_per_cell=3)
        for i in range(len(aset)):
            b = aset.anchor_box(i)
            _, row, col = aset.cell_of(i)
            g = aset.grid[i]
            assert b.cx == pytest.approx((col + 0.5) / g)
            assert b.cy == pytest.approx((row + 0.5) / g)

    def test_ordering_scale_major_then_cells_then_priors(self):
        priors = [(0.02 * i, 0.02 * i) for i in range(1, 7)]
        aset = build_anchor_set(priors, (2, 4), anchors_per_cell=3)
        # scale 0 occupies the first 2*2*3 slots
        assert aset.scale_offsets == [0, 12]
        for i in range(12):
            assert aset.cell_of(i)[0] == 0
        # within one cell, consecutive prior indices
        assert aset.flat_index((0, 0, 0), 0) == 0
        assert aset.flat_index((0, 0, 0), 2) == 2
        assert aset.flat_index((0, 0, 1), 0) == 3
        assert aset.flat_index((0, 1, 0), 0) == 6
        assert aset.flat_index((1, 0, 0), 0) == 12
        for i in range(len(aset)):
            cell = aset.cell_of(i)
            assert aset.flat_index(cell, aset.prior_index_of(i)) == i

    def test_smallest_priors_on_finest_grid(self):
        rng = np.random.default_rng(14)
        priors = [tuple(v) for v in rng.uniform(0.05, 0.5, size=(9, 2))]
        aset = build_anchor_set(priors, (4, 8, 16))
        areas_per_scale = [
            [w * h for w, h in chunk] for chunk in aset.priors_per_scale
        ]
        # scales (4, 8, 16): finest grid is index 2 and takes the smallest
        assert max(areas_per_scale[2]) <= min(areas_per_scale[1])
        assert max(areas_per_scale[1]) <= min(areas_per_scale[0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            build_anchor_set([(0.1, 0.1)] * 8, (4, 8, 16))

    def test_iou_with_matches_scalar_route(self):
        rng = np.random.default_rng(15)
        priors = [tuple(v) for v in rng.uniform(0.05, 0.4, size=(6, 2))]
        aset = build_anchor_set(priors, (2, 4), anchors_per_cell=3)
        for _ in range(20):
            w, h = rng.uniform(0.05, 0.4, size=2)
            gt = Box(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2),
                     w, h)
            fast = aset.iou_with(gt)
            slow = [iou(a, gt) for a in aset.located]
            np.testing.assert_allclose(fast, slow, atol=1e-12)
