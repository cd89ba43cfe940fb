"""Anchor priors from IoU k-means and their expansion over the feature grids.

Priors are clustered from training-set box sizes with ``1 - IoU`` of
co-centered boxes as the distance. Each grid scale receives a contiguous
chunk of the area-sorted priors: the smallest priors go to the finest grid,
following detection convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .geometry import Box, Cell

KMEANS_MAX_ITERS = 100


def wh_iou_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    """1 - IoU of two boxes co-centered at the origin."""
    aw, ah = a
    bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise InvalidInputError(f"box sizes must be positive, got {a} and {b}")
    inter = min(aw, bw) * min(ah, bh)
    union = aw * ah + bw * bh - inter
    return 1.0 - inter / union


def _pairwise_distance(sizes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (N, K) matrix of 1 - IoU between co-centered boxes.
    inter = np.minimum(sizes[:, None, 0], centroids[None, :, 0]) * np.minimum(
        sizes[:, None, 1], centroids[None, :, 1]
    )
    union = sizes.prod(axis=1)[:, None] + centroids.prod(axis=1)[None, :] - inter
    return 1.0 - inter / union


@dataclass
class ClusterState:
    """Final k-means state plus the per-iteration objective trace."""

    centroids: np.ndarray  # (k, 2)
    assignment: np.ndarray  # (n,) centroid index per input box
    objective: float  # mean distance to assigned centroid
    objective_history: list[float] = field(default_factory=list)


def _farthest_point_init(sizes: np.ndarray, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(sizes)))]
    min_dist = _pairwise_distance(sizes, sizes[chosen])[:, 0]
    while len(chosen) < k:
        nxt = int(np.argmax(min_dist))  # argmax takes the lowest index on ties
        chosen.append(nxt)
        d = _pairwise_distance(sizes, sizes[nxt : nxt + 1])[:, 0]
        min_dist = np.minimum(min_dist, d)
    return sizes[chosen].copy()


def run_kmeans(
    gt_sizes, k: int, seed: int, max_iters: int = KMEANS_MAX_ITERS,
    init=None,
) -> ClusterState:
    """Cluster (w, h) pairs under 1 - IoU distance.

    Centroids update to the component-wise median of their members; an update
    that would increase a cluster's summed distance is rejected, which keeps
    the objective non-increasing. Empty clusters are reseeded to the box
    currently farthest from its assigned centroid. ``init`` overrides the
    default farthest-point seeding with explicit starting centroids.
    """
    sizes = np.asarray(gt_sizes, dtype=np.float64)
    if sizes.ndim != 2 or sizes.shape[1] != 2:
        raise InvalidInputError(f"expected (n, 2) box sizes, got shape {sizes.shape}")
    if np.any(sizes <= 0):
        raise InvalidInputError("box sizes must be positive")
    if len(sizes) < k:
        raise InvalidInputError(f"need at least k={k} boxes, got {len(sizes)}")

    if init is not None:
        centroids = np.asarray(init, dtype=np.float64).copy()
        if centroids.shape != (k, 2):
            raise InvalidInputError(
                f"init centroids must have shape ({k}, 2), got {centroids.shape}"
            )
    else:
        centroids = _farthest_point_init(sizes, k, seed)
    assignment = np.full(len(sizes), -1, dtype=np.int64)
    history: list[float] = []

    for _ in range(max_iters):
        dist = _pairwise_distance(sizes, centroids)
        new_assignment = np.argmin(dist, axis=1)

        # Reseed empty clusters to the worst-served box, never stealing the
        # last member of another cluster.
        current = dist[np.arange(len(sizes)), new_assignment]
        counts = np.bincount(new_assignment, minlength=k)
        for c in range(k):
            if counts[c] == 0:
                movable = counts[new_assignment] > 1
                worst = int(np.argmax(np.where(movable, current, -1.0)))
                counts[new_assignment[worst]] -= 1
                counts[c] += 1
                centroids[c] = sizes[worst]
                new_assignment[worst] = c
                current[worst] = 0.0

        history.append(float(current.mean()))
        if np.array_equal(new_assignment, assignment):
            assignment = new_assignment
            break
        assignment = new_assignment

        for c in range(k):
            members = sizes[assignment == c]
            candidate = np.median(members, axis=0)
            old_cost = _pairwise_distance(members, centroids[c : c + 1]).sum()
            new_cost = _pairwise_distance(members, candidate[None, :]).sum()
            if new_cost <= old_cost:
                centroids[c] = candidate

    dist = _pairwise_distance(sizes, centroids)
    objective = float(dist[np.arange(len(sizes)), assignment].mean())
    return ClusterState(centroids, assignment, objective, history)


def kmeans_anchors(gt_sizes, k: int, seed: int) -> list[tuple[float, float]]:
    """K anchor (w, h) priors sorted ascending by area; deterministic in seed."""
    state = run_kmeans(gt_sizes, k, seed)
    order = np.lexsort((state.centroids[:, 0], state.centroids.prod(axis=1)))
    return [(float(w), float(h)) for w, h in state.centroids[order]]


class AnchorSet:
    """Priors plus the flat list of located anchor boxes the head predicts over.

    ``located`` is ordered scale-major (following ``scales``), then row-major
    over cells, then by prior index within the cell.
    """

    def __init__(self, priors, scales, anchors_per_cell: int = 3):
        priors = [(float(w), float(h)) for w, h in priors]
        scales = tuple(int(s) for s in scales)
        if anchors_per_cell < 1:
            raise InvalidInputError(f"anchors_per_cell must be >= 1, got {anchors_per_cell}")
        if len(priors) != anchors_per_cell * len(scales):
            raise InvalidInputError(
                f"got {len(priors)} priors for {len(scales)} scales with "
                f"{anchors_per_cell} anchors per cell"
            )
        if any(w <= 0 or h <= 0 for w, h in priors):
            raise InvalidInputError("anchor priors must have positive dimensions")
        if any(s < 1 for s in scales):
            raise InvalidInputError(f"grid sizes must be >= 1, got {scales}")

        a = anchors_per_cell
        self.priors = sorted(priors, key=lambda p: (p[0] * p[1], p[0]))
        self.scales = scales
        self.anchors_per_cell = a

        # Chunk the area-sorted priors so the finest grid gets the smallest.
        by_fineness = sorted(range(len(scales)), key=lambda i: -scales[i])
        self.priors_per_scale: list[list[tuple[float, float]]] = [[]] * len(scales)
        for chunk, scale_idx in enumerate(by_fineness):
            self.priors_per_scale[scale_idx] = self.priors[chunk * a : (chunk + 1) * a]

        self.scale_offsets: list[int] = []
        grid, row, col, pw, ph, scale_idx = [], [], [], [], [], []
        offset = 0
        for si, g in enumerate(scales):
            self.scale_offsets.append(offset)
            cells = np.arange(g * g)
            grid.append(np.full(g * g * a, g))
            row.append(np.repeat(cells // g, a))
            col.append(np.repeat(cells % g, a))
            ps = np.asarray(self.priors_per_scale[si], dtype=np.float64)
            pw.append(np.tile(ps[:, 0], g * g))
            ph.append(np.tile(ps[:, 1], g * g))
            scale_idx.append(np.full(g * g * a, si))
            offset += g * g * a

        self.grid = np.concatenate(grid)
        self.row = np.concatenate(row)
        self.col = np.concatenate(col)
        self.prior_w = np.concatenate(pw)
        self.prior_h = np.concatenate(ph)
        self.scale_index = np.concatenate(scale_idx)
        self.cx = (self.col + 0.5) / self.grid
        self.cy = (self.row + 0.5) / self.grid

        x1 = self.cx - self.prior_w / 2
        y1 = self.cy - self.prior_h / 2
        self._corners = np.stack(
            [x1, y1, x1 + self.prior_w, y1 + self.prior_h], axis=1
        )

    def __len__(self) -> int:
        return len(self.grid)

    @property
    def located(self) -> list[Box]:
        return [
            Box(float(cx), float(cy), float(w), float(h))
            for cx, cy, w, h in zip(self.cx, self.cy, self.prior_w, self.prior_h)
        ]

    def anchor_box(self, i: int) -> Box:
        return Box(
            float(self.cx[i]), float(self.cy[i]),
            float(self.prior_w[i]), float(self.prior_h[i]),
        )

    def cell_of(self, i: int) -> Cell:
        return (int(self.scale_index[i]), int(self.row[i]), int(self.col[i]))

    def prior_index_of(self, i: int) -> int:
        return int(i - self.scale_offsets[self.scale_index[i]]) % self.anchors_per_cell

    def flat_index(self, cell: Cell, anchor_index: int) -> int:
        si, r, c = cell
        g = self.scales[si]
        if not (0 <= r < g and 0 <= c < g):
            raise InvalidInputError(f"cell {cell} outside {g}x{g} grid")
        if not (0 <= anchor_index < self.anchors_per_cell):
            raise InvalidInputError(f"anchor index {anchor_index} out of range")
        return self.scale_offsets[si] + (r * g + c) * self.anchors_per_cell + anchor_index

    def iou_with(self, gt: Box) -> np.ndarray:
        """IoU of every located anchor against one box, vectorized."""
        x1, y1, x2, y2 = gt.corners()
        ix = np.minimum(self._corners[:, 2], x2) - np.maximum(self._corners[:, 0], x1)
        iy = np.minimum(self._corners[:, 3], y2) - np.maximum(self._corners[:, 1], y1)
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        union = self.prior_w * self.prior_h + gt.area - inter
        return inter / union


def build_anchor_set(priors, scales, anchors_per_cell: int = 3) -> AnchorSet:
    """Expand priors into the flat located anchor list over the given grids."""
    return AnchorSet(priors, scales, anchors_per_cell)
