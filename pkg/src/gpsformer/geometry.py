"""Neighbourhood operators on point sets: FPS, KNN, ball query, relation encoding.

All searches are brute force. Distances between 3-D points are computed as
``dx*dx + dy*dy + dz*dz`` in float64 so results are reproducible bit for bit;
ties are broken by lexicographic coordinates (FPS) or by lower index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError

# Above this many pairwise elements, feature-space KNN switches to the
# |a|^2 + |b|^2 - 2ab expansion.
_DIRECT_LIMIT = 1 << 21


@dataclass
class PointSet:
    positions: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | int | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if self.positions.ndim not in (2, 3) or self.positions.shape[-1] != 3:
            raise ShapeError(f"positions must be [N,3] or [B,N,3], got {self.positions.shape}")
        if self.positions.shape[-2] < 1:
            raise ShapeError("a point set needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ShapeError("positions contain non-finite values")
        if self.features is not None:
            f = np.asarray(self.features)
            if f.shape[:-1] != self.positions.shape[:-1]:
                raise ShapeError(f"features {f.shape} do not match positions {self.positions.shape}")

    @property
    def n(self):
        return self.positions.shape[-2]


@dataclass
class NeighborTable:
    indices: np.ndarray      # [..., M, K] row ids into the source set
    valid_count: np.ndarray  # [..., M], each in 1..K
    query_ids: np.ndarray | None = None

    @property
    def valid(self):
        k = self.indices.shape[-1]
        return np.arange(k) < self.valid_count[..., None]


def sq_dist3(a, b):
    """Pairwise squared distances ``[M, N]`` between 3-D point arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a[:, None, 0] - b[None, :, 0]
    out = d * d
    d = a[:, None, 1] - b[None, :, 1]
    out += d * d
    d = a[:, None, 2] - b[None, :, 2]
    out += d * d
    return out


def _sq_dist(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] == 3:
        return sq_dist3(a, b)
    if a.shape[0] * b.shape[0] * a.shape[1] <= _DIRECT_LIMIT:
        diff = a[:, None, :] - b[None, :, :]
        return np.einsum("mnd,mnd->mn", diff, diff)
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def _pick(dist, pos, candidates_mask=None):
    """Index of the max of ``dist``; ties by lexicographic position, then index."""
    best = dist.max()
    ties = np.flatnonzero(dist == best)
    if ties.size == 1:
        return int(ties[0])
    p = pos[ties]
    order = np.lexsort((ties, p[:, 2], p[:, 1], p[:, 0]))
    return int(ties[order[0]])


def _sq_to(pos, pts):
    """Squared distance from every row of ``pos [B,N,3]`` to ``pts [B,3]``."""
    d = pos[..., 0] - pts[:, None, 0]
    out = d * d
    d = pos[..., 1] - pts[:, None, 1]
    out += d * d
    d = pos[..., 2] - pts[:, None, 2]
    out += d * d
    return out


def _pick_rows(dist, pos):
    best = dist.max(axis=1)
    ties = dist == best[:, None]
    pick = np.argmax(dist, axis=1)
    crowded = np.flatnonzero(ties.sum(axis=1) > 1)
    for b in crowded:
        pick[b] = _pick(dist[b], pos[b])
    return pick


def farthest_point_sample(positions, m):
    """Greedy farthest point sampling; returns ``m`` row ids in selection order.

    The seed is the point farthest from the centroid; ties go to the
    lexicographically smallest coordinates, then the lowest index. Accepts
    ``[N,3]`` or a batch ``[B,N,3]`` (returns ``[B,m]``).
    """
    pos = np.asarray(positions.positions if isinstance(positions, PointSet) else positions)
    single = pos.ndim == 2
    pos = np.asarray(pos[None] if single else pos, dtype=np.float64)
    b, n, _ = pos.shape
    if not 1 <= m <= n:
        raise ArgumentError(f"cannot sample {m} points from {n}")
    rows = np.arange(b)
    out = np.empty((b, m), dtype=np.int64)
    out[:, 0] = _pick_rows(_sq_to(pos, pos.mean(axis=1)), pos)
    mind = _sq_to(pos, pos[rows, out[:, 0]])
    for i in range(1, m):
        # selected points sit at distance 0 and only win once everything is selected
        nxt = _pick_rows(mind, pos)
        out[:, i] = nxt
        np.minimum(mind, _sq_to(pos, pos[rows, nxt]), out=mind)
    return out[0] if single else out


def knn(query, source, k):
    """K nearest source rows for every query row, ascending, ties by lower index."""
    q = np.asarray(query)
    s = np.asarray(source)
    if q.ndim == 3:
        tables = [knn(a, b, k) for a, b in zip(q, s)]
        return NeighborTable(np.stack([t.indices for t in tables]),
                             np.stack([t.valid_count for t in tables]))
    n = s.shape[0]
    if k > n:
        raise ArgumentError(f"k={k} exceeds the {n} source points")
    if k < 1:
        raise ArgumentError("k must be at least 1")
    d = _sq_dist(q, s)
    idx = _k_smallest(d, k)
    return NeighborTable(idx, np.full(q.shape[0], k, dtype=np.int64))


def _k_smallest(d, k):
    m, n = d.shape
    if k == n:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(d, part, axis=1).max(axis=1)
    # rows with a tie straddling the k boundary need a full stable sort
    crowded = (d <= kth[:, None]).sum(axis=1) > k
    cand = np.take_along_axis(d, part, axis=1)
    order = np.lexsort((part, cand), axis=1)
    idx = np.take_along_axis(part, order, axis=1)
    if crowded.any():
        idx[crowded] = np.argsort(d[crowded], axis=1, kind="stable")[:, :k]
    return idx


def ball_query(query_pos, source_pos, radius, k):
    """Up to ``k`` source points within ``radius`` (inclusive), in ascending index order.

    Slots past ``valid_count`` repeat the first neighbour. An empty ball gets
    the nearest source point, which is the query itself when it belongs to
    the source set.
    """
    if radius <= 0 or k < 1:
        raise ArgumentError(f"ball_query needs radius > 0 and k >= 1, got {radius}, {k}")
    q = np.asarray(query_pos)
    s = np.asarray(source_pos)
    if q.ndim == 3:
        tables = [ball_query(a, b, radius, k) for a, b in zip(q, s)]
        return NeighborTable(np.stack([t.indices for t in tables]),
                             np.stack([t.valid_count for t in tables]))
    d = sq_dist3(q, s)
    inside = d <= radius * radius
    count = inside.sum(axis=1)
    # stable argsort of ~inside lists in-ball indices first, ascending
    order = np.argsort(~inside, axis=1, kind="stable")[:, :k]
    valid_count = np.minimum(count, k)
    empty = count == 0
    if empty.any():
        order[empty, 0] = np.argmin(d[empty], axis=1)
        valid_count[empty] = 1
    slot = np.arange(order.shape[1])
    idx = np.where(slot[None, :] < valid_count[:, None], order, order[:, :1])
    if idx.shape[1] < k:
        idx = np.concatenate([idx, np.repeat(idx[:, :1], k - idx.shape[1], axis=1)], axis=1)
    return NeighborTable(idx.astype(np.int64), valid_count.astype(np.int64))


def relation_encode(query_pos, neighbor_pos):
    """Explicit geometric descriptor per (centre, neighbour) pair.

    Channel layout: ``[p_i (3), p_j (3), p_j - p_i (3), |p_j - p_i| (1)]``.
    ``query_pos`` is ``[..., M, 3]``, ``neighbor_pos`` ``[..., M, K, 3]``.
    """
    pi = np.asarray(query_pos)
    pj = np.asarray(neighbor_pos)
    pi = np.broadcast_to(pi[..., None, :], pj.shape)
    off = pj - pi
    dist = np.sqrt((off * off).sum(axis=-1, keepdims=True))
    return np.concatenate([pi, pj, off, dist], axis=-1)


def gather_points(pos, idx):
    """Numpy row gather for batched or single clouds (no gradient)."""
    pos = np.asarray(pos)
    idx = np.asarray(idx)
    if pos.ndim == 2:
        return pos[idx]
    b = np.arange(pos.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    return pos[b, idx]


def canonical_order(positions):
    """Per-cloud permutation sorting points lexicographically by (x, y, z)."""
    pos = np.asarray(positions)
    if pos.ndim == 2:
        return np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0]))
    return np.stack([canonical_order(p) for p in pos])
