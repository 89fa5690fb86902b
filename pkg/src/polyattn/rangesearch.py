"""Exact weighted half-space range sums over a static point set.

A query is a half-space {x : normal . x >= threshold}.  Membership of a point
is always decided by the same canonical floating-point dot product
(`project`), so every engine returns the same point set as a naive scan and
differs from it only in summation order.

Engines:
  "sorted" - d = 1, sorted coordinates with prefix sums, O(log n) per query.
  "tree"   - d >= 2, a kd-style partition tree with bounding boxes; nodes
             entirely inside the half-space contribute their stored sum,
             nodes entirely outside are skipped, crossing leaves are scanned.
  "naive"  - full scan, kept as the reference engine for testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_matrix

_U = np.finfo(np.float64).eps / 2


def project(points: np.ndarray, q) -> np.ndarray:
    """Canonical dot products points @ q, accumulated left to right."""
    q = np.asarray(q, dtype=np.float64)
    acc = points[:, 0] * q[0]
    for k in range(1, points.shape[1]):
        acc = acc + points[:, k] * q[k]
    return acc


def project_pairs(points, idx, Q, rows) -> np.ndarray:
    """Canonical dot products points[idx[m]] . Q[rows[m]] for each pair m."""
    acc = points[idx, 0] * Q[rows, 0]
    for k in range(1, points.shape[1]):
        acc = acc + points[idx, k] * Q[rows, k]
    return acc


@dataclass(frozen=True)
class HalfSpace:
    normal: np.ndarray
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=np.float64).ravel())
        object.__setattr__(self, "threshold", float(self.threshold))

    def contains(self, points) -> np.ndarray:
        return project(as_matrix(points), self.normal) >= self.threshold


class PartitionTree:
    """Binary space partition over points with axis-aligned bounding boxes.

    Each node owns a contiguous range [start, end) of the permuted point
    order; children split the widest box side at the median.
    """

    def __init__(self, points: np.ndarray, leaf_size: int = 8):
        pts = as_matrix(points, "points")
        n, d = pts.shape
        self.d = d
        self.n = n
        perm = np.arange(n)
        start, end, left, right = [], [], [], []
        lo, hi = [], []

        def new_node(s, e):
            start.append(s)
            end.append(e)
            left.append(-1)
            right.append(-1)
            block = pts[perm[s:e]]
            lo.append(block.min(axis=0))
            hi.append(block.max(axis=0))
            return len(start) - 1

        if n:
            stack = [new_node(0, n)]
            while stack:
                v = stack.pop()
                s, e = start[v], end[v]
                if e - s <= leaf_size:
                    continue
                width = hi[v] - lo[v]
                dim = int(np.argmax(width))
                if width[dim] == 0.0:
                    continue  # all points identical
                mid = (s + e) // 2
                seg = perm[s:e]
                order = np.argpartition(pts[seg, dim], mid - s)
                perm[s:e] = seg[order]
                left[v] = new_node(s, mid)
                right[v] = new_node(mid, e)
                stack.append(left[v])
                stack.append(right[v])

        self.perm = perm
        self.points = pts[perm]
        self.start = np.array(start, dtype=np.int64)
        self.end = np.array(end, dtype=np.int64)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.lo = np.array(lo).reshape(-1, d)
        self.hi = np.array(hi).reshape(-1, d)
        self.size = self.end - self.start
        self.is_leaf = self.left < 0
        # bound on |x_k| over each box, for the rounding margin
        self.absmax = np.maximum(np.abs(self.lo), np.abs(self.hi))

    @property
    def n_nodes(self) -> int:
        return self.start.size

    def node_sums(self, w_perm: np.ndarray) -> np.ndarray:
        """Per-node sums of weights given in permuted order (leading axis)."""
        out = np.zeros((self.n_nodes,) + w_perm.shape[1:])
        leaves = np.flatnonzero(self.is_leaf)
        order = leaves[np.argsort(self.start[leaves])]
        out[order] = np.add.reduceat(w_perm, self.start[order], axis=0)
        # children are always created after their parent
        for v in range(self.n_nodes - 1, -1, -1):
            if not self.is_leaf[v]:
                out[v] = out[self.left[v]] + out[self.right[v]]
        return out

    def classify(self, Q, thr, aggregated=None, terminal=None):
        """Descend the tree for every (row, half-space) simultaneously.

        Returns (in_rows, in_nodes, direct_rows, direct_nodes): nodes that are
        fully inside and `aggregated`, and nodes whose points must be tested
        one by one (crossing terminal nodes, or inside nodes without an
        aggregate).  Leaves are always terminal.
        """
        agg = np.ones(self.n_nodes, bool) if aggregated is None else aggregated
        term = self.is_leaf if terminal is None else (terminal | self.is_leaf)
        d = self.d
        rows = np.arange(Q.shape[0])
        nodes = np.zeros(Q.shape[0], dtype=np.int64)
        in_r, in_n, dir_r, dir_n = [], [], [], []
        slack = 4.0 * (d + 1) * _U
        while rows.size:
            q = Q[rows]
            lo = self.lo[nodes]
            hi = self.hi[nodes]
            a = q * lo
            b = q * hi
            mn = np.minimum(a, b).sum(axis=1)
            mx = np.maximum(a, b).sum(axis=1)
            margin = slack * (np.abs(q) * self.absmax[nodes]).sum(axis=1)
            t = thr[rows]
            inside = mn - margin >= t
            cross = ~inside & (mx + margin >= t)
            take = inside & agg[nodes]
            in_r.append(rows[take])
            in_n.append(nodes[take])
            scan = (inside & ~agg[nodes]) | (cross & term[nodes])
            dir_r.append(rows[scan])
            dir_n.append(nodes[scan])
            down = cross & ~term[nodes]
            r2 = rows[down]
            v2 = nodes[down]
            rows = np.concatenate([r2, r2])
            nodes = np.concatenate([self.left[v2], self.right[v2]])
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, np.int64)
        return cat(in_r), cat(in_n), cat(dir_r), cat(dir_n)

    def expand(self, rows, nodes):
        """Flatten (row, node) pairs to (row, permuted point position) pairs."""
        counts = self.size[nodes]
        total = int(counts.sum())
        rr = np.repeat(rows, counts)
        offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        return rr, np.repeat(self.start[nodes], counts) + offs


class RangeIndex:
    """Immutable index answering sum_{j : points_j . q >= tau} weights_j.

    `weights` may be a vector (n,) or a matrix (n, m); queries then return a
    scalar or an m-vector per half-space.
    """

    def __init__(self, points, weights, engine: str = "auto", leaf_size: int = 8,
                 chunk_rows: int = 2048):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError(f"points must be 2-D, got shape {pts.shape}")
        if pts.size:
            pts = as_matrix(pts, "points")
        w = np.asarray(weights, dtype=np.float64)
        if w.shape[0] != pts.shape[0]:
            raise ValueError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if pts.shape[1] < 1:
            raise ValueError("points must have at least one coordinate")
        self.points = pts
        self.weights = w
        self.n, self.d = pts.shape
        self.total_weight = w.sum(axis=0)
        if engine == "auto":
            engine = "sorted" if self.d == 1 else "tree"
        if engine not in ("sorted", "tree", "naive"):
            raise ValueError(f"unknown engine {engine!r}")
        if engine == "sorted" and self.d != 1:
            raise ValueError("the sorted engine needs d = 1")
        self.engine = engine
        self.chunk_rows = chunk_rows
        if engine == "sorted":
            order = np.argsort(pts[:, 0], kind="stable")
            self._order = order
            self._sorted = pts[order, 0]
            head = np.zeros((1,) + w.shape[1:])
            self._cum = np.concatenate([head, np.cumsum(w[order], axis=0)])
        elif engine == "tree":
            self.tree = PartitionTree(pts, leaf_size=leaf_size)
            self._wperm = w[self.tree.perm]
            self._node_w = self.tree.node_sums(self._wperm)

    # --- batched queries -------------------------------------------------

    def sums(self, normals, thresholds) -> np.ndarray:
        """Half-space sums for R queries: normals (R, d), thresholds (R,)."""
        Q = np.asarray(normals, dtype=np.float64).reshape(-1, self.d)
        thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), Q.shape[:1])
        out = np.zeros((Q.shape[0],) + self.weights.shape[1:])
        if self.n == 0 or Q.shape[0] == 0:
            return out
        for s in range(0, Q.shape[0], self.chunk_rows):
            sl = slice(s, s + self.chunk_rows)
            out[sl] = getattr(self, "_sums_" + self.engine)(Q[sl], np.ascontiguousarray(thr[sl]))
        return out

    def _sums_naive(self, Q, thr):
        return self._mask_naive(Q, thr).astype(np.float64) @ self.weights

    def _sums_sorted(self, Q, thr):
        q = Q[:, 0]
        lo = self._sorted_cut(q, thr)
        pos = q > 0
        n = self.n
        cum = self._cum
        total = cum[n]
        res = np.where(_col(pos, cum), total - cum[lo], cum[lo])
        zero = q == 0
        if zero.any():
            res[zero] = np.where(_col(0.0 >= thr[zero], cum), total, 0.0)
        return res

    def _sorted_cut(self, q, thr):
        """Inside sets are sorted[lo:] for q > 0 and sorted[:lo] for q < 0."""
        ps = self._sorted
        n = ps.size
        lo = np.zeros(q.size, np.int64)
        hi = np.full(q.size, n, np.int64)
        pos = q > 0
        # first index where the (monotone) predicate flips
        while True:
            act = lo < hi
            if not act.any():
                break
            mid = (lo + hi) // 2
            midc = np.minimum(mid, n - 1)
            inside = ps[midc] * q >= thr
            flip = np.where(pos, inside, ~inside)
            hi = np.where(act & flip, mid, hi)
            lo = np.where(act & ~flip, mid + 1, lo)
        return lo

    def _sums_tree(self, Q, thr):
        t = self.tree
        in_r, in_n, dr, dn = t.classify(Q, thr)
        out = np.zeros((Q.shape[0],) + self.weights.shape[1:])
        np.add.at(out, in_r, self._node_w[in_n])
        rr, idx = t.expand(dr, dn)
        keep = project_pairs(t.points, idx, Q, rr) >= thr[rr]
        np.add.at(out, rr[keep], self._wperm[idx[keep]])
        return out

    def counts(self, normals, thresholds) -> np.ndarray:
        """Number of points in each half-space (ignores the weights)."""
        Q = np.asarray(normals, dtype=np.float64).reshape(-1, self.d)
        thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), Q.shape[:1])
        if self.n == 0:
            return np.zeros(Q.shape[0], np.int64)
        out = np.zeros(Q.shape[0], np.int64)
        for s in range(0, Q.shape[0], self.chunk_rows):
            sl = slice(s, s + self.chunk_rows)
            out[sl] = self._counts(Q[sl], np.ascontiguousarray(thr[sl]))
        return out

    def _counts(self, Q, thr):
        if self.engine == "tree":
            t = self.tree
            in_r, in_n, dr, dn = t.classify(Q, thr)
            out = np.bincount(in_r, weights=t.size[in_n], minlength=Q.shape[0])
            rr, idx = t.expand(dr, dn)
            keep = project_pairs(t.points, idx, Q, rr) >= thr[rr]
            out += np.bincount(rr[keep], minlength=Q.shape[0])
            return out.astype(np.int64)
        if self.engine == "sorted":
            saved = self._cum
            self._cum = np.arange(self.n + 1, dtype=np.float64)
            try:
                return np.rint(self._sums_sorted(Q, thr)).astype(np.int64)
            finally:
                self._cum = saved
        return self._mask_naive(Q, thr).sum(axis=1)

    def _mask_naive(self, Q, thr):
        proj = self.points[:, 0][None, :] * Q[:, 0][:, None]
        for k in range(1, self.d):
            proj = proj + self.points[:, k][None, :] * Q[:, k][:, None]
        return proj >= thr[:, None]

    # --- single queries --------------------------------------------------

    def halfspace_sum(self, h: HalfSpace):
        if h.normal.size != self.d:
            raise ValueError(f"normal has length {h.normal.size}, index has d={self.d}")
        r = self.sums(h.normal[None, :], [h.threshold])[0]
        return float(r) if np.ndim(r) == 0 else r

    def member_sets(self, normals, thresholds) -> list:
        """Sorted original indices inside each half-space, found by the
        engine's own search (tree descent or sorted bisection)."""
        Q = np.asarray(normals, dtype=np.float64).reshape(-1, self.d)
        thr = np.ascontiguousarray(
            np.broadcast_to(np.asarray(thresholds, dtype=np.float64), Q.shape[:1]))
        R = Q.shape[0]
        if self.n == 0:
            return [np.zeros(0, np.int64) for _ in range(R)]
        if self.engine == "naive":
            return [np.flatnonzero(m) for m in self._mask_naive(Q, thr)]
        if self.engine == "sorted":
            q = Q[:, 0]
            lo = self._sorted_cut(q, thr)
            out = []
            for r in range(R):
                if q[r] > 0:
                    idx = self._order[lo[r]:]
                elif q[r] < 0:
                    idx = self._order[:lo[r]]
                else:
                    idx = self._order if 0.0 >= thr[r] else self._order[:0]
                out.append(np.sort(idx))
            return out
        t = self.tree
        in_r, in_n, dr, dn = t.classify(Q, thr)
        r1, p1 = t.expand(in_r, in_n)
        r2, p2 = t.expand(dr, dn)
        keep = project_pairs(t.points, p2, Q, r2) >= thr[r2]
        rows = np.concatenate([r1, r2[keep]])
        idx = t.perm[np.concatenate([p1, p2[keep]])]
        order = np.lexsort((idx, rows))
        rows, idx = rows[order], idx[order]
        cuts = np.searchsorted(rows, np.arange(R + 1))
        return [idx[cuts[r]:cuts[r + 1]] for r in range(R)]

    def members(self, h: HalfSpace) -> np.ndarray:
        """Original indices of the points inside h (naive canonical test)."""
        if self.n == 0:
            return np.zeros(0, np.int64)
        return np.flatnonzero(project(self.points, h.normal) >= h.threshold)


def _col(mask, like):
    return mask.reshape(mask.shape + (1,) * (like.ndim - 1))


def build_index(points, weights, engine: str = "auto", leaf_size: int = 8) -> RangeIndex:
    return RangeIndex(points, weights, engine=engine, leaf_size=leaf_size)


def halfspace_sum(idx: RangeIndex, h: HalfSpace):
    return idx.halfspace_sum(h)


def max_projection_levels(idx: RangeIndex, Q, step: float, s_lo, s_hi) -> np.ndarray:
    """Per row of Q, the largest s in [s_lo, s_hi] whose half-space
    {x : q . x >= s * step} is nonempty (s_lo - 1 if none is).

    Parallel binary search: every round issues one batched count query.
    """
    if idx.n == 0:
        raise ValueError("max projection level of an empty index")
    if not step > 0:
        raise ValueError("step must be positive")
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, idx.d)
    R = Q.shape[0]
    lo = np.broadcast_to(np.asarray(s_lo, np.int64), (R,)) - 1  # nonempty side
    hi = np.broadcast_to(np.asarray(s_hi, np.int64), (R,)) + 1  # empty side
    while True:
        act = np.flatnonzero(hi - lo > 1)
        if act.size == 0:
            return lo.copy()
        mid = (lo[act] + hi[act]) // 2
        nonempty = idx.counts(Q[act], mid * step) > 0
        lo = lo.copy()
        hi = hi.copy()
        lo[act[nonempty]] = mid[nonempty]
        hi[act[~nonempty]] = mid[~nonempty]


def max_projection_level(idx: RangeIndex, q, step: float, s_lo: int, s_hi: int) -> int:
    return int(max_projection_levels(idx, np.asarray(q, np.float64)[None, :], step, s_lo, s_hi)[0])
