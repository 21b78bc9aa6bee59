"""Incremental octree map: Morton-indexed children, batch insertion without
rebalancing, subdivision-threshold downsampling, and exact k-NN queries.

Subdivision never redistributes the points already stored in a full leaf:
the old bucket stays attached to the now-internal node ("stale bucket") and
later points descend past it into children. Queries therefore inspect the
buckets of internal nodes too, which keeps k-NN exact. Leaves whose half
extent has reached the minimum accept no further points; those points are
rejected and counted, which is what downsamples the map.

Node records live in flat numpy arrays so the query kernel can be compiled
with numba; the tree object only orchestrates growth and batch descent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

POINT_BYTES = 24  # one stored position, 3 float64


@dataclass(frozen=True)
class OctreeParams:
    initial_half_extent: float = 512.0
    bucket_size: int = 32
    min_extent: float = 0.2

    def __post_init__(self):
        if self.initial_half_extent <= 0 or self.bucket_size <= 0 or self.min_extent <= 0:
            raise ValueError("octree parameters must be positive")
        if self.min_extent >= self.initial_half_extent:
            raise ValueError("min_extent must be smaller than initial_half_extent")


@dataclass(frozen=True)
class MapPoint:
    position: np.ndarray
    ordinal: int


@dataclass(frozen=True)
class TreeStats:
    node_count: int
    point_count: int
    max_depth: int
    memory_bytes: int


def morton_child_index(point, center) -> int:
    """3-bit child index; bit b set iff coordinate >= center (upper-inclusive),
    order x -> bit 0, y -> bit 1, z -> bit 2."""
    point = np.asarray(point, dtype=float)
    center = np.asarray(center, dtype=float)
    return int((point[0] >= center[0]) + 2 * (point[1] >= center[1]) + 4 * (point[2] >= center[2]))


@njit(cache=True)
def _insert_kernel(centers, halfs, children, bucket, bucket_count, kinds, depths,
                   aabb_min, aabb_max, positions, ordinals, n_nodes, node_cap,
                   bucket_size, min_extent, start):
    """Sequential point descent. Returns (next unprocessed index, accepted,
    new node count); an early return signals the caller to grow node storage
    and resume (nothing is stored for the interrupted point).

    Each node keeps the tight bounding box of the accepted points in its
    subtree; only used for query pruning, expanded on accepted inserts."""
    accepted = 0
    path = np.empty(128, np.int64)
    i = start
    n = ordinals.shape[0]
    while i < n:
        o = ordinals[i]
        x = positions[o, 0]
        y = positions[o, 1]
        z = positions[o, 2]
        node = 0
        plen = 0
        stored = False
        while True:
            path[plen] = node
            plen += 1
            if kinds[node] == 0:
                cnt = bucket_count[node]
                if cnt < bucket_size:
                    bucket[node, cnt] = o
                    bucket_count[node] = cnt + 1
                    accepted += 1
                    stored = True
                    break
                if halfs[node] <= min_extent:
                    break  # saturated leaf: the point is rejected
                kinds[node] = 1  # subdivide; the full bucket stays put
            b = 0
            if x >= centers[node, 0]:
                b += 1
            if y >= centers[node, 1]:
                b += 2
            if z >= centers[node, 2]:
                b += 4
            ch = children[node, b]
            if ch < 0:
                if n_nodes >= node_cap:
                    return i, accepted, n_nodes
                h = halfs[node] * 0.5
                centers[n_nodes, 0] = centers[node, 0] + (h if b & 1 else -h)
                centers[n_nodes, 1] = centers[node, 1] + (h if b & 2 else -h)
                centers[n_nodes, 2] = centers[node, 2] + (h if b & 4 else -h)
                halfs[n_nodes] = h
                depths[n_nodes] = depths[node] + 1
                kinds[n_nodes] = 0
                bucket_count[n_nodes] = 0
                for c in range(8):
                    children[n_nodes, c] = -1
                for c in range(3):
                    aabb_min[n_nodes, c] = np.inf
                    aabb_max[n_nodes, c] = -np.inf
                children[node, b] = n_nodes
                ch = n_nodes
                n_nodes += 1
            node = ch
        if stored:
            for j in range(plen):
                nd = path[j]
                if x < aabb_min[nd, 0]:
                    aabb_min[nd, 0] = x
                if x > aabb_max[nd, 0]:
                    aabb_max[nd, 0] = x
                if y < aabb_min[nd, 1]:
                    aabb_min[nd, 1] = y
                if y > aabb_max[nd, 1]:
                    aabb_max[nd, 1] = y
                if z < aabb_min[nd, 2]:
                    aabb_min[nd, 2] = z
                if z > aabb_max[nd, 2]:
                    aabb_max[nd, 2] = z
        i += 1
    return i, accepted, n_nodes


@njit(cache=True)
def _aabb_dist2(aabb_min, aabb_max, node, qx, qy, qz):
    """Squared distance from the query to the tight box of stored points
    beneath `node`; inf for subtrees holding nothing."""
    if aabb_min[node, 0] > aabb_max[node, 0]:
        return np.inf
    d2 = 0.0
    lo = aabb_min[node, 0] - qx
    hi = qx - aabb_max[node, 0]
    if lo > 0.0:
        d2 += lo * lo
    elif hi > 0.0:
        d2 += hi * hi
    lo = aabb_min[node, 1] - qy
    hi = qy - aabb_max[node, 1]
    if lo > 0.0:
        d2 += lo * lo
    elif hi > 0.0:
        d2 += hi * hi
    lo = aabb_min[node, 2] - qz
    hi = qz - aabb_max[node, 2]
    if lo > 0.0:
        d2 += lo * lo
    elif hi > 0.0:
        d2 += hi * hi
    return d2


@njit(cache=True)
def _try_add(cand_d2, cand_ord, count, k, d2, o):
    """Insert (d2, o) into the sorted candidate arrays; ties break on the
    smaller ordinal. Returns the new count."""
    if count == k:
        last = k - 1
        if d2 > cand_d2[last] or (d2 == cand_d2[last] and o > cand_ord[last]):
            return count
    pos = count
    i = count - 1
    while i >= 0 and (cand_d2[i] > d2 or (cand_d2[i] == d2 and cand_ord[i] > o)):
        pos = i
        i -= 1
    if count < k:
        j = count
        while j > pos:
            cand_d2[j] = cand_d2[j - 1]
            cand_ord[j] = cand_ord[j - 1]
            j -= 1
        cand_d2[pos] = d2
        cand_ord[pos] = o
        return count + 1
    if pos >= k:
        return count
    j = k - 1
    while j > pos:
        cand_d2[j] = cand_d2[j - 1]
        cand_ord[j] = cand_ord[j - 1]
        j -= 1
    cand_d2[pos] = d2
    cand_ord[pos] = o
    return count


@njit(cache=True)
def _knn_one(children, bucket, bucket_count, kinds, aabb_min, aabb_max, positions,
             qx, qy, qz, k, cand_d2, cand_ord, stack, stack_d2):
    """Depth-first k-NN with near-child-first ordering and tight-box pruning.
    Equal box distances are still visited so ordinal tie-breaking stays exact."""
    ids = np.empty(8, np.int64)
    ds = np.empty(8, np.float64)
    sp = 0
    stack[sp] = 0
    stack_d2[sp] = 0.0
    sp += 1
    count = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if count == k and stack_d2[sp] > cand_d2[k - 1]:
            continue
        nb = bucket_count[node]
        for b in range(nb):
            o = bucket[node, b]
            dx = positions[o, 0] - qx
            dy = positions[o, 1] - qy
            dz = positions[o, 2] - qz
            d2 = dx * dx + dy * dy + dz * dz
            count = _try_add(cand_d2, cand_ord, count, k, d2, o)
        if kinds[node] == 1:
            nc = 0
            for c in range(8):
                ch = children[node, c]
                if ch >= 0:
                    bd = _aabb_dist2(aabb_min, aabb_max, ch, qx, qy, qz)
                    if bd < np.inf and (count < k or bd <= cand_d2[k - 1]):
                        ids[nc] = ch
                        ds[nc] = bd
                        nc += 1
            # insertion sort descending by distance; nearest child pops first
            for i in range(1, nc):
                vid = ids[i]
                vd = ds[i]
                j = i - 1
                while j >= 0 and ds[j] < vd:
                    ids[j + 1] = ids[j]
                    ds[j + 1] = ds[j]
                    j -= 1
                ids[j + 1] = vid
                ds[j + 1] = vd
            for i in range(nc):
                stack[sp] = ids[i]
                stack_d2[sp] = ds[i]
                sp += 1
    return count


@njit(cache=True, parallel=True)
def _knn_batch(children, bucket, bucket_count, kinds, aabb_min, aabb_max, positions,
               queries, k, out_ord, out_d2, out_n):
    for qi in prange(queries.shape[0]):
        cand_d2 = np.empty(k, np.float64)
        cand_ord = np.empty(k, np.int64)
        stack = np.empty(8192, np.int64)
        stack_d2 = np.empty(8192, np.float64)
        n = _knn_one(children, bucket, bucket_count, kinds, aabb_min, aabb_max, positions,
                     queries[qi, 0], queries[qi, 1], queries[qi, 2], k, cand_d2, cand_ord,
                     stack, stack_d2)
        out_n[qi] = n
        for j in range(n):
            out_ord[qi, j] = cand_ord[j]
            out_d2[qi, j] = cand_d2[j]


class IOctree:
    """Incremental octree over 3D points with insertion-order ordinals."""

    def __init__(self, params: OctreeParams = OctreeParams(), origin=(0.0, 0.0, 0.0)):
        self.params = params
        cap = 64
        self._centers = np.zeros((cap, 3))
        self._half = np.zeros(cap)
        self._children = np.full((cap, 8), -1, np.int32)
        self._bucket = np.zeros((cap, params.bucket_size), np.int32)
        self._bucket_count = np.zeros(cap, np.int32)
        self._kind = np.zeros(cap, np.uint8)  # 0 leaf, 1 internal
        self._depth = np.zeros(cap, np.int32)
        self._aabb_min = np.full((cap, 3), np.inf)
        self._aabb_max = np.full((cap, 3), -np.inf)
        self._n_nodes = 1
        self._centers[0] = np.asarray(origin, dtype=float)
        self._half[0] = params.initial_half_extent
        self._root_expansions = 0

        pcap = 1024
        self._positions = np.zeros((pcap, 3))
        self._n_points = 0  # appended (ordinal space)
        self._stored = 0
        self._rejected = 0
        # per-node bytes for the memory estimate, from the array dtypes
        self.node_bytes = 3 * 8 + 8 + 8 * 4 + params.bucket_size * 4 + 4 + 1 + 4 + 48

    # -- storage growth ----------------------------------------------------

    def _grow_nodes(self, need: int):
        cap = self._centers.shape[0]
        if self._n_nodes + need <= cap:
            return
        new = max(cap * 2, self._n_nodes + need)
        self._centers = np.resize(self._centers, (new, 3))
        self._half = np.resize(self._half, new)
        grown = np.full((new, 8), -1, np.int32)
        grown[:cap] = self._children
        self._children = grown
        b = np.zeros((new, self.params.bucket_size), np.int32)
        b[:cap] = self._bucket
        self._bucket = b
        self._bucket_count = np.resize(self._bucket_count, new)
        self._bucket_count[cap:] = 0
        self._kind = np.resize(self._kind, new)
        self._kind[cap:] = 0
        self._depth = np.resize(self._depth, new)
        amin = np.full((new, 3), np.inf)
        amin[:cap] = self._aabb_min
        self._aabb_min = amin
        amax = np.full((new, 3), -np.inf)
        amax[:cap] = self._aabb_max
        self._aabb_max = amax

    def _grow_points(self, need: int):
        cap = self._positions.shape[0]
        if self._n_points + need <= cap:
            return
        new = max(cap * 2, self._n_points + need)
        p = np.zeros((new, 3))
        p[: self._n_points] = self._positions[: self._n_points]
        self._positions = p

    def _alloc(self, center, half, depth) -> int:
        self._grow_nodes(1)
        nid = self._n_nodes
        self._n_nodes += 1
        self._centers[nid] = center
        self._half[nid] = half
        self._depth[nid] = depth
        return nid

    # -- insertion ---------------------------------------------------------

    def _expand_root_toward(self, point):
        # allocate the new root, then swap records so the root stays id 0
        c = self._centers[0].copy()
        h = self._half[0]
        sign = np.where(np.asarray(point) >= c, 1.0, -1.0)
        new_center = c + h * sign
        # move the current root record into a fresh slot
        moved = self._alloc(c, h, 0)
        self._children[moved] = self._children[0]
        self._bucket[moved] = self._bucket[0]
        self._bucket_count[moved] = self._bucket_count[0]
        self._kind[moved] = self._kind[0]
        self._aabb_min[moved] = self._aabb_min[0]
        self._aabb_max[moved] = self._aabb_max[0]
        self._centers[0] = new_center
        self._half[0] = 2.0 * h
        self._children[0] = -1
        self._bucket_count[0] = 0
        self._kind[0] = 1
        child = morton_child_index(c, new_center)
        self._children[0, child] = moved
        # depths shift down one level
        self._depth[: self._n_nodes] += 1
        self._depth[0] = 0
        self._root_expansions += 1

    def insert(self, points) -> tuple[int, int]:
        """Insert a batch of points; returns (inserted, rejected). Ordinals
        are assigned in input order, including non-finite rejects."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 0:
            return 0, 0
        finite = np.all(np.isfinite(pts), axis=1)
        n_bad = int((~finite).sum())

        self._grow_points(pts.shape[0])
        base = self._n_points
        self._positions[base : base + pts.shape[0]] = np.where(finite[:, None], pts, 0.0)
        self._n_points += pts.shape[0]
        idx = base + np.flatnonzero(finite)
        good = pts[finite]

        while idx.size:
            c, h = self._centers[0], self._half[0]
            inside = np.all((good >= c - h) & (good < c + h), axis=1)
            if np.all(inside):
                break
            first_out = good[np.flatnonzero(~inside)[0]]
            self._expand_root_toward(first_out)

        accepted = 0
        start = 0
        while start < idx.size:
            self._grow_nodes(4096)
            start, acc, n_nodes = _insert_kernel(
                self._centers,
                self._half,
                self._children,
                self._bucket,
                self._bucket_count,
                self._kind,
                self._depth,
                self._aabb_min,
                self._aabb_max,
                self._positions,
                idx,
                self._n_nodes,
                self._centers.shape[0],
                self.params.bucket_size,
                self.params.min_extent,
                start,
            )
            accepted += acc
            self._n_nodes = int(n_nodes)
        rejected = (idx.size - accepted) + n_bad
        self._stored += accepted
        self._rejected += rejected
        return accepted, rejected

    # -- queries -----------------------------------------------------------

    def knn(self, query, k: int):
        """Exact k nearest stored points, sorted by (distance, ordinal)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        ords, d2, n = self.knn_arrays(np.asarray(query, dtype=float)[None, :], k)
        m = int(n[0])
        return [MapPoint(self._positions[ords[0, j]].copy(), int(ords[0, j])) for j in range(m)]

    def knn_arrays(self, queries, k: int):
        """Batched query: returns (ordinals (Q,k), dist2 (Q,k), counts (Q,))."""
        queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        Q = queries.shape[0]
        out_ord = np.full((Q, k), -1, np.int64)
        out_d2 = np.full((Q, k), np.inf)
        out_n = np.zeros(Q, np.int64)
        if self._stored == 0:
            return out_ord, out_d2, out_n
        _knn_batch(
            self._children[: self._n_nodes],
            self._bucket[: self._n_nodes],
            self._bucket_count[: self._n_nodes],
            self._kind[: self._n_nodes],
            self._aabb_min[: self._n_nodes],
            self._aabb_max[: self._n_nodes],
            self._positions[: self._n_points],
            queries,
            k,
            out_ord,
            out_d2,
            out_n,
        )
        return out_ord, out_d2, out_n

    def positions_of(self, ordinals):
        return self._positions[np.asarray(ordinals, dtype=np.int64)]

    # -- introspection -----------------------------------------------------

    @property
    def point_count(self) -> int:
        return self._stored

    @property
    def rejected_count(self) -> int:
        return self._rejected

    @property
    def root_expansions(self) -> int:
        return self._root_expansions

    @property
    def _root_id(self) -> int:
        return 0

    def stats(self) -> TreeStats:
        n = self._n_nodes
        max_depth = int(self._depth[:n].max()) if n else 0
        mem = n * self.node_bytes + self._stored * POINT_BYTES
        return TreeStats(n, self._stored, max_depth, mem)

    def stored_items(self):
        """(positions (M,3), ordinals (M,)) of every bucketed point."""
        ords = []
        for node in range(self._n_nodes):
            cnt = self._bucket_count[node]
            if cnt:
                ords.append(self._bucket[node, :cnt].astype(np.int64))
        if not ords:
            return np.zeros((0, 3)), np.zeros(0, np.int64)
        ordinals = np.concatenate(ords)
        order = np.argsort(ordinals)
        ordinals = ordinals[order]
        return self._positions[ordinals], ordinals

    def leaf_assignments(self) -> dict:
        """ordinal -> node id holding it (bucket membership audit helper)."""
        out = {}
        for node in range(self._n_nodes):
            for j in range(self._bucket_count[node]):
                out[int(self._bucket[node, j])] = node
        return out

    def audit(self):
        """Containment and structure audit; raises AssertionError on violation."""
        for node in range(self._n_nodes):
            c, h = self._centers[node], self._half[node]
            cnt = self._bucket_count[node]
            if cnt:
                pts = self._positions[self._bucket[node, :cnt].astype(np.int64)]
                assert np.all(pts >= c - h) and np.all(pts < c + h), f"point outside box of node {node}"
            for b in range(8):
                ch = self._children[node, b]
                if ch >= 0:
                    assert self._kind[node] == 1, "leaf with children"
                    off = self._centers[ch] - c
                    bits = morton_child_index(self._centers[ch], c)
                    assert bits == b, f"child {ch} in wrong octant"
                    assert np.allclose(np.abs(off), h / 2.0), "child center misplaced"
                    assert self._half[ch] == h / 2.0, "child extent mismatch"

    def dump_csv(self, path):
        pts, ords = self.stored_items()
        with open(path, "w") as f:
            f.write("x,y,z,ordinal\n")
            for p, o in zip(pts, ords):
                f.write(f"{p[0]!r},{p[1]!r},{p[2]!r},{o}\n")
