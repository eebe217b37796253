"""Bidirectional average nearest-neighbor distance between point sets.

Nearest neighbors come from an exact k-d tree.  Squared distances are
accumulated as ``dx*dx + dy*dy + dz*dz`` everywhere (tree, scan and tests)
so indexed and brute-force results agree bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from ._validation import ContractViolation, check_points

DEFAULT_LEAF_SIZE = 16
_QUERY_CHUNK = 8192


@dataclass(frozen=True)
class ShapeError:
    pred_to_gt: float
    gt_to_pred: float

    def scaled(self, factor=100.0):
        return ShapeError(self.pred_to_gt * factor, self.gt_to_pred * factor)


class NnIndex:
    """Balanced k-d tree with median splits along the widest axis.

    Every node stores its bounding box; queries prune a subtree only when the
    box is provably no closer than the best candidate, so answers are exact.
    """

    def __init__(self, points, leaf_size=DEFAULT_LEAF_SIZE):
        pts = check_points(points, "points")
        if len(pts) == 0:
            raise ContractViolation("cannot index an empty point set")
        if leaf_size < 1:
            raise ContractViolation("leaf_size must be >= 1")
        self.points = pts
        self.leaf_size = int(leaf_size)
        self._build()

    def __len__(self):
        return len(self.points)

    def _build(self):
        pts = self.points
        perm = np.arange(len(pts))
        starts, ends, lefts, rights, lo, hi = [], [], [], [], [], []

        def node(start, end):
            idx = len(starts)
            sub = pts[perm[start:end]]
            starts.append(start)
            ends.append(end)
            lefts.append(-1)
            rights.append(-1)
            lo.append(sub.min(axis=0))
            hi.append(sub.max(axis=0))
            return idx

        root = node(0, len(pts))
        stack = [root]
        while stack:
            i = stack.pop()
            start, end = starts[i], ends[i]
            if end - start <= self.leaf_size:
                continue
            axis = int(np.argmax(hi[i] - lo[i]))
            seg = perm[start:end]
            # stable sort: equal coordinates keep ascending point index
            order = np.argsort(pts[seg, axis], kind="stable")
            perm[start:end] = seg[order]
            mid = start + (end - start) // 2
            lefts[i] = node(start, mid)
            rights[i] = node(mid, end)
            stack += [rights[i], lefts[i]]

        self._perm = perm
        self._sorted = np.ascontiguousarray(pts[perm])
        self._start = np.asarray(starts, dtype=np.int64)
        self._end = np.asarray(ends, dtype=np.int64)
        self._left = np.asarray(lefts, dtype=np.int64)
        self._right = np.asarray(rights, dtype=np.int64)
        self._lo = np.ascontiguousarray(lo)
        self._hi = np.ascontiguousarray(hi)

    def query(self, queries, workers=1):
        """Exact nearest neighbor for each query: ``(distances, indices)``."""
        q = check_points(queries, "queries")
        dist = np.empty(len(q))
        index = np.empty(len(q), dtype=np.int64)

        def run(lo_hi):
            a, b = lo_hi
            _query_kernel(q[a:b], self._sorted, self._start, self._end, self._left,
                          self._right, self._lo, self._hi, dist[a:b], index[a:b])

        _chunked(run, len(q), workers)
        return dist, self._perm[index]


def _chunked(fn, n, workers):
    spans = [(a, min(a + _QUERY_CHUNK, n)) for a in range(0, n, _QUERY_CHUNK)]
    if workers <= 1 or len(spans) <= 1:
        for span in spans:
            fn(span)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(fn, spans))


@numba.njit(cache=True, nogil=True)
def _query_kernel(q, pts, start, end, left, right, lo, hi, out_dist, out_index):
    stack = np.empty(128, dtype=np.int64)
    for k in range(q.shape[0]):
        qx, qy, qz = q[k, 0], q[k, 1], q[k, 2]
        best = np.inf
        best_j = -1
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            nd = stack[top]
            # lower bound on squared distance to anything inside the box
            dx = max(lo[nd, 0] - qx, 0.0, qx - hi[nd, 0])
            dy = max(lo[nd, 1] - qy, 0.0, qy - hi[nd, 1])
            dz = max(lo[nd, 2] - qz, 0.0, qz - hi[nd, 2])
            if dx * dx + dy * dy + dz * dz >= best and best_j >= 0:
                continue
            if left[nd] < 0:
                for j in range(start[nd], end[nd]):
                    ex = pts[j, 0] - qx
                    ey = pts[j, 1] - qy
                    ez = pts[j, 2] - qz
                    d2 = ex * ex + ey * ey + ez * ez
                    if d2 < best:
                        best = d2
                        best_j = j
                continue
            a, b = left[nd], right[nd]
            # push the farther child first so the nearer one is explored next
            ca = _box_center_d2(lo, hi, a, qx, qy, qz)
            cb = _box_center_d2(lo, hi, b, qx, qy, qz)
            if ca <= cb:
                stack[top] = b
                stack[top + 1] = a
            else:
                stack[top] = a
                stack[top + 1] = b
            top += 2
        out_dist[k] = np.sqrt(best)
        out_index[k] = best_j


@numba.njit(cache=True, inline="always")
def _box_center_d2(lo, hi, nd, qx, qy, qz):
    cx = 0.5 * (lo[nd, 0] + hi[nd, 0]) - qx
    cy = 0.5 * (lo[nd, 1] + hi[nd, 1]) - qy
    cz = 0.5 * (lo[nd, 2] + hi[nd, 2]) - qz
    return cx * cx + cy * cy + cz * cz


@numba.njit(cache=True, nogil=True)
def _scan_kernel(q, pts, out):
    for k in range(q.shape[0]):
        best = np.inf
        for j in range(pts.shape[0]):
            ex = pts[j, 0] - q[k, 0]
            ey = pts[j, 1] - q[k, 1]
            ez = pts[j, 2] - q[k, 2]
            d2 = ex * ex + ey * ey + ez * ez
            if d2 < best:
                best = d2
        out[k] = np.sqrt(best)


def build_index(points, leaf_size=DEFAULT_LEAF_SIZE):
    return NnIndex(points, leaf_size)


def scan_nn_distances(source, target, workers=1):
    """Nearest distances by exhaustive O(n*m) scan."""
    src = check_points(source, "source")
    tgt = np.ascontiguousarray(check_points(target, "target", allow_empty=False))
    out = np.empty(len(src))

    def run(span):
        a, b = span
        _scan_kernel(src[a:b], tgt, out[a:b])

    _chunked(run, len(src), workers)
    return out


def mean_nn_distance(source, target_index, workers=1):
    src = check_points(source, "source", allow_empty=False)
    dist, _ = target_index.query(src, workers)
    return float(np.mean(dist))


def shape_error(pred, gt_surface, exact_scan=False, workers=1, leaf_size=DEFAULT_LEAF_SIZE):
    """Prediction-to-ground-truth and ground-truth-to-prediction mean distances.

    ``gt_surface`` may be :class:`~densepoints.mesh.SurfaceSamples` or a raw
    (n, 3) array.  ``exact_scan`` swaps the tree for the exhaustive scan.
    """
    gt = getattr(gt_surface, "points", gt_surface)
    pred = check_points(pred, "prediction", allow_empty=False)
    gt = check_points(gt, "ground truth", allow_empty=False)
    if exact_scan:
        p2g = float(np.mean(scan_nn_distances(pred, gt, workers)))
        g2p = float(np.mean(scan_nn_distances(gt, pred, workers)))
    else:
        p2g = mean_nn_distance(pred, NnIndex(gt, leaf_size), workers)
        g2p = mean_nn_distance(gt, NnIndex(pred, leaf_size), workers)
    return ShapeError(p2g, g2p)
