"""Pseudo-rendering: differentiable point splatting with inverse-depth max pooling.

Projected points are discretized on a grid upsampled ``U`` times, each cell
keeps its nearest point (largest inverse depth) and a ``U x U`` max pool
brings the result back to the target resolution.  Because the nearest point
of a pooled block is the nearest point of all its cells, the forward pass
resolves winners directly per output pixel; the upsampled grid is still
walked to count cell collisions.

Nearest is decided on ``z`` itself rather than on ``1/z`` so that the output
depth is exactly the winner's ``z`` (``1/(1/z)`` is not always ``z`` in
floating point).  Ties go to the lower source id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from ._validation import ContractViolation, check_points
from .geometry import Z_NEAR, camera_to_image
from .render_oracle import DepthImage, MaskImage


@dataclass(frozen=True)
class SplatConfig:
    """Output size, upsampling factor ``U``, near plane and mask sharpness.

    ``beta = inf`` gives a hard 0/1 mask.
    """

    height: int
    width: int
    upsample: int = 5
    z_near: float = Z_NEAR
    beta: float = 2.0

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ContractViolation("image size must be positive")
        if int(self.upsample) != self.upsample or self.upsample < 1:
            raise ContractViolation("upsample must be an integer >= 1")
        if not self.z_near > 0:
            raise ContractViolation("z_near must be positive")
        if not self.beta > 0:
            raise ContractViolation("beta must be positive")

    @property
    def hard_mask(self):
        return np.isinf(self.beta)


@dataclass(frozen=True, eq=False)
class ProjectedPoints:
    """Image-space points in front of the camera.

    ``ids`` index the originating point list, ``weights`` are per-point
    presence values entering the soft occupancy count (1 by default).
    ``transform`` / ``intrinsics`` / ``source_count`` are set when the points
    come from :func:`pseudo_render_view` and let the backward pass detect
    mismatched records.
    """

    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    ids: np.ndarray
    weights: np.ndarray = None
    n_culled: int = 0
    source_count: int = None
    transform: object = None
    intrinsics: object = None

    def __post_init__(self):
        n = len(self.z)
        conv = {name: np.asarray(getattr(self, name), dtype=np.float64) for name in ("u", "v", "z")}
        for name, arr in conv.items():
            if arr.shape != (n,):
                raise ContractViolation(f"{name} must be 1-D of length {n}")
            object.__setattr__(self, name, arr)
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (n,):
            raise ContractViolation("ids must match the point count")
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (n,) or np.any(~(w > 0)):
            raise ContractViolation("weights must be positive, one per point")
        if not all(np.all(np.isfinite(a)) for a in (self.u, self.v, self.z)):
            raise ContractViolation("projected coordinates must be finite")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.z)

    @classmethod
    def from_arrays(cls, u, v, z, ids=None):
        n = len(np.atleast_1d(z))
        return cls(np.atleast_1d(u), np.atleast_1d(v), np.atleast_1d(z),
                   np.arange(n) if ids is None else ids)


@dataclass(frozen=True)
class SplatStats:
    culled: int
    dropped: int
    collisions: int
    occupied: int

    def as_dict(self):
        return {"culled": self.culled, "dropped": self.dropped,
                "collisions": self.collisions, "occupied": self.occupied}


@dataclass(frozen=True, eq=False)
class WinnerMap:
    """Per output pixel: which projected point supplied the depth.

    ``winner`` holds positions into the :class:`ProjectedPoints` arrays
    (-1 for empty pixels), ``pixel`` the flat output pixel of every point
    (-1 when dropped) and ``count`` the soft occupancy count per pixel.
    """

    winner: np.ndarray
    pixel: np.ndarray
    count: np.ndarray
    source_ids: np.ndarray
    stats: SplatStats = field(default=None)


@numba.njit(cache=True, nogil=True)
def _splat_kernel(u, v, z, ids, weights, z_near, height, width, up,
                  best_z, best_i, count, pixel, cells):
    wu = width * up
    hu = height * up
    dropped = 0
    occupied_cells = 0
    in_frame = 0
    for i in range(z.shape[0]):
        if not z[i] > z_near:
            pixel[i] = -1
            continue
        cu = np.floor((u[i] + 0.5) * up)
        cv = np.floor((v[i] + 0.5) * up)
        if cu < 0 or cv < 0 or cu >= wu or cv >= hu:
            pixel[i] = -1
            dropped += 1
            continue
        icu = int(cu)
        icv = int(cv)
        in_frame += 1
        cell = icv * wu + icu
        if cells[cell] == 0:
            occupied_cells += 1
        cells[cell] += 1
        p = (icv // up) * width + icu // up
        pixel[i] = p
        count[p] += weights[i]
        b = best_i[p]
        if b < 0 or z[i] < best_z[p] or (z[i] == best_z[p] and ids[i] < ids[b]):
            best_z[p] = z[i]
            best_i[p] = i
    return dropped, in_frame - occupied_cells


def splat(points, cfg):
    """Splat projected points into (DepthImage, MaskImage, WinnerMap).

    Point ``i`` lands in upsampled cell ``floor((u + 0.5) * U)`` (same for
    ``v``) and is dropped when that falls outside the ``H*U x W*U`` grid.
    Mask probability is ``1 - exp(-beta * c)`` with ``c`` the summed weights
    of the points in the pixel's block.
    """
    H, W, U = cfg.height, cfg.width, int(cfg.upsample)
    n = len(points)
    best_z = np.full(H * W, np.inf)
    best_i = np.full(H * W, -1, dtype=np.int64)
    count = np.zeros(H * W)
    pixel = np.empty(n, dtype=np.int64)
    cells = np.zeros(H * U * W * U, dtype=np.int32)
    dropped, collisions = _splat_kernel(
        points.u, points.v, points.z, points.ids, points.weights, float(cfg.z_near),
        H, W, U, best_z, best_i, count, pixel, cells,
    )
    # points at or behind z_near that reached splat directly count as culled
    culled = int(points.n_culled) + int(np.count_nonzero(~(points.z > cfg.z_near)))
    occupied = best_i >= 0
    if cfg.hard_mask:
        prob = occupied.astype(np.float64)
    else:
        prob = -np.expm1(-cfg.beta * count)
    stats = SplatStats(culled, int(dropped), int(collisions), int(np.count_nonzero(occupied)))
    source = np.full(H * W, -1, dtype=np.int64)
    source[occupied] = points.ids[best_i[occupied]]
    winners = WinnerMap(best_i.reshape(H, W), pixel, count.reshape(H, W), source.reshape(H, W), stats)
    return DepthImage(best_z.reshape(H, W)), MaskImage(prob.reshape(H, W)), winners


def splat_backward(grad_depth, grad_mask, winners, points, cfg):
    """Route image gradients back to the projected points.

    Returns ``(grad_uvz, grad_weight)`` of shapes (n, 3) and (n,).  Depth
    gradient goes to each pixel's winner only (d depth / d z' = 1); the
    ``u'`` and ``v'`` columns are identically zero because discretization is
    piecewise constant.  Mask gradient reaches the weight of every point in
    the pixel through ``d prob / d c = beta * exp(-beta * c)``.
    """
    H, W = cfg.height, cfg.width
    grad_depth = np.asarray(grad_depth, dtype=np.float64)
    grad_mask = np.asarray(grad_mask, dtype=np.float64)
    if grad_depth.shape != (H, W) or grad_mask.shape != (H, W):
        raise ContractViolation("gradient images do not match the splat size")
    if winners.winner.shape != (H, W) or len(winners.pixel) != len(points):
        raise ContractViolation("winner map does not belong to these points")
    n = len(points)
    grad_uvz = np.zeros((n, 3))
    win = winners.winner.ravel()
    occ = win >= 0
    grad_uvz[win[occ], 2] = grad_depth.ravel()[occ]

    grad_weight = np.zeros(n)
    if not cfg.hard_mask:
        dprob = cfg.beta * np.exp(-cfg.beta * winners.count.ravel()) * grad_mask.ravel()
        hit = winners.pixel >= 0
        grad_weight[hit] = dprob[winners.pixel[hit]]
    return grad_uvz, grad_weight


def project_cloud(cloud, k, novel, z_near=Z_NEAR, weights=None):
    """Project a canonical cloud into a novel view, dropping culled points."""
    cloud = check_points(cloud, "cloud")
    n = len(cloud)
    if n == 0:
        u = v = z = np.zeros(0)
        keep = np.zeros(0, dtype=bool)
    else:
        u, v, z, culled = camera_to_image(k, novel, cloud, z_near=z_near)
        keep = ~culled
    ids = np.flatnonzero(keep)
    w = None if weights is None else np.asarray(weights, dtype=np.float64)[ids]
    return ProjectedPoints(
        u[keep], v[keep], z[keep], ids, w,
        n_culled=int(n - len(ids)), source_count=n, transform=novel, intrinsics=k,
    )


def pseudo_render_view(cloud, k, novel, cfg, weights=None):
    """Pseudo-render ``cloud`` from viewpoint ``novel``.

    Returns ``(depth, mask, winners, projected)``; the last two are the
    records :func:`full_backward` needs.
    """
    projected = project_cloud(cloud, k, novel, cfg.z_near, weights)
    depth, mask, winners = splat(projected, cfg)
    return depth, mask, winners, projected


def full_backward(grad_depth, grad_mask, winners, projected, k, novel, cfg):
    """Chain image gradients to the canonical points of a pseudo-rendered cloud.

    Returns ``(grad_points, grad_weights)`` with one row / entry per source
    point; culled points receive zero.  Since only ``z'`` carries gradient,
    ``d loss / d p = (d loss / d z') * R_novel[2]`` for both projection modes.
    """
    if projected.transform is None or projected.source_count is None:
        raise ContractViolation("records do not come from pseudo_render_view")
    if not (projected.transform == novel) or projected.intrinsics != k:
        raise ContractViolation("records were produced for a different camera")
    grad_uvz, grad_w = splat_backward(grad_depth, grad_mask, winners, projected, cfg)
    n = projected.source_count
    grad_points = np.zeros((n, 3))
    grad_points[projected.ids] = grad_uvz[:, 2:3] * novel.R[2]
    grad_weights = np.zeros(n)
    grad_weights[projected.ids] = grad_w
    return grad_points, grad_weights
