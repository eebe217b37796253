"""Z-buffer triangle rasterization of meshes into depth / mask images.

This is the ground-truth renderer: exact coverage at pixel centers with a
top-left fill rule and per-pixel minimum depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ._validation import ContractViolation
from .geometry import Z_NEAR, RigidTransform, camera_to_image, random_rotation

DEFAULT_DISTANCE = 2.0 * 3.0**0.5


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Depth per pixel; invalid pixels hold ``+inf``."""

    depth: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ContractViolation("depth image must be 2-D")
        if np.any(np.isnan(d)) or np.any(d == -np.inf):
            raise ContractViolation("depth must be finite or +inf")
        object.__setattr__(self, "depth", d)

    @classmethod
    def empty(cls, height, width):
        return cls(np.full((height, width), np.inf))

    @property
    def valid(self):
        return np.isfinite(self.depth)

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True, eq=False)
class MaskImage:
    prob: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prob, dtype=np.float64)
        if p.ndim != 2:
            raise ContractViolation("mask image must be 2-D")
        if np.any(~(p >= 0.0)) or np.any(p > 1.0):
            raise ContractViolation("mask probabilities must lie in [0, 1]")
        object.__setattr__(self, "prob", p)

    @property
    def shape(self):
        return self.prob.shape


@numba.njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    # canonical evaluation so that a shared edge yields exactly negated values
    if ax < bx or (ax == bx and ay < by):
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    return -((ax - bx) * (py - by) - (ay - by) * (px - bx))


@numba.njit(cache=True, inline="always")
def _owns(ax, ay, bx, by):
    # top-left rule for an edge whose interior has positive edge function
    dy = by - ay
    return dy < 0.0 or (dy == 0.0 and bx - ax > 0.0)


@numba.njit(cache=True, nogil=True)
def _rasterize_kernel(u, v, z, tris, skip, perspective, z_near, zbuf):
    height, width = zbuf.shape
    for f in range(tris.shape[0]):
        if skip[f]:
            continue
        # sorted corners make the result independent of winding and rotation
        i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
        if i0 > i1:
            i0, i1 = i1, i0
        if i1 > i2:
            i1, i2 = i2, i1
        if i0 > i1:
            i0, i1 = i1, i0
        area = _edge(u[i0], v[i0], u[i1], v[i1], u[i2], v[i2])
        if area == 0.0:
            continue
        if area < 0.0:
            i1, i2 = i2, i1
            area = -area
        x0, y0, x1, y1, x2, y2 = u[i0], v[i0], u[i1], v[i1], u[i2], v[i2]
        if perspective:
            a0, a1, a2 = 1.0 / z[i0], 1.0 / z[i1], 1.0 / z[i2]
        else:
            a0, a1, a2 = z[i0], z[i1], z[i2]
        own0 = _owns(x1, y1, x2, y2)
        own1 = _owns(x2, y2, x0, y0)
        own2 = _owns(x0, y0, x1, y1)
        cmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        cmax = min(int(np.floor(max(x0, x1, x2))), width - 1)
        rmin = max(int(np.ceil(min(y0, y1, y2))), 0)
        rmax = min(int(np.floor(max(y0, y1, y2))), height - 1)
        for r in range(rmin, rmax + 1):
            py = float(r)
            for c in range(cmin, cmax + 1):
                px = float(c)
                w0 = _edge(x1, y1, x2, y2, px, py)
                if w0 < 0.0 or (w0 == 0.0 and not own0):
                    continue
                w1 = _edge(x2, y2, x0, y0, px, py)
                if w1 < 0.0 or (w1 == 0.0 and not own1):
                    continue
                w2 = _edge(x0, y0, x1, y1, px, py)
                if w2 < 0.0 or (w2 == 0.0 and not own2):
                    continue
                b1 = w1 / area
                b2 = w2 / area
                val = a0 + b1 * (a1 - a0) + b2 * (a2 - a0)
                depth = 1.0 / val if perspective else val
                if depth > z_near and depth < zbuf[r, c]:
                    zbuf[r, c] = depth


def rasterize(mesh, k, transform, height, width, z_near=Z_NEAR):
    """Render ``mesh`` seen through ``transform`` into (DepthImage, MaskImage).

    Coverage is tested at pixel centers; ties on shared edges go to the
    triangle owning the edge (top-left rule).  Back faces are kept.  Depth
    is interpolated linearly in screen space for orthographic cameras and
    in 1/z for perspective ones.  In perspective mode triangles touching
    ``z_near`` are skipped whole.
    """
    zbuf = np.full((height, width), np.inf)
    if len(mesh.triangles):
        u, v, z, culled = camera_to_image(k, transform, mesh.vertices, z_near=z_near)
        tris = mesh.triangles
        if k.orthographic:
            skip = np.zeros(len(tris), dtype=np.bool_)
        else:
            skip = culled[tris].any(axis=1)
            u = np.where(culled, 0.0, u)
            v = np.where(culled, 0.0, v)
        _rasterize_kernel(
            np.ascontiguousarray(u), np.ascontiguousarray(v), np.ascontiguousarray(z),
            tris, skip, not k.orthographic, z_near, zbuf,
        )
    mask = np.isfinite(zbuf).astype(np.float64)
    return DepthImage(zbuf), MaskImage(mask)


def novel_viewpoint(rng, distance=DEFAULT_DISTANCE):
    """Random-rotation viewpoint placed ``distance`` in front of the object center."""
    R = random_rotation(rng).R
    return RigidTransform(R, np.array([0.0, 0.0, distance]))


def render_dataset(mesh, k, n_images, seed, height, width, distance=DEFAULT_DISTANCE):
    """Rasterize ``n_images`` views from uniformly random rotations about the origin.

    Returns a list of ``(transform, depth, mask)`` triples.
    """
    if n_images <= 0:
        raise ContractViolation("n_images must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_images):
        T = novel_viewpoint(rng, distance)
        depth, mask = rasterize(mesh, k, T, height, width)
        out.append((T, depth, mask))
    return out
