"""Camera models, rigid transforms and the fuse / re-project coordinate maps.

Conventions
-----------
* Camera frame: x right, y down, z forward (depth).
* Pixel ``(i, j)`` has its center at continuous coordinate ``(u, v) = (i, j)``
  and covers ``[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)``.  Image arrays are
  indexed ``[row, col] = [v, u]``.
* ``RigidTransform`` maps canonical (world) points into a camera frame:
  ``p_cam = R @ p + t``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ._validation import ContractViolation, check_positive, check_rotation

ORTHOGRAPHIC = "orthographic"
PERSPECTIVE = "perspective"
Z_NEAR = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    mode: str = ORTHOGRAPHIC

    def __post_init__(self):
        if self.mode not in (ORTHOGRAPHIC, PERSPECTIVE):
            raise ContractViolation(f"unknown projection mode {self.mode!r}")
        for name in ("fx", "fy", "cx", "cy"):
            if not np.isfinite(getattr(self, name)):
                raise ContractViolation(f"{name} must be finite")
        check_positive(self.fx, "fx")
        check_positive(self.fy, "fy")

    @classmethod
    def for_image(cls, height, width, extent, mode=ORTHOGRAPHIC):
        """Orthographic-style intrinsics whose frame spans ``[-extent, extent]``.

        The scale maps ``2 * extent`` world units onto ``width`` pixels and
        the principal point sits at the geometric image center.
        """
        check_positive(extent, "extent")
        scale = width / (2.0 * extent)
        return cls(scale, scale, (width - 1) / 2.0, (height - 1) / 2.0, mode)

    @property
    def orthographic(self):
        return self.mode == ORTHOGRAPHIC

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = check_rotation(self.R)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ContractViolation("translation must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, p):
        """Map canonical point(s) of shape (3,) or (n, 3) into this frame."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.R.T + self.t

    def inverse(self):
        return RigidTransform(self.R.T.copy(), -(self.R.T @ self.t))

    def __matmul__(self, other):
        # (A @ B).apply(p) == A.apply(B.apply(p))
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash((self.R.tobytes(), self.t.tobytes()))

    def as_row(self):
        """12 numbers: R row-major followed by t."""
        return np.concatenate([self.R.ravel(), self.t])

    @classmethod
    def from_row(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (12,):
            raise ContractViolation(f"pose needs 12 numbers, got {values.size}")
        return cls(values[:9].reshape(3, 3), values[9:])


@dataclass
class ViewMaps:
    """Per-view (x, y, z, mask-logit) grids in view-image coordinates.

    ``data`` has shape (n_views, height, width, 4).
    """

    data: np.ndarray
    transforms: list

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[-1] != 4:
            raise ContractViolation(f"view maps must be (N, H, W, 4), got {self.data.shape}")
        if len(self.transforms) != self.data.shape[0]:
            raise ContractViolation("n_views does not match the number of transforms")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation("view maps contain non-finite values")

    @property
    def n_views(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def copy(self):
        return ViewMaps(self.data.copy(), list(self.transforms))


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ContractViolation("non-finite input coordinates")


def image_to_camera(k, u, v, z):
    """Lift image coordinates with depth to camera-frame points (K^-1 x)."""
    u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
    _finite(u, v, z)
    x = (u - k.cx) / k.fx
    y = (v - k.cy) / k.fy
    if not k.orthographic:
        x = z * x
        y = z * y
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def image_to_camera_jacobian(k, u, v, z):
    """Per-point 3x3 Jacobian d(camera point)/d(u, v, z), shape (..., 3, 3)."""
    u, v, z = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, z)))
    J = np.zeros(u.shape + (3, 3))
    if k.orthographic:
        J[..., 0, 0] = 1.0 / k.fx
        J[..., 1, 1] = 1.0 / k.fy
    else:
        J[..., 0, 0] = z / k.fx
        J[..., 1, 1] = z / k.fy
        J[..., 0, 2] = (u - k.cx) / k.fx
        J[..., 1, 2] = (v - k.cy) / k.fy
    J[..., 2, 2] = 1.0
    return J


def camera_to_image(k, transform, p, z_near=Z_NEAR):
    """Project canonical point(s) into image coordinates: K (R p + t).

    Returns ``(u, v, z, culled)``; ``culled`` flags points whose camera depth
    is at or behind ``z_near``.  Culled points still get coordinates, callers
    are expected to skip them.
    """
    p = np.asarray(p, dtype=np.float64)
    _finite(p)
    cam = transform.apply(p)
    x, y, z = cam[..., 0], cam[..., 1], cam[..., 2]
    culled = z <= z_near
    if k.orthographic:
        u = k.fx * x + k.cx
        v = k.fy * y + k.cy
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(culled, np.nan, k.fx * x / z + k.cx)
            v = np.where(culled, np.nan, k.fy * y / z + k.cy)
    return u, v, z, culled


def fuse_views(maps, k, mask_threshold=0.5, return_index=False):
    """Fuse all view maps into one canonical point cloud.

    A pixel is kept when ``sigmoid(mask_logit) >= mask_threshold``; its point
    is ``R_n^T (K^-1 x - t_n)``.  Output order is view-major, then row, then
    column.  With ``return_index`` the flat indices into ``maps.data[..., 0]``
    of the kept pixels are returned as well.
    """
    if not 0.0 < mask_threshold < 1.0:
        raise ContractViolation("mask_threshold must lie in (0, 1)")
    data = maps.data
    keep = sigmoid(data[..., 3]) >= mask_threshold
    flat = np.flatnonzero(keep)
    view = flat // (maps.height * maps.width)
    sel = data.reshape(-1, 4)[flat]
    cam = image_to_camera(k, sel[:, 0], sel[:, 1], sel[:, 2])
    points = np.empty((len(flat), 3))
    for n, T in enumerate(maps.transforms):
        rows = view == n
        if rows.any():
            points[rows] = (cam[rows] - T.t) @ T.R
    if return_index:
        return points, flat
    return points


def compose_effective(view_n, novel_k):
    """Single transform taking view-``n`` camera coordinates to novel view ``k``."""
    return novel_k @ view_n.inverse()


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera at ``eye`` looking at ``target`` with image y pointing away from ``up``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(forward, (1.0, 0.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return RigidTransform(R, -(R @ eye))


def fixed_cube_viewpoints(distance):
    """Eight look-at transforms from the corners ``(+-d, +-d, +-d)`` of a centered cube.

    Corner order follows ``itertools.product((1, -1), repeat=3)`` over (x, y, z).
    """
    check_positive(distance, "distance")
    return [look_at(np.array(s, dtype=np.float64) * distance) for s in itertools.product((1, -1), repeat=3)]


def quaternion_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng):
    """Haar-uniform random rotation with zero translation.

    Draws four standard normals from ``rng`` (a ``numpy.random.Generator``)
    and normalizes them into a unit quaternion.
    """
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return RigidTransform(quaternion_to_matrix(q), np.zeros(3))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
