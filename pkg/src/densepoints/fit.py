"""Two-stage fitting of free view maps to a target mesh.

The (x, y, z, mask-logit) maps at the fixed cube-corner views are the
parameters.  Stage 1 regresses their depth and mask directly against
rasterized ground truth at those views; stage 2 fuses them into a cloud,
pseudo-renders it from random novel views and descends the joint 2D
projection loss through the full chain of gradients.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ContractViolation, DegenerateMeshError
from .geometry import (
    CameraIntrinsics,
    ViewMaps,
    fixed_cube_viewpoints,
    fuse_views,
    image_to_camera_jacobian,
    sigmoid,
)
from .losses import LossWeights, mask_loss, total_loss
from .mesh import TriangleMesh, densify
from .metrics import ShapeError, shape_error
from .pseudo_render import SplatConfig, full_backward, pseudo_render_view
from .render_oracle import MaskImage, novel_viewpoint, rasterize, render_dataset


@dataclass(frozen=True)
class FitConfig:
    n_views: int = 8
    novel_views: int = 5
    lam: float = 1.0
    upsample: int = 5
    size: int = 128
    lr_stage1: float = 1e-2
    lr_stage2: float = 1e-4
    stage1_iters: int = 3000
    stage2_iters: int = 2000
    seed: int = 0
    cube_distance: float = 2.0
    extent: float = 1.2
    mask_threshold: float = 0.5
    beta: float = 2.0
    eps: float = 1e-7
    densify: int = 100_000
    pregen: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.n_views <= 8:
            raise ContractViolation("n_views must be between 1 and 8 (cube corners)")
        for name in ("novel_views", "upsample", "size", "densify", "workers"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")
        for name in ("stage1_iters", "stage2_iters", "pregen"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        for name in ("lr_stage1", "lr_stage2", "cube_distance", "extent", "beta"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive")
        if not 0 < self.mask_threshold < 1:
            raise ContractViolation("mask_threshold must lie in (0, 1)")

    @property
    def camera_distance(self):
        """Distance from the object center to every camera, fixed or novel."""
        return 3.0**0.5 * self.cube_distance

    def intrinsics(self):
        return CameraIntrinsics.for_image(self.size, self.size, self.extent)

    def splat_config(self):
        return SplatConfig(self.size, self.size, self.upsample, beta=self.beta)

    def loss_weights(self):
        return LossWeights(self.lam, self.eps, self.novel_views)

    def viewpoints(self):
        return fixed_cube_viewpoints(self.cube_distance)[: self.n_views]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls(np.zeros_like(params), np.zeros_like(params), **kw)


def adam_update(params, grads, state, lr):
    """One bias-corrected Adam step, in place on ``params`` and ``state``."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractViolation("parameter, gradient and moment shapes differ")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class StageLog:
    """Per-iteration loss rows ``(L_mask, L_depth, L_total)``."""

    losses: np.ndarray
    per_view_depth: np.ndarray = None
    adam: AdamState = None

    def __len__(self):
        return len(self.losses)


@dataclass
class FitReport:
    losses: np.ndarray
    stage1: StageLog = None
    shape_error: ShapeError = None
    stage1_error: ShapeError = None
    wall_time: float = 0.0
    counters: dict = field(default_factory=dict)
    maps: ViewMaps = None
    adam: AdamState = None

    @property
    def iterations(self):
        return len(self.losses)


def _render_fixed(mesh, cfg):
    k = cfg.intrinsics()
    depths, masks = [], []
    for n, T in enumerate(cfg.viewpoints()):
        depth, mask = rasterize(mesh, k, T, cfg.size, cfg.size)
        if not depth.valid.any():
            raise DegenerateMeshError(f"mesh leaves fixed view {n} empty")
        depths.append(depth.depth)
        masks.append(mask.prob)
    return np.stack(depths), np.stack(masks)


def initial_maps(gt_depth, transforms):
    """Identity x/y grid, per-view mean depth, zero mask logits."""
    n, h, w = gt_depth.shape
    data = np.zeros((n, h, w, 4))
    rows, cols = np.mgrid[0:h, 0:w]
    data[..., 0] = cols
    data[..., 1] = rows
    valid = np.isfinite(gt_depth)
    for i in range(n):
        data[i, ..., 2] = gt_depth[i][valid[i]].mean()
    return ViewMaps(data, list(transforms))


def pretrain_stage(mesh, cfg, state=None):
    """Fit depth and mask logits at the fixed views; returns ``(maps, log)``."""
    gt_depth, gt_mask = _render_fixed(mesh, cfg)
    maps = initial_maps(gt_depth, cfg.viewpoints())
    params = maps.data
    state = state or AdamState.zeros_like(params)
    valid = np.isfinite(gt_depth)
    gt_z = np.where(valid, gt_depth, 0.0)
    gt_masks = [MaskImage(m) for m in gt_mask]
    losses = np.zeros((cfg.stage1_iters, 3))
    per_view = np.zeros((cfg.stage1_iters, maps.n_views))
    grads = np.zeros_like(params)
    for it in range(cfg.stage1_iters):
        diff = np.where(valid, params[..., 2] - gt_z, 0.0)
        l1 = np.abs(diff).sum(axis=(1, 2))
        grads[..., 2] = cfg.lam * np.sign(diff)
        prob = sigmoid(params[..., 3])
        l_mask = 0.0
        for n in range(maps.n_views):
            lm, gm = mask_loss(MaskImage(prob[n]), gt_masks[n], cfg.eps)
            l_mask += lm
            grads[n, ..., 3] = gm * prob[n] * (1.0 - prob[n])
        losses[it] = l_mask, l1.sum(), l_mask + cfg.lam * l1.sum()
        per_view[it] = l1
        adam_update(params, grads, state, cfg.lr_stage1)
    return maps, StageLog(losses, per_view, state)


def _map_gradients(maps, k, flat, grad_points, grad_weights):
    """Chain canonical-point / presence gradients back to the view-map channels."""
    n_views, h, w = maps.n_views, maps.height, maps.width
    sel = maps.data.reshape(-1, 4)[flat]
    view = flat // (h * w)
    grad_cam = np.empty_like(grad_points)
    for n, T in enumerate(maps.transforms):
        rows = view == n
        # p = R^T (c - t)  =>  dL/dc = R dL/dp
        grad_cam[rows] = grad_points[rows] @ T.R.T
    J = image_to_camera_jacobian(k, sel[:, 0], sel[:, 1], sel[:, 2])
    grads = np.zeros((n_views * h * w, 4))
    grads[flat, :3] = np.einsum("nij,ni->nj", J, grad_cam)
    s = sigmoid(sel[:, 3])
    grads[flat, 3] = grad_weights * s * (1.0 - s)
    return grads.reshape(maps.data.shape)


def projection_loss(maps, views, k, splat_cfg, weights, mask_threshold=0.5, workers=1):
    """Joint projection loss of the fused maps and its gradient on the maps.

    ``views`` is a list of ``(transform, gt_depth, gt_mask)``.  Returns
    ``(LossTerms, grad_maps, stats)`` where ``stats`` lists the splat
    diagnostics per view.
    """
    points, flat = fuse_views(maps, k, mask_threshold, return_index=True)
    presence = sigmoid(maps.data.reshape(-1, 4)[flat, 3])

    def forward(view):
        T = view[0]
        return pseudo_render_view(points, k, T, splat_cfg, presence)

    with ThreadPoolExecutor(workers) if workers > 1 else _Serial() as pool:
        rendered = list(pool.map(forward, views))
    terms = total_loss(
        [(r[0], r[1], gt_d, gt_m) for r, (_, gt_d, gt_m) in zip(rendered, views)], weights
    )

    def backward(i):
        depth, mask, winners, projected = rendered[i]
        gd, gm = terms.grads[i]
        return full_backward(gd, gm, winners, projected, k, views[i][0], splat_cfg)

    with ThreadPoolExecutor(workers) if workers > 1 else _Serial() as pool:
        parts = list(pool.map(backward, range(len(views))))
    grad_points = np.zeros_like(points)
    grad_weights = np.zeros(len(points))
    for gp, gw in parts:  # fixed view order
        grad_points += gp
        grad_weights += gw
    grads = _map_gradients(maps, k, flat, grad_points, grad_weights)
    return terms, grads, [r[2].stats for r in rendered]


class _Serial:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def map(self, fn, items):
        return map(fn, items)


def finetune_stage(maps, mesh, cfg, novel_views=None, state=None):
    """Joint 2D projection optimization over ``cfg.novel_views`` random views per step.

    ``novel_views`` pins the viewpoints used at every iteration instead of
    sampling them.  With ``cfg.pregen > 0`` views are drawn (with
    replacement) from a pre-rendered set of that size.  Returns the updated
    maps and a :class:`FitReport` with one loss row per iteration.
    """
    start = time.perf_counter()
    maps = maps.copy()
    k = cfg.intrinsics()
    splat_cfg = cfg.splat_config()
    weights = cfg.loss_weights()
    state = state or AdamState.zeros_like(maps.data)
    rng = np.random.default_rng([cfg.seed, 2])
    pool = None
    if cfg.pregen and novel_views is None:
        pool = render_dataset(mesh, k, cfg.pregen, cfg.seed, cfg.size, cfg.size, cfg.camera_distance)
    fixed = None
    if novel_views is not None:
        fixed = [(T, *rasterize(mesh, k, T, cfg.size, cfg.size)) for T in novel_views]

    losses = np.zeros((cfg.stage2_iters, 3))
    counters = {"culled": 0, "dropped": 0, "collisions": 0, "occupied": 0}
    for it in range(cfg.stage2_iters):
        if fixed is not None:
            views = fixed
        elif pool is not None:
            views = [pool[i] for i in rng.integers(0, len(pool), cfg.novel_views)]
        else:
            poses = [novel_viewpoint(rng, cfg.camera_distance) for _ in range(cfg.novel_views)]
            views = [(T, *rasterize(mesh, k, T, cfg.size, cfg.size)) for T in poses]
        terms, grads, stats = projection_loss(
            maps, views, k, splat_cfg, weights, cfg.mask_threshold, cfg.workers
        )
        losses[it] = terms.mask, terms.depth, terms.total
        for s in stats:
            for key, value in s.as_dict().items():
                counters[key] += value
        adam_update(maps.data, grads, state, cfg.lr_stage2)
    report = FitReport(losses, counters=counters, wall_time=time.perf_counter() - start,
                       maps=maps, adam=state)
    return maps, report


def fit_shape(mesh, cfg=FitConfig()):
    """Stage 1, stage 2, then fuse; the report carries the final shape error."""
    start = time.perf_counter()
    k = cfg.intrinsics()
    gt = densify(mesh, cfg.densify, cfg.seed)
    maps, log1 = pretrain_stage(mesh, cfg)
    cloud1 = fuse_views(maps, k, cfg.mask_threshold)
    err1 = shape_error(cloud1, gt, workers=cfg.workers) if len(cloud1) else None
    if cfg.stage2_iters:
        maps, report = finetune_stage(maps, mesh, cfg)
        cloud = fuse_views(maps, k, cfg.mask_threshold)
        err = shape_error(cloud, gt, workers=cfg.workers) if len(cloud) else None
    else:
        report = FitReport(np.zeros((0, 3)), maps=maps, adam=log1.adam)
        cloud, err = cloud1, err1
    report.stage1 = log1
    report.stage1_error = err1
    report.shape_error = err
    report.wall_time = time.perf_counter() - start
    return cloud, report


class DensePointCloudFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit_shape`.

    ``fit`` takes a :class:`~densepoints.mesh.TriangleMesh`; afterwards
    ``cloud_``, ``view_maps_`` and ``report_`` hold the results.
    """

    def __init__(self, n_views=8, novel_views=5, lam=1.0, upsample=5, size=128,
                 lr_stage1=1e-2, lr_stage2=1e-4, stage1_iters=3000, stage2_iters=2000,
                 seed=0, cube_distance=2.0, extent=1.2, mask_threshold=0.5, beta=2.0,
                 densify=100_000, pregen=0, workers=1):
        self.n_views = n_views
        self.novel_views = novel_views
        self.lam = lam
        self.upsample = upsample
        self.size = size
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.stage1_iters = stage1_iters
        self.stage2_iters = stage2_iters
        self.seed = seed
        self.cube_distance = cube_distance
        self.extent = extent
        self.mask_threshold = mask_threshold
        self.beta = beta
        self.densify = densify
        self.pregen = pregen
        self.workers = workers

    def _config(self):
        names = {f.name for f in fields(FitConfig)}
        return FitConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None):
        if not isinstance(X, TriangleMesh):
            raise ContractViolation("X must be a TriangleMesh")
        self.config_ = self._config()
        self.cloud_, self.report_ = fit_shape(X, self.config_)
        self.view_maps_ = self.report_.maps
        return self

    def predict(self, X=None):
        """The fused point cloud (``X`` is ignored)."""
        check_is_fitted(self, "cloud_")
        return self.cloud_

    def score(self, X, y=None):
        """Negative mean of both directional errors against mesh ``X``."""
        check_is_fitted(self, "cloud_")
        err = shape_error(self.cloud_, densify(X, self.densify, self.seed))
        return -(err.pred_to_gt + err.gt_to_pred) / 2.0
