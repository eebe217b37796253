import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from densepoints._validation import ContractViolation
from densepoints.geometry import CameraIntrinsics, RigidTransform, random_rotation
from densepoints.mesh import densify, icosphere
from densepoints.pseudo_render import (
    ProjectedPoints,
    SplatConfig,
    full_backward,
    pseudo_render_view,
    splat,
    splat_backward,
)
from densepoints.render_oracle import rasterize

PIX = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)


def brute_force(u, v, z, ids, H, W, U):
    """Per-pixel scan: nearest point among those whose cell falls in the block."""
    depth = np.full((H, W), np.inf)
    src = np.full((H, W), -1)
    count = np.zeros((H, W))
    cu = np.floor((u + 0.5) * U)
    cv = np.floor((v + 0.5) * U)
    for r in range(H):
        for c in range(W):
            inside = (cu >= c * U) & (cu < (c + 1) * U) & (cv >= r * U) & (cv < (r + 1) * U) & (z > 1e-6)
            if not inside.any():
                continue
            zs, ii = z[inside], ids[inside]
            best = zs.min()
            depth[r, c] = best
            src[r, c] = ii[zs == best].min()
            count[r, c] = inside.sum()
    return depth, src, count


def random_scene(rng, n=None, H=None, W=None, ties=False):
    H = H or int(rng.integers(1, 33))
    W = W or int(rng.integers(1, 33))
    n = int(rng.integers(0, 501)) if n is None else n
    u = rng.uniform(-2, W + 1, n)
    v = rng.uniform(-2, H + 1, n)
    z = rng.choice([1.0, 2.0, 3.0], n) if ties else rng.uniform(0.5, 4, n)
    return ProjectedPoints.from_arrays(u, v, z), H, W


# -- forward ---------------------------------------------------------------------

def test_single_point_rounds_to_nearest_pixel():
    cfg = SplatConfig(128, 128, 1)
    depth, mask, win = splat(ProjectedPoints.from_arrays(10.2, 20.7, 4.0), cfg)
    assert np.argwhere(depth.valid).tolist() == [[21, 10]]
    assert depth.depth[21, 10] == 4.0
    assert win.source_ids[21, 10] == 0 and win.stats.occupied == 1


def test_collision_keeps_nearer_point():
    cfg = SplatConfig(16, 16, 1)
    depth, _, win = splat(ProjectedPoints.from_arrays([5.0, 5.1], [5.0, 5.0], [3.0, 2.0]), cfg)
    assert depth.depth[5, 5] == 2.0 and win.source_ids[5, 5] == 1
    assert win.stats.collisions == 1


def test_upsampling_separates_close_points():
    pts = ProjectedPoints.from_arrays([10.0, 10.4], [7.0, 7.0], [2.0, 3.0])
    d1, _, w1 = splat(pts, SplatConfig(16, 16, 1))
    d5, _, w5 = splat(pts, SplatConfig(16, 16, 5))
    # scalar reference for the cells: floor((u + 0.5) U)
    assert [int(np.floor((x + 0.5) * 5)) for x in (10.0, 10.4)] == [52, 54]
    assert d5.depth[7, 10] == d1.depth[7, 10] == 2.0
    assert (w1.stats.collisions, w5.stats.collisions) == (1, 0)


def test_out_of_frame_points_are_dropped():
    pts = ProjectedPoints.from_arrays([-0.6, 3.49, 3.5, 1.0], [0.0, 0.0, 0.0, -0.51], [1.0, 1.0, 1.0, 1.0])
    _, _, win = splat(pts, SplatConfig(4, 4, 3))
    assert win.stats.dropped == 3
    assert win.pixel.tolist() == [-1, 3, -1, -1]


def test_points_behind_near_plane_count_as_culled():
    pts = ProjectedPoints.from_arrays([1.0, 1.0], [1.0, 1.0], [0.0, 1.0])
    depth, _, win = splat(pts, SplatConfig(4, 4, 1))
    assert win.stats.culled == 1 and depth.depth[1, 1] == 1.0


def test_mask_probability_from_count():
    pts = ProjectedPoints.from_arrays([1.0, 1.1, 1.2, 3.0], [1.0] * 4, [1.0] * 4)
    _, mask, _ = splat(pts, SplatConfig(4, 4, 1, beta=0.5))
    assert mask.prob[1, 1] == pytest.approx(1 - np.exp(-1.5), abs=1e-15)
    assert mask.prob[1, 3] == pytest.approx(1 - np.exp(-0.5), abs=1e-15)
    assert mask.prob[0, 0] == 0.0
    _, hard, _ = splat(pts, SplatConfig(4, 4, 1, beta=np.inf))
    assert set(np.unique(hard.prob)) == {0.0, 1.0}


def test_invalid_inputs():
    with pytest.raises(ContractViolation):
        SplatConfig(4, 4, 0)
    with pytest.raises(ContractViolation):
        SplatConfig(4, 4, 2, beta=0.0)
    with pytest.raises(ContractViolation):
        ProjectedPoints.from_arrays([np.nan], [0.0], [1.0])


def test_brute_force_equivalence_on_random_scenes():
    rng = np.random.default_rng(0)
    for trial in range(100):
        pts, H, W = random_scene(rng, ties=trial % 2 == 0)
        U = int(rng.integers(1, 5))
        depth, mask, win = splat(pts, SplatConfig(H, W, U))
        bd, bsrc, bcount = brute_force(pts.u, pts.v, pts.z, pts.ids, H, W, U)
        assert np.array_equal(depth.depth, bd)
        assert np.array_equal(win.source_ids, bsrc)
        assert np.array_equal(win.count, bcount)
        # winner iff positive occupancy
        assert np.array_equal(win.winner >= 0, mask.prob > 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_permutation_invariance(seed, U):
    rng = np.random.default_rng(seed)
    pts, H, W = random_scene(rng, n=int(rng.integers(1, 200)), ties=True)
    perm = rng.permutation(len(pts))
    shuffled = ProjectedPoints(pts.u[perm], pts.v[perm], pts.z[perm], pts.ids[perm])
    a = splat(pts, SplatConfig(H, W, U))
    b = splat(shuffled, SplatConfig(H, W, U))
    assert np.array_equal(a[0].depth, b[0].depth)
    assert np.array_equal(a[1].prob, b[1].prob)
    assert np.array_equal(a[2].source_ids, b[2].source_ids)
    assert a[2].stats == b[2].stats


@given(st.integers(0, 2**32 - 1), st.sampled_from([(1, 2), (1, 3), (3, 9), (1, 5), (2, 4), (1, 9)]))
def test_collisions_never_grow_when_cells_refine(seed, pair):
    # U2 a multiple of U1: every U2 cell sits inside one U1 cell
    rng = np.random.default_rng(seed)
    pts, H, W = random_scene(rng)
    lo, hi = (splat(pts, SplatConfig(H, W, U))[2].stats.collisions for U in pair)
    assert hi <= lo


def test_collisions_non_increasing_on_dense_scenes():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pts, H, W = random_scene(rng, n=3000, H=32, W=32)
        counts = [splat(pts, SplatConfig(H, W, U))[2].stats.collisions for U in (1, 2, 3, 5, 9)]
        assert all(a >= b for a, b in zip(counts, counts[1:])), counts


def test_pooled_output_depends_only_on_nearest_pixel():
    rng = np.random.default_rng(8)
    pts, H, W = random_scene(rng, n=400, H=20, W=20)
    ref = splat(pts, SplatConfig(H, W, 1))
    for U in (2, 3, 5, 9):
        out = splat(pts, SplatConfig(H, W, U))
        assert np.array_equal(out[0].depth, ref[0].depth)
        assert np.array_equal(out[2].count, ref[2].count)


# -- backward --------------------------------------------------------------------

def test_backward_single_point():
    cfg = SplatConfig(8, 8, 1)
    pts = ProjectedPoints.from_arrays(3.0, 4.0, 2.0)
    _, _, win = splat(pts, cfg)
    g = np.zeros((8, 8))
    g[4, 3] = 1.0
    grad, _ = splat_backward(g, np.zeros((8, 8)), win, pts, cfg)
    assert grad.tolist() == [[0.0, 0.0, 1.0]]


def test_backward_routes_to_nearer_only():
    cfg = SplatConfig(8, 8, 1)
    pts = ProjectedPoints.from_arrays([3.0, 3.2], [4.0, 4.0], [2.5, 2.0])
    _, _, win = splat(pts, cfg)
    g = np.zeros((8, 8))
    g[4, 3] = -0.7
    grad, _ = splat_backward(g, np.zeros((8, 8)), win, pts, cfg)
    assert grad[:, 2].tolist() == [0.0, -0.7]
    assert np.all(grad[:, :2] == 0)


def test_mask_gradient_never_reaches_depth():
    rng = np.random.default_rng(2)
    pts, H, W = random_scene(rng, n=100, H=10, W=10)
    cfg = SplatConfig(H, W, 3)
    _, _, win = splat(pts, cfg)
    grad, gw = splat_backward(np.zeros((H, W)), rng.normal(size=(H, W)), win, pts, cfg)
    assert np.all(grad == 0) and np.any(gw != 0)


def test_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    n, H, W = 60, 8, 8
    u, v = rng.uniform(0, 7, n), rng.uniform(0, 7, n)
    z, w = rng.uniform(1, 3, n), rng.uniform(0.2, 1.0, n)
    cfg = SplatConfig(H, W, 2, beta=1.5)
    gm = rng.normal(size=(H, W))

    def loss(weights):
        pts = ProjectedPoints(u, v, z, np.arange(n), weights)
        return float((splat(pts, cfg)[1].prob * gm).sum())

    pts = ProjectedPoints(u, v, z, np.arange(n), w)
    _, _, win = splat(pts, cfg)
    _, gw = splat_backward(np.zeros((H, W)), gm, win, pts, cfg)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1e-6
        fd = (loss(w + e) - loss(w - e)) / 2e-6
        assert abs(fd - gw[i]) <= 1e-6 * max(1.0, abs(fd))


def test_depth_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    n, H, W = 50, 12, 12
    u, v = rng.uniform(0, 11, n), rng.uniform(0, 11, n)
    z = rng.uniform(1, 3, n)
    cfg = SplatConfig(H, W, 2)
    gd = rng.normal(size=(H, W))

    def render(zz):
        depth, _, win = splat(ProjectedPoints.from_arrays(u, v, zz), cfg)
        return float(np.where(depth.valid, depth.depth * gd, 0.0).sum()), win.winner

    _, base = render(z)
    pts = ProjectedPoints.from_arrays(u, v, z)
    win = splat(pts, cfg)[2]
    grad, _ = splat_backward(np.where(win.winner >= 0, gd, 0.0), np.zeros((H, W)), win, pts, cfg)
    checked = 0
    for i in range(n):
        eps = 1e-4 * z[i]
        zp, zm = z.copy(), z.copy()
        zp[i] += eps
        zm[i] -= eps
        (lp, wp), (lm, wm) = render(zp), render(zm)
        if not (np.array_equal(wp, base) and np.array_equal(wm, base)):
            continue
        checked += 1
        assert abs((lp - lm) / (2 * eps) - grad[i, 2]) <= 1e-5
    assert checked >= 40


# -- full pipeline -------------------------------------------------------------------

def test_empty_cloud_renders_nothing():
    depth, mask, win, proj = pseudo_render_view(np.zeros((0, 3)), PIX, RigidTransform.identity(),
                                                SplatConfig(8, 8, 5))
    assert not depth.valid.any() and np.all(mask.prob == 0) and len(proj) == 0


def test_identity_view_gradient_is_z_axis():
    cloud = np.array([[2.0, 3.0, 1.5], [5.0, 5.0, 2.5]])
    cfg = SplatConfig(8, 8, 1)
    T = RigidTransform.identity()
    depth, mask, win, proj = pseudo_render_view(cloud, PIX, T, cfg)
    gd = np.zeros((8, 8))
    gd[3, 2], gd[5, 5] = 0.25, -2.0
    gp, _ = full_backward(gd, np.zeros((8, 8)), win, proj, PIX, T, cfg)
    assert gp.tolist() == [[0, 0, 0.25], [0, 0, -2.0]]


def test_rotation_about_x_moves_gradient_to_y():
    R = np.array([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]])
    T = RigidTransform(R, np.array([0.0, 0.0, 0.0]))
    cloud = np.array([[3.0, 2.0, -4.0]])  # camera point R p = (3, 4, 2)
    cfg = SplatConfig(8, 8, 1)
    depth, mask, win, proj = pseudo_render_view(cloud, PIX, T, cfg)
    assert depth.depth[4, 3] == 2.0
    gd = np.zeros((8, 8))
    gd[4, 3] = 1.5
    gp, _ = full_backward(gd, np.zeros((8, 8)), win, proj, PIX, T, cfg)
    assert np.allclose(gp[0], 1.5 * R[2]) and np.allclose(gp[0], [0, 1.5, 0])


def test_mismatched_records_are_rejected():
    cloud = np.random.default_rng(0).uniform(0, 4, (10, 3)) + [0, 0, 1]
    cfg = SplatConfig(8, 8, 1)
    T = RigidTransform.identity()
    _, _, win, proj = pseudo_render_view(cloud, PIX, T, cfg)
    other = RigidTransform(random_rotation(np.random.default_rng(1)).R, np.zeros(3))
    with pytest.raises(ContractViolation):
        full_backward(np.zeros((8, 8)), np.zeros((8, 8)), win, proj, PIX, other, cfg)
    with pytest.raises(ContractViolation):
        full_backward(np.zeros((4, 4)), np.zeros((4, 4)), win, proj, PIX, T, SplatConfig(4, 4, 1))


@pytest.mark.parametrize("mode", ["orthographic", "perspective"])
def test_canonical_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(6)
    H = W = 16
    k = CameraIntrinsics.for_image(H, W, 1.2, mode)
    if mode == "perspective":
        k = CameraIntrinsics(16.0, 16.0, 7.5, 7.5, mode)
    T = RigidTransform(random_rotation(rng).R, np.array([0.0, 0.0, 3.0]))
    cloud = rng.uniform(-0.8, 0.8, (80, 3))
    cfg = SplatConfig(H, W, 3)
    gd = rng.normal(size=(H, W))

    def render(c):
        depth, _, win, _ = pseudo_render_view(c, k, T, cfg)
        return float(np.where(depth.valid, depth.depth * gd, 0.0).sum()), win

    _, base = render(cloud)
    _, _, win, proj = pseudo_render_view(cloud, k, T, cfg)
    gp, _ = full_backward(np.where(win.winner >= 0, gd, 0.0), np.zeros((H, W)), win, proj, k, T, cfg)
    total = good = 0
    for i in range(len(cloud)):
        for j in range(3):
            h = 1e-6
            cp, cm = cloud.copy(), cloud.copy()
            cp[i, j] += h
            cm[i, j] -= h
            (lp, wp), (lm, wm) = render(cp), render(cm)
            stable = all(np.array_equal(w.winner, base.winner) and np.array_equal(w.pixel, base.pixel)
                         for w in (wp, wm))
            if not stable:
                continue
            total += 1
            fd = (lp - lm) / (2 * h)
            good += abs(fd - gp[i, j]) <= 1e-4 * max(abs(fd), abs(gp[i, j]), 1e-12) or fd == gp[i, j] == 0
    assert total > 100 and good == total


def _sphere_setup(n=50_000):
    mesh = icosphere(3)
    cloud = densify(mesh, n, 0).points
    k = CameraIntrinsics.for_image(64, 64, 1.2)
    d = 2 * np.sqrt(3)
    T = RigidTransform(random_rotation(np.random.default_rng(1)).R, np.array([0, 0, d]))
    return mesh, cloud, k, T, d


def test_sphere_depth_bounded_by_distance():
    mesh, cloud, k, T, d = _sphere_setup(10_000)
    depth, _, _, _ = pseudo_render_view(cloud, k, T, SplatConfig(64, 64, 5))
    assert depth.depth[depth.valid].min() >= d - 1 - 1e-9


def test_upsampling_reduces_sphere_depth_error():
    mesh, cloud, k, T, d = _sphere_setup(10_000)
    gt, _ = rasterize(mesh, k, T, 64, 64)

    def err(U):
        depth, _, _, _ = pseudo_render_view(cloud, k, T, SplatConfig(64, 64, U))
        joint = depth.valid & gt.valid
        return np.abs(depth.depth[joint] - gt.depth[joint]).mean()

    assert err(5) < err(1)


def test_non_nested_refinement_can_add_collisions():
    pts = ProjectedPoints.from_arrays([0.9, 1.1], [0.0, 0.0], [1.0, 2.0])
    assert [splat(pts, SplatConfig(4, 4, U))[2].stats.collisions for U in (2, 3)] == [0, 1]
