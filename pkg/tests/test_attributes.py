import numpy as np
import pytest
import torch

from deprocams import simulator as sim
from deprocams.attributes import (
    Rig,
    SurfacePrior,
    compute_light_view_reflect,
    compute_normals,
    compute_points,
    compute_warp_grid,
    depth_to_attribute,
    direct_light_mask,
    rough_shadings,
    shade,
    warp_projector_image,
)
from deprocams.geometry import apply_homography, pixel_grid, plane_homography

f64 = torch.float64


def nchw(a):
    return torch.as_tensor(np.asarray(a, float).transpose(2, 0, 1)[None].copy())


def plane_points(size, normal, dist, calib):
    """Points of the plane ``normal . X = dist`` on the camera rays (oracle, numpy)."""
    rays = np.concatenate([pixel_grid(size), np.ones(size + (1,))], -1) @ calib.cam.K_inv.T
    return rays * (dist / (rays @ np.asarray(normal, float)))[..., None]


def test_constant_depth_plane(small_calib):
    rig = Rig(small_calib, f64)
    pts = compute_points(torch.ones((1, 1) + small_calib.cam_size, dtype=f64), rig)
    assert torch.allclose(pts[:, 2], torch.ones_like(pts[:, 2]))
    # principal point lands on the optical axis
    from deprocams.geometry import CalibrationPair, Extrinsics, Intrinsics

    c = CalibrationPair(Intrinsics(10, 10, 3, 2), Intrinsics(10, 10, 3, 2), Extrinsics(np.eye(3), [1.0, 0, 0]), (5, 7), (5, 7))
    p = compute_points(torch.full((1, 1, 5, 7), 0.5, dtype=f64), Rig(c, f64))
    np.testing.assert_allclose(p[0, :, 2, 3].numpy(), [0, 0, 2], atol=1e-12)


def test_fronto_and_tilted_normals(small_calib):
    pts = plane_points(small_calib.cam_size, [0, 0, 1], 3.0, small_calib)
    n = compute_normals(nchw(pts))
    np.testing.assert_allclose(n[0].numpy().reshape(3, -1).T, np.tile([0, 0, -1.0], (pts[..., 0].size, 1)), atol=1e-12)
    # plane rotated 45 degrees about y: normal (-1, 0, 1)/sqrt2 up to orientation
    pts = plane_points(small_calib.cam_size, [-1, 0, 1], 3.0, small_calib)
    n = compute_normals(nchw(pts))[0].numpy().reshape(3, -1).T
    np.testing.assert_allclose(n, np.tile([np.sqrt(0.5), 0, -np.sqrt(0.5)], (len(n), 1)), atol=1e-9)


def _turn(a, b):
    return np.degrees(np.arccos(np.clip((a * b).sum(-1), -1, 1)))


def test_sinusoidal_normals_against_analytic():
    calib = sim.default_calibration()
    scene = sim.make_scene("waves")
    pts = sim.surface_points(scene, calib)
    n = compute_normals(nchw(pts))[0].numpy().transpose(1, 2, 0)[:-1, :-1]
    gt = sim.surface_normals(scene, calib)
    # the forward-difference normal sits half a pixel down and right
    half = gt[:-1, :-1] + gt[1:, :-1] + gt[:-1, 1:] + gt[1:, 1:]
    half /= np.linalg.norm(half, axis=-1, keepdims=True)
    curvature = _turn(gt[1:, :-1], gt[:-1, :-1]) + _turn(gt[:-1, 1:], gt[:-1, :-1])
    calm = curvature < np.percentile(curvature, 90)
    assert _turn(n, half)[calm].max() < 2.0


def test_light_view_reflect_properties(small_calib):
    rig = Rig(small_calib, f64)
    rng = np.random.default_rng(0)
    pts = plane_points(small_calib.cam_size, [0.1, 0.2, 1], 3.0, small_calib) + rng.normal(0, 0.01, small_calib.cam_size + (3,))
    P = nchw(pts)
    n = compute_normals(P)
    l, v, r = compute_light_view_reflect(P, rig, n)
    torch.testing.assert_close(r.norm(dim=1), torch.ones_like(r[:, 0]))
    ang_l = torch.arccos((n * l).sum(1).clamp(-1, 1))
    ang_r = torch.arccos((n * r).sum(1).clamp(-1, 1))
    assert (ang_l - ang_r).abs().max() < 1e-6
    # with n parallel to l the mirror direction is l itself
    l2, _, r2 = compute_light_view_reflect(P, rig, l)
    torch.testing.assert_close(r2, l2)
    # point on the camera axis: view direction is -z
    c = small_calib
    axis = torch.zeros((1, 3, 1, 1), dtype=f64)
    axis[0, 2] = 2.0
    _, v1, _ = compute_light_view_reflect(axis, rig, -torch.ones_like(axis))
    np.testing.assert_allclose(v1.flatten().numpy(), [0, 0, -1])


def test_warp_grid_identity_for_coincident(coincident_calib):
    from deprocams.geometry import CalibrationPair, Extrinsics

    rig = Rig(CalibrationPair(coincident_calib.cam, coincident_calib.prj, Extrinsics(np.eye(3), [1e-3, 0, 0]),
                              (16, 16), (16, 16)), f64)
    rig.t = torch.zeros(3, dtype=f64)  # coincident centers, the rectification needs a baseline
    omega, _ = compute_warp_grid(compute_points(torch.full((1, 1, 16, 16), 0.5, dtype=f64), rig), rig)
    np.testing.assert_allclose(omega[0].numpy().transpose(1, 2, 0), pixel_grid((16, 16)), atol=1e-12)


def test_warp_grid_matches_plane_homography(small_calib):
    rig = Rig(small_calib, f64)
    normal, dist = np.array([0.1, -0.05, 1.0]), 3.0
    pts = plane_points(small_calib.cam_size, normal, dist, small_calib)
    omega, _ = compute_warp_grid(nchw(pts), rig)
    H = plane_homography(small_calib, normal, dist)
    expect = apply_homography(H, pixel_grid(small_calib.cam_size))
    np.testing.assert_allclose(omega[0].numpy().transpose(1, 2, 0), expect, atol=1e-6)


def test_behind_projector_points_are_flagged(small_calib):
    rig = Rig(small_calib, f64)
    pts = torch.as_tensor(small_calib.o_p - 3 * small_calib.ext.R[2], dtype=f64).view(1, 3, 1, 1)
    omega, d_p = compute_warp_grid(pts, rig)
    assert d_p.item() < 0 and torch.all(omega < -1000)


def _mask_for(scene_name, size=(60, 80)):
    calib = sim.default_calibration(cam_size=size)
    scene = sim.make_scene(scene_name)
    rig = Rig(calib.normalized(), f64)
    inv = torch.as_tensor(calib.baseline / scene.depth(calib.cam, calib.cam_size))[None, None]
    attrs = depth_to_attribute(inv, rig)
    render = sim.SceneRender.build(scene, calib)
    return attrs, render


def test_plane_mask_is_one_inside_fov():
    attrs, render = _mask_for("plane")
    interior = render.fov > 0.5
    from scipy.ndimage import binary_erosion

    interior = binary_erosion(interior, iterations=2)
    M = attrs.M[0, 0].numpy()
    assert M[interior].min() == pytest.approx(1.0)


def test_step_mask_against_raycast():
    attrs, render = _mask_for("step")
    from scipy.ndimage import binary_dilation

    M = attrs.M[0, 0].numpy() > 0.5
    gt = (render.visibility * render.fov) > 0.5
    band = binary_dilation(gt ^ binary_dilation(gt) | gt ^ ~binary_dilation(~gt))
    fov = render.fov > 0.5
    keep = fov & ~binary_dilation(fov ^ binary_dilation(fov)) & ~band
    # shadowed pixels away from the band are masked out
    assert np.mean(M[keep] == gt[keep]) >= 0.99
    assert (~gt[keep]).sum() > 10


def test_warp_white_plane_equals_mask():
    attrs, _ = _mask_for("plane")
    hp, wp = attrs.omega.shape[-2:]
    I_p = torch.ones((1, 3, 75, 100), dtype=f64)
    I_wp = warp_projector_image(I_p, attrs.omega, attrs.M)
    cover = warp_projector_image(I_p[:, :1], attrs.omega, torch.ones_like(attrs.M))
    torch.testing.assert_close(I_wp[:, :1], attrs.M * cover)
    inside = cover[0, 0] > 1 - 1e-12
    torch.testing.assert_close(I_wp[0, 0][inside], attrs.M[0, 0][inside])


def test_warp_checkerboard_homography_oracle(small_calib):
    from scipy.ndimage import map_coordinates

    rig = Rig(small_calib, f64)
    normal, dist = np.array([0.0, 0.0, 1.0]), 3.0
    pts = plane_points(small_calib.cam_size, normal, dist, small_calib)
    omega, _ = compute_warp_grid(nchw(pts), rig)
    hp, wp = small_calib.prj_size
    cb = ((np.add.outer(np.arange(hp) // 3, np.arange(wp) // 3)) % 2).astype(float)
    got = warp_projector_image(torch.as_tensor(cb)[None, None], omega, torch.ones((1, 1) + small_calib.cam_size, dtype=f64))
    xy = apply_homography(plane_homography(small_calib, normal, dist), pixel_grid(small_calib.cam_size))
    ref = map_coordinates(cb, [xy[..., 1], xy[..., 0]], order=1, mode="constant", cval=0.0)
    inside = (xy[..., 0] >= 0) & (xy[..., 0] <= wp - 1) & (xy[..., 1] >= 0) & (xy[..., 1] <= hp - 1)
    np.testing.assert_allclose(got[0, 0].numpy()[inside], ref[inside], atol=1e-6)


def test_rough_shading_cosine_limits():
    s = torch.full((1, 3, 2, 2), 0.5, dtype=f64)
    prior = SurfacePrior(s=s, s_gray=s[:, :1], s_star=torch.ones((1, 1, 2, 2), dtype=f64))
    I_wp = torch.full((1, 3, 2, 2), 0.8, dtype=f64)
    n = torch.zeros((1, 3, 2, 2), dtype=f64)
    n[:, 2] = -1
    # light head-on: cosine 1
    _, I_diff, _ = rough_shadings(I_wp, prior, n, n, n, n)
    torch.testing.assert_close(I_diff, I_wp * s)
    grazing = torch.zeros_like(n)
    grazing[:, 0] = 1
    _, I_diff, _ = rough_shadings(I_wp, prior, n, grazing, n, n)
    assert torch.all(I_diff == 0)


def test_shading_cross_check_with_simulator():
    calib = sim.default_calibration()
    scene = sim.make_scene("plane", gamma=1.0, noise_std=0.0)
    render = sim.SceneRender.build(scene, calib)
    white = np.ones(calib.prj_size + (3,))
    captured = render.capture(white)
    rig = Rig(calib.normalized(), f64)
    inv = torch.as_tensor(calib.baseline / scene.depth(calib.cam, calib.cam_size))[None, None]
    attrs = depth_to_attribute(inv, rig)
    albedo = scene.albedo(calib.cam, calib.cam_size)
    prior = SurfacePrior(
        s=nchw(albedo), s_gray=nchw(scene.spec_strength(calib.cam, calib.cam_size)[..., None]),
        s_star=torch.ones((1, 1) + calib.cam_size, dtype=f64),
    )
    _, _, I_diff, I_spec = shade(attrs, nchw(white), prior)
    ours = np.clip(np.asarray(scene.ambient) + (I_diff + I_spec)[0].numpy().transpose(1, 2, 0), 0, 1)
    assert np.sqrt(np.mean((ours - captured) ** 2)) < 1e-6


def test_no_mask_mode_uses_s_star(small_calib):
    rig = Rig(small_calib.normalized(), f64)
    s_star = torch.zeros((1, 1) + small_calib.cam_size, dtype=f64)
    attrs = depth_to_attribute(torch.full((1, 1) + small_calib.cam_size, 0.3, dtype=f64), rig, use_mask=False, s_star=s_star)
    assert attrs.M is s_star and attrs.M_occ is s_star


def test_mask_gradient_flows(small_calib):
    rig = Rig(small_calib.normalized(), f64)
    inv = torch.full((1, 1) + small_calib.cam_size, 0.3, dtype=f64, requires_grad=True)
    attrs = depth_to_attribute(inv, rig)
    M, occ, fov = direct_light_mask(attrs.omega, attrs.d_p, rig, return_parts=True)
    torch.testing.assert_close(M, occ * fov)
    attrs.M.sum().backward()
    assert torch.isfinite(inv.grad).all()
