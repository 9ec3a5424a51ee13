import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deprocams import simulator as sim
from deprocams.errors import BehindProjectorError, CalibrationError, DegenerateGeometryError
from deprocams.geometry import (
    CalibrationPair,
    Extrinsics,
    Intrinsics,
    apply_homography,
    backproject,
    camera_epipole,
    pixel_grid,
    plane_homography,
    project,
    project_to_projector,
    rectification_homography,
    triangulate,
)

CALIB = sim.default_calibration()


def _rot(axis, angle):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def test_backproject_principal_point():
    K = Intrinsics(100, 120, 31.0, 17.0)
    np.testing.assert_allclose(backproject([31.0, 17.0], 1.0, K), [0, 0, 1])


def test_backproject_unit_slope():
    K = Intrinsics(100, 100, 0, 0)
    np.testing.assert_allclose(backproject([100.0, 0.0], 2.0, K), [2, 0, 2])


def test_backproject_rejects_nonfinite():
    with pytest.raises(ValueError):
        backproject([0.0, 0.0], np.nan, Intrinsics(1, 1, 0, 0))


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(-50, 250), y=st.floats(-50, 200), d=st.floats(0.1, 100),
)
def test_backproject_roundtrip(x, y, d):
    K = CALIB.cam
    X = backproject([x, y], d, K)
    np.testing.assert_allclose(project(X, K.K), [x, y], atol=1e-9)
    assert X[2] == pytest.approx(d)


def test_intrinsics_validation():
    with pytest.raises(CalibrationError):
        Intrinsics(0, 1, 0, 0)
    with pytest.raises(CalibrationError):
        Extrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_project_to_projector_coincident(coincident_calib):
    X = np.array([0.3, -0.2, 2.0])
    x_p, d_p = project_to_projector(X, coincident_calib)
    np.testing.assert_allclose(x_p, project(X, coincident_calib.cam.K))
    assert d_p == pytest.approx(2.0)


def test_baseline_point_maps_to_projector_epipole():
    # any point on the baseline line projects to the projector's image of the camera center
    o_p = CALIB.o_p
    X = o_p * -2.0  # behind the camera on the far side of the baseline
    x_p, d_p = project_to_projector(X, CALIB, strict=False)
    epi = CALIB.prj.K @ CALIB.ext.t
    np.testing.assert_allclose(x_p, epi[:2] / epi[2], rtol=1e-9)


def test_project_to_projector_matrix_chain_oracle():
    rng = np.random.default_rng(0)
    X = rng.uniform([-1, -1, 2], [1, 1, 4], (100, 3))
    P = np.zeros((4, 4))
    P[:3, :3] = CALIB.ext.R
    P[:3, 3] = CALIB.ext.t
    P[3, 3] = 1
    Kp4 = np.eye(4)
    Kp4[:3, :3] = CALIB.prj.K
    h = np.c_[X, np.ones(len(X))] @ (Kp4 @ P).T
    x_p, d_p = project_to_projector(X, CALIB)
    np.testing.assert_allclose(x_p, h[:, :2] / h[:, 2:3], atol=1e-9)
    np.testing.assert_allclose(d_p, h[:, 2], atol=1e-12)


def test_behind_projector_rejected():
    with pytest.raises(BehindProjectorError):
        project_to_projector(CALIB.o_p - 5 * CALIB.ext.R[2], CALIB)


def test_triangulate_recovers_points():
    rng = np.random.default_rng(1)
    X = rng.uniform([-1, -1, 2], [1, 1, 5], (200, 3))
    x_c = project(X, CALIB.cam.K)
    x_p, _ = project_to_projector(X, CALIB)
    np.testing.assert_allclose(triangulate(x_c, x_p, CALIB), X, atol=1e-6)


def test_triangulate_at_epipoles_is_degenerate():
    e_c = camera_epipole(CALIB)
    e_p = CALIB.prj.K @ CALIB.ext.t
    with pytest.raises(DegenerateGeometryError):
        triangulate(e_c[:2] / e_c[2], e_p[:2] / e_p[2], CALIB)


def test_triangulate_perturbation_bound():
    # first-order sensitivity: dz ~ z^2 / (f b) per pixel of disparity along the baseline
    rng = np.random.default_rng(2)
    X = rng.uniform([-0.3, -0.3, 2.5], [0.3, 0.3, 3.5], (300, 3))
    x_c = project(X, CALIB.cam.K)
    x_p, _ = project_to_projector(X, CALIB)
    x_p = x_p + rng.uniform(-0.5, 0.5, x_p.shape)
    Z = triangulate(x_c, x_p, CALIB)[:, 2]
    bound = 0.5 * X[:, 2] ** 2 / (CALIB.prj.fx * CALIB.baseline) * 2.0
    assert np.all(np.abs(Z - X[:, 2]) <= bound)


def test_rectification_identity_for_horizontal_baseline():
    K = Intrinsics(50, 50, 20, 15)
    c = CalibrationPair(K, K, Extrinsics(np.eye(3), [-1.0, 0, 0]), (30, 40), (30, 40))
    H = rectification_homography(c)
    np.testing.assert_allclose(H / H[2, 2], np.eye(3), atol=1e-12)


def _epipolar_rows(calib):
    rng = np.random.default_rng(3)
    H = rectification_homography(calib)
    Hi = np.linalg.inv(H)
    for _ in range(100):
        X = rng.uniform([-0.5, -0.5, 2], [0.5, 0.5, 4])
        # two points on one projector ray map to one epipolar line in the camera
        o = calib.o_p
        Y = o + 1.7 * (X - o)
        a, b = apply_homography(H, project(np.stack([X, Y]), calib.cam.K))
        yield a, b, Hi


def test_rectification_vertical_baseline_rows():
    K = Intrinsics(50, 50, 20, 15)
    c = CalibrationPair(K, K, Extrinsics(_rot([0, 0, 1], 0.1), [0.0, -1.0, 0.2]), (30, 40), (30, 40))
    for a, b, _ in _epipolar_rows(c):
        assert abs(a[1] - b[1]) < 1e-8


def test_rectification_default_rig_rows_and_inverse():
    for a, b, Hi in _epipolar_rows(CALIB):
        assert abs(a[1] - b[1]) < 1e-8
    H = rectification_homography(CALIB)
    pts = pixel_grid(CALIB.cam_size).reshape(-1, 2)
    np.testing.assert_allclose(apply_homography(np.linalg.inv(H), apply_homography(H, pts)), pts, atol=1e-9)


def test_rectification_zero_baseline(coincident_calib):
    with pytest.raises(DegenerateGeometryError):
        rectification_homography(coincident_calib)


def test_calibration_roundtrip(tmp_path):
    p = tmp_path / "calib.json"
    CALIB.save(p)
    c = CalibrationPair.load(p)
    np.testing.assert_array_equal(c.cam.K, CALIB.cam.K)
    np.testing.assert_array_equal(c.ext.R, CALIB.ext.R)
    assert c.prj_size == CALIB.prj_size
    assert CALIB.normalized().baseline == pytest.approx(1.0)


def test_plane_homography_matches_projection():
    n, dist = np.array([0.1, -0.2, 1.0]), 3.0
    H = plane_homography(CALIB, n, dist)
    x_c = pixel_grid((12, 16)).reshape(-1, 2) * 10
    rays = np.c_[x_c, np.ones(len(x_c))] @ CALIB.cam.K_inv.T
    X = rays * (dist / (rays @ n))[:, None]
    x_p, _ = project_to_projector(X, CALIB)
    np.testing.assert_allclose(apply_homography(H, x_c), x_p, atol=1e-9)
