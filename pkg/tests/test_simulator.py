import numpy as np
import pytest

from deprocams import simulator as sim
from deprocams.errors import ConfigError, ShapeError

CALIB = sim.default_calibration()


def test_default_rig():
    assert CALIB.cam_size == (120, 160) and CALIB.prj_size == (150, 200)
    assert CALIB.baseline == pytest.approx(1.0)
    np.testing.assert_allclose(CALIB.ext.R @ CALIB.ext.R.T, np.eye(3), atol=1e-12)


def test_dataset_rejects_empty():
    with pytest.raises(ConfigError):
        sim.generate_dataset(sim.make_scene("plane"), sim.default_calibration(cam_size=(24, 32)), 0)


def test_dataset_is_seeded():
    calib = sim.default_calibration(cam_size=(24, 32))
    a, _ = sim.generate_dataset(sim.make_scene("waves"), calib, 3, seed=5, n_test=1)
    b, _ = sim.generate_dataset(sim.make_scene("waves"), calib, 3, seed=5, n_test=1)
    c, _ = sim.generate_dataset(sim.make_scene("waves"), calib, 3, seed=6, n_test=1)
    for f in ("prj", "cam", "s", "s_star", "dark", "prj_test", "cam_test"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.cam, c.cam)


def test_scene_validation():
    with pytest.raises(ConfigError):
        sim.make_scene("plane", gamma=3.0)
    with pytest.raises(ConfigError):
        sim.make_scene("plane", noise_std=0.2)
    with pytest.raises(ConfigError):
        sim.make_scene("teapot")


def test_plane_fully_visible():
    vis = sim.raycast_visibility(sim.make_scene("plane"), CALIB)
    assert vis.min() == 1.0


def test_step_shadow_band_matches_similar_triangles():
    scene = sim.make_scene("step")
    render = sim.SceneRender.build(scene, CALIB)
    vis = render.visibility
    K = CALIB.cam
    o = CALIB.o_p
    # the projector sits at +x, so the block's left edge throws a shadow onto the background
    a_edge, z_block, z_back = -0.15, 2.55, 3.2
    for row in (50, 60, 70):
        b = (row - K.cy) / K.fy
        E = np.array([a_edge * z_block, b * z_block, z_block])
        s = (z_back - o[2]) / (E[2] - o[2])
        S = o + s * (E - o)
        x_shadow = K.fx * S[0] / S[2] + K.cx
        x_edge = K.fx * a_edge + K.cx
        analytic = x_edge - x_shadow
        block = np.flatnonzero(render.points[row, :, 2] < 3.0)
        measured = np.sum(vis[row, : block[0]] == 0)
        assert measured == pytest.approx(analytic, abs=1.0)
        # the band touches the discontinuity on the far side from the projector
        assert vis[row, block[0] - 1] == 0 and vis[row, block].min() == 1


def test_black_capture_is_ambient():
    scene = sim.make_scene("plane", noise_std=0.0)
    out = sim.render_capture(scene, np.zeros(CALIB.prj_size + (3,)), CALIB)
    expect = np.asarray(scene.ambient) ** (1 / scene.gamma)
    np.testing.assert_allclose(out, np.broadcast_to(expect, out.shape), atol=1e-12)


def test_noise_std_statistics():
    scene = sim.make_scene("plane", noise_std=0.01)
    cache = sim.SceneRender.build(scene, CALIB)
    I_p = np.full(CALIB.prj_size + (3,), 0.5)
    rng = np.random.default_rng(0)
    renders = np.stack([cache.capture(I_p, rng) for _ in range(8)])
    assert renders.std(axis=0, ddof=1).mean() == pytest.approx(0.01, rel=0.1)


def test_capture_rejects_wrong_projector_size():
    with pytest.raises(ShapeError):
        sim.render_capture(sim.make_scene("plane"), np.zeros((10, 10, 3)), CALIB)


def test_behind_projector_scene_rejected():
    # projector turned around: the plane lies behind it
    calib = sim.default_calibration(cam_size=(24, 32), target=(0.0, 0.0, -3.0))
    with pytest.raises(ConfigError):
        sim.SceneRender.build(sim.make_scene("plane"), calib)


def test_sampling_patterns_in_range():
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = sim.sampling_pattern((30, 40), rng)
        assert p.shape == (30, 40, 3) and p.min() >= 0 and p.max() <= 1
