"""Synthetic projector-camera rig with known geometry.

Scenes are camera-view heightfields: depth is a function of the normalized
camera ray coordinates ``(a, b) = ((x - cx) / fx, (y - cy) / fy)``, so a scene
renders at any resolution. The renderer and the ray-cast visibility oracle
here are plain numpy and share nothing with the differentiable pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import ndimage

from .dataset import Dataset, GroundTruth
from .errors import ConfigError, ShapeError
from .geometry import CalibrationPair, Extrinsics, Intrinsics, pixel_grid

CAM_SIZE = (120, 160)
PRJ_SIZE = (150, 200)
SUPERSAMPLE = 4
S_STAR_THRESHOLD = 0.05


def look_at_rotation(center, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-device rotation for a device at ``center`` looking at ``target`` (y axis down)."""
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def default_calibration(cam_size=CAM_SIZE, prj_size=None, baseline_dir=(1.0, -0.1, 0.05),
                        target=(0.0, 0.0, 3.0)) -> CalibrationPair:
    """Desk-scale rig in baseline units: projector about one unit right of the camera, toed in."""
    h, w = cam_size
    if prj_size is None:
        prj_size = (int(round(h * 1.25)), int(round(w * 1.25)))
    hp, wp = prj_size
    cam = Intrinsics(150.0 * w / 160, 150.0 * w / 160, (w - 1) / 2, (h - 1) / 2)
    prj = Intrinsics(260.0 * wp / 200, 260.0 * wp / 200, (wp - 1) / 2, (hp - 1) / 2)
    o_p = np.asarray(baseline_dir, float)
    o_p /= np.linalg.norm(o_p)
    R = look_at_rotation(o_p, target)
    t = -R @ o_p
    return CalibrationPair(cam=cam, prj=prj, ext=Extrinsics(R, t), cam_size=(h, w), prj_size=(hp, wp))


# ---------------------------------------------------------------- scenes

def _plane_depth(point, normal):
    point = np.asarray(point, float)
    normal = np.asarray(normal, float)

    def depth(a, b):
        return (normal @ point) / (normal[0] * a + normal[1] * b + normal[2])

    return depth


def _step_depth(a, b):
    z = np.full(np.broadcast(a, b).shape, 3.2)
    block = (a >= -0.15) & (a <= 0.15) & (b >= -0.18) & (b <= 0.16)
    return np.where(block, 2.55, z)


def _sphere_depth(a, b, center=(0.04, 0.03, 2.95), radius=0.45, plane=3.3):
    c = np.asarray(center)
    d = np.stack(np.broadcast_arrays(a, b, np.ones_like(a)), -1)
    dd = np.sum(d * d, -1)
    dc = d @ c
    disc = dc**2 - dd * (c @ c - radius**2)
    with np.errstate(invalid="ignore"):
        t = (dc - np.sqrt(disc)) / dd
    hit = (disc > 0) & (t > 0)
    return np.where(hit, np.minimum(t, plane), plane)  # t is the z-depth since d_z = 1


def _waves_depth(a, b):
    return 3.0 + 0.1 * np.sin(2 * np.pi * a / 0.4) * np.cos(2 * np.pi * b / 0.45)


def _albedo(a, b, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(3):
        val = np.zeros_like(a)
        for _ in range(3):
            fa, fb = rng.uniform(2, 9, 2)
            ph = rng.uniform(0, 2 * np.pi, 2)
            val += np.sin(2 * np.pi * fa * a + ph[0]) * np.cos(2 * np.pi * fb * b + ph[1])
        out.append(val / 3)
    tex = np.stack(out, -1)
    return 0.65 + 0.3 * np.tanh(1.5 * tex)


@dataclass
class SyntheticScene:
    name: str
    depth_fn: Callable
    albedo_seed: int = 0
    spec_level: float = 0.12
    ambient: tuple = (0.03, 0.03, 0.035)
    gamma: float = 1.8
    noise_std: float = 0.01
    textured: bool = True

    def __post_init__(self):
        if not 1.0 <= self.gamma <= 2.4:
            raise ConfigError(f"gamma must lie in [1, 2.4], got {self.gamma}")
        if not 0.0 <= self.noise_std <= 0.05:
            raise ConfigError(f"noise_std must lie in [0, 0.05], got {self.noise_std}")

    def with_(self, **kw) -> "SyntheticScene":
        return replace(self, **kw)

    # --- rasters on a camera grid
    def ray_coords(self, cam: Intrinsics, size, factor: int = 1):
        h, w = size
        grid = pixel_grid((h * factor, w * factor))
        # supersampled pixel centers mapped back to the base grid
        u = (grid[..., 0] + 0.5) / factor - 0.5
        v = (grid[..., 1] + 0.5) / factor - 0.5
        return (u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy

    def depth(self, cam: Intrinsics, size, factor: int = 1) -> np.ndarray:
        a, b = self.ray_coords(cam, size, factor)
        z = self.depth_fn(a, b)
        if np.any(z <= 0):
            raise ConfigError(f"scene {self.name!r} has non-positive depth")
        return z

    def albedo(self, cam: Intrinsics, size) -> np.ndarray:
        a, b = self.ray_coords(cam, size)
        if not self.textured:
            return np.full(a.shape + (3,), 0.8)
        return _albedo(a, b, self.albedo_seed)

    def spec_strength(self, cam: Intrinsics, size) -> np.ndarray:
        return np.full(tuple(size), self.spec_level)


def make_scene(name: str, **overrides) -> SyntheticScene:
    builders = {
        "plane": lambda: SyntheticScene("plane", _plane_depth((0, 0, 3.0), (0, 0, 1)), albedo_seed=1),
        "slant30": lambda: SyntheticScene(
            "slant30", _plane_depth((0, 0, 3.0), (-np.sin(np.pi / 6), 0, np.cos(np.pi / 6))), albedo_seed=2),
        "step": lambda: SyntheticScene("step", _step_depth, albedo_seed=3),
        "sphere": lambda: SyntheticScene("sphere", _sphere_depth, albedo_seed=4, spec_level=0.2),
        "waves": lambda: SyntheticScene("waves", _waves_depth, albedo_seed=5),
    }
    if name not in builders:
        raise ConfigError(f"unknown scene {name!r}; built-ins are {sorted(builders)}")
    return builders[name]().with_(**overrides) if overrides else builders[name]()


SCENES = ("plane", "slant30", "step", "sphere", "waves")


# ---------------------------------------------------------------- geometry of a scene

def surface_points(scene: SyntheticScene, calib: CalibrationPair, factor: int = 1) -> np.ndarray:
    a, b = scene.ray_coords(calib.cam, calib.cam_size, factor)
    z = scene.depth_fn(a, b)
    return np.stack([a * z, b * z, z], -1)


def surface_normals(scene: SyntheticScene, calib: CalibrationPair, step: float = 1e-4) -> np.ndarray:
    """Analytic-style normals by central differences of the depth function in pixel units."""
    cam = calib.cam
    a, b = scene.ray_coords(cam, calib.cam_size)
    da, db = step / cam.fx, step / cam.fy

    def P(aa, bb):
        z = scene.depth_fn(aa, bb)
        return np.stack([aa * z, bb * z, z], -1)

    du = P(a + da, b) - P(a - da, b)
    dv = P(a, b + db) - P(a, b - db)
    n = np.cross(du, dv)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    X = P(a, b)
    flip = np.sum(n * -X, -1) < 0
    n[flip] *= -1
    return n


def project_points(X: np.ndarray, calib: CalibrationPair):
    Xp = X @ calib.ext.R.T + calib.ext.t
    d_p = Xp[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        p = Xp @ calib.prj.K.T
        xy = p[..., :2] / p[..., 2:3]
    return xy, d_p


def in_projector_image(xy: np.ndarray, d_p: np.ndarray, calib: CalibrationPair) -> np.ndarray:
    hp, wp = calib.prj_size
    return (d_p > 0) & (xy[..., 0] >= 0) & (xy[..., 0] <= wp - 1) & (xy[..., 1] >= 0) & (xy[..., 1] <= hp - 1)


def raycast_visibility(scene: SyntheticScene, calib: CalibrationPair, samples: int = 768,
                       tol: float = 2e-3, chunk: int = 2048) -> np.ndarray:
    """1 where the segment from the surface point to the projector center is unobstructed.

    The segment is marched against the heightfield sampled at 4x the camera
    resolution; a sample strictly behind the surface (as seen from the camera)
    blocks the light.
    """
    h, w = calib.cam_size
    f = SUPERSAMPLE
    hi_depth = scene.depth(calib.cam, (h, w), f)
    X = surface_points(scene, calib).reshape(-1, 3)
    o_p = calib.o_p
    K = calib.cam.K
    # skip the first ~0.01 units so the start point does not shadow itself
    seg_len = np.linalg.norm(o_p - X, axis=-1, keepdims=True)
    tau0 = np.minimum(0.01 / seg_len, 0.5)
    taus = np.linspace(0.0, 1.0, samples)[None, :]
    vis = np.ones(len(X), dtype=bool)
    for s in range(0, len(X), chunk):
        Xc = X[s : s + chunk]
        t = tau0[s : s + chunk] + (1 - tau0[s : s + chunk]) * taus
        Q = Xc[:, None, :] + t[..., None] * (o_p - Xc)[:, None, :]
        z = Q[..., 2]
        front = z > 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            u = (K[0, 0] * Q[..., 0] / z + K[0, 2] + 0.5) * f - 0.5
            v = (K[1, 1] * Q[..., 1] / z + K[1, 2] + 0.5) * f - 0.5
        iu = np.rint(u)
        iv = np.rint(v)
        inside = front & (iu >= 0) & (iu < w * f) & (iv >= 0) & (iv < h * f)
        surf = np.full(z.shape, np.inf)
        surf[inside] = hi_depth[iv[inside].astype(int), iu[inside].astype(int)]
        blocked = inside & (z > surf + tol)
        vis[s : s + chunk] = ~blocked.any(axis=1)
    return vis.reshape(h, w).astype(np.float64)


def warp_gt(I_p: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a projector image at per-camera-pixel projector coordinates, zero outside."""
    coords = [xy[..., 1], xy[..., 0]]
    out = np.stack(
        [ndimage.map_coordinates(I_p[..., c], coords, order=1, mode="grid-constant", cval=0.0) for c in range(I_p.shape[-1])],
        -1,
    )
    return out


@dataclass
class SceneRender:
    """Per-scene quantities reused across renders."""

    scene: SyntheticScene
    calib: CalibrationPair
    points: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    spec: np.ndarray
    visibility: np.ndarray
    xy: np.ndarray
    d_p: np.ndarray
    cos_nl: np.ndarray
    cos_rv: np.ndarray
    fov: np.ndarray = field(default=None)

    @classmethod
    def build(cls, scene: SyntheticScene, calib: CalibrationPair) -> "SceneRender":
        X = surface_points(scene, calib)
        n = surface_normals(scene, calib)
        xy, d_p = project_points(X, calib)
        if np.any(d_p <= 0):
            raise ConfigError(f"scene {scene.name!r} has points behind the projector")
        l = calib.o_p - X
        l /= np.linalg.norm(l, axis=-1, keepdims=True)
        v = -X / np.linalg.norm(X, axis=-1, keepdims=True)
        r = 2 * np.sum(n * l, -1, keepdims=True) * n - l
        return cls(
            scene=scene,
            calib=calib,
            points=X,
            normals=n,
            albedo=scene.albedo(calib.cam, calib.cam_size),
            spec=scene.spec_strength(calib.cam, calib.cam_size),
            visibility=raycast_visibility(scene, calib),
            xy=xy,
            d_p=d_p,
            cos_nl=np.maximum(np.sum(n * l, -1), 0.0),
            cos_rv=np.maximum(np.sum(r * v, -1), 0.0),
            fov=in_projector_image(xy, d_p, calib).astype(np.float64),
        )

    def direct_light(self, I_p: np.ndarray) -> np.ndarray:
        """Linear direct radiance: diffuse plus shininess-1 specular, projector shadows applied."""
        lit = warp_gt(I_p, self.xy) * self.visibility[..., None]
        return self.albedo * lit * self.cos_nl[..., None] + self.spec[..., None] * lit * self.cos_rv[..., None]

    def capture(self, I_p: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        lin = np.asarray(self.scene.ambient)[None, None, :] + self.direct_light(I_p)
        img = lin ** (1.0 / self.scene.gamma)
        if self.scene.noise_std > 0:
            rng = rng if rng is not None else np.random.default_rng(0)
            img = img + rng.normal(0.0, self.scene.noise_std, img.shape)
        return np.clip(img, 0.0, 1.0)


def render_capture(scene: SyntheticScene, I_p: np.ndarray, calib: CalibrationPair, rng=None,
                   cache: SceneRender | None = None) -> np.ndarray:
    """Camera capture of projector image ``I_p`` (float ``(hp, wp, 3)``)."""
    hp, wp = calib.prj_size
    if I_p.shape[:2] != (hp, wp):
        raise ShapeError(f"projector image must be {hp}x{wp}, got {I_p.shape[:2]}")
    cache = cache if cache is not None else SceneRender.build(scene, calib)
    return cache.capture(I_p, rng)


# ---------------------------------------------------------------- patterns and datasets

def sampling_pattern(size, rng: np.random.Generator) -> np.ndarray:
    """Colorful multi-scale noise, occasionally overlaid with a colored gradient sweep."""
    h, w = size
    img = np.zeros((h, w, 3))
    weights = rng.dirichlet(np.ones(4))
    for scale, wt in zip((2, 4, 8, 16), weights):
        small = rng.random((int(np.ceil(h / scale)) + 1, int(np.ceil(w / scale)) + 1, 3))
        up = ndimage.zoom(small, (scale, scale, 1), order=1)[:h, :w]
        img += wt * up
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-9)
    if rng.random() < 0.3:
        ang = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:h, 0:w]
        ramp = (np.cos(ang) * xs / w + np.sin(ang) * ys / h)
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        color = rng.random(3)
        img = 0.6 * img + 0.4 * ramp[..., None] * color
    gain = rng.uniform(0.6, 1.0, 3)
    offset = rng.uniform(0.0, 0.2, 3)
    return np.clip(offset + gain * img * (1 - offset), 0.0, 1.0)


def generate_dataset(scene: SyntheticScene, calib: CalibrationPair, N: int, seed: int = 0, n_test: int = 0):
    """Seeded training (and optional held-out test) pairs plus the evaluation-only ground truth."""
    if N < 1:
        raise ConfigError("N must be at least 1")
    cache = SceneRender.build(scene, calib)
    seeds = np.random.SeedSequence(seed).spawn(2 * (N + n_test) + 2)
    hp, wp = calib.prj_size

    def pattern(i):
        return sampling_pattern((hp, wp), np.random.default_rng(seeds[i]))

    def noise(i):
        return np.random.default_rng(seeds[N + n_test + i])

    prj = np.stack([pattern(i) for i in range(N + n_test)])
    cam = np.stack([cache.capture(prj[i], noise(i)) for i in range(N + n_test)])
    white = np.ones((hp, wp, 3))
    black = np.zeros((hp, wp, 3))
    s = cache.capture(white, np.random.default_rng(seeds[-2]))
    dark = cache.capture(black, np.random.default_rng(seeds[-1]))
    s_star = threshold_fov(s, dark)
    gt = GroundTruth(
        depth=cache.points[..., 2].copy(),
        normals=cache.normals.copy(),
        mask=cache.visibility * cache.fov,
        visibility=cache.visibility.copy(),
        fov=cache.fov.copy(),
        extra={"albedo": cache.albedo, "spec": cache.spec, "render": cache},
    )
    data = Dataset(
        prj=prj[:N], cam=cam[:N], s=s, s_star=s_star, calib=calib, dark=dark,
        prj_test=prj[N:] if n_test else None, cam_test=cam[N:] if n_test else None,
    )
    return data, gt


def threshold_fov(s: np.ndarray, dark: np.ndarray, threshold: float = S_STAR_THRESHOLD) -> np.ndarray:
    return (np.mean(s - dark, axis=-1) > threshold).astype(np.float64)
