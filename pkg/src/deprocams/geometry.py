"""Pinhole projector-camera geometry.

The world frame is the camera frame: the camera optical center is the origin
and the camera looks along +z, so depth is the z coordinate. A world point
``X`` maps to the projector frame as ``R @ X + t``. Pixel coordinates are
zero-indexed with integer values at pixel centers; ``x`` is the column and
``y`` the row.

All functions here are plain numpy (float64). The differentiable versions used
during training live in :mod:`deprocams.attributes`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BehindProjectorError, CalibrationError, DegenerateGeometryError

PARALLEL_RAY_ANGLE = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise CalibrationError("intrinsics must be finite")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @classmethod
    def from_matrix(cls, K) -> "Intrinsics":
        K = np.asarray(K, dtype=float).reshape(3, 3)
        if abs(K[0, 1]) > 1e-12 or np.any(np.abs(K[2] - [0, 0, 1]) > 1e-12) or abs(K[1, 0]) > 1e-12:
            raise CalibrationError("intrinsic matrix must be upper triangular with zero skew and last row [0, 0, 1]")
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resized by ``factor`` (pixel-center convention)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
        )


@dataclass(frozen=True)
class Extrinsics:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise CalibrationError("R is not orthonormal (|R^T R - I| > 1e-9)")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise CalibrationError(f"det(R) must be 1, got {np.linalg.det(R):.12f}")
        if not np.all(np.isfinite(t)):
            raise CalibrationError("t must be finite")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def Rt(self) -> np.ndarray:
        return np.hstack([self.R, self.t[:, None]])


@dataclass(frozen=True)
class CalibrationPair:
    cam: Intrinsics
    prj: Intrinsics
    ext: Extrinsics
    cam_size: tuple[int, int]
    prj_size: tuple[int, int]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("cam_size", "prj_size"):
            size = tuple(int(s) for s in getattr(self, name))
            if len(size) != 2 or min(size) <= 0:
                raise CalibrationError(f"{name} must be a positive (h, w) pair, got {size}")
            object.__setattr__(self, name, size)

    @property
    def o_c(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def o_p(self) -> np.ndarray:
        """Projector optical center in the camera (world) frame."""
        return -self.ext.R.T @ self.ext.t

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.ext.t))

    def normalized(self) -> "CalibrationPair":
        """Copy with ``t`` divided by its norm, so depths are in baseline units."""
        norm = self.baseline
        if norm <= 0:
            raise DegenerateGeometryError("zero baseline cannot be normalized")
        return replace(self, ext=Extrinsics(self.ext.R, self.ext.t / norm))

    def to_dict(self) -> dict:
        return {
            "K_c": self.cam.K.ravel().tolist(),
            "K_p": self.prj.K.ravel().tolist(),
            "R": self.ext.R.ravel().tolist(),
            "t": self.ext.t.tolist(),
            "cam_size": list(self.cam_size),
            "prj_size": list(self.prj_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationPair":
        try:
            arrays = {k: np.asarray(d[k], dtype=float) for k in ("K_c", "K_p", "R", "t")}
            sizes = {k: [int(v) for v in d[k]] for k in ("cam_size", "prj_size")}
        except KeyError as exc:
            raise CalibrationError(f"calibration is missing key {exc}") from None
        except (TypeError, ValueError) as exc:
            raise CalibrationError(f"calibration has malformed values: {exc}") from None
        expect = {"K_c": 9, "K_p": 9, "R": 9, "t": 3}
        for k, n in expect.items():
            if arrays[k].size != n:
                raise CalibrationError(f"calibration key {k!r} needs {n} numbers, got {arrays[k].size}")
        for k, v in sizes.items():
            if len(v) != 2:
                raise CalibrationError(f"calibration key {k!r} must be [h, w]")
        return cls(
            cam=Intrinsics.from_matrix(arrays["K_c"]),
            prj=Intrinsics.from_matrix(arrays["K_p"]),
            ext=Extrinsics(arrays["R"].reshape(3, 3), arrays["t"]),
            cam_size=tuple(sizes["cam_size"]),
            prj_size=tuple(sizes["prj_size"]),
        )

    @classmethod
    def load(cls, path) -> "CalibrationPair":
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as exc:
            raise CalibrationError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise CalibrationError(f"{path}: calibration must be a JSON object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        from .io import atomic_write_text

        atomic_write_text(Path(path), json.dumps(self.to_dict(), indent=2))


def _homog(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def backproject(x_c, d, cam: Intrinsics) -> np.ndarray:
    """Lift pixel(s) ``x_c`` (..., 2) at z-depth ``d`` (...) to 3-D camera points (..., 3)."""
    x_c = np.asarray(x_c, dtype=float)
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("depth must be finite")
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    rays = _homog(x_c) @ cam.K_inv.T
    return rays * d[..., None]


def project(x_s, K: np.ndarray) -> np.ndarray:
    """Pinhole projection of points already expressed in a device frame."""
    x_s = np.asarray(x_s, dtype=float)
    p = x_s @ np.asarray(K).T
    return p[..., :2] / p[..., 2:3]


def project_to_projector(x_s, calib: CalibrationPair, strict: bool = True):
    """Projector pixel and projector-frame depth of world point(s) ``x_s``.

    With ``strict`` a point at or behind the projector plane raises; otherwise
    its depth is returned as-is and the pixel may be meaningless.
    """
    x_s = np.asarray(x_s, dtype=float)
    x_prj = x_s @ calib.ext.R.T + calib.ext.t
    d_p = x_prj[..., 2]
    if strict and np.any(d_p <= 0):
        raise BehindProjectorError(f"{int(np.sum(d_p <= 0))} point(s) behind the projector")
    x_p = project(x_prj, calib.prj.K)
    return x_p, d_p


def _ray_directions(x_c, x_p, calib):
    dc = _homog(np.asarray(x_c, dtype=float)) @ calib.cam.K_inv.T
    dp_local = _homog(np.asarray(x_p, dtype=float)) @ calib.prj.K_inv.T
    dp = dp_local @ calib.ext.R  # R^T applied to row vectors
    return dc, dp


def triangulate(x_c, x_p, calib: CalibrationPair, return_mask: bool = False):
    """Midpoint triangulation of camera/projector correspondences.

    Returns the midpoint of the shortest segment between the camera ray through
    ``x_c`` and the projector ray through ``x_p``. Rays closer than 1e-6 rad to
    parallel raise :class:`DegenerateGeometryError`, unless ``return_mask`` is
    set, in which case those rows come back as NaN together with a boolean
    validity mask.
    """
    dc, dp = _ray_directions(x_c, x_p, calib)
    oc = np.zeros(3)
    op = calib.o_p
    dc_n = dc / np.linalg.norm(dc, axis=-1, keepdims=True)
    dp_n = dp / np.linalg.norm(dp, axis=-1, keepdims=True)
    sin_angle = np.linalg.norm(np.cross(dc_n, dp_n), axis=-1)
    valid = sin_angle > np.sin(PARALLEL_RAY_ANGLE)
    if not return_mask and not np.all(valid):
        raise DegenerateGeometryError("camera and projector rays are (near) parallel")

    # Solve min |oc + a dc - (op + b dp)| for a, b.
    w0 = oc - op
    a = np.sum(dc * dc, -1)
    b = np.sum(dc * dp, -1)
    c = np.sum(dp * dp, -1)
    d = np.sum(dc * w0, -1)
    e = np.sum(dp * w0, -1)
    den = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (b * e - c * d) / den
        u = (a * e - b * d) / den
    p1 = oc + s[..., None] * dc
    p2 = op + u[..., None] * dp
    X = 0.5 * (p1 + p2)
    if return_mask:
        X = np.where(valid[..., None], X, np.nan)
        return X, valid
    return X


def camera_epipole(calib: CalibrationPair) -> np.ndarray:
    """Homogeneous image of the projector center in the camera (may be at infinity)."""
    return calib.cam.K @ calib.o_p


def _rectifying_rotation(calib: CalibrationPair) -> np.ndarray:
    b = calib.o_p
    norm = np.linalg.norm(b)
    if norm <= 1e-12:
        raise DegenerateGeometryError("zero baseline: stereo rectification is undefined")
    e1 = b / norm
    if e1[0] < 0:
        e1 = -e1  # keep the image unflipped
    z = np.array([0.0, 0.0, 1.0])
    e2 = np.cross(z, e1)
    n2 = np.linalg.norm(e2)
    if n2 < 1e-9:
        raise DegenerateGeometryError("baseline along the optical axis cannot be rectified")
    e2 /= n2
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3])


def rectification_homography(calib: CalibrationPair, cam_size=None) -> np.ndarray:
    """Homography that makes camera epipolar lines horizontal.

    The camera is virtually rotated so its x axis is parallel to the baseline
    (``H = K_new R_rect K_c^-1``). ``K_new`` keeps the camera focal lengths and
    shifts the principal point so the rectified image of the camera frame
    starts at pixel (0, 0); use :func:`rectified_size` for the canvas.
    """
    cam_size = calib.cam_size if cam_size is None else cam_size
    if calib.baseline <= 0:
        raise DegenerateGeometryError("zero baseline: stereo rectification is undefined")
    R_rect = _rectifying_rotation(calib)
    H0 = calib.cam.K @ R_rect @ calib.cam.K_inv
    corners = _frame_corners(cam_size)
    warped = _apply_h(H0, corners)
    shift = np.eye(3)
    shift[:2, 2] = -np.floor(warped.min(axis=0) + 1e-9)
    H = shift @ H0
    return H / H[2, 2]


def _frame_corners(size) -> np.ndarray:
    h, w = size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])


def _apply_h(H, pts) -> np.ndarray:
    p = _homog(np.asarray(pts, dtype=float)) @ np.asarray(H).T
    return p[..., :2] / p[..., 2:3]


def apply_homography(H, pts) -> np.ndarray:
    return _apply_h(H, pts)


def rectified_size(H, cam_size, max_factor: float = 2.0) -> tuple[int, int]:
    """Canvas (h, w) holding the rectified camera frame, capped at ``max_factor`` x the input."""
    warped = _apply_h(H, _frame_corners(cam_size))
    h, w = cam_size
    out_w = int(np.ceil(warped[:, 0].max())) + 1
    out_h = int(np.ceil(warped[:, 1].max())) + 1
    return (min(max(out_h, 1), int(max_factor * h)), min(max(out_w, 1), int(max_factor * w)))


def pixel_grid(size) -> np.ndarray:
    """(h, w, 2) array of (x, y) pixel-center coordinates."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([xs, ys], axis=-1)


def plane_homography(calib: CalibrationPair, normal, dist) -> np.ndarray:
    """Camera-to-projector pixel homography induced by the plane ``normal . X = dist``."""
    n = np.asarray(normal, dtype=float).reshape(3)
    return calib.prj.K @ (calib.ext.R + np.outer(calib.ext.t, n) / dist) @ calib.cam.K_inv
