"""In-memory training data and ground truth containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .geometry import CalibrationPair


@dataclass
class Dataset:
    """Projector/camera image pairs plus the surface prior, all float ``(h, w, 3)`` in [0, 1]."""

    prj: np.ndarray  # (N, hp, wp, 3)
    cam: np.ndarray  # (N, hc, wc, 3)
    s: np.ndarray  # white-illuminated capture
    s_star: np.ndarray  # (hc, wc) binary projector-FOV mask
    calib: CalibrationPair
    dark: np.ndarray | None = None
    prj_test: np.ndarray | None = None
    cam_test: np.ndarray | None = None

    def __post_init__(self):
        if len(self.prj) < 1 or len(self.prj) != len(self.cam):
            raise ShapeError(f"need N >= 1 matching pairs, got {len(self.prj)} projector / {len(self.cam)} camera images")
        hc, wc = self.calib.cam_size
        hp, wp = self.calib.prj_size
        if self.cam.shape[1:3] != (hc, wc) or self.s.shape[:2] != (hc, wc) or self.s_star.shape[:2] != (hc, wc):
            raise ShapeError("camera images, s and s_star must match the calibrated camera size")
        if self.prj.shape[1:3] != (hp, wp):
            raise ShapeError("projector images must match the calibrated projector size")

    def __len__(self):
        return len(self.prj)


@dataclass
class GroundTruth:
    depth: np.ndarray  # (h, w) camera z-depth, baseline units
    normals: np.ndarray  # (h, w, 3) facing the camera
    mask: np.ndarray  # (h, w) directly lit and inside the projector image
    visibility: np.ndarray  # (h, w) ray-cast projector visibility (ignores the FOV)
    fov: np.ndarray  # (h, w) inside the projector image
    extra: dict = field(default_factory=dict)
