"""DepthToAttribute: from a learnable inverse-depth map to shading attributes.

Everything here is differentiable with respect to the inverse depth. Rasters
are ``[N, C, H, W]`` tensors on the camera grid; the warp grid ``omega`` holds
projector pixel coordinates (x, y) per camera pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from . import autodiff as ad
from .geometry import CalibrationPair, pixel_grid, rectification_homography, rectified_size

INV_DEPTH_MIN = 1e-3
INV_DEPTH_MAX = 1.0
REC601 = (0.299, 0.587, 0.114)
# Sorted entries compared on each side by the occlusion test.
MASK_REACH = 2
# Out-of-view sentinel for points behind the projector (projector pixels).
_FAR = -1.0e4


class Rig:
    """Calibration constants as tensors, plus the rectification sampling grids.

    ``calib`` should already be normalized (unit baseline) when depths are in
    baseline units.
    """

    def __init__(self, calib: CalibrationPair, dtype=torch.float32, device="cpu"):
        self.calib = calib
        self.dtype = dtype
        self.device = device
        h, w = calib.cam_size
        kw = dict(dtype=dtype, device=device)
        grid = pixel_grid((h, w))
        rays = np.concatenate([grid, np.ones((h, w, 1))], -1) @ calib.cam.K_inv.T
        self.rays = torch.as_tensor(rays.transpose(2, 0, 1)[None].copy(), **kw)
        self.R = torch.as_tensor(calib.ext.R, **kw)
        self.t = torch.as_tensor(calib.ext.t, **kw)
        self.K_p = torch.as_tensor(calib.prj.K, **kw)
        self.o_p = torch.as_tensor(calib.o_p, **kw)

        self.H = rectification_homography(calib, (h, w))
        self.H_inv = np.linalg.inv(self.H)
        self.rect_size = rectified_size(self.H, (h, w))
        rh, rw = self.rect_size
        src = _warp_points(self.H_inv, pixel_grid((rh, rw)))
        self.rect_grid = torch.as_tensor(src[None].copy(), **kw)
        dst = _warp_points(self.H, grid)
        self.unrect_grid = torch.as_tensor(dst[None].copy(), **kw)
        ones = torch.ones((1, 1, h, w), **kw)
        self.rect_valid = ad.grid_sample(ones, self.rect_grid)
        self.rect_inside = self.rect_valid > 1.0 - 1e-9
        self.prj_ones = torch.ones((1, 1) + tuple(calib.prj_size), **kw)

    @property
    def cam_size(self):
        return self.calib.cam_size

    @property
    def prj_size(self):
        return self.calib.prj_size


def _warp_points(H, pts):
    p = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], -1) @ H.T
    return p[..., :2] / p[..., 2:3]


@dataclass
class SurfacePrior:
    """Scene under plain white light ``s``, its grayscale, and the projector FOV mask."""

    s: torch.Tensor
    s_gray: torch.Tensor
    s_star: torch.Tensor

    @classmethod
    def from_images(cls, s, s_star, dtype=torch.float32) -> "SurfacePrior":
        s = _as_nchw(s, dtype)
        s_star = _as_nchw(s_star, dtype)
        if s_star.shape[1] != 1:
            s_star = s_star[:, :1]
        return cls(s=s, s_gray=grayscale(s), s_star=s_star)


def _as_nchw(x, dtype):
    if isinstance(x, np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[..., None]
        x = torch.as_tensor(x.transpose(2, 0, 1)[None].copy())
    return x.to(dtype)


def grayscale(img: torch.Tensor) -> torch.Tensor:
    w = img.new_tensor(REC601).view(1, 3, 1, 1)
    return (img * w).sum(1, keepdim=True)


@dataclass
class AttributeBundle:
    points: torch.Tensor
    n: torch.Tensor
    l: torch.Tensor
    r: torch.Tensor
    v: torch.Tensor
    omega: torch.Tensor  # [N, 2, H, W] projector pixel coordinates
    d_p: torch.Tensor
    M: torch.Tensor  # occlusion times field of view; compared against s_star
    M_occ: torch.Tensor = None  # occlusion only; gates the warp
    degenerate_normals: int = 0

    def __post_init__(self):
        if self.M_occ is None:
            self.M_occ = self.M

    def detach(self) -> "AttributeBundle":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        return AttributeBundle(**{k: v.detach() if torch.is_tensor(v) else v for k, v in vals.items()})


def _normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=1, keepdim=True).clamp_min(eps)


def _dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(1, keepdim=True)


def clamp_inverse_depth(inv_d: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        inv_d.clamp_(INV_DEPTH_MIN, INV_DEPTH_MAX)
    return inv_d


def compute_points(inv_d: torch.Tensor, rig: Rig) -> torch.Tensor:
    """Per-pixel 3-D points ``K_c^-1 [x, y, 1] / inv_d`` as ``[N, 3, H, W]``."""
    return rig.rays / inv_d


def compute_normals(points: torch.Tensor, return_count: bool = False):
    """Unit normals from the cross product of forward differences, turned to face the camera.

    Pixels where the cross product vanishes fall back to the view direction.
    """
    dx, dy = ad.spatial_gradient(points)
    n = torch.cross(dx, dy, dim=1)
    norm = n.norm(dim=1, keepdim=True)
    v = _normalize(-points)
    bad = norm < 1e-12
    n = torch.where(bad, v, n / norm.clamp_min(1e-12))
    n = torch.where(_dot(n, v) < 0, -n, n)
    if return_count:
        return n, int(bad.sum())
    return n


def compute_light_view_reflect(points: torch.Tensor, rig: Rig, n: torch.Tensor):
    """Unit light (to projector), view (to camera) and mirror-reflection directions."""
    to_prj = rig.o_p.view(1, 3, 1, 1) - points
    if (to_prj.detach().norm(dim=1) < 1e-12).any() or (points.detach().norm(dim=1) < 1e-12).any():
        raise ad.NumericError("surface point coincides with a device center")
    l = _normalize(to_prj)
    v = _normalize(-points)
    r = 2 * _dot(n, l) * n - l
    return l, v, _normalize(r)


def compute_warp_grid(points: torch.Tensor, rig: Rig):
    """Projector pixel of every camera pixel (``omega``, ``[N, 2, H, W]``) and its projector depth."""
    x = torch.einsum("ij,njhw->nihw", rig.R, points) + rig.t.view(1, 3, 1, 1)
    d_p = x[:, 2:3]
    behind = d_p <= 1e-6
    safe = torch.where(behind, torch.ones_like(d_p), d_p)
    p = torch.einsum("ij,njhw->nihw", rig.K_p, x / safe)
    omega = torch.where(behind, torch.full_like(p[:, :2], _FAR), p[:, :2])
    return omega, d_p


def omega_to_grid(omega: torch.Tensor) -> torch.Tensor:
    return omega.permute(0, 2, 3, 1)


def _visible_against(sorted_vals: torch.Tensor, k: int) -> torch.Tensor:
    """Smooth visibility of every sorted entry against the entry ``k`` places away.

    For ``k = -1`` this is exactly the row-wise predicate: an entry stays lit if
    its neighbor is more than one projector pixel away, or if it is nearer to
    the projector than that neighbor. Entries without such a neighbor are lit.
    """
    w = sorted_vals.shape[-1]
    if abs(k) >= w:
        return torch.ones_like(sorted_vals[:, :1])
    if k < 0:
        diff = sorted_vals[..., -k:] - sorted_vals[..., :k]  # entry j minus entry j+k
        pad_left = True
    else:
        diff = sorted_vals[..., :-k] - sorted_vals[..., k:]
        pad_left = False
    dist = diff[:, 0:1].abs() + diff[:, 1:2].abs()
    lit = ad.maximum(ad.smoothstep(dist - 1.0), ad.smoothstep(-diff[:, 2:3]))
    pad = torch.ones_like(sorted_vals[:, :1, :, : abs(k)])
    return torch.cat([pad, lit], -1) if pad_left else torch.cat([lit, pad], -1)


def direct_light_mask(omega: torch.Tensor, d_p: torch.Tensor, rig: Rig, reach: int = MASK_REACH,
                      return_parts: bool = False):
    """Differentiable projector direct-light mask on the camera grid.

    1. stack ``[omega, d_p]``; 2. resample into the rectified frame, where
    epipolar lines are rows; 3. sort every row lexicographically by projector
    (x, y); 4. difference each sorted entry against its ``reach`` neighbors on
    both sides (the ``k = 1`` backward difference is the classic forward
    difference assigned to the later entry) and AND the smooth visibility
    predicates; scatter back to rectified columns; 5. resample to the camera
    grid. The result is multiplied by the smooth projector field-of-view
    indicator, so pixels whose ray misses the projector image are 0.
    """
    raw = torch.cat([omega, d_p], 1)
    n = raw.shape[0]
    rect = ad.grid_sample(raw, rig.rect_grid.expand(n, -1, -1, -1))
    # entries blended with the zero border are unreliable: send them far away
    inside = rig.rect_inside.expand(n, -1, -1, -1)
    empty = rect.new_tensor([_FAR, _FAR, -_FAR]).view(1, 3, 1, 1)
    rect = torch.where(inside, rect, empty)
    srt, perm = ad.row_sort_lex(rect)
    lit = torch.ones_like(srt[:, :1])
    for k in range(1, reach + 1):
        lit = ad.minimum(lit, _visible_against(srt, -k))
        lit = ad.minimum(lit, _visible_against(srt, k))
    lit_rect = ad.scatter_rows(lit, perm)
    # and they are never shadowed
    lit_rect = torch.where(inside, lit_rect, torch.ones_like(lit_rect))
    # resample the shadow amount so samples off the rectified canvas read as lit
    occ = 1.0 - ad.grid_sample(1.0 - lit_rect, rig.unrect_grid.expand(n, -1, -1, -1))
    occ = ad.clamp(occ, 0.0, 1.0)
    fov = field_of_view(omega, rig)
    M = occ * fov
    if return_parts:
        return M, occ, fov
    return M


def field_of_view(omega: torch.Tensor, rig: Rig) -> torch.Tensor:
    """Smooth indicator that the bilinear footprint of ``omega`` touches the projector image."""
    cover = ad.grid_sample(rig.prj_ones.expand(omega.shape[0], -1, -1, -1), omega_to_grid(omega))
    return ad.smoothstep(cover)


def warp_projector_image(I_p: torch.Tensor, omega: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Projector image(s) resampled into the camera view, occluded pixels zeroed."""
    grid = omega_to_grid(omega)
    return ad.grid_sample(I_p, grid) * M


def rough_shadings(I_wp: torch.Tensor, prior: SurfacePrior, n, l, r, v):
    """Rough ambient, diffuse and specular (shininess 1) shadings."""
    cos_nl = ad.clamp(_dot(n, l), 0.0, 1.0)
    cos_rv = ad.clamp(_dot(r, v), 0.0, 1.0)
    batch = I_wp.shape[0]
    I_abnt = prior.s.expand(batch, -1, -1, -1)
    I_diff = I_wp * prior.s * cos_nl
    I_spec = I_wp * prior.s_gray * cos_rv
    return I_abnt, I_diff, I_spec


def depth_to_attribute(inv_d: torch.Tensor, rig: Rig, use_mask: bool = True, s_star=None,
                       reach: int = MASK_REACH) -> AttributeBundle:
    """All projector-independent attributes for the current depth.

    With ``use_mask=False`` the mask is replaced by ``s_star`` (the no-mask
    ablation).
    """
    points = compute_points(inv_d, rig)
    n, bad = compute_normals(points, return_count=True)
    l, v, r = compute_light_view_reflect(points, rig, n)
    omega, d_p = compute_warp_grid(points, rig)
    if use_mask:
        M, M_occ, _ = direct_light_mask(omega, d_p, rig, reach=reach, return_parts=True)
    else:
        if s_star is None:
            raise ValueError("no-mask mode needs s_star")
        M = M_occ = s_star
    return AttributeBundle(points=points, n=n, l=l, r=r, v=v, omega=omega, d_p=d_p, M=M, M_occ=M_occ,
                           degenerate_normals=bad)


def shade(attrs: AttributeBundle, I_p: torch.Tensor, prior: SurfacePrior):
    """Warp a batch of projector images and compute the rough shadings."""
    # bilinear zero padding already fades the warp at the image border, so only
    # occlusion gates it here
    I_wp = warp_projector_image(I_p, attrs.omega, attrs.M_occ)
    I_abnt, I_diff, I_spec = rough_shadings(I_wp, prior, attrs.n, attrs.l, attrs.r, attrs.v)
    return I_wp, I_abnt, I_diff, I_spec
