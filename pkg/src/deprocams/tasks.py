"""Downstream uses of a trained model: relighting, compensation, reconstruction, metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from . import autodiff as ad
from .errors import ConfigError, ShapeError, TaskError
from .geometry import backproject, pixel_grid
from .io import write_pfm, write_ply, write_png
from .training import Model, _nchw, loss_smooth

SATURATION_WEIGHT = 10.0
DIVERGENCE_WINDOW = 50


def _hwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().double().numpy().transpose(0, 2, 3, 1)


def _check_pattern(model: Model, I_p: np.ndarray) -> np.ndarray:
    I_p = np.asarray(I_p, dtype=np.float64)
    single = I_p.ndim == 3
    batch = I_p[None] if single else I_p
    if batch.ndim != 4 or batch.shape[1:3] != tuple(model.calib.prj_size) or batch.shape[-1] != 3:
        raise ShapeError(f"projector image must be {tuple(model.calib.prj_size)} x 3, got {I_p.shape}")
    return batch


# ---------------------------------------------------------------- relighting

def relight(model: Model, I_p: np.ndarray) -> np.ndarray:
    """Predicted capture(s) ``(..., h, w, 3)`` for projector image(s) ``(..., hp, wp, 3)``."""
    single = np.asarray(I_p).ndim == 3
    batch = _check_pattern(model, I_p)
    out = _hwc(model.predict(_nchw(batch, model.dtype)))
    return out[0] if single else out


# ---------------------------------------------------------------- compensation

def largest_rectangle(mask: np.ndarray):
    """Largest axis-aligned all-true rectangle ``(y0, y1, x0, x1)`` (end-exclusive), or None."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    heights = np.zeros(w, dtype=int)
    best, best_rect = 0, None
    for y in range(h):
        heights = np.where(mask[y], heights + 1, 0)
        stack: list[int] = []
        for x in range(w + 1):
            cur = heights[x] if x < w else 0
            while stack and heights[stack[-1]] >= cur:
                top = stack.pop()
                left = stack[-1] + 1 if stack else 0
                area = heights[top] * (x - left)
                if area > best:
                    best = area
                    best_rect = (y - heights[top] + 1, y + 1, left, x)
            stack.append(x)
    return best_rect


@dataclass
class DesiredImage:
    image: np.ndarray  # (h, w, 3), zero outside the rectangle
    rect: tuple  # (y0, y1, x0, x1)
    gain: float
    region: np.ndarray  # (h, w) bool


def displayable_mask(model: Model) -> np.ndarray:
    with torch.no_grad():
        M = model.attributes().M[0, 0].double().numpy()
    s_star = model.prior.s_star[0, 0].double().numpy()
    return (M > 0.5) & (s_star > 0.5)


def desired_camera_image(I_p: np.ndarray, model: Model) -> DesiredImage:
    """Target image as the camera should see it: warped into the camera view, cropped, and dimmed.

    The crop is the largest axis-aligned rectangle inside the hardened
    direct-light and FOV masks; the gain is the 95th percentile of the
    surface image there, capped at 1, so the target stays reachable.
    """
    batch = _check_pattern(model, I_p)
    rect = largest_rectangle(displayable_mask(model))
    if rect is None:
        raise TaskError("no displayable region: the direct-light mask and FOV do not overlap")
    y0, y1, x0, x1 = rect
    region = np.zeros(model.calib.cam_size, dtype=bool)
    region[y0:y1, x0:x1] = True
    s = model.prior.s[0].double().numpy().transpose(1, 2, 0)
    gain = float(min(1.0, np.percentile(s[region], 95)))
    with torch.no_grad():
        omega = model.attributes().omega.double()
        warped = ad.grid_sample(torch.as_tensor(batch[:1].transpose(0, 3, 1, 2).copy()), omega.permute(0, 2, 3, 1))
    img = warped[0].numpy().transpose(1, 2, 0) * gain
    img[~region] = 0.0
    return DesiredImage(image=img, rect=rect, gain=gain, region=region)


@dataclass
class CompensationConfig:
    lr: float = 2e-2
    iterations: int = 200
    saturation_weight: float = SATURATION_WEIGHT
    smooth_weight: float = 1.0

    def __post_init__(self):
        if not self.lr > 0 or not self.saturation_weight > 0 or not self.smooth_weight >= 0:
            raise ConfigError("compensation settings must be positive")
        if not isinstance(self.iterations, (int, np.integer)) or self.iterations < 1:
            raise ConfigError(f"compensation iterations must be a positive integer, got {self.iterations!r}")


@dataclass
class CompensationResult:
    image: np.ndarray  # (hp, wp, 3) in [0, 1]
    raw: np.ndarray  # best iterate before the final clamp
    log: list = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan


def inverse_warp_init(target: np.ndarray, region: np.ndarray, omega: np.ndarray, prj_size) -> np.ndarray:
    """Nearest-grid inverse of the warp: scatter camera pixels to projector pixels, fill holes by nearest."""
    hp, wp = prj_size
    out = np.zeros((hp, wp, 3))
    hit = np.zeros((hp, wp), dtype=bool)
    xy = omega[region]
    px = np.rint(xy[:, 0]).astype(int)
    py = np.rint(xy[:, 1]).astype(int)
    ok = (px >= 0) & (px < wp) & (py >= 0) & (py < hp)
    out[py[ok], px[ok]] = target[region][ok]
    hit[py[ok], px[ok]] = True
    if not hit.any():
        return np.full((hp, wp, 3), 0.5)
    _, (iy, ix) = ndimage.distance_transform_edt(~hit, return_indices=True)
    return out[iy, ix]


def compensation_loss(pred, target, I_p, rect, cfg: CompensationConfig):
    y0, y1, x0, x1 = rect
    p = pred[..., y0:y1, x0:x1]
    t = target[..., y0:y1, x0:x1]
    recon = (p - t).abs().mean() + 1.0 - ad.ssim(p, t)
    ones = (torch.ones_like(I_p[:, :1]), torch.ones_like(I_p[:, :1]))
    smooth = loss_smooth(I_p, None, weights=ones)
    over = torch.relu(I_p - 1.0)
    under = torch.relu(-I_p)
    sat = (over * over).sum() + (under * under).sum()
    return recon + cfg.smooth_weight * smooth + cfg.saturation_weight * sat


def compensate(model: Model, desired: DesiredImage, cfg: CompensationConfig | None = None) -> CompensationResult:
    """Projector image whose predicted capture matches ``desired`` (model frozen)."""
    cfg = cfg or CompensationConfig()
    y0, y1, x0, x1 = desired.rect
    if y1 - y0 < ad.SSIM_WINDOW or x1 - x0 < ad.SSIM_WINDOW:
        raise TaskError(f"displayable rectangle {y1 - y0}x{x1 - x0} is smaller than the SSIM window")
    dtype = model.dtype
    with torch.no_grad():
        attrs = model.attributes()
    omega = attrs.omega[0].double().numpy().transpose(1, 2, 0)
    init = inverse_warp_init(desired.image, desired.region, omega, model.calib.prj_size)
    I_p = torch.as_tensor(init.transpose(2, 0, 1)[None].copy(), dtype=dtype).requires_grad_(True)
    target = _nchw(desired.image, dtype)
    for p in model.params.parameters():
        p.requires_grad_(False)
    opt = ad.Adam([([I_p], cfg.lr)])
    log = []
    best = (math.inf, I_p.detach().clone())
    rising = 0
    for it in range(cfg.iterations + 1):
        opt.zero_grad()
        pred, _ = model.render(I_p, attrs)
        loss = compensation_loss(pred, target, I_p, desired.rect, cfg)
        val = float(loss.detach())
        if not math.isfinite(val):
            raise TaskError(f"compensation loss became non-finite at step {it}")
        log.append({"iter": it, "loss": val})
        if val < best[0]:
            best = (val, I_p.detach().clone())
        rising = rising + 1 if it and val > log[-2]["loss"] else 0
        if rising >= DIVERGENCE_WINDOW:
            raise TaskError(f"compensation diverged: loss rose for {DIVERGENCE_WINDOW} consecutive steps (step {it})")
        if it == cfg.iterations:
            break
        loss.backward()
        opt.step()
    raw = best[1][0].double().numpy().transpose(1, 2, 0)
    return CompensationResult(
        image=np.clip(raw, 0.0, 1.0), raw=raw, log=log, initial_loss=log[0]["loss"], final_loss=best[0]
    )


# ---------------------------------------------------------------- reconstruction

def fov_mask(model: Model) -> np.ndarray:
    return model.prior.s_star[0, 0].double().numpy() > 0.5


def export_depth(model: Model, t_norm: float = 1.0):
    """Metric depth raster ``(h, w)`` and the point cloud of the FOV pixels ``(n, 3)``."""
    depth = model.depth() * float(t_norm)
    fov = fov_mask(model)
    pts = backproject(pixel_grid(model.calib.cam_size)[fov], depth[fov], model.calib.cam)
    return depth, pts


def export_normals(model: Model) -> np.ndarray:
    with torch.no_grad():
        n = model.attributes().n
    return n[0].double().numpy().transpose(1, 2, 0)


def write_reconstruction(model: Model, prefix, t_norm: float = 1.0) -> dict:
    depth, pts = export_depth(model, t_norm)
    normals = export_normals(model)
    fov = fov_mask(model)
    paths = {"depth": f"{prefix}_depth.pfm", "normal": f"{prefix}_normal.pfm", "cloud": f"{prefix}_cloud.ply"}
    write_pfm(paths["depth"], depth)
    write_pfm(paths["normal"], normals)
    write_ply(paths["cloud"], pts, normals[fov])
    return paths


def _ramp(x: np.ndarray) -> np.ndarray:
    """Blue-to-red color map of a raster scaled to its own finite range."""
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(x)
    lo, hi = (x[finite].min(), x[finite].max()) if finite.any() else (0.0, 1.0)
    u = np.clip((np.where(finite, x, lo) - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    return np.stack([u, 1.0 - np.abs(2.0 * u - 1.0), 1.0 - u], -1)


def dump_attributes(model: Model, prefix) -> dict:
    """Write n, M, omega and d_p as PFM rasters plus color-mapped PNGs for inspection."""
    with torch.no_grad():
        attrs = model.attributes()
    hp, wp = model.calib.prj_size
    n = attrs.n[0].double().numpy().transpose(1, 2, 0)
    M = attrs.M[0, 0].double().numpy()
    omega = attrs.omega[0].double().numpy().transpose(1, 2, 0)
    d_p = attrs.d_p[0, 0].double().numpy()
    # PFM holds 1 or 3 channels, so omega gets an empty third channel
    omega3 = np.concatenate([omega, np.zeros(omega.shape[:2] + (1,))], -1)
    rasters = {
        "normal": (n, (n + 1.0) / 2.0),
        "mask": (M, M),
        "omega": (omega3, np.stack([omega[..., 0] / (wp - 1), omega[..., 1] / (hp - 1), np.zeros_like(M)], -1)),
        "dp": (d_p, _ramp(d_p)),
    }
    paths = {}
    for name, (raw, img) in rasters.items():
        paths[name] = f"{prefix}_{name}.pfm"
        write_pfm(paths[name], raw)
        write_png(f"{prefix}_{name}.png", np.clip(img, 0.0, 1.0))
    return paths


# ---------------------------------------------------------------- metrics

def rmse(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    return float(np.sqrt(np.mean(d * d)))


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Unit-peak PSNR, ``-20 log10(RMSE)``; infinite for identical inputs."""
    e = rmse(a, b, mask)
    return math.inf if e == 0 else -20.0 * math.log10(e)


def ssim_index(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean SSIM of ``(h, w, 3)`` images; with ``mask``, over windows centred on mask pixels."""
    ta = torch.as_tensor(np.asarray(a, dtype=np.float64).transpose(2, 0, 1)[None].copy())
    tb = torch.as_tensor(np.asarray(b, dtype=np.float64).transpose(2, 0, 1)[None].copy())
    smap = ad.ssim_map(ta, tb)[0].mean(0).numpy()
    if mask is None:
        return float(smap.mean())
    r = ad.SSIM_WINDOW // 2
    centres = np.asarray(mask, dtype=bool)[r : r + smap.shape[0], r : r + smap.shape[1]]
    if not centres.any():
        return math.nan
    return float(smap[centres].mean())


def point_cloud_error(depth: np.ndarray, depth_gt: np.ndarray, cam, mask: np.ndarray) -> float:
    """Mean Euclidean distance between pixel-aligned back-projected clouds over ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    grid = pixel_grid(depth.shape)[mask]
    a = backproject(grid, depth[mask], cam)
    b = backproject(grid, depth_gt[mask], cam)
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def evaluate(model: Model, prj_test=None, cam_test=None, gt: dict | None = None, t_norm: float = 1.0,
             notices: list | None = None) -> dict:
    """Image metrics over the test pairs (whole and masked) and the point-cloud error.

    ``gt`` may hold ``depth`` (metric, same units as ``t_norm``) and ``mask``;
    missing pieces skip their metrics and add a line to ``notices``.
    """
    notices = notices if notices is not None else []
    gt = gt or {}
    out: dict = {}
    mask = gt.get("mask")
    if mask is None:
        mask = fov_mask(model)
        notices.append("no ground-truth mask: masked metrics use the FOV mask")
    mask = np.asarray(mask) > 0.5
    if prj_test is not None and cam_test is not None and len(prj_test):
        pred = relight(model, np.asarray(prj_test))
        cam_test = np.asarray(cam_test, dtype=np.float64)
        rows = []
        for p, c in zip(pred, cam_test):
            rows.append((psnr(p, c), rmse(p, c), ssim_index(p, c), psnr(p, c, mask), rmse(p, c, mask), ssim_index(p, c, mask)))
        vals = np.mean(np.array(rows), axis=0)
        keys = ("psnr", "rmse", "ssim", "psnr_masked", "rmse_masked", "ssim_masked")
        out.update({k: float(v) for k, v in zip(keys, vals)})
    else:
        notices.append("no test images: image metrics skipped")
    if gt.get("depth") is not None:
        depth = model.depth() * float(t_norm)
        out["d_err"] = point_cloud_error(depth, np.asarray(gt["depth"], dtype=np.float64), model.calib.cam, mask)
    else:
        notices.append("no ground-truth depth: d_err skipped")
    return out
