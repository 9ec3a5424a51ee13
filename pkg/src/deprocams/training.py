"""Joint optimization of the inverse-depth map and the ShadingNet filters."""

from __future__ import annotations

import csv
import json
import io as _io
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from . import autodiff as ad
from .attributes import (
    INV_DEPTH_MAX,
    INV_DEPTH_MIN,
    AttributeBundle,
    Rig,
    SurfacePrior,
    clamp_inverse_depth,
    depth_to_attribute,
    shade,
)
from .dataset import Dataset
from .errors import CalibrationError, ConfigError, ShapeError, TaskError, TrainingDiverged
from .geometry import CalibrationPair, pixel_grid, triangulate
from .shading_net import ShadingNetParams, he_init, load_checkpoint, save_checkpoint, shading_forward

ABLATIONS = ("full", "no_mask", "no_rough", "no_const")
LOSS_COLUMNS = ("iter", "L_recon", "L_mask", "L_rough", "L_smooth", "total")


@dataclass
class TrainConfig:
    lr_depth: float = 1e-2
    lr_net: float = 1e-3
    iterations: int = 1000
    batch_size: int = 24
    seed: int = 0
    w_recon: float = 1.0
    w_mask: float = 1.0
    w_rough: float = 1.0
    w_smooth_depth: float = 2.0
    w_smooth_omega: float = 1.0
    w_smooth_normal: float = 0.01
    ablation: str = "full"
    dtype: str = "float32"
    # leading iterations (out of ``iterations``) that fit depth alone, without ShadingNet
    depth_warmup: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "ablation", "dtype"):
                continue
            if f.name in ("iterations", "depth_warmup"):
                if not isinstance(v, (int, np.integer)) or v < 0:
                    raise ConfigError(f"{f.name} must be a non-negative integer, got {v!r}")
            elif f.name.startswith("w_"):
                if not (isinstance(v, (int, float)) and v >= 0 and math.isfinite(v)):
                    raise ConfigError(f"{f.name} must be a finite non-negative weight, got {v!r}")
            elif not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigError(f"{f.name} must be positive, got {v!r}")
        if self.depth_warmup > self.iterations:
            raise ConfigError(f"depth_warmup ({self.depth_warmup}) exceeds iterations ({self.iterations})")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- losses

def loss_recon(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-image L1 plus (1 - SSIM)."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    l1 = (pred - target).abs().flatten(1).mean(1)
    s = ad.ssim_map(pred, target).flatten(1).mean(1)
    return (l1 + 1.0 - s).mean()


def loss_mask(M: torch.Tensor, s_star: torch.Tensor) -> torch.Tensor:
    """Summed squared difference between the direct-light mask and the FOV mask."""
    if M.shape[-2:] != s_star.shape[-2:]:
        raise ShapeError(f"mask {tuple(M.shape)} vs s_star {tuple(s_star.shape)}")
    d = M - s_star
    return (d * d).sum()


def loss_rough(I_diff: torch.Tensor, I_c: torch.Tensor) -> torch.Tensor:
    """``1/(2N) sum_i ||I_diff_i - I_c_i||^2`` over a batch of N pairs."""
    if I_diff.shape != I_c.shape:
        raise ShapeError(f"rough diffuse {tuple(I_diff.shape)} vs capture {tuple(I_c.shape)}")
    d = I_diff - I_c
    return (d * d).sum() / (2 * I_diff.shape[0])


def edge_weights(s: torch.Tensor):
    """``exp(-||ds||)`` along x and y, with the norm taken over channels."""
    sx, sy = ad.spatial_gradient(s)
    return torch.exp(-sx.norm(dim=1, keepdim=True)), torch.exp(-sy.norm(dim=1, keepdim=True))


def loss_smooth(I: torch.Tensor, s: torch.Tensor, weights=None) -> torch.Tensor:
    """Pixel mean of edge-aware absolute gradients of ``I`` (all channels summed)."""
    wx, wy = edge_weights(s) if weights is None else weights
    gx, gy = ad.spatial_gradient(I)
    per_px = (gx.abs() * wx + gy.abs() * wy).sum(1)
    return per_px.mean()


def normalized_omega(omega: torch.Tensor, prj_size) -> torch.Tensor:
    """Projector pixel coordinates mapped to [-1, 1] (the usual sampling-grid convention)."""
    hp, wp = prj_size
    scale = omega.new_tensor([2.0 / (wp - 1), 2.0 / (hp - 1)]).view(1, 2, 1, 1)
    return omega * scale - 1.0


def loss_smooth_all(inv_d, omega, n, s, prj_size, w=(2.0, 1.0, 0.01)) -> torch.Tensor:
    weights = edge_weights(s)
    return (
        w[0] * loss_smooth(inv_d, s, weights)
        + w[1] * loss_smooth(normalized_omega(omega, prj_size), s, weights)
        + w[2] * loss_smooth(n, s, weights)
    )


# ---------------------------------------------------------------- initialization

def affine_from_fov(s_star: np.ndarray, prj_size) -> np.ndarray:
    """2x3 affine taking camera pixels to projector pixels, fitted to the FOV bounding box."""
    ys, xs = np.nonzero(np.asarray(s_star) > 0.5)
    if len(xs) == 0:
        raise TaskError("s_star is empty: cannot initialize depth")
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    hp, wp = prj_size
    sx = (wp - 1) / max(x1 - x0, 1)
    sy = (hp - 1) / max(y1 - y0, 1)
    return np.array([[sx, 0.0, -sx * x0], [0.0, sy, -sy * y0]])


def init_depth(s_star: np.ndarray, calib: CalibrationPair, prj_size=None) -> np.ndarray:
    """Inverse depth ``(h, w)`` from triangulating the affine camera-to-projector guess."""
    prj_size = calib.prj_size if prj_size is None else prj_size
    A = affine_from_fov(s_star, prj_size)
    h, w = calib.cam_size
    x_c = pixel_grid((h, w)).reshape(-1, 2)
    x_p = x_c @ A[:, :2].T + A[:, 2]
    X, ok = triangulate(x_c, x_p, calib, return_mask=True)
    z = X[:, 2]
    ok &= np.isfinite(z) & (z > 0)
    if not ok.any():
        # coincident devices or fully degenerate rays: unit depth
        z = np.ones_like(z)
    else:
        z = np.where(ok, z, np.median(z[ok]))
    return np.clip(1.0 / z, INV_DEPTH_MIN, INV_DEPTH_MAX).reshape(h, w)


# ---------------------------------------------------------------- model

def _nchw(x: np.ndarray, dtype) -> torch.Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:  # (N, h, w) or (h, w, 3)
        x = x[None] if x.shape[-1] in (1, 3) else x[..., None]
    elif x.ndim == 2:
        x = x[None, ..., None]
    return torch.as_tensor(x.transpose(0, 3, 1, 2).copy(), dtype=dtype)


class Model:
    """Learned inverse depth plus ShadingNet, bound to a calibrated rig and a surface prior."""

    def __init__(self, inv_d: torch.Tensor, params: ShadingNetParams, calib: CalibrationPair,
                 prior: SurfacePrior, ablation: str = "full", t_norm: float = 1.0):
        self.inv_d = inv_d
        self.t_norm = float(t_norm)  # baseline length: depth units per model unit
        self.params = params
        self.calib = calib
        self.prior = prior
        self.ablation = ablation
        self.rig = Rig(calib, dtype=inv_d.dtype)
        self.log: list[dict] = []

    @property
    def dtype(self):
        return self.inv_d.dtype

    def attributes(self) -> AttributeBundle:
        return depth_to_attribute(
            self.inv_d, self.rig, use_mask=self.ablation != "no_mask", s_star=self.prior.s_star
        )

    def render(self, I_p: torch.Tensor, attrs: AttributeBundle | None = None, sk1=None):
        """Predicted capture ``[N, 3, h, w]`` plus the rough shadings used to make it."""
        attrs = self.attributes() if attrs is None else attrs
        I_wp, I_abnt, I_diff, I_spec = shade(attrs, I_p, self.prior)
        if self.ablation == "no_rough":
            net_diff, net_spec = torch.zeros_like(I_diff), torch.zeros_like(I_spec)
        else:
            net_diff, net_spec = I_diff, I_spec
        pred = shading_forward(I_wp, I_abnt, net_diff, net_spec, self.params, surface_features=sk1)
        return pred, {"I_wp": I_wp, "I_diff": I_diff, "I_spec": I_spec}

    def predict(self, I_p) -> torch.Tensor:
        with torch.no_grad():
            if isinstance(I_p, np.ndarray):
                I_p = _nchw(I_p, self.dtype)
            return self.render(I_p.to(self.dtype))[0]

    def depth(self) -> np.ndarray:
        """Depth in baseline units, ``(h, w)``."""
        return 1.0 / self.inv_d.detach().double().numpy()[0, 0]


def prior_from_dataset(data: Dataset, dtype) -> SurfacePrior:
    return SurfacePrior.from_images(data.s, data.s_star, dtype=dtype)


def initial_model(data: Dataset, config: TrainConfig) -> Model:
    dtype = config.torch_dtype
    calib = data.calib.normalized()
    inv = init_depth(data.s_star, calib)
    inv_d = torch.as_tensor(inv[None, None], dtype=dtype)
    params = he_init(config.seed, dtype)
    return Model(inv_d, params, calib, prior_from_dataset(data, dtype), config.ablation, data.calib.baseline)


def _seeded_batches(n: int, batch: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for s in range(0, n, batch):
            yield order[s : s + batch]


def set_deterministic(threads: int | None = None) -> None:
    torch.use_deterministic_algorithms(True)
    if threads is None:
        threads = int(os.environ.get("DEPROCAMS_THREADS", "0") or 0)
    if threads > 0:
        torch.set_num_threads(threads)


def train(data: Dataset, config: TrainConfig | None = None, model: Model | None = None,
          log_every: int = 0, callback=None) -> Model:
    """Run ``config.iterations`` Adam steps and return the model with ``model.log`` filled in."""
    config = config or TrainConfig()
    set_deterministic()
    torch.manual_seed(config.seed)
    model = model or initial_model(data, config)
    dtype = model.dtype
    prj = _nchw(data.prj, dtype)
    cam = _nchw(data.cam, dtype)
    n = len(data)
    batch = min(config.batch_size, n)
    rng = np.random.default_rng(config.seed)
    batches = _seeded_batches(n, batch, rng)

    model.inv_d.requires_grad_(True)
    model.params.requires_grad_(True)
    # Adam state starts fresh when ShadingNet joins after the warm-up
    warm_opt = ad.Adam([([model.inv_d], config.lr_depth)]) if config.depth_warmup else None
    opt = ad.Adam([([model.inv_d], config.lr_depth), (model.params.parameters(), config.lr_net)])
    use_rough = config.ablation not in ("no_rough", "no_const")
    s = model.prior.s
    s_star = model.prior.s_star
    sw = (config.w_smooth_depth, config.w_smooth_omega, config.w_smooth_normal)

    for it in range(1, config.iterations + 1):
        warm = it <= config.depth_warmup
        step_opt = warm_opt if warm else opt
        idx = torch.as_tensor(next(batches))
        I_p, I_c = prj[idx], cam[idx]
        step_opt.zero_grad()
        attrs = model.attributes()
        if warm:
            _, _, I_diff, _ = shade(attrs, I_p, model.prior)
            recon = I_c.new_zeros(())
        else:
            pred, extras = model.render(I_p, attrs)
            I_diff = extras["I_diff"]
            recon = config.w_recon * loss_recon(pred, I_c)
        terms = {
            "L_recon": recon,
            "L_mask": config.w_mask * loss_mask(attrs.M, s_star),
            "L_rough": config.w_rough * loss_rough(I_diff, I_c) if use_rough else I_c.new_zeros(()),
            "L_smooth": loss_smooth_all(model.inv_d, attrs.omega, attrs.n, s, model.calib.prj_size, sw),
        }
        total = sum(terms.values())
        row = {"iter": it, **{k: float(v.detach()) for k, v in terms.items()}, "total": float(total.detach())}
        if not math.isfinite(row["total"]):
            breakdown = ", ".join(f"{k}={row[k]:.6g}" for k in terms)
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {breakdown}")
        total.backward()
        step_opt.step()
        clamp_inverse_depth(model.inv_d)
        model.log.append(row)
        if log_every and it % log_every == 0:
            print(" ".join(f"{k}={row[k]:.5g}" if k != "iter" else f"it={it}" for k in LOSS_COLUMNS), flush=True)
        if callback is not None:
            callback(it, model, row)

    model.inv_d.requires_grad_(False)
    model.params.requires_grad_(False)
    return model


def loss_log_csv(log: list[dict]) -> str:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOSS_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in log:
        w.writerow({k: (row[k] if k == "iter" else repr(float(row[k]))) for k in LOSS_COLUMNS})
    return buf.getvalue()


def save_model(path, model: Model) -> None:
    """Checkpoint with the surface prior and ablation mode alongside the calibration."""
    meta = json.dumps({"calib": model.calib.to_dict(), "ablation": model.ablation, "t_norm": model.t_norm},
                      sort_keys=True)
    extra = {"s": model.prior.s[0], "s_star": model.prior.s_star[0]}
    save_checkpoint(path, model.params, model.inv_d, meta, extra=extra)


def load_model(path, dtype=torch.float32) -> Model:
    params, inv_d, meta, extra = load_checkpoint(path, with_extra=True)
    try:
        meta = json.loads(meta)
        calib = CalibrationPair.from_dict(meta["calib"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CalibrationError(f"{path}: checkpoint calibration is unreadable ({exc})") from exc
    if "s" not in extra or "s_star" not in extra:
        raise ShapeError(f"{path}: checkpoint lacks the surface prior")
    if tuple(inv_d.shape[-2:]) != tuple(calib.cam_size):
        raise ShapeError(f"{path}: depth {tuple(inv_d.shape[-2:])} does not match camera size {calib.cam_size}")
    prior = SurfacePrior.from_images(extra["s"].double().numpy().transpose(1, 2, 0), extra["s_star"][0].double().numpy(), dtype)
    return Model(inv_d.to(dtype), params.to(dtype), calib, prior, meta.get("ablation", "full"),
                 meta.get("t_norm", 1.0))
