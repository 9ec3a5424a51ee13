"""Differentiable primitives used by the whole pipeline.

Tensors follow the torch layout ``[N, C, H, W]`` (a logical ``h x w x c``
raster plus a leading batch axis). Reverse-mode differentiation is delegated to
``torch.autograd``; this module pins down the exact forward semantics, the
kink conventions and the shape checks the rest of the package relies on, and
adds the few operators torch does not ship (lexicographic row sort, pixel-unit
bilinear sampling, replicated forward differences, windowed SSIM, Adam).

Use float64 when checking gradients against finite differences and float32
for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError

SMOOTHSTEP_SIGMA = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def _broadcast_ok(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.dim() == 0 or b.dim() == 0 or a.numel() == 1 or b.numel() == 1:
        return
    if a.shape != b.shape:
        raise ShapeError(f"elementwise operands must match or be scalar: {tuple(a.shape)} vs {tuple(b.shape)}")


def clamp(x: torch.Tensor, lo: float | None = None, hi: float | None = None) -> torch.Tensor:
    """Clamp with zero gradient at and beyond the bounds."""
    inside = torch.ones_like(x, dtype=torch.bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    return torch.where(inside, x, x.detach().clamp(lo, hi))


def minimum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # ties send the whole gradient to ``a``
    return torch.where(a <= b, a, b)


def maximum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.where(a >= b, a, b)


_BINARY = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "min": minimum,
    "max": maximum,
}
_UNARY = {
    "neg": torch.neg,
    "abs": torch.abs,
    "exp": torch.exp,
    "relu": torch.relu,
}


def elementwise(op: str, a, b=None, *, lo=None, hi=None) -> torch.Tensor:
    """Apply one elementwise primitive with shape and finiteness checks.

    ``b`` is the second operand of binary ops; ``clamp`` takes ``lo``/``hi``.
    Only scalar-with-array and equal-shape broadcasting are accepted.
    """
    a = torch.as_tensor(a)
    if op in _UNARY:
        out = _UNARY[op](a)
    elif op == "clamp":
        out = clamp(a, lo, hi)
    elif op in _BINARY or op == "div":
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        b = torch.as_tensor(b, dtype=a.dtype)
        _broadcast_ok(a, b)
        if op == "div":
            if (b.abs() < 1e-300).any():
                raise NumericError("division by a value with |b| < 1e-300")
            out = a / b
        else:
            out = _BINARY[op](a, b)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return check_finite(out, f"elementwise {op}")


def smoothstep(u: torch.Tensor, sigma: float = SMOOTHSTEP_SIGMA) -> torch.Tensor:
    """Differentiable unit step ``min(sigma * relu(u), 1)``."""
    return minimum(sigma * torch.relu(u), torch.ones_like(u))


def _conv_out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation with the usual floored output size.

    Strided layers must tile the input exactly (``size % stride == 0``) so that
    a matching transposed convolution restores the size; otherwise ShapeError.
    """
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError("conv2d expects [N, C, H, W] input and [O, I, kH, kW] filters")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, filters {weight.shape[1]}")
    for dim, k in ((2, weight.shape[2]), (3, weight.shape[3])):
        n = x.shape[dim]
        out = _conv_out(n, k, stride, padding)
        if n % stride or out < 1:
            raise ShapeError(
                f"conv2d output size along dim {dim}: computed {out} (input {n}, kernel {k}, stride {stride}, "
                f"padding {padding}), expected {n / stride:g}; input must be a positive multiple of the stride"
            )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def tconv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Transposed convolution (the input-gradient of :func:`conv2d`) used as a forward op.

    ``weight`` has torch's transposed layout ``[I, O, kH, kW]``.
    """
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError("tconv2d expects [N, C, H, W] input and [I, O, kH, kW] filters")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"tconv2d channel mismatch: input {x.shape[1]}, filters {weight.shape[0]}")
    for dim, k in ((2, weight.shape[2]), (3, weight.shape[3])):
        if (x.shape[dim] - 1) * stride - 2 * padding + k < 1:
            raise ShapeError(f"tconv2d output along dim {dim} would be empty")
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def grid_sample(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling at pixel coordinates with a zero border.

    ``image`` is ``[N, C, H, W]``; ``grid`` is ``[N, H', W', 2]`` holding (x, y)
    pixel-center coordinates into ``image``. Gradients reach both arguments.
    """
    if image.dim() != 4 or grid.dim() != 4 or grid.shape[-1] != 2:
        raise ShapeError("grid_sample expects image [N, C, H, W] and grid [N, H', W', 2]")
    if grid.shape[0] != image.shape[0]:
        if grid.shape[0] == 1:
            grid = grid.expand(image.shape[0], -1, -1, -1)
        elif image.shape[0] == 1:
            image = image.expand(grid.shape[0], -1, -1, -1)
        else:
            raise ShapeError(f"batch mismatch: image {image.shape[0]}, grid {grid.shape[0]}")
    h, w = image.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError("grid_sample needs an image at least 2x2")
    scale = grid.new_tensor([2.0 / (w - 1), 2.0 / (h - 1)])
    return F.grid_sample(image, grid * scale - 1.0, mode="bilinear", padding_mode="zeros", align_corners=True)


def row_sort_lex(x: torch.Tensor):
    """Sort each row's channel vectors lexicographically by channel 0, then channel 1.

    ``x`` is ``[N, C, H, W]`` with ``C >= 2``. Returns ``(sorted, perm)`` where
    ``perm`` is ``[N, H, W]`` and ``sorted[..., j] == x[..., perm[..., j]]``.
    Ties keep their original column order, so the permutation is well defined;
    gradients are scattered back through it.
    """
    if x.dim() != 4 or x.shape[1] < 2:
        raise ShapeError("row_sort_lex expects [N, C>=2, H, W]")
    key0 = x[:, 0].detach()
    key1 = x[:, 1].detach()
    first = torch.sort(key1, dim=-1, stable=True).indices
    second = torch.sort(torch.gather(key0, -1, first), dim=-1, stable=True).indices
    perm = torch.gather(first, -1, second)
    return gather_rows(x, perm), perm


def gather_rows(x: torch.Tensor, perm: torch.Tensor) -> torch.Tensor:
    idx = perm[:, None].expand(-1, x.shape[1], -1, -1)
    return torch.gather(x, -1, idx)


def scatter_rows(x: torch.Tensor, perm: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`gather_rows`: put sorted entries back at their source columns."""
    inv = torch.argsort(perm, dim=-1)
    return gather_rows(x, inv)


def spatial_gradient(img: torch.Tensor):
    """Forward differences along x and y; the last column/row repeats the previous difference."""
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"spatial_gradient needs h, w >= 2, got {h}x{w}")
    dx = img[..., :, 1:] - img[..., :, :-1]
    dy = img[..., 1:, :] - img[..., :-1, :]
    dx = torch.cat([dx, dx[..., :, -1:]], dim=-1)
    dy = torch.cat([dy, dy[..., -1:, :]], dim=-2)
    return dx, dy


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-window SSIM, ``[N, C, H-10, W-10]`` (valid windows only)."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim operands differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a[None], b[None]
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    win = gaussian_window(dtype=a.dtype).to(a.device).expand(c, 1, -1, -1)

    def filt(z):
        return F.conv2d(z, win, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    aa, bb, ab = filt(a * a), filt(b * b), filt(a * b)
    var_a = aa - mu_a**2
    var_b = bb - mu_b**2
    cov = ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over windows and channels."""
    return ssim_map(a, b).mean()


def reduce(op: str, a: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Scalar reductions: ``sum``, ``mean``, ``l1`` (mean |a-b|) and ``l2sq`` (sum (a-b)^2)."""
    if op in ("l1", "l2sq"):
        diff = a if b is None else a - b
        return diff.abs().mean() if op == "l1" else (diff * diff).sum()
    if op == "sum":
        return a.sum()
    if op == "mean":
        return a.mean()
    raise ValueError(f"unknown reduction {op!r}")


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """One in-place Adam update with bias correction.

    ``params`` and ``grads`` are matching sequences of tensors; a ``None``
    gradient counts as zero.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeError("Adam state does not match the parameter shapes")
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class Adam:
    """Adam over parameter groups, each with its own learning rate."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        self.groups = []
        for params, lr in groups:
            if not lr > 0:
                raise ConfigError(f"learning rate must be positive, got {lr}")
            self.groups.append((list(params), float(lr), AdamState()))
        self.betas = betas
        self.eps = eps

    def zero_grad(self):
        for params, _, _ in self.groups:
            for p in params:
                p.grad = None

    def step(self):
        for params, lr, state in self.groups:
            adam_step(params, [p.grad for p in params], state, lr, *self.betas, self.eps)


def central_difference(fn, x: torch.Tensor, h: float = 1e-5, index=None) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` w.r.t. ``x`` by central differences.

    ``index`` optionally restricts the probes to a list of flat indices (the
    rest of the returned gradient is NaN). ``x`` is probed on a detached copy.
    """
    base = x.detach().clone()
    flat = base.view(-1)
    out = torch.full_like(flat, float("nan"))
    probes = range(flat.numel()) if index is None else index
    with torch.no_grad():
        for i in probes:
            old = flat[i].item()
            flat[i] = old + h
            fp = float(fn(base))
            flat[i] = old - h
            fm = float(fn(base))
            flat[i] = old
            out[i] = (fp - fm) / (2 * h)
    return out.view_as(x)


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    xx = x.detach().clone().requires_grad_(True)
    y = fn(xx)
    (g,) = torch.autograd.grad(y, xx, allow_unused=True)
    return torch.zeros_like(xx) if g is None else g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """``|a - b| / max(|a|, |b|)`` over the finite entries (0 when both vanish)."""
    mask = torch.isfinite(a) & torch.isfinite(b)
    a, b = a[mask], b[mask]
    scale = max(a.norm().item(), b.norm().item())
    if scale == 0:
        return 0.0
    return (a - b).norm().item() / scale


def gradcheck(fn, x: torch.Tensor, h: float = 1e-5, index=None) -> float:
    """Relative error between the autograd gradient and central differences."""
    g = analytic_gradient(fn, x)
    n = central_difference(fn, x, h, index)
    if index is not None:
        keep = torch.zeros(g.numel(), dtype=torch.bool)
        keep[list(index)] = True
        g = torch.where(keep.view_as(g), g, torch.full_like(g, math.nan))
    return relative_error(g, n)
