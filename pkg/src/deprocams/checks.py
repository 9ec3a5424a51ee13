"""Finite-difference gradient suite over the differentiable primitives and the full chain.

Everything runs in float64 on small seeded inputs. Points are drawn away from
the kinks of clamp/min/max/relu/smoothstep so central differences are valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import autodiff as ad

PRIMITIVE_TOL = 1e-5
CHAIN_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _away_from(x: torch.Tensor, points, margin: float) -> torch.Tensor:
    for p in points:
        close = (x - p).abs() < margin
        x = torch.where(close, x + 2 * margin * torch.sign(x - p + 1e-300), x)
    return x


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    g = torch.Generator().manual_seed(seed)

    def rnd(*shape, lo=-1.0, hi=1.0):
        return lo + (hi - lo) * torch.rand(tuple(shape), generator=g, dtype=torch.float64)

    out = []

    def check(name, fn, x, h=1e-6):
        w = rnd(*fn(x).shape)
        out.append(CheckResult(name, ad.gradcheck(lambda z: (fn(z) * w).sum(), x, h), PRIMITIVE_TOL))

    a = rnd(4, 5)
    b = rnd(4, 5, lo=0.5, hi=1.5)
    for op in ("add", "sub", "mul", "div"):
        check(f"elementwise.{op}", lambda z, op=op: ad.elementwise(op, z, b), a)
        check(f"elementwise.{op}(rhs)", lambda z, op=op: ad.elementwise(op, a, z), b)
    safe = _away_from(rnd(4, 5), [0.0], 1e-2)
    check("elementwise.neg", lambda z: ad.elementwise("neg", z), safe)
    check("elementwise.abs", lambda z: ad.elementwise("abs", z), safe)
    check("elementwise.exp", lambda z: ad.elementwise("exp", z), safe)
    check("elementwise.relu", lambda z: ad.elementwise("relu", z), safe)
    c = _away_from(rnd(4, 5), [-0.5, 0.5], 1e-2)
    check("clamp", lambda z: ad.clamp(z, -0.5, 0.5), c)
    other = rnd(4, 5)
    gap = _away_from(rnd(4, 5) - other, [0.0], 1e-2) + other
    check("minimum", lambda z: ad.minimum(z, other), gap)
    check("maximum", lambda z: ad.maximum(z, other), gap)
    u = _away_from(rnd(4, 5, lo=-0.02, hi=0.03), [0.0, 1.0 / ad.SMOOTHSTEP_SIGMA], 1e-3)
    check("smoothstep", ad.smoothstep, u)

    x = rnd(2, 3, 8, 8)
    wt = rnd(4, 3, 3, 3)
    bias = rnd(4)
    check("conv2d.input", lambda z: ad.conv2d(z, wt, bias, 2, 1), x)
    check("conv2d.weight", lambda z: ad.conv2d(x, z, bias, 2, 1), wt)
    check("conv2d.bias", lambda z: ad.conv2d(x, wt, z, 2, 1), bias)
    tw = rnd(3, 4, 2, 2)
    tb = rnd(4)
    check("tconv2d.input", lambda z: ad.tconv2d(z, tw, tb, 2, 0), x)
    check("tconv2d.weight", lambda z: ad.tconv2d(x, z, tb, 2, 0), tw)
    check("tconv2d.bias", lambda z: ad.tconv2d(x, tw, z, 2, 0), tb)

    img = rnd(1, 2, 6, 7)
    # keep sample points off the integer lattice where bilinear weights kink
    grid = torch.stack([rnd(1, 5, 5, lo=-0.8, hi=6.8), rnd(1, 5, 5, lo=-0.8, hi=5.8)], -1)
    grid = grid.floor() + _away_from(grid - grid.floor(), [0.0, 1.0], 0.05)
    check("grid_sample.image", lambda z: ad.grid_sample(z, grid), img)
    check("grid_sample.grid", lambda z: ad.grid_sample(img, z), grid)

    rows = rnd(1, 3, 4, 9)
    w = rnd(1, 3, 4, 9)
    check("row_sort_lex", lambda z: ad.row_sort_lex(z)[0] * w, rows)
    perm = ad.row_sort_lex(rows)[1]
    check("scatter_rows", lambda z: ad.scatter_rows(z, perm), rows)
    check("spatial_gradient", lambda z: torch.cat(ad.spatial_gradient(z), 1), rnd(1, 2, 5, 6))

    p = rnd(1, 3, 14, 14, lo=0.0, hi=1.0)
    q = rnd(1, 3, 14, 14, lo=0.0, hi=1.0)
    check("ssim", lambda z: ad.ssim(z, q), p)
    check("reduce.l1", lambda z: ad.reduce("l1", z, q), _away_from(p - q, [0.0], 1e-2) + q)
    check("reduce.l2sq", lambda z: ad.reduce("l2sq", z, q), p)
    return out


def chain_check(seed: int = 0, size: int = 8) -> CheckResult:
    """Inverse depth -> attributes -> direct-light mask -> rough shadings, on a ``size`` x ``size`` field."""
    from .attributes import Rig, SurfacePrior, depth_to_attribute, shade
    from .simulator import default_calibration

    calib = default_calibration(cam_size=(size, size))
    rig = Rig(calib, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    inv = 1.0 / (3.0 + 0.2 * np.sin(3 * xx + 1) * np.cos(2 * yy) + 0.02 * rng.standard_normal((size, size)))
    inv_d = torch.as_tensor(inv[None, None])
    hp, wp = calib.prj_size
    I_p = torch.as_tensor(rng.uniform(0.1, 1.0, (1, 3, hp, wp)))
    s = rng.uniform(0.2, 0.9, (size, size, 3))
    prior = SurfacePrior.from_images(s, np.ones((size, size)), dtype=torch.float64)
    weights = [torch.as_tensor(rng.standard_normal((1, c, size, size))) for c in (3, 3, 3, 1, 1)]

    def fn(z):
        attrs = depth_to_attribute(z, rig)
        I_wp, _, I_diff, I_spec = shade(attrs, I_p, prior)
        outs = (I_wp, I_diff, I_spec, attrs.M, attrs.M_occ)
        return sum((o * w).sum() for o, w in zip(outs, weights))

    return CheckResult("chain.depth_to_shading", ad.gradcheck(fn, inv_d, 1e-7), CHAIN_TOL)


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    return primitive_checks(seed) + [chain_check(seed)]
