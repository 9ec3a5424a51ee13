"""ShadingNet: refines rough shadings into the predicted camera image.

Layer table (kernel, stride, padding; channels in -> out):

    Conv1r  3x3 s2 p1   9 -> 32      Conv1  3x3 s2 p1   3 -> 32
    Conv2r  3x3 s2 p1  32 -> 64      Conv2  3x3 s2 p1  32 -> 64
    Conv3r  3x3 s1 p1  64 -> 128     Conv3  3x3 s1 p1  64 -> 128
    Conv4r  3x3 s1 p1 128 -> 256     Conv4  3x3 s1 p1 128 -> 256
    Conv5   3x3 s1 p1 256 -> 128     TConv1 2x2 s2 p0 128 -> 64
    TConv2  2x2 s2 p0  64 -> 32      Conv6  3x3 s1 p1  32 -> 3
    Sk1     3 x (3x3 s1 p1), 3 -> 32 -> 32 -> 32
    Sk2     1x1 32 -> 32             Sk3    1x1 64 -> 64
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from io import BytesIO

import numpy as np
import torch

from . import autodiff as ad
from .errors import CheckpointVersionError, ShapeError

# name: (kind, c_in, c_out, kernel, stride, padding)
LAYERS = OrderedDict(
    conv1r=("conv", 9, 32, 3, 2, 1),
    conv2r=("conv", 32, 64, 3, 2, 1),
    conv3r=("conv", 64, 128, 3, 1, 1),
    conv4r=("conv", 128, 256, 3, 1, 1),
    conv1=("conv", 3, 32, 3, 2, 1),
    conv2=("conv", 32, 64, 3, 2, 1),
    conv3=("conv", 64, 128, 3, 1, 1),
    conv4=("conv", 128, 256, 3, 1, 1),
    conv5=("conv", 256, 128, 3, 1, 1),
    tconv1=("tconv", 128, 64, 2, 2, 0),
    tconv2=("tconv", 64, 32, 2, 2, 0),
    conv6=("conv", 32, 3, 3, 1, 1),
    sk1a=("conv", 3, 32, 3, 1, 1),
    sk1b=("conv", 32, 32, 3, 1, 1),
    sk1c=("conv", 32, 32, 3, 1, 1),
    sk2=("conv", 32, 32, 1, 1, 0),
    sk3=("conv", 64, 64, 1, 1, 0),
)

BACKBONE = ("conv1", "conv2", "conv3", "conv4", "conv5", "tconv1", "tconv2", "conv6")
ROUGH_BRANCH = ("conv1r", "conv2r", "conv3r", "conv4r")
SKIPS = ("sk1a", "sk1b", "sk1c", "sk2", "sk3")


def weight_shape(name: str) -> tuple:
    kind, cin, cout, k, _, _ = LAYERS[name]
    return (cin, cout, k, k) if kind == "tconv" else (cout, cin, k, k)


def fan_in(name: str) -> int:
    kind, cin, cout, k, s, _ = LAYERS[name]
    if kind == "tconv":
        # each output pixel of a stride-k, kernel-k tconv sees one tap per input channel
        return cin * (k // s) ** 2
    return cin * k * k


class ShadingNetParams:
    """Filter banks and biases, stored as an ordered dict of tensors."""

    def __init__(self, tensors: "OrderedDict[str, torch.Tensor]"):
        self.tensors = tensors

    @classmethod
    def zeros(cls, dtype=torch.float32) -> "ShadingNetParams":
        t = OrderedDict()
        for name, spec in LAYERS.items():
            t[f"{name}.weight"] = torch.zeros(weight_shape(name), dtype=dtype)
            t[f"{name}.bias"] = torch.zeros(spec[2], dtype=dtype)
        return cls(t)

    def __getitem__(self, key):
        return self.tensors[key]

    def parameters(self):
        return list(self.tensors.values())

    def requires_grad_(self, flag: bool = True) -> "ShadingNetParams":
        for p in self.tensors.values():
            p.requires_grad_(flag)
        return self

    def to(self, dtype) -> "ShadingNetParams":
        return ShadingNetParams(OrderedDict((k, v.detach().to(dtype)) for k, v in self.tensors.items()))

    def clone(self) -> "ShadingNetParams":
        return ShadingNetParams(OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def check_shapes(self) -> None:
        missing = [k for n in LAYERS for k in (f"{n}.weight", f"{n}.bias") if k not in self.tensors]
        if missing:
            raise ShapeError(f"missing parameter tensors: {missing[:4]}")
        for name, spec in LAYERS.items():
            w, b = self.tensors[f"{name}.weight"], self.tensors[f"{name}.bias"]
            if tuple(w.shape) != weight_shape(name) or tuple(b.shape) != (spec[2],):
                raise ShapeError(f"layer {name}: weight {tuple(w.shape)}, bias {tuple(b.shape)} do not match the layer table")


def he_init(seed: int, dtype=torch.float32) -> ShadingNetParams:
    """He-normal filters (std sqrt(2 / fan_in)) and zero biases, deterministic per seed."""
    gen = torch.Generator().manual_seed(int(seed) & 0xFFFFFFFFFFFFFFFF)
    params = ShadingNetParams.zeros(torch.float64)
    for name in LAYERS:
        w = params.tensors[f"{name}.weight"]
        w.normal_(0.0, math.sqrt(2.0 / fan_in(name)), generator=gen)
    return params.to(dtype)


def _layer(params: ShadingNetParams, name: str, x: torch.Tensor) -> torch.Tensor:
    kind, _, _, _, stride, pad = LAYERS[name]
    w, b = params[f"{name}.weight"], params[f"{name}.bias"]
    if kind == "tconv":
        return ad.tconv2d(x, w, b, stride=stride, padding=pad)
    return ad.conv2d(x, w, b, stride=stride, padding=pad)


def _add(a: torch.Tensor, b: torch.Tensor, junction: str) -> torch.Tensor:
    if a.shape[-2:] != b.shape[-2:] or a.shape[1] != b.shape[1]:
        raise ShapeError(f"skip junction {junction}: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def shading_forward(I_wp, I_abnt, I_diff, I_spec, params: ShadingNetParams, surface_features=None,
                    clamp_output: bool = True) -> torch.Tensor:
    """Predicted camera image ``[N, 3, H, W]`` from the warped projector image and rough shadings.

    ``surface_features`` may carry a precomputed Sk1 output (it only depends on
    the ambient image), which saves work when the batch shares one surface.
    """
    h, w = I_wp.shape[-2:]
    if h % 4 or w % 4:
        raise ShapeError(f"ShadingNet needs h and w divisible by 4, got {h}x{w}")
    relu = torch.relu

    rough = torch.cat([I_abnt, I_diff, I_spec], 1)
    r1 = relu(_layer(params, "conv1r", rough))
    r2 = relu(_layer(params, "conv2r", r1))
    r3 = relu(_layer(params, "conv3r", r2))
    r4 = relu(_layer(params, "conv4r", r3))

    x1 = _add(relu(_layer(params, "conv1", I_wp)), r1, "conv1+conv1r")
    x2 = _add(relu(_layer(params, "conv2", x1)), r2, "conv2+conv2r")
    x3 = _add(relu(_layer(params, "conv3", x2)), r3, "conv3+conv3r")
    x4 = _add(relu(_layer(params, "conv4", x3)), r4, "conv4+conv4r")

    y = relu(_layer(params, "conv5", x4))
    y = _add(y, torch.cat([x2, relu(_layer(params, "sk3", r2))], 1), "conv5+[conv2, sk3]")
    y = relu(_layer(params, "tconv1", y))
    y = _add(y, torch.cat([x1, relu(_layer(params, "sk2", r1))], 1), "tconv1+[conv1, sk2]")
    y = relu(_layer(params, "tconv2", y))
    if surface_features is None:
        surface_features = surface_skip(I_abnt, params)
    y = _add(y, surface_features.expand(y.shape[0], -1, -1, -1), "tconv2+sk1")
    out = _layer(params, "conv6", y)
    return ad.clamp(out, 0.0, 1.0) if clamp_output else out


def surface_skip(s: torch.Tensor, params: ShadingNetParams) -> torch.Tensor:
    z = torch.relu(_layer(params, "sk1a", s))
    z = torch.relu(_layer(params, "sk1b", z))
    return torch.relu(_layer(params, "sk1c", z))


def feature_shapes(h: int, w: int) -> list[tuple[int, int, int]]:
    """(h, w, c) after Conv1, Conv2, Conv3, Conv4, Conv5, TConv1, TConv2, Conv6."""
    shapes = []
    x = torch.zeros(1, 3, h, w)
    params = ShadingNetParams.zeros()
    for name in BACKBONE:
        x = _layer(params, name, x)
        shapes.append((x.shape[2], x.shape[3], x.shape[1]))
    return shapes


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DPROCAMS"
VERSION = 1


EXTRA_PREFIX = "extra:"


def save_checkpoint(path_or_buffer, params: ShadingNetParams, inv_d: torch.Tensor, calib_json: str = "",
                    extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, layer manifest, float32 LE data, depth, calibration.

    ``extra`` tensors ride along in the manifest under an ``extra:`` prefix.
    """
    buf = BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    entries = list(params.tensors.items())
    entries += [(EXTRA_PREFIX + k, v) for k, v in (extra or {}).items()]
    buf.write(struct.pack("<I", len(entries)))
    for name, t in entries:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
    for _, t in entries:
        buf.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    d = inv_d.detach().cpu().numpy().astype("<f4").reshape(inv_d.shape[-2:])
    buf.write(struct.pack("<II", *d.shape))
    buf.write(d.tobytes())
    cj = calib_json.encode()
    buf.write(struct.pack("<I", len(cj)) + cj)
    data = buf.getvalue()
    if hasattr(path_or_buffer, "write"):
        path_or_buffer.write(data)
    else:
        from .io import atomic_write_bytes

        atomic_write_bytes(path_or_buffer, data)


def load_checkpoint(path_or_buffer, with_extra: bool = False):
    """Inverse of :func:`save_checkpoint`: ``(params, inv_d [1,1,H,W], calib_json[, extra])``."""
    if hasattr(path_or_buffer, "read"):
        data = path_or_buffer.read()
    else:
        with open(path_or_buffer, "rb") as f:
            data = f.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointVersionError("checkpoint is truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointVersionError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    (count,) = struct.unpack("<I", take(4))
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        manifest.append((name, shape))
    tensors = OrderedDict()
    for name, shape in manifest:
        n = int(np.prod(shape))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    h, w = struct.unpack("<II", take(8))
    inv_d = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(1, 1, h, w)
    (clen,) = struct.unpack("<I", take(4))
    calib_json = bytes(take(clen)).decode()
    if pos != len(view):
        raise CheckpointVersionError("checkpoint has trailing bytes")
    extra = OrderedDict((k[len(EXTRA_PREFIX):], tensors.pop(k)) for k in list(tensors) if k.startswith(EXTRA_PREFIX))
    params = ShadingNetParams(tensors)
    params.check_shapes()
    inv_d = torch.from_numpy(inv_d.astype(np.float32))
    if with_extra:
        return params, inv_d, calib_json, extra
    return params, inv_d, calib_json
