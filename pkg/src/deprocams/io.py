"""File formats: 8-bit PNG, PFM float rasters, ASCII PLY clouds, and the dataset layout.

Every writer goes through a temp file in the destination directory followed by
``os.replace`` so readers never see a half-written file.
"""

from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MissingFileError, ShapeError


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path} does not exist")
    return path


# ---------------------------------------------------------------- PNG

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Write an ``(h, w)`` or ``(h, w, 3)`` float image in [0, 1] as 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    from io import BytesIO

    buf = BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path) -> np.ndarray:
    """Float64 image in [0, 1]; grayscale files come back as ``(h, w)``."""
    with Image.open(_require(path)) as im:
        arr = np.asarray(im)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------- PFM

def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; ``Pf`` for one channel, ``PF`` for three. Rows stored bottom-up."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ShapeError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    body = np.ascontiguousarray(data[::-1]).astype("<f4").tobytes()
    atomic_write_bytes(path, f"{header}\n{w} {h}\n-1.0\n".encode() + body)


def read_pfm(path) -> np.ndarray:
    with open(_require(path), "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ShapeError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 1 if header == b"Pf" else 3
        data = np.frombuffer(f.read(4 * w * h * channels), dtype=dtype)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float32)


# ---------------------------------------------------------------- PLY

def write_ply(path, points: np.ndarray, normals: np.ndarray | None = None) -> None:
    """ASCII PLY with ``x y z nx ny nz`` vertex properties."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if normals is None:
        normals = np.zeros_like(points)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if normals.shape != points.shape:
        raise ShapeError("points and normals must have the same count")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        "end_header",
    ]
    body = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in np.hstack([points, normals]))
    atomic_write_text(path, "\n".join(lines) + "\n" + body + ("\n" if len(points) else ""))


def read_ply(path):
    text = _require(path).read_text().splitlines()
    end = text.index("end_header")
    count = next(int(l.split()[-1]) for l in text[:end] if l.startswith("element vertex"))
    rows = np.array([[float(v) for v in l.split()] for l in text[end + 1 : end + 1 + count]]).reshape(count, -1)
    return rows[:, :3], rows[:, 3:6]


# ---------------------------------------------------------------- dataset layout

@dataclass
class DatasetFiles:
    """Arrays of a dataset directory, all float64 ``(h, w, c)`` in [0, 1]."""

    calib_path: Path
    prj_train: np.ndarray
    cam_train: np.ndarray
    s: np.ndarray
    dark: np.ndarray
    mask: np.ndarray
    prj_test: np.ndarray | None = None
    cam_test: np.ndarray | None = None
    gt: dict = field(default_factory=dict)


def _sorted_pngs(folder: Path) -> list[Path]:
    return sorted(p for p in folder.glob("*.png") if re.fullmatch(r"\d+\.png", p.name))


def _stack(folder: Path) -> np.ndarray | None:
    files = _sorted_pngs(folder)
    if not files:
        return None
    return np.stack([_rgb(read_png(p)) for p in files])


def _rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[..., None], 3, -1) if img.ndim == 2 else img


def write_dataset(root, calib, prj_train, cam_train, s, dark, mask, prj_test=None, cam_test=None, gt=None) -> None:
    root = Path(root)
    calib.save(root / "calib" / "params.json")
    for i, (p, c) in enumerate(zip(prj_train, cam_train)):
        write_png(root / "prj" / "train" / f"{i:04d}.png", p)
        write_png(root / "cam" / "train" / f"{i:04d}.png", c)
    if prj_test is not None:
        for i, (p, c) in enumerate(zip(prj_test, cam_test)):
            write_png(root / "prj" / "test" / f"{i:04d}.png", p)
            write_png(root / "cam" / "test" / f"{i:04d}.png", c)
    write_png(root / "cam" / "ref" / "s.png", s)
    write_png(root / "cam" / "ref" / "dark.png", dark)
    write_png(root / "cam" / "ref" / "mask.png", mask)
    if gt:
        write_pfm(root / "gt" / "depth.pfm", gt["depth"])
        write_pfm(root / "gt" / "normal.pfm", gt["normals"])
        write_png(root / "gt" / "mask.png", gt["mask"])


def read_dataset(root) -> DatasetFiles:
    root = Path(root)
    calib_path = _require(root / "calib" / "params.json")
    prj_train = _stack(_require(root / "prj" / "train"))
    cam_train = _stack(_require(root / "cam" / "train"))
    if prj_train is None or cam_train is None or len(prj_train) != len(cam_train):
        raise ShapeError(f"{root}: train folders must hold the same nonzero number of images")
    ref = root / "cam" / "ref"
    mask = read_png(ref / "mask.png")
    if mask.ndim == 3:
        mask = mask[..., 0]
    files = DatasetFiles(
        calib_path=calib_path,
        prj_train=prj_train,
        cam_train=cam_train,
        s=_rgb(read_png(ref / "s.png")),
        dark=_rgb(read_png(ref / "dark.png")),
        mask=(mask > 0.5).astype(np.float64),
    )
    if (root / "prj" / "test").exists() and (root / "cam" / "test").exists():
        files.prj_test = _stack(root / "prj" / "test")
        files.cam_test = _stack(root / "cam" / "test")
    gt = root / "gt"
    if (gt / "depth.pfm").exists():
        files.gt["depth"] = read_pfm(gt / "depth.pfm").astype(np.float64)
    if (gt / "normal.pfm").exists():
        files.gt["normals"] = read_pfm(gt / "normal.pfm").astype(np.float64)
    if (gt / "mask.png").exists():
        m = read_png(gt / "mask.png")
        files.gt["mask"] = ((m[..., 0] if m.ndim == 3 else m) > 0.5).astype(np.float64)
    return files
