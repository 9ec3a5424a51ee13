"""Command-line entry point.

Failures print one line ``error: <category>: <message>`` to stderr and exit
with the category's code (see :mod:`deprocams.errors`).
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, DeProCamsError, MissingFileError, ShapeError

GRADCHECK_EXIT = 12


class GradcheckFailed(DeProCamsError):
    category = "gradcheck"
    exit_code = GRADCHECK_EXIT


CONFIG_SECTIONS = {"train", "compensation", "simulate"}
SIMULATE_KEYS = {"scene", "n", "n_test", "gamma", "noise", "resolution"}


def _threads():
    raw = os.environ.get("DEPROCAMS_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"DEPROCAMS_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError("DEPROCAMS_THREADS must be at least 1")
        import torch

        torch.set_num_threads(n)


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"config {p} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"{p}: unknown section(s) {sorted(unknown)}")
    for k, v in cfg.items():
        if not isinstance(v, dict):
            raise ConfigError(f"{p}: section {k!r} must be an object")
    bad = set(cfg.get("simulate", {})) - SIMULATE_KEYS
    if bad:
        raise ConfigError(f"{p}: unknown simulate option(s) {sorted(bad)}")
    return cfg


def parse_resolution(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"resolution must look like 120x160, got {text!r}") from None
    if h < 16 or w < 16 or h % 4 or w % 4:
        raise ConfigError(f"resolution {h}x{w}: both sides must be multiples of 4 and at least 16")
    return h, w


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"{p} does not exist")
    return p


def _require_out_dir(path) -> Path:
    p = Path(path)
    parent = p.parent if p.parent != Path("") else Path(".")
    if not parent.exists():
        raise MissingFileError(f"output directory {parent} does not exist")
    return p


def _rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[..., None], 3, -1) if img.ndim == 2 else img


# ---------------------------------------------------------------- commands

def cmd_simulate(args, cfg) -> None:
    from . import simulator as sim

    opts = dict(cfg.get("simulate", {}))
    scene = args.scene or opts.get("scene", "plane")
    n = args.n if args.n is not None else opts.get("n", 64)
    n_test = args.n_test if args.n_test is not None else opts.get("n_test", 8)
    resolution = args.resolution or opts.get("resolution")
    cam_size = parse_resolution(resolution) if resolution else sim.CAM_SIZE
    overrides = {}
    for key, attr in (("gamma", "gamma"), ("noise", "noise_std")):
        val = getattr(args, key) if getattr(args, key) is not None else opts.get(key)
        if val is not None:
            overrides[attr] = float(val)
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"N must be a positive integer, got {n!r}")
    calib = sim.default_calibration(cam_size=cam_size)
    data, gt = sim.generate_dataset(sim.make_scene(scene, **overrides), calib, n, seed=args.seed, n_test=n_test)
    out = Path(args.out)
    io.write_dataset(
        out, calib, data.prj, data.cam, data.s, data.dark, data.s_star,
        prj_test=data.prj_test, cam_test=data.cam_test,
        gt={"depth": gt.depth, "normals": gt.normals, "mask": gt.mask},
    )
    print(f"wrote {n} training and {n_test} test pairs of scene {scene!r} to {out}")


def dataset_from_dir(root):
    from .dataset import Dataset
    from .geometry import CalibrationPair

    files = io.read_dataset(root)
    calib = CalibrationPair.load(files.calib_path)
    data = Dataset(
        prj=files.prj_train, cam=files.cam_train, s=files.s, s_star=files.mask, calib=calib, dark=files.dark,
        prj_test=files.prj_test, cam_test=files.cam_test,
    )
    return data, files.gt


def cmd_train(args, cfg) -> None:
    from . import training

    opts = dict(cfg.get("train", {}))
    if args.seed is not None:
        opts["seed"] = args.seed
    if args.iterations is not None:
        opts["iterations"] = args.iterations
    if args.ablation is not None:
        opts["ablation"] = args.ablation
    config = training.TrainConfig.from_dict(opts)
    out = _require_out_dir(args.out)
    data, _ = dataset_from_dir(args.data)
    model = training.train(data, config, log_every=args.log_every)
    training.save_model(out, model)
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    io.atomic_write_text(log_path, training.loss_log_csv(model.log))
    print(f"saved model to {out} (loss log {log_path})")


def _load_model(path):
    from .training import load_model

    return load_model(_require_file(path))


def cmd_relight(args, cfg) -> None:
    from .tasks import relight

    model = _load_model(args.model)
    pattern = _rgb(io.read_png(_require_file(args.pattern)))
    out = _require_out_dir(args.out)
    io.write_png(out, relight(model, pattern))
    print(f"wrote {out}")


def cmd_compensate(args, cfg) -> None:
    from .tasks import CompensationConfig, compensate, desired_camera_image

    opts = dict(cfg.get("compensation", {}))
    if args.iterations is not None:
        opts["iterations"] = args.iterations
    try:
        ccfg = CompensationConfig(**opts)
    except TypeError as exc:
        raise ConfigError(f"bad compensation options: {exc}") from None
    model = _load_model(args.model)
    target = _rgb(io.read_png(_require_file(args.target)))
    out = _require_out_dir(args.out)
    desired = desired_camera_image(target, model)
    result = compensate(model, desired, ccfg)
    io.write_png(out, result.image)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "loss"])
    for row in result.log:
        w.writerow([row["iter"], repr(row["loss"])])
    io.atomic_write_text(out.with_suffix(".loss.csv"), buf.getvalue())
    print(f"wrote {out} (loss {result.initial_loss:.4f} -> {result.final_loss:.4f})")


def cmd_reconstruct(args, cfg) -> None:
    from .tasks import dump_attributes, write_reconstruction

    model = _load_model(args.model)
    prefix = _require_out_dir(args.out)
    t_norm = args.t_norm if args.t_norm is not None else model.t_norm
    paths = write_reconstruction(model, str(prefix), t_norm)
    if args.dump_attributes:
        paths.update({f"attr_{k}": v for k, v in dump_attributes(model, str(prefix)).items()})
    print("wrote " + ", ".join(paths.values()))


def cmd_evaluate(args, cfg) -> None:
    from .tasks import evaluate

    model = _load_model(args.model)
    out = _require_out_dir(args.out)
    data, gt = dataset_from_dir(args.data)
    if tuple(data.calib.cam_size) != tuple(model.calib.cam_size):
        raise ShapeError("dataset and model camera sizes differ")
    notices: list[str] = []
    metrics = evaluate(model, data.prj_test, data.cam_test, gt, t_norm=model.t_norm, notices=notices)
    for note in notices:
        print(f"notice: {note}", file=sys.stderr)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in metrics.items():
        w.writerow([k, repr(float(v))])
    io.atomic_write_text(out, buf.getvalue())
    print(" ".join(f"{k}={v:.6g}" for k, v in metrics.items()))


def cmd_gradcheck(args, cfg) -> None:
    from .checks import gradient_suite

    results = gradient_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} rel_err={r.error:.3e} tol={r.tol:.0e}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise GradcheckFailed(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deprocams", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config with train/compensation/simulate sections")
        sp.set_defaults(func=fn)
        return sp

    sp = add("simulate", cmd_simulate, "render a synthetic dataset")
    sp.add_argument("--scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resolution", help="camera size HxW; the projector is 1.25x larger")
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--noise", type=float)

    sp = add("train", cmd_train, "learn depth and ShadingNet from a dataset directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--ablation", choices=["full", "no_mask", "no_rough", "no_const"])
    sp.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")
    sp.add_argument("--log-every", type=int, default=0)

    sp = add("relight", cmd_relight, "predict the capture of a projector image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--pattern", required=True)
    sp.add_argument("--out", required=True)

    sp = add("compensate", cmd_compensate, "solve for a compensating projector image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)

    sp = add("reconstruct", cmd_reconstruct, "export depth (PFM), normals (PFM) and a point cloud (PLY)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True, help="output prefix")
    sp.add_argument("--t-norm", type=float, help="baseline length in metric units (default: from the model)")
    sp.add_argument("--dump-attributes", action="store_true",
                    help="also write n, M, omega and d_p as PFM rasters and color-mapped PNGs")

    sp = add("evaluate", cmd_evaluate, "image and depth metrics on a dataset's test split")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference checks of every differentiable primitive")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _threads()
        cfg = load_config(args.config)
        args.func(args, cfg)
    except DeProCamsError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {MissingFileError.category}: {exc}", file=sys.stderr)
        return MissingFileError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
