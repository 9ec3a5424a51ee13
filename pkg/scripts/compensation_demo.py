"""Closed-loop compensation on a textured plane: train, compensate, recapture and compare."""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from deprocams import io
from deprocams import simulator as sim
from deprocams import tasks
from deprocams import training as T

from depth_recovery import RECIPE


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", help="trained checkpoint for the plane scene (trains one if omitted)")
    ap.add_argument("--out", default="compensation_demo")
    ap.add_argument("--iterations", type=int, default=RECIPE.iterations)
    args = ap.parse_args()
    calib = sim.default_calibration()
    data, gt = sim.generate_dataset(sim.make_scene("plane"), calib, 64, seed=0, n_test=8)
    model = T.load_model(args.model) if args.model else T.train(data, dataclasses.replace(
        RECIPE, iterations=args.iterations, depth_warmup=min(RECIPE.depth_warmup, args.iterations)))
    target = data.prj_test[0]
    desired = tasks.desired_camera_image(target, model)
    result = tasks.compensate(model, desired)
    render = gt.extra["render"]
    rng = np.random.default_rng(0)
    before = render.capture(target, rng)
    after = render.capture(result.image, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in (("target", target), ("desired", desired.image), ("compensated_input", result.image),
                      ("uncompensated_capture", before), ("compensated_capture", after)):
        io.write_png(out / f"{name}.png", np.clip(img, 0, 1))
    p0 = tasks.psnr(before, desired.image, desired.region)
    p1 = tasks.psnr(after, desired.image, desired.region)
    print(f"PSNR to desired image: uncompensated {p0:.2f} dB, compensated {p1:.2f} dB")


if __name__ == "__main__":
    main()
