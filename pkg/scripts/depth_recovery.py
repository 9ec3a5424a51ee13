"""Train on simulator data for one or more scenes and report depth error and relighting PSNR."""

import argparse
import dataclasses
import time

import numpy as np

from deprocams import simulator as sim
from deprocams import tasks
from deprocams import training as T

RECIPE = T.TrainConfig(iterations=1000, depth_warmup=200, batch_size=2, w_mask=2.5e-4, w_rough=2.5e-4,
                       w_smooth_depth=5.0, w_smooth_omega=10.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenes", nargs="*", default=list(sim.SCENES))
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--iterations", type=int, default=RECIPE.iterations)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save", help="directory for checkpoints")
    args = ap.parse_args()
    cfg = dataclasses.replace(RECIPE, iterations=args.iterations,
                              depth_warmup=min(RECIPE.depth_warmup, args.iterations), seed=args.seed)
    calib = sim.default_calibration()
    for name in args.scenes:
        data, gt = sim.generate_dataset(sim.make_scene(name), calib, args.n, seed=args.seed, n_test=8)
        start = time.perf_counter()
        model = T.train(data, cfg)
        seconds = time.perf_counter() - start
        err = tasks.point_cloud_error(model.depth() * model.t_norm, gt.depth, calib.cam, gt.mask > 0.5)
        pred = tasks.relight(model, data.prj_test)
        value = np.mean([tasks.psnr(p, c) for p, c in zip(pred, data.cam_test)])
        print(f"{name:8s} d_err {100 * err / calib.baseline:6.2f}% of baseline  test PSNR {value:5.2f} dB  {seconds:6.1f}s")
        if args.save:
            T.save_model(f"{args.save}/{name}.ckpt", model)


if __name__ == "__main__":
    main()
