"""Depth error of the full model and its ablations on "step" with few training pairs."""

import argparse
import dataclasses

import numpy as np

from deprocams import simulator as sim
from deprocams import tasks
from deprocams import training as T

# weights for 60x80 captures (sum losses scale with pixel count)
RECIPE = T.TrainConfig(iterations=500, depth_warmup=200, batch_size=2, w_mask=1e-3, w_rough=1e-3,
                       w_smooth_depth=5.0, w_smooth_omega=10.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default="step")
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--resolution", default="60x80")
    args = ap.parse_args()
    h, w = (int(v) for v in args.resolution.split("x"))
    calib = sim.default_calibration(cam_size=(h, w))
    scene = sim.make_scene(args.scene)
    errs = {mode: [] for mode in T.ABLATIONS}
    for seed in range(args.seeds):
        data, gt = sim.generate_dataset(scene, calib, args.n, seed=seed)
        for mode in T.ABLATIONS:
            model = T.train(data, dataclasses.replace(RECIPE, seed=seed, ablation=mode))
            err = tasks.point_cloud_error(model.depth() * model.t_norm, gt.depth, calib.cam, gt.mask > 0.5)
            errs[mode].append(err / calib.baseline)
            print(f"seed {seed} {mode:9s} d_err {100 * errs[mode][-1]:.2f}%", flush=True)
    for mode, v in errs.items():
        print(f"mean {mode:9s} {100 * np.mean(v):.2f}%")


if __name__ == "__main__":
    main()
