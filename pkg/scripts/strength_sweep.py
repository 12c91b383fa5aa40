"""Sweep sampling strength; report distilled-image quality and student accuracy.

    python scripts/strength_sweep.py --run-dir runs/seed1 --strengths 0,0.3,0.5,0.7,0.9,1
"""
import argparse

import numpy as np

from protodistill.distiller import DistillConfig, distill, distill_random_init
from protodistill.evalkit import feature_stats, frechet_distance, inception_score
from protodistill.ttm import accuracy, images01, train_student

from _shared import trained_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run-dir", default="runs/seed1")
    ap.add_argument("--strengths", default="0,0.3,0.5,0.7,0.9,1")
    ap.add_argument("--guidance", type=float, default=8.0)
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()

    run = trained_run(args.run_dir)
    real = feature_stats(run.teacher, images01(run.test))
    print("strength init    teacher_acc   IS     FID     student")
    for s in (float(v) for v in args.strengths.split(",")):
        for name, make in (("proto", distill), ("random", distill_random_init)):
            tacc, is_, fid, stud = [], [], [], []
            for seed in range(args.seeds):
                cfg = DistillConfig(C=10, ipc=10, strength=s, guidance=args.guidance, seed=seed)
                ds = make(run.train, run.ae, run.denoiser, run.schedule, cfg).dataset
                x = images01(ds)
                tacc.append(accuracy(run.teacher, ds))
                is_.append(inception_score(run.teacher, x))
                fid.append(frechet_distance(real, feature_stats(run.teacher, x)))
                stud.append(accuracy(train_student(ds, run.teacher, seed=seed).net, run.test))
            print(f"{s:7.2f}  {name:6s}  {np.median(tacc):10.3f}  {np.median(is_):5.2f}  "
                  f"{np.median(fid):6.1f}  {np.median(stud):7.3f}", flush=True)


if __name__ == "__main__":
    main()
