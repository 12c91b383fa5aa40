"""Soft-label (KD) students against hard-label students on the same distilled sets.

    python scripts/ttm_comparison.py --run-dir runs/seed1 --seeds 5
"""
import argparse

import numpy as np

from protodistill.distiller import DistillConfig, distill
from protodistill.evalkit import welch_ttest
from protodistill.ttm import accuracy, train_student, train_student_hard

from _shared import trained_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run-dir", default="runs/seed1")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--ipc", type=int, default=10)
    args = ap.parse_args()

    run = trained_run(args.run_dir)
    soft, hard = [], []
    for seed in range(args.seeds):
        ds = distill(run.train, run.ae, run.denoiser, run.schedule,
                     DistillConfig(C=args.ipc, ipc=args.ipc, seed=seed)).dataset
        res = train_student(ds, run.teacher, seed=seed)
        soft.append(accuracy(res.net, run.test))
        hard.append(accuracy(train_student_hard(ds, seed=seed).net, run.test))
        print(f"seed {seed}: soft {soft[-1]:.3f} (KD loss x{res.history[-1] / res.history[0]:.4f})  "
              f"hard {hard[-1]:.3f}", flush=True)
    print(f"median soft {np.median(soft):.3f}  hard {np.median(hard):.3f}")
    if args.seeds >= 2:
        t, p = welch_ttest(soft, hard)
        print(f"Welch t = {t:.3f}, p = {p:.4f}")


if __name__ == "__main__":
    main()
