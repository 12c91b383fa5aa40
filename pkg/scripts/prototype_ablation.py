"""Student accuracy with prototype-initialized vs random-latent-initialized sampling.

    python scripts/prototype_ablation.py --run-dir runs/seed1 --seeds 5
"""
import argparse

import numpy as np

from protodistill.distiller import DistillConfig, distill, distill_random_init
from protodistill.evalkit import welch_ttest
from protodistill.ttm import accuracy, train_student

from _shared import trained_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run-dir", default="runs/seed1")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--ipc", type=int, default=10)
    ap.add_argument("--strength", type=float, default=0.7)
    ap.add_argument("--guidance", type=float, default=8.0)
    args = ap.parse_args()

    run = trained_run(args.run_dir)
    rows = []
    for seed in range(args.seeds):
        cfg = DistillConfig(C=args.ipc, ipc=args.ipc, strength=args.strength, guidance=args.guidance, seed=seed)
        accs = []
        for make in (distill, distill_random_init):
            ds = make(run.train, run.ae, run.denoiser, run.schedule, cfg).dataset
            accs.append(accuracy(train_student(ds, run.teacher, seed=seed).net, run.test))
        rows.append(accs)
        print(f"seed {seed}: w/ PT {accs[0]:.3f}  w/o PT {accs[1]:.3f}", flush=True)
    pt, rnd = np.array(rows).T
    print(f"median w/ PT {np.median(pt):.3f}  w/o PT {np.median(rnd):.3f}  "
          f"gap {100 * (np.median(pt) - np.median(rnd)):+.1f} points")
    if args.seeds >= 2:
        t, p = welch_ttest(pt, rnd)
        print(f"Welch t = {t:.3f}, p = {p:.3f}")


if __name__ == "__main__":
    main()
