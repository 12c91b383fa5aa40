"""Helpers shared by the experiment scripts: reuse or produce a trained run directory."""
from __future__ import annotations

from pathlib import Path
from types import SimpleNamespace

from protodistill.autoencoder import AePair
from protodistill.cli import PATHS, main
from protodistill.dataio import load_checkpoint, load_dataset
from protodistill.diffusion import ConditionalDenoiser, NoiseSchedule
from protodistill.ttm import ClassifierNet

STAGES = [("gen-data", "train"), ("train-ae", "ae"), ("train-diff", "diff"), ("train-teacher", "teacher")]


def trained_run(run_dir, seed: int = 1) -> SimpleNamespace:
    """Load data and models from ``run_dir``, running the missing CLI stages first."""
    root = Path(run_dir)
    for command, key in STAGES:
        if not (root / PATHS[key]).is_file():
            print(f"[setup] {command}")
            code = main([command, "--seed", str(seed), "--out", str(root)], environ={})
            if code:
                raise SystemExit(code)
    return SimpleNamespace(
        train=load_dataset(root / PATHS["train"]),
        test=load_dataset(root / PATHS["test"]),
        ae=AePair.from_state_dict(load_checkpoint(root / PATHS["ae"])),
        denoiser=ConditionalDenoiser.from_state_dict(load_checkpoint(root / PATHS["diff"])),
        teacher=ClassifierNet.from_state_dict(load_checkpoint(root / PATHS["teacher"]), "teacher"),
        schedule=NoiseSchedule(),
    )
