"""``protodistill`` command line: one subcommand per pipeline stage.

Stages communicate only through files under ``out_dir``. Failures print one
line to stderr, ``protodistill: error: <kind>: <message>``, and exit with the
code for that kind.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autoencoder import AePair, TrainingDiverged, train_autoencoder
from .config import SCHEMA, ConfigError, RunConfig, parse_value, resolve
from .dataio import (
    FormatError, ImageDataset, generate_shapes, load_checkpoint, load_dataset, save_checkpoint,
    save_dataset, write_pnm,
)
from .diffusion import ConditionalDenoiser, train_denoiser
from .distiller import (
    StageError, cluster, encode_standardized, random_prototypes, synthesize,
)
from .evalkit import (
    frechet_distance, feature_stats, inception_score, metrics_csv, welch_ttest,
)
from .numerics import derive_seed
from .prototypes import PrototypeSet
from .ttm import (
    ClassifierNet, accuracy, images01, train_student, train_student_hard, train_teacher,
)

EXIT_CODES = {"config": 2, "missing-input": 3, "format": 4, "stage": 5}

PATHS = {
    "train": "data/train.d4md",
    "test": "data/test.d4md",
    "ae": "models/ae.d4mw",
    "diff": "models/diff.d4mw",
    "teacher": "models/teacher.d4mw",
    "prototypes": "models/prototypes.d4mw",
    "distilled": "distilled/distilled.d4md",
    "provenance": "distilled/provenance.txt",
    "images": "distilled/images",
    "student": "models/student.d4mw",
    "student-hard": "models/student-hard.d4mw",
    "metrics": "metrics/metrics.csv",
    "report": "metrics/report.txt",
}

PRODUCER = {
    "train": "gen-data", "test": "gen-data", "ae": "train-ae", "diff": "train-diff",
    "teacher": "train-teacher", "prototypes": "cluster", "distilled": "synthesize",
    "student": "train-student",
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class Run:
    """Resolved config plus bookkeeping of the files a command reads and writes."""

    def __init__(self, command: str, cfg: RunConfig, flags: dict[str, object] | None = None):
        self.command = command
        self.cfg = cfg
        self.flags = flags or {}
        self.root = Path(cfg["out_dir"])
        self.inputs: list[str] = []
        self.outputs: list[str] = []

    def path(self, key: str) -> Path:
        return self.root / PATHS[key]

    def need(self, key: str) -> Path:
        p = self.path(key)
        if not p.is_file():
            raise CliError("missing-input", f"{PATHS[key]} not found in {self.root}; run {PRODUCER[key]} first")
        rel = PATHS[key]
        if rel not in self.inputs:
            self.inputs.append(rel)
        return p

    def wrote(self, path: Path) -> None:
        rel = path.relative_to(self.root).as_posix()
        if rel not in self.outputs:
            self.outputs.append(rel)

    def out(self, key: str) -> Path:
        p = self.path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def finish(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        resolved = self.root / "config.resolved.cfg"
        resolved.write_text(self.cfg.to_text(skip=("out_dir",)), encoding="utf-8")
        lines = [f"protodistill {__version__}", f"command = {self.command}"]
        lines += [f"flag {k} = {v}" for k, v in sorted(self.flags.items())]
        lines.append("[config]")
        lines += [f"{k} = {_fmt(self.cfg[k])}" for k in SCHEMA if k != "out_dir"]
        for title, files in (("[inputs]", self.inputs), ("[outputs]", self.outputs)):
            lines.append(title)
            lines += [f"{sha256(self.root / f)}  {f}" for f in files]
        manifest = self.root / "manifests" / f"{self.command}.txt"
        manifest.parent.mkdir(parents=True, exist_ok=True)
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_history(run: Run, name: str, values, column: str = "epoch") -> None:
    path = run.root / "histories" / f"{name}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [f"{column},value"] + [f"{i},{float(v)!r}" for i, v in enumerate(values)]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    run.wrote(path)


# ---------------------------------------------------------------- loaders

def _load_dataset(run: Run, key: str) -> ImageDataset:
    return load_dataset(run.need(key))


def _load_ae(run: Run) -> AePair:
    return AePair.from_state_dict(load_checkpoint(run.need("ae")))


def _load_diff(run: Run) -> ConditionalDenoiser:
    return ConditionalDenoiser.from_state_dict(load_checkpoint(run.need("diff")))


def _load_classifier(run: Run, key: str, prefix: str) -> ClassifierNet:
    return ClassifierNet.from_state_dict(load_checkpoint(run.need(key)), prefix)


# ---------------------------------------------------------------- stages

def gen_data(run: Run) -> None:
    c = run.cfg
    kw = dict(K=c["data.K"], size=c["data.size"], noise_std=c["data.noise_std"])
    train = generate_shapes(c["data.n_per_category"], seed=c["seed"], **kw)
    test = generate_shapes(c["data.test_per_category"], seed=derive_seed(c["seed"], "test-data"), **kw)
    for key, ds in (("train", train), ("test", test)):
        save_dataset(run.out(key), ds)
        run.wrote(run.path(key))


def train_ae(run: Run) -> None:
    train = _load_dataset(run, "train")
    ae = train_autoencoder(train, run.cfg.ae(), seed=run.cfg["seed"])
    save_checkpoint(run.out("ae"), ae.state_dict())
    run.wrote(run.path("ae"))
    write_history(run, "ae", ae.history)


def train_diff(run: Run) -> None:
    train = _load_dataset(run, "train")
    ae = _load_ae(run)
    model = train_denoiser(encode_standardized(ae, train), train.K, run.cfg.schedule(),
                           run.cfg.denoiser(), seed=run.cfg["seed"])
    save_checkpoint(run.out("diff"), model.state_dict())
    run.wrote(run.path("diff"))
    write_history(run, "diff", model.history, column="step")


def train_teacher_stage(run: Run) -> None:
    train = _load_dataset(run, "train")
    res = train_teacher(train, run.cfg.teacher(), seed=run.cfg["seed"])
    save_checkpoint(run.out("teacher"), res.net.state_dict("teacher"))
    run.wrote(run.path("teacher"))
    write_history(run, "teacher", res.history)


def cluster_stage(run: Run) -> None:
    train = _load_dataset(run, "train")
    protos = cluster(_load_ae(run), train, run.cfg.distill())
    save_checkpoint(run.out("prototypes"), protos.state_dict())
    run.wrote(run.path("prototypes"))


def synthesize_stage(run: Run) -> None:
    train = _load_dataset(run, "train")
    ae, model = _load_ae(run), _load_diff(run)
    dcfg = run.cfg.distill()
    if run.flags.get("random_init"):
        protos = random_prototypes(train.K, dcfg.C, ae.latent_dim, dcfg.seed)
    else:
        protos = PrototypeSet.from_state_dict(load_checkpoint(run.need("prototypes")))
    out = synthesize(protos, ae, model, run.cfg.schedule(), dcfg, train.category_names)
    save_dataset(run.out("distilled"), out.dataset)
    run.wrote(run.path("distilled"))
    out.write_provenance(run.out("provenance"))
    run.wrote(run.path("provenance"))
    img_dir = run.path("images")
    img_dir.mkdir(parents=True, exist_ok=True)
    for stale in img_dir.glob("*.pgm"):
        stale.unlink()
    for p, img in zip(out.provenance, out.dataset.images):
        path = img_dir / f"{p.index:04d}_{train.category_names[p.category]}_p{p.prototype}_r{p.replica}.pgm"
        write_pnm(path, img)
        run.wrote(path)


def train_student_stage(run: Run) -> None:
    distilled = _load_dataset(run, "distilled")
    if run.flags.get("hard_labels"):
        res = train_student_hard(distilled, run.cfg.student(), seed=run.cfg["seed"])
        key, prefix, name = "student-hard", "student", "student-hard"
    else:
        teacher = _load_classifier(run, "teacher", "teacher")
        res = train_student(distilled, teacher, run.cfg.student(), seed=run.cfg["seed"])
        key, prefix, name = "student", "student", "student"
    save_checkpoint(run.out(key), res.net.state_dict(prefix))
    run.wrote(run.path(key))
    write_history(run, name, res.history)


def _per_category_accuracy(net: ClassifierNet, ds: ImageDataset) -> np.ndarray:
    pred = np.argmax(net.logits(images01(ds)), axis=1)
    return np.array([np.mean(pred[ds.labels == k] == k) for k in range(ds.K)])


def evaluate_stage(run: Run) -> None:
    test = _load_dataset(run, "test")
    teacher = _load_classifier(run, "teacher", "teacher")
    student = _load_classifier(run, "student", "student")
    distilled = _load_dataset(run, "distilled")
    splits = run.cfg["eval.splits"]
    real_stats = feature_stats(teacher, images01(test))
    rows = [
        ("student_test_accuracy", accuracy(student, test)),
        ("teacher_test_accuracy", accuracy(teacher, test)),
        ("teacher_accuracy_on_distilled", accuracy(teacher, distilled)),
        ("inception_score_distilled", inception_score(teacher, images01(distilled), splits)),
        ("inception_score_test", inception_score(teacher, images01(test), splits)),
        ("frechet_distance_distilled_vs_test",
         frechet_distance(real_stats, feature_stats(teacher, images01(distilled)))),
    ]
    comparisons = [("student_vs_teacher", student, teacher)]
    if run.path("student-hard").is_file():
        hard = _load_classifier(run, "student-hard", "student")
        rows.append(("student_hard_test_accuracy", accuracy(hard, test)))
        comparisons.append(("soft_vs_hard_student", student, hard))
    notes = []
    for name, a, b in comparisons:
        try:
            t, p = welch_ttest(_per_category_accuracy(a, test), _per_category_accuracy(b, test))
        except ValueError as exc:
            t = p = float("nan")
            notes.append(f"{name}: t-test undefined ({exc})")
        rows += [(f"welch_t_{name}", t), (f"welch_p_{name}", p)]
    run.out("metrics").write_text(metrics_csv(rows), encoding="utf-8")
    run.wrote(run.path("metrics"))
    width = max(len(n) for n, _ in rows)
    report = ["Evaluation report", "", "Per-category test accuracies feed the Welch t-tests.",
              "Inception score and Frechet distance use the teacher as the feature network.", ""]
    report += [f"{n.ljust(width)}  {v:.6f}" for n, v in rows] + notes
    run.out("report").write_text("\n".join(report) + "\n", encoding="utf-8")
    run.wrote(run.path("report"))


STAGES = {
    "gen-data": gen_data,
    "train-ae": train_ae,
    "train-diff": train_diff,
    "train-teacher": train_teacher_stage,
    "cluster": cluster_stage,
    "synthesize": synthesize_stage,
    "train-student": train_student_stage,
    "evaluate": evaluate_stage,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protodistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*STAGES, "pipeline"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="overrides the seed key")
        p.add_argument("--out", help="overrides out_dir (and D4M_OUT_DIR)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key; repeatable")
        if name in ("synthesize", "pipeline"):
            p.add_argument("--random-init", action="store_true",
                           help="start sampling from standard-normal latents instead of prototypes")
            p.add_argument("--strength", type=float, help="overrides distill.strength")
        if name in ("train-student", "pipeline"):
            p.add_argument("--hard-labels", action="store_true",
                           help="cross-entropy on hard labels instead of KD")
    return parser


def config_from_args(args, environ) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = parse_value(key.strip(), value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "strength", None) is not None:
        overrides["distill.strength"] = args.strength
    return resolve(args.config, overrides, environ)


def run_command(command: str, cfg: RunConfig, flags: dict[str, object]) -> None:
    names = list(STAGES) if command == "pipeline" else [command]
    for name in names:
        stage_flags = {k: v for k, v in flags.items()
                       if (k == "random_init" and name == "synthesize")
                       or (k == "hard_labels" and name == "train-student")}
        run = Run(name, cfg, stage_flags)
        STAGES[name](run)
        run.finish()


def main(argv=None, environ=None) -> int:
    environ = os.environ if environ is None else environ
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args, environ)
        flags = {k: True for k in ("random_init", "hard_labels") if getattr(args, k, False)}
        run_command(args.command, cfg, flags)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except ConfigError as exc:
        return _fail("config", str(exc))
    except FormatError as exc:
        return _fail("format", str(exc))
    except (StageError, TrainingDiverged, ValueError, KeyError) as exc:
        return _fail("stage", f"{args.command}: {exc}")
    return 0


def _fail(kind: str, message: str) -> int:
    line = " ".join(message.split())
    print(f"protodistill: error: {kind}: {line}", file=sys.stderr)
    return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
