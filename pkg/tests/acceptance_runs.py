"""Trained runs for the acceptance suite, cached on disk.

A run is keyed by its training config plus a hash of every source file that
influences training; evaluation results are additionally keyed by the
metrics source. Running this file directly fills the cache:

    python tests/acceptance_runs.py            # every run the suite needs
    python tests/acceptance_runs.py contentvec hubert_iter
"""
import hashlib
import json
import os
import sys
import time

from disentlab import metrics as M
from disentlab.corpus import build_corpus
from disentlab.model import ModelConfig, load_checkpoint
from disentlab.teachers import generate_teacher_labels
from disentlab.trainer import TrainConfig, train, variant_flags

STEPS = 3000
SEED = 0
EVAL_METRICS = ["sid_curve", "phone_probe", "dtw_l0", "pnmi"]

# name -> (variant, contrastive tap layer or None for the default)
RUNS = {
    "contentvec": ("contentvec", None),
    "hubert_iter": ("hubert_iter", None),
    "no_dt": ("no_dt", None),
    "no_ds": ("no_ds", None),
    "no_cond": ("no_cond", None),
    "tap2": ("contentvec", 2),
    "tap4": ("contentvec", 4),
    "tap6": ("contentvec", 6),
}

_SRC = os.path.join(os.path.dirname(__file__), os.pardir, "src", "disentlab")
TRAIN_SOURCES = ("tensor.py", "model.py", "objectives.py", "trainer.py", "corpus.py",
                 "perturb.py", "teachers.py", "kmeans.py", "rng.py", "blob.py")


def cache_root() -> str:
    default = os.path.join(os.path.dirname(__file__), os.pardir, ".acceptance_cache")
    return os.path.abspath(os.environ.get("DISENTLAB_ACCEPTANCE_CACHE", default))


def _hash_files(names) -> str:
    h = hashlib.sha256()
    for name in names:
        with open(os.path.join(_SRC, name), "rb") as fh:
            h.update(name.encode() + b"\0" + fh.read())
    return h.hexdigest()[:16]


def train_config(name: str) -> TrainConfig:
    variant, tap = RUNS[name]
    cfg = TrainConfig(variant=variant, total_steps=STEPS, seed=SEED)
    if tap is not None:
        cfg.model = ModelConfig(contrastive_layer=tap)
    return cfg.validate()


def run_key(name: str) -> str:
    cfg = json.dumps(train_config(name).to_dict(), sort_keys=True)
    return hashlib.sha256((cfg + _hash_files(TRAIN_SOURCES)).encode()).hexdigest()[:16]


_corpus = None
_teachers = {}


def default_corpus():
    global _corpus
    if _corpus is None:
        _corpus = build_corpus()
    return _corpus


def teachers_for(variant: str):
    mode = "normalized_frames" if variant_flags(variant)[2] else "raw_frames"
    if mode not in _teachers:
        _teachers[mode] = generate_teacher_labels(default_corpus(), mode, seed=SEED)
    return _teachers[mode]


def get_run(name: str) -> dict:
    """Train (or reuse) run ``name``; returns its report plus training time."""
    d = os.path.join(cache_root(), f"{name}-{run_key(name)}")
    ckpt = os.path.join(d, "checkpoints", "last.ckpt")
    info_path = os.path.join(d, "train_info.json")
    if not (os.path.exists(ckpt) and os.path.exists(info_path)):
        cfg = train_config(name)
        t0 = time.perf_counter()
        train(cfg, default_corpus(), teachers_for(cfg.variant), out_dir=d)
        with open(info_path, "w") as fh:
            json.dump({"train_seconds": time.perf_counter() - t0}, fh)
    with open(info_path) as fh:
        info = json.load(fh)
    report_path = os.path.join(d, f"report-{_hash_files(('metrics.py',))}.json")
    if not os.path.exists(report_path):
        model, _, _ = load_checkpoint(ckpt)
        report = M.evaluate(model, default_corpus(), EVAL_METRICS, seed=SEED)
        with open(report_path, "w") as fh:
            fh.write(M.report_json(report))
    with open(report_path) as fh:
        report = json.load(fh)
    report["train_seconds"] = info["train_seconds"]
    report["run_dir"] = d
    return report


def curve(report: dict) -> dict:
    return {r["layer"]: r["test_acc"] for r in report["sid_curve"]}


if __name__ == "__main__":
    for name in sys.argv[1:] or list(RUNS):
        r = get_run(name)
        c = curve(r)
        print(name, json.dumps(r["metrics"]), [round(c[l], 3) for l in sorted(c)],
              f"{r['train_seconds']:.0f}s", flush=True)
