"""
Command-line entry point.

    disentlab gen-corpus    --config corpus_config.json --out runs/corpus
    disentlab make-teachers --corpus runs/corpus --mode normalized --out runs/teachers
    disentlab train         --config train.json --corpus runs/corpus --teachers runs/teachers --out runs/cv
    disentlab eval          --checkpoint runs/cv --corpus runs/corpus --out runs/cv_eval
    disentlab compare       runs/cv_eval runs/hubert_eval --out runs/cmp
    disentlab report        runs/*_eval --out runs/report

Exit codes: 0 success, 2 configuration/validation error, 3 runtime or
numeric error. An existing non-empty output directory is never
overwritten without ``--force``; a timestamped sibling is created instead.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import os
import subprocess
import sys
import typing
from typing import Optional

import jsonschema
from threadpoolctl import threadpool_limits

from . import metrics as M
from .corpus import CorpusConfig, build_corpus, load_corpus, save_corpus
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .model import ModelConfig, load_checkpoint
from .objectives import ContrastiveConfig
from .teachers import TeacherLabels, generate_teacher_labels
from .trainer import VARIANTS, TrainConfig, train

log = logging.getLogger("disentlab")

TEACHER_MODES = {"raw": "raw_frames", "normalized": "normalized_frames",
                 "model_layer": "model_layer"}
MANIFEST = "manifest.json"


# ---------------------------------------------------------------------------
# config schemas
# ---------------------------------------------------------------------------

_JSON_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _schema_for(cls, nested: Optional[dict] = None) -> dict:
    """Strict JSON schema for a flat config dataclass (unknown keys rejected)."""
    props = {}
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if nested and f.name in nested:
            props[f.name] = nested[f.name]
            continue
        tp = hints[f.name]
        args = typing.get_args(tp)
        if type(None) in args:
            inner = next(a for a in args if a is not type(None))
            props[f.name] = {"type": [_JSON_TYPES[inner], "null"]}
        else:
            props[f.name] = {"type": _JSON_TYPES[tp]}
    return {"type": "object", "properties": props, "additionalProperties": False}


CORPUS_SCHEMA = _schema_for(CorpusConfig)
TRAIN_SCHEMA = _schema_for(TrainConfig, {"model": _schema_for(ModelConfig),
                                         "contrastive": _schema_for(ContrastiveConfig)})
TRAIN_SCHEMA["properties"]["variant"] = {"enum": list(VARIANTS)}
TEACHER_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "properties": {"mode": {"enum": sorted(TEACHER_MODES)}, "K": {"type": "integer", "minimum": 2},
                   "beta": {"type": "number", "minimum": 0, "maximum": 1},
                   "max_iters": {"type": "integer", "minimum": 1},
                   "subsample": {"type": "integer", "minimum": 1},
                   "layer": {"type": ["integer", "null"]},
                   "normalize_input": {"type": "boolean"}},
}
EVAL_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "properties": {"metrics": {"type": "array", "items": {"type": "string"}},
                   "K": {"type": "integer", "minimum": 2},
                   "unit_layer": {"type": ["integer", "null"]},
                   "abx_triplets": {"type": "integer", "minimum": 1}},
}


def load_config(path: Optional[str], schema: dict) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise ConfigError(exc.message, path=where or "<root>") from None
    return doc


# ---------------------------------------------------------------------------
# output directories and manifests
# ---------------------------------------------------------------------------

def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=os.path.dirname(os.path.abspath(__file__)),
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def prepare_out_dir(out: str, force: bool) -> str:
    """Return the directory to write into, never reusing a non-empty one without ``force``."""
    if os.path.isdir(out) and os.listdir(out) and not force:
        stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        cand, n = f"{out}_{stamp}", 1
        while os.path.exists(cand):
            cand, n = f"{out}_{stamp}-{n}", n + 1
        log.warning("%s exists; writing to %s (use --force to overwrite)", out, cand)
        out = cand
    os.makedirs(out, exist_ok=True)
    return out


def write_manifest(out_dir: str, args: argparse.Namespace, started: str, **extra) -> None:
    doc = {"command": args.command, "argv": sys.argv[1:], "config": args.config,
           "seed": args.seed, "deterministic": args.deterministic, "threads": args.threads,
           "git_describe": git_describe(), "out_dir": os.path.abspath(out_dir),
           "started": started, "finished": _now()}
    doc.update(extra)
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=str)


def _need_dir(path: str, what: str, marker: Optional[str] = None) -> str:
    if not os.path.isdir(path) or (marker and not os.path.exists(os.path.join(path, marker))):
        raise ConfigError(f"{what} not found at {path}", path=what)
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    started = _now()
    doc = load_config(args.config, CORPUS_SCHEMA)
    if args.seed is not None:
        doc["rng_seed"] = args.seed
    cfg = CorpusConfig.from_dict(doc)
    corpus = build_corpus(cfg)
    out = prepare_out_dir(args.out, args.force)
    save_corpus(corpus, out)
    sizes = {k: len(v) for k, v in corpus.splits.items()}
    print(f"corpus: {corpus.num_speakers} speakers, splits {sizes}, digest {corpus.digest()[:16]}")
    write_manifest(out, args, started, corpus_config=dataclasses.asdict(cfg), splits=sizes,
                   digest=corpus.digest())
    return 0


def cmd_make_teachers(args) -> int:
    started = _now()
    doc = load_config(args.config, TEACHER_SCHEMA)
    mode = args.mode or doc.get("mode", "normalized")
    K = args.K if args.K is not None else doc.get("K", 100)
    beta = args.beta if args.beta is not None else doc.get("beta", 0.8)
    seed = args.seed if args.seed is not None else 0
    corpus = load_corpus(_need_dir(args.corpus, "corpus", "corpus.json"))
    model = None
    if TEACHER_MODES[mode] == "model_layer":
        if not args.checkpoint:
            raise ConfigError("model_layer teachers need --checkpoint", path="checkpoint")
        model, _, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    teachers = generate_teacher_labels(corpus, TEACHER_MODES[mode], K=K,
                                       max_iters=doc.get("max_iters", 50), seed=seed, beta=beta,
                                       model=model, layer=doc.get("layer"),
                                       normalize_input=doc.get("normalize_input", False),
                                       subsample=doc.get("subsample", 50_000))
    out = prepare_out_dir(args.out, args.force)
    teachers.save(out)
    summary = {name: M.corpus_pnmi(teachers.labels, corpus.split(name))
               for name in ("train", "valid", "test")}
    print(f"teachers: mode={teachers.mode} K={K} PNMI " +
          " ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    write_manifest(out, args, started, corpus=os.path.abspath(args.corpus), mode=teachers.mode,
                   K=K, beta=beta, pnmi=summary)
    return 0


def cmd_train(args) -> int:
    started = _now()
    doc = load_config(args.config, TRAIN_SCHEMA)
    if args.variant:
        doc["variant"] = args.variant
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.steps is not None:
        doc["total_steps"] = args.steps
    cfg = TrainConfig.from_dict(doc)
    corpus = load_corpus(_need_dir(args.corpus, "corpus", "corpus.json"))
    teachers = TeacherLabels.load(_need_dir(args.teachers, "teachers", "labels.json"))
    if args.resume:
        out = args.out
        os.makedirs(out, exist_ok=True)
    else:
        out = prepare_out_dir(args.out, args.force)
    rec = train(cfg, corpus, teachers, out, resume_from=args.resume)
    last = rec.losses[-1] if rec.losses else {}
    print(f"train: variant={cfg.variant} steps={len(rec.losses)} best_step={rec.best_step} "
          f"final pred_loss={last.get('pred_loss')}")
    write_manifest(out, args, started, variant=cfg.variant, train_config=cfg.to_dict(),
                   corpus=os.path.abspath(args.corpus), teachers=os.path.abspath(args.teachers),
                   resumed_from=args.resume, best_step=rec.best_step)
    return 0


def _resolve_checkpoint(path: str) -> str:
    if os.path.isdir(path):
        for name in ("best.ckpt", "last.ckpt"):
            cand = os.path.join(path, "checkpoints", name)
            if os.path.exists(cand):
                return cand
        raise ConfigError(f"no checkpoint under {path}/checkpoints", path="checkpoint")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path} not found", path="checkpoint")
    return path


def cmd_eval(args) -> int:
    started = _now()
    doc = load_config(args.config, EVAL_SCHEMA)
    names = args.metrics.split(",") if args.metrics else doc.get("metrics", list(M.METRIC_NAMES))
    M.check_metric_names(names)
    ckpt = _resolve_checkpoint(args.checkpoint)
    corpus = load_corpus(_need_dir(args.corpus, "corpus", "corpus.json"))
    model, header, _ = load_checkpoint(ckpt)
    seed = args.seed if args.seed is not None else 0
    report = M.evaluate(model, corpus, names, seed=seed, K=doc.get("K", 100),
                        unit_layer=doc.get("unit_layer"),
                        abx_triplets=doc.get("abx_triplets", 1000))
    report["variant"] = header.get("train_config", {}).get("variant")
    out = prepare_out_dir(args.out, args.force)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        fh.write(M.report_json(report))
    with open(os.path.join(out, "sid_curve.csv"), "w") as fh:
        fh.write(M.curves_csv(report))
    for k, v in sorted(report["metrics"].items()):
        print(f"{k}: {v}")
    write_manifest(out, args, started, checkpoint=os.path.abspath(ckpt), metrics=names,
                   corpus=os.path.abspath(args.corpus))
    return 0


def _load_report(path: str) -> dict:
    for cand in (path, os.path.join(path, "metrics.json"),
                 os.path.join(path, "metrics", "metrics.json")):
        if os.path.isfile(cand):
            with open(cand) as fh:
                return json.load(fh)
    raise ConfigError(f"no metrics.json under {path}", path="reports")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _write_rows(out: str, stem: str, rows: list, columns: list) -> None:
    with open(os.path.join(out, stem + ".json"), "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
    with open(os.path.join(out, stem + ".csv"), "w") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c) for c in columns})


def cmd_compare(args) -> int:
    started = _now()
    a, b = _load_report(args.a), _load_report(args.b)
    na = a.get("variant") or "a"
    nb = b.get("variant") or "b"
    if na == nb:
        na, nb = f"{na}_a", f"{nb}_b"
    rows = M.compare_reports(a, b, na, nb)
    out = prepare_out_dir(args.out, args.force)
    columns = ["metric", na, nb, "relative_reduction"]
    _write_rows(out, "comparison", rows, columns)
    print(" | ".join(columns))
    for r in rows:
        print(" | ".join(_fmt(r[c]) for c in columns))
    sid = next((r for r in rows if r["metric"] == "sid_final"), None)
    if sid and sid["relative_reduction"] is not None:
        print(f"relative SID reduction of {na} vs {nb}: {100 * sid['relative_reduction']:.1f}%")
    write_manifest(out, args, started, inputs=[os.path.abspath(args.a), os.path.abspath(args.b)])
    return 0


def cmd_report(args) -> int:
    started = _now()
    reports = [(p, _load_report(p)) for p in args.reports]
    keys = sorted({k for _, r in reports for k in r.get("metrics", {})})
    rows = []
    for path, r in reports:
        row = {"run": r.get("variant") or os.path.basename(os.path.normpath(path)), "path": path}
        row.update(r.get("metrics", {}))
        rows.append(row)
    out = prepare_out_dir(args.out, args.force)
    columns = ["run"] + keys
    _write_rows(out, "report", rows, ["run", "path"] + keys)
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(_fmt(r.get(c)) for c in columns) + " |" for r in rows]
    with open(os.path.join(out, "report.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    write_manifest(out, args, started, inputs=[os.path.abspath(p) for p in args.reports])
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bitwise reproducibility")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="disentlab",
                                description="speaker-disentangled masked prediction experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-corpus", parents=[common], help="build the synthetic corpus")
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("make-teachers", parents=[common], help="quantize features into teacher labels")
    s.add_argument("--corpus", required=True)
    s.add_argument("--mode", choices=sorted(TEACHER_MODES))
    s.add_argument("--K", type=int)
    s.add_argument("--beta", type=float, help="speaker normalization strength in [0, 1]")
    s.add_argument("--checkpoint", help="model for model_layer teachers")
    s.set_defaults(func=cmd_make_teachers)

    s = sub.add_parser("train", parents=[common], help="train one variant")
    s.add_argument("--corpus", required=True)
    s.add_argument("--teachers", required=True)
    s.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    s.add_argument("--steps", type=int, help="override total_steps")
    s.add_argument("--resume", help="checkpoint to resume from (writes into --out)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="probe a checkpoint")
    s.add_argument("--checkpoint", required=True, help="checkpoint file or experiment directory")
    s.add_argument("--corpus", required=True)
    s.add_argument("--metrics", help=f"comma list from {', '.join(M.METRIC_NAMES)}")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", parents=[common], help="side-by-side table of two eval runs")
    s.add_argument("a")
    s.add_argument("b")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("report", parents=[common], help="summary table of several eval runs")
    s.add_argument("reports", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "variant", None) and args.variant not in VARIANTS:
        parser.error(f"unknown variant {args.variant!r}; choose from {{{', '.join(VARIANTS)}}}")
    threads = 1 if args.deterministic else args.threads
    try:
        if threads:
            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ContractError, DimensionError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
