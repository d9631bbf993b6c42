"""
Training loop for the full method and its baselines/ablations.

Variants
--------
contentvec   speaker-normalized teachers, two perturbed views + contrastive
             loss, speaker-conditioned predictor
hubert_iter  raw-frame teachers, one unperturbed view, unconditioned predictor
no_dt        contentvec with raw-frame teachers
no_ds        contentvec without perturbation and contrastive loss (one view)
no_cond      contentvec with an unconditioned predictor

All randomness of step ``s`` comes from streams derived from ``(seed, s)``,
so a run resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tn
from .corpus import Corpus
from .errors import ConfigError, ContractError, NumericError
from .model import Model, ModelConfig, encode_batch, load_checkpoint, pad_batch, predict_batch, \
    sample_mask, save_checkpoint
from .objectives import ContrastiveConfig, LambdaSchedule, batch_negatives, combined_loss, \
    contrastive_loss, masked_prediction_loss
from .perturb import apply_transform, sample_transform
from .rng import derive_rng
from .teachers import TeacherLabels

log = logging.getLogger(__name__)

VARIANTS = ("contentvec", "hubert_iter", "no_dt", "no_ds", "no_cond")

# variant -> (perturbed views + contrastive, speaker conditioning, normalized teachers)
VARIANT_FLAGS = {
    "contentvec": (True, True, True),
    "hubert_iter": (False, False, False),
    "no_dt": (True, True, False),
    "no_ds": (False, True, True),
    "no_cond": (True, False, True),
}

LOSS_COLUMNS = ("step", "pred_loss", "contr_loss", "lambda", "combined", "tap_layer", "lr")
VALID_COLUMNS = ("step", "valid_pred_loss", "valid_contr_loss", "valid_combined")


def variant_flags(variant: str):
    if variant not in VARIANT_FLAGS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}",
                          path="variant")
    return VARIANT_FLAGS[variant]


@dataclass
class TrainConfig:
    variant: str = "contentvec"
    total_steps: int = 3000
    batch_size: int = 8
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    grad_clip: float = 10.0
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 1000
    lambda_max: float = 10.0
    # "keep": both views carry the recording's own noise; "redraw": fresh noise per view
    view_noise: str = "keep"
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    check_teachers: bool = True

    def validate(self) -> "TrainConfig":
        variant_flags(self.variant)
        for name in ("total_steps", "batch_size", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", path=name)
        if self.lr <= 0:
            raise ConfigError("must be > 0", path="lr")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment coefficients must lie in [0, 1)", path="beta1")
        if self.view_noise not in ("keep", "redraw"):
            raise ConfigError("must be 'keep' or 'redraw'", path="view_noise")
        self.model.validate()
        return self

    @property
    def uses_views(self) -> bool:
        return variant_flags(self.variant)[0]

    @property
    def tap_layer(self) -> int:
        return self.contrastive.tap_layer or self.model.contrastive_layer

    def model_config(self) -> ModelConfig:
        _, cond, _ = variant_flags(self.variant)
        mc = dataclasses.replace(self.model, speaker_conditioning=cond)
        mc.contrastive_layer = self.tap_layer
        return mc.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown field(s) {unknown}", path="train")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "contrastive" in d:
            try:
                d["contrastive"] = ContrastiveConfig(**d["contrastive"])
            except (TypeError, ContractError) as exc:
                raise ConfigError(str(exc), path="contrastive") from None
        return cls(**d).validate()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
                   beta2: float = 0.98, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Adam with bias correction and decoupled weight decay, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    warm = max(1, int(round(cfg.warmup_frac * cfg.total_steps)))
    return cfg.lr * min(1.0, (step + 1) / warm)


# ---------------------------------------------------------------------------
# experiment record
# ---------------------------------------------------------------------------

@dataclass
class ExperimentRecord:
    config: TrainConfig
    model: Model
    losses: list = field(default_factory=list)
    valid_log: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)   # name -> path
    best_step: Optional[int] = None
    best_model: Optional[Model] = None
    metrics: dict = field(default_factory=dict)
    teacher_id: Optional[str] = None

    def losses_csv(self) -> str:
        return _csv(LOSS_COLUMNS, self.losses)

    def valid_csv(self) -> str:
        return _csv(VALID_COLUMNS, self.valid_log)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def read_losses_csv(path: str) -> list:
    rows = []
    with open(path) as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (None if v == "" else int(v) if k in ("step", "tap_layer") else float(v))
                         for k, v in r.items()})
    return rows


def teacher_id(teachers: TeacherLabels) -> str:
    import hashlib
    return hashlib.sha256(np.ascontiguousarray(teachers.codebook.centers).tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, config: TrainConfig, corpus: Corpus, teachers: TeacherLabels,
                 out_dir: Optional[str] = None):
        self.cfg = config.validate()
        self.corpus = corpus
        self.teachers = teachers
        self.out_dir = out_dir
        self.train_utts = corpus.split("train")
        self.valid_utts = corpus.split("valid")
        missing = [u.utt_id for u in self.train_utts + self.valid_utts if u.utt_id not in teachers]
        if missing:
            raise ContractError(f"teacher labels missing for {len(missing)} utterances, "
                                f"e.g. {missing[:3]}")
        self._check_teacher_mode()
        mc = self.cfg.model_config()
        mc.input_dim = corpus.config.feat_dim
        mc.num_classes = teachers.codebook.K
        mc.num_speakers = corpus.num_speakers
        self.model_cfg = mc.validate()
        self.schedule = LambdaSchedule(self.cfg.lambda_max, self.cfg.total_steps)
        self.model = Model.create(mc, derive_rng(self.cfg.seed, "init"))
        self.opt = AdamState()
        self.step = 0
        self.record = ExperimentRecord(self.cfg, self.model, teacher_id=teacher_id(teachers))
        self._best = None
        self.perturb_calls = 0

    def _check_teacher_mode(self) -> None:
        if not self.cfg.check_teachers:
            return
        _, _, want_norm = variant_flags(self.cfg.variant)
        meta = self.teachers.meta or {}
        mode = self.teachers.mode
        is_norm = mode == "normalized_frames" or (mode == "model_layer"
                                                  and meta.get("normalize_input", False))
        if is_norm != want_norm:
            kind = "speaker-normalized" if want_norm else "raw-feature"
            raise ContractError(f"variant {self.cfg.variant} needs {kind} teachers, "
                                f"got mode={mode} normalize_input={meta.get('normalize_input')}")

    # -- batch assembly ---------------------------------------------------
    def batch_indices(self, step: int) -> np.ndarray:
        n, B = len(self.train_utts), self.cfg.batch_size
        out = []
        pos = step * B
        while len(out) < B:
            epoch, off = divmod(pos, n)
            perm = derive_rng(self.cfg.seed, "epoch", epoch).permutation(n)
            take = min(B - len(out), n - off)
            out.extend(perm[off:off + take].tolist())
            pos += take
        return np.array(out)

    def _views(self, utts, rng_tf, rng_noise, two_views: bool):
        if not two_views:
            return [utts]
        cfg = self.corpus.config
        views = [[], []]
        for u in utts:
            for v in range(2):
                p = sample_transform(rng_tf, cfg.feat_dim)
                views[v].append(apply_transform(u, p, self.corpus.inventory, cfg.noise_std,
                                                rng_noise, cfg.bump_width,
                                                keep_noise=self.cfg.view_noise == "keep"))
                self.perturb_calls += 1
        return views

    def _forward(self, utts, rng_root, layerdrop_on: bool, two_views: bool, step: int):
        mc = self.model_cfg
        views = self._views(utts, rng_root("transform"), rng_root("noise"), two_views)
        flat = [u for view in views for u in view]
        frames, valid = pad_batch([u.frames for u in flat])
        rng_mask = rng_root("mask")
        masked = np.zeros(valid.shape, dtype=bool)
        for b, u in enumerate(flat):
            masked[b, :u.num_frames] = sample_mask(u.num_frames, mc.mask_prob, mc.mask_span,
                                                   rng_mask).masked
        labels, _ = pad_batch([self.teachers[u.utt_id] for u in flat], fill=0)
        outs = encode_batch(frames, masked, valid, self.model.params, mc, rng_root("layerdrop"),
                            layerdrop_on)
        logits, _ = predict_batch(outs.encoder[-1], [u.speaker_id for u in flat],
                                  self.model.params, mc, valid)
        B = len(utts)
        if two_views:
            pred = masked_prediction_loss(logits[:B], logits[B:], labels[:B], masked[:B],
                                          masked[B:])
            cc = self.cfg.contrastive
            neg, neg_ok = batch_negatives([u.num_frames for u in utts], cc.num_negatives,
                                          rng_root("negatives"))
            tap = outs.tap()
            R1, R2 = tap[:B], tap[B:]
            contr_valid = valid[:B] if cc.apply_to_all_frames else masked[:B] & masked[B:]
            contr = contrastive_loss(R1, R2, neg, cc.temperature, contr_valid, neg_ok, cc.form)
        else:
            pred = masked_prediction_loss(logits, None, labels, masked)
            contr = None
        total = combined_loss(pred, contr, step, self.schedule)
        return pred, contr, total, outs.tap_layer

    # -- steps --------------------------------------------------------------
    def train_step(self) -> dict:
        s = self.step
        cfg = self.cfg

        def rng_root(name):
            return derive_rng(cfg.seed, "step", s, name)

        utts = [self.train_utts[i] for i in self.batch_indices(s)]
        pred, contr, total, tap = self._forward(utts, rng_root, True, cfg.uses_views, s)
        vals = {"pred": pred.item(), "contr": None if contr is None else contr.item(),
                "total": total.item()}
        if not all(np.isfinite(v) for v in vals.values() if v is not None):
            raise NumericError(f"non-finite loss at step {s}: {vals}")
        for p in self.model.parameters():
            p.zero_grad()
        tn.backward(total)
        grads = {k: p.grad for k, p in self.model.params.items()}
        if cfg.grad_clip:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        lr = learning_rate(s, cfg)
        optimizer_step(self.model.params, grads, self.opt, lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                       cfg.weight_decay)
        row = {"step": s, "pred_loss": vals["pred"], "contr_loss": vals["contr"],
               "lambda": self.schedule(s), "combined": vals["total"], "tap_layer": tap,
               "lr": lr}
        self.record.losses.append(row)
        self.step += 1
        return row

    def validate(self) -> dict:
        """Validation losses on fixed masks/transforms (no layer drop)."""
        cfg = self.cfg
        preds, contrs, combs, weights = [], [], [], []
        with tn.no_grad():
            for s in range(0, len(self.valid_utts), 32):
                chunk = self.valid_utts[s:s + 32]

                def rng_root(name, s=s):
                    return derive_rng(cfg.seed, "valid", s, name)

                pred, contr, total, _ = self._forward(chunk, rng_root, False, cfg.uses_views,
                                                      self.step)
                preds.append(pred.item())
                contrs.append(None if contr is None else contr.item())
                combs.append(total.item())
                weights.append(len(chunk))
        w = np.array(weights, dtype=np.float64) / sum(weights)
        row = {"step": self.step, "valid_pred_loss": float(np.dot(w, preds)),
               "valid_contr_loss": None if contrs[0] is None else float(np.dot(w, contrs)),
               "valid_combined": float(np.dot(w, combs))}
        self.record.valid_log.append(row)
        if self._best is None or row["valid_pred_loss"] < self._best:
            self._best = row["valid_pred_loss"]
            self.record.best_step = self.step
            self.record.best_model = Model(self.model_cfg,
                                           {k: tn.parameter(v.data.copy())
                                            for k, v in self.model.params.items()})
            if self.out_dir:
                self.record.checkpoints["best"] = self.save(os.path.join(self.ckpt_dir, "best.ckpt"))
        return row

    # -- persistence ----------------------------------------------------------
    @property
    def ckpt_dir(self) -> str:
        d = os.path.join(self.out_dir, "checkpoints")
        os.makedirs(d, exist_ok=True)
        return d

    def save(self, path: str) -> str:
        extra = {}
        for k in self.model.params:
            if k in self.opt.m:
                extra[f"adam_m/{k}"] = self.opt.m[k]
                extra[f"adam_v/{k}"] = self.opt.v[k]
        header = {"train_config": self.cfg.to_dict(), "step": self.step,
                  "optimizer_step": self.opt.step,
                  "rng_state": {"seed": self.cfg.seed, "next_step": self.step},
                  "teacher_codebook_id": self.record.teacher_id,
                  "best_valid": self._best, "best_step": self.record.best_step}
        save_checkpoint(path, self.model, header, extra)
        return path

    def restore(self, path: str) -> None:
        model, header, extra = load_checkpoint(path)
        if header.get("teacher_codebook_id") != self.record.teacher_id:
            raise ContractError("checkpoint was trained against different teacher labels")
        for k, p in model.params.items():
            self.model.params[k].data = p.data
        self.opt = AdamState(header["optimizer_step"],
                             {k[7:]: v for k, v in extra.items() if k.startswith("adam_m/")},
                             {k[7:]: v for k, v in extra.items() if k.startswith("adam_v/")})
        self.step = header["step"]
        self._best = header.get("best_valid")
        self.record.best_step = header.get("best_step")
        best = os.path.join(os.path.dirname(path), "best.ckpt")
        if self._best is not None and os.path.exists(best):
            self.record.best_model = load_checkpoint(best)[0]
        self.record.losses = [r for r in self.record.losses if r["step"] < self.step]
        self.record.valid_log = [r for r in self.record.valid_log if r["step"] <= self.step]

    def write_logs(self) -> None:
        if not self.out_dir:
            return
        with open(os.path.join(self.out_dir, "losses.csv"), "w") as fh:
            fh.write(self.record.losses_csv())
        with open(os.path.join(self.out_dir, "valid.csv"), "w") as fh:
            fh.write(self.record.valid_csv())

    def run(self, until: Optional[int] = None) -> ExperimentRecord:
        cfg = self.cfg
        stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
        while self.step < stop:
            self.train_step()
            if self.step % cfg.eval_every == 0 or self.step == cfg.total_steps:
                row = self.validate()
                log.info("step %d valid pred %.4f", self.step, row["valid_pred_loss"])
            if self.out_dir and (self.step % cfg.checkpoint_every == 0
                                 or self.step == cfg.total_steps):
                name = f"step_{self.step:06d}.ckpt"
                self.record.checkpoints[name] = self.save(os.path.join(self.ckpt_dir, name))
                self.record.checkpoints["last"] = self.save(os.path.join(self.ckpt_dir, "last.ckpt"))
                self.write_logs()
        self.write_logs()
        if self.record.best_model is None:
            self.record.best_model = self.model
        return self.record


def train(config: TrainConfig, corpus: Corpus, teachers: TeacherLabels,
          out_dir: Optional[str] = None, resume_from: Optional[str] = None) -> ExperimentRecord:
    """Train one variant; returns the experiment record (with final and best model)."""
    trainer = Trainer(config, corpus, teachers, out_dir)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
    if resume_from:
        if out_dir and os.path.exists(os.path.join(out_dir, "losses.csv")):
            trainer.record.losses = read_losses_csv(os.path.join(out_dir, "losses.csv"))
            trainer.record.valid_log = read_losses_csv(os.path.join(out_dir, "valid.csv")) \
                if os.path.exists(os.path.join(out_dir, "valid.csv")) else []
        trainer.restore(resume_from)
    return trainer.run()
