"""
Teacher label generation: speaker normalization, feature extraction, k-means.

Three feature sources are supported:

``raw_frames``
    the corpus frames as they are (no speaker normalization);
``normalized_frames``
    every utterance re-rendered with the reference speaker's factors;
``model_layer``
    activations of one encoder layer of a trained checkpoint, computed on raw
    or normalized frames.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .corpus import Corpus, PhoneInventory, SpeakerParams, Utterance, render_frames
from .errors import ContractError
from .kmeans import Codebook, kmeans_assign, kmeans_fit
from .rng import derive_rng

log = logging.getLogger(__name__)

MODES = ("raw_frames", "normalized_frames", "model_layer")
LABELS_SCHEMA_VERSION = 1


@dataclass
class TeacherLabels:
    labels: dict              # utt_id -> int array of length T
    codebook: Codebook
    mode: str
    meta: dict = field(default_factory=dict)

    def __getitem__(self, utt_id: str) -> np.ndarray:
        return self.labels[utt_id]

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self.labels

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        self.codebook.save(os.path.join(out_dir, "codebook.bin"))
        doc = {"schema_version": LABELS_SCHEMA_VERSION, "mode": self.mode, "K": self.codebook.K,
               "meta": self.meta,
               "labels": {k: v.astype(int).tolist() for k, v in sorted(self.labels.items())}}
        with open(os.path.join(out_dir, "labels.json"), "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, in_dir: str) -> "TeacherLabels":
        path = os.path.join(in_dir, "labels.json")
        if not os.path.exists(path):
            raise FileNotFoundError(f"no teacher labels at {path}")
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("schema_version") != LABELS_SCHEMA_VERSION:
            raise ContractError(f"unsupported labels schema {doc.get('schema_version')}")
        codebook = Codebook.load(os.path.join(in_dir, "codebook.bin"))
        labels = {k: np.asarray(v, dtype=np.int64) for k, v in doc["labels"].items()}
        return cls(labels, codebook, doc["mode"], doc.get("meta", {}))


def choose_reference_speaker(corpus: Corpus) -> SpeakerParams:
    """Training speaker closest to the population median of the speaker factors.

    Factors are log formant scale, F0 and the log EQ gains, each standardized
    across speakers. Ties go to the lower speaker id.
    """
    train_ids = sorted({corpus.utterances[i].speaker_id for i in corpus.splits["train"]})
    spk = [corpus.speakers[i] for i in train_ids]
    feats = np.array([np.concatenate([[np.log(s.formant_scale), s.f0_base], np.log(s.eq_curve)])
                      for s in spk])
    sd = feats.std(0)
    sd[sd == 0] = 1.0
    z = (feats - np.median(feats, 0)) / sd
    return spk[int(np.argmin((z * z).sum(1)))]


def normalize_speaker(u: Utterance, reference: SpeakerParams, inventory: PhoneInventory,
                      beta: float = 1.0, noise_std: float = 0.0,
                      rng: Optional[np.random.Generator] = None,
                      width: float = 0.03) -> Utterance:
    """Re-render ``u`` with speaker factors moved a fraction ``beta`` toward ``reference``.

    ``beta=1`` is full conversion. Interpolation is geometric, so partial
    normalization leaves residual speaker information in the output.
    The speaker id of the source is kept; ``meta["source_speaker"]`` records it.
    """
    src = u.speaker

    def towards(a, b):
        return a ** (1.0 - beta) * b ** beta

    spk = src.replace(formant_scale=float(towards(src.formant_scale, reference.formant_scale)),
                      f0_base=float(towards(src.f0_base, reference.f0_base)),
                      eq_curve=towards(src.eq_curve, reference.eq_curve))
    frames = render_frames(u.tokens, u.durations, spk, inventory, noise_std, rng, width)
    return Utterance(u.utt_id, frames, u.tokens, u.durations, spk, u.pair_id,
                     dict(u.meta, source_speaker=src.speaker_id, reference=reference.speaker_id))


def _subsample_rows(chunks, limit: int, rng: np.random.Generator) -> np.ndarray:
    x = np.concatenate(chunks, axis=0)
    if len(x) > limit:
        x = x[np.sort(rng.choice(len(x), size=limit, replace=False))]
    return x


def teacher_features(corpus: Corpus, mode: str, reference: Optional[SpeakerParams] = None,
                     beta: float = 0.8, seed: int = 0, model=None, layer: Optional[int] = None,
                     normalize_input: bool = False) -> dict:
    """Per-utterance feature matrices for the chosen teacher source."""
    if mode not in MODES:
        raise ContractError(f"unknown teacher mode {mode!r}; expected one of {MODES}")
    cfg = corpus.config
    needs_norm = mode == "normalized_frames" or (mode == "model_layer" and normalize_input)
    if needs_norm and reference is None:
        reference = choose_reference_speaker(corpus)
    feats = {}
    for u in corpus.utterances:
        x = u
        if needs_norm:
            x = normalize_speaker(u, reference, corpus.inventory, beta, cfg.noise_std,
                                  derive_rng(seed, "normalize", u.utt_id), cfg.bump_width)
        feats[u.utt_id] = x.frames
    if mode == "model_layer":
        if model is None:
            raise ContractError("model_layer teachers need a trained checkpoint")
        from .model import extract_layers
        ids = list(feats)
        outs = extract_layers(model, [feats[i] for i in ids])
        feats = {i: o[layer] for i, o in zip(ids, outs)}
    return feats


def generate_teacher_labels(corpus: Corpus, mode: str = "normalized_frames",
                            reference: Optional[SpeakerParams] = None, K: int = 100,
                            max_iters: int = 50, seed: int = 0, beta: float = 0.8,
                            model=None, layer: Optional[int] = None,
                            normalize_input: bool = False,
                            subsample: int = 50_000) -> TeacherLabels:
    """Fit a K-centre codebook on training features and label every utterance.

    For ``model_layer`` mode without an explicit ``layer``, the encoder layer
    with the best validation PNMI is used.
    """
    if mode == "model_layer" and model is None:
        raise ContractError("model_layer teachers need a trained checkpoint")
    if mode != "model_layer" and reference is None and mode == "normalized_frames":
        reference = choose_reference_speaker(corpus)
    if mode == "model_layer" and layer is None:
        from .metrics import best_layer_by_pnmi
        layer = best_layer_by_pnmi(model, corpus, K=K, seed=seed)
        log.info("model_layer teachers: best PNMI layer %d", layer)
    feats = teacher_features(corpus, mode, reference, beta, seed, model, layer, normalize_input)
    train = [feats[u.utt_id] for u in corpus.split("train")]
    x = _subsample_rows(train, subsample, derive_rng(seed, "codebook-subsample"))
    source = mode if mode != "model_layer" else f"model_layer({layer})"
    codebook = kmeans_fit(x, K, max_iters=max_iters, seed=seed, feature_source=source,
                          rng=derive_rng(seed, "kmeans"))
    labels = {uid: kmeans_assign(f, codebook) for uid, f in feats.items()}
    meta = {"beta": beta if mode != "raw_frames" else None, "seed": seed, "layer": layer,
            "reference": reference.speaker_id if reference is not None else None,
            "normalize_input": normalize_input}
    codebook.meta = dict(meta, mode=mode)
    return TeacherLabels(labels, codebook, mode, meta)
