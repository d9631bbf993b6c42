"""
Synthetic speech-like corpus with known content and speaker factors.

Each frame is a spectrum over ``feat_dim`` bins on a unit frequency axis: one
Gaussian bump per formant of the current phone (centres scaled by the
speaker's formant scale), one pitch bump at the speaker's F0, the whole
multiplied bin-wise by the speaker's equalizer curve, plus white noise.
Content lives in the relative formant positions; speaker identity lives in
the absolute scale, the pitch and the equalizer.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError
from .rng import derive_rng

SCHEMA_VERSION = 1
CORPUS_FILE = "corpus.json"

# Speakers and perturbations each scale formants by up to 1.4; the inventory
# keeps every centre inside (0, 1) under the compounded factor.
MAX_SCALE = 1.4
SPEAKER_SCALE = 1.3
FORMANT_LO, FORMANT_HI = 0.16, 0.5
MIN_FORMANT_GAP = 0.08
F0_RANGES = {"A": (0.035, 0.055), "B": (0.07, 0.095)}
EQ_RANGE = (0.5, 2.0)
PITCH_AMP = 1.0


@dataclass
class CorpusConfig:
    num_phones: int = 30
    feat_dim: int = 40
    num_speakers: int = 24
    utterances_per_speaker: int = 40
    valid_per_speaker: int = 5
    test_per_speaker: int = 5
    min_dur: int = 2
    max_dur: int = 5
    min_tokens: int = 10
    max_tokens: int = 16
    num_formants: int = 3
    noise_std: float = 0.05
    bump_width: float = 0.03
    num_parallel_pairs: int = 48
    rng_seed: int = 0

    def validate(self) -> "CorpusConfig":
        checks = [
            ("num_phones", self.num_phones >= 2, "must be >= 2"),
            ("num_speakers", self.num_speakers >= 2, "must be >= 2"),
            ("min_dur", self.min_dur >= 1, "must be >= 1"),
            ("max_dur", self.max_dur >= self.min_dur, "must be >= min_dur"),
            ("min_tokens", self.min_tokens >= 1, "must be >= 1"),
            ("max_tokens", self.max_tokens >= self.min_tokens, "must be >= min_tokens"),
            ("feat_dim", self.feat_dim >= 8, "must be >= 8"),
            ("num_formants", 1 <= self.num_formants <= 4, "must be in [1, 4]"),
            ("noise_std", self.noise_std >= 0, "must be >= 0"),
            ("utterances_per_speaker",
             self.utterances_per_speaker > self.valid_per_speaker + self.test_per_speaker,
             "must exceed valid_per_speaker + test_per_speaker"),
            ("num_parallel_pairs", self.num_parallel_pairs >= 0, "must be >= 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(msg, path=name)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown field(s) {unknown}", path="corpus")
        return cls(**d).validate()


@dataclass
class PhoneInventory:
    positions: np.ndarray   # (num_phones, num_formants), strictly increasing per row
    amplitudes: np.ndarray  # (num_phones, num_formants)

    @property
    def num_phones(self) -> int:
        return self.positions.shape[0]


@dataclass
class SpeakerParams:
    speaker_id: int
    formant_scale: float
    f0_base: float
    eq_curve: np.ndarray
    group: str

    def replace(self, **kw) -> "SpeakerParams":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {"speaker_id": self.speaker_id, "formant_scale": self.formant_scale,
                "f0_base": self.f0_base, "eq_curve": [float(g) for g in self.eq_curve],
                "group": self.group}

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerParams":
        return cls(int(d["speaker_id"]), float(d["formant_scale"]), float(d["f0_base"]),
                   np.asarray(d["eq_curve"], dtype=np.float64), str(d["group"]))


@dataclass
class Utterance:
    utt_id: str
    frames: np.ndarray       # (T, D) float32
    tokens: np.ndarray       # phone ids
    durations: np.ndarray    # frames per token
    speaker: SpeakerParams
    pair_id: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def phone_labels(self) -> np.ndarray:
        return np.repeat(self.tokens, self.durations)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def speaker_id(self) -> int:
        return self.speaker.speaker_id


@dataclass
class Corpus:
    config: CorpusConfig
    inventory: PhoneInventory
    speakers: list
    utterances: list
    splits: dict  # split name -> list of utterance indices

    def split(self, name: str) -> list:
        return [self.utterances[i] for i in self.splits[name]]

    @property
    def num_speakers(self) -> int:
        return len(self.speakers)

    def parallel_pairs(self) -> list:
        """(group-A utterance, group-B utterance) pairs sharing one token sequence."""
        by_pair: dict = {}
        for u in self.split("parallel"):
            by_pair.setdefault(u.pair_id, {})[u.speaker.group] = u
        return [(d["A"], d["B"]) for _, d in sorted(by_pair.items()) if len(d) == 2]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.splits):
            h.update(name.encode())
            for i in self.splits[name]:
                u = self.utterances[i]
                h.update(u.utt_id.encode())
                h.update(np.ascontiguousarray(u.frames).tobytes())
                h.update(u.tokens.astype(np.int64).tobytes())
                h.update(u.durations.astype(np.int64).tobytes())
                h.update(np.int64(u.speaker_id).tobytes())
        for s in self.speakers:
            h.update(json.dumps(s.to_dict(), sort_keys=True).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# generative pieces
# ---------------------------------------------------------------------------

def random_eq_curve(rng: np.random.Generator, dim: int, strength: float = 0.35) -> np.ndarray:
    """Smooth random gains: exp of a low-order cosine mixture, clipped to [0.5, 2]."""
    x = np.linspace(0.0, 1.0, dim)
    log_gain = np.zeros(dim)
    for order in (1, 2, 3):
        amp = rng.uniform(-strength, strength) / order
        phase = rng.uniform(0.0, 2 * np.pi)
        log_gain += amp * np.cos(np.pi * order * x + phase)
    return np.clip(np.exp(log_gain), *EQ_RANGE)


def build_inventory(config: CorpusConfig, rng: np.random.Generator) -> PhoneInventory:
    """Draw ``num_phones`` distinct formant prototypes inside the safe band."""
    nf = config.num_formants
    positions, amplitudes = [], []
    while len(positions) < config.num_phones:
        span = FORMANT_HI - FORMANT_LO - MIN_FORMANT_GAP * (nf - 1)
        cuts = np.sort(rng.uniform(0.0, span, size=nf))
        pos = FORMANT_LO + cuts + MIN_FORMANT_GAP * np.arange(nf)
        if any(np.max(np.abs(pos - p)) < 0.02 for p in positions):
            continue
        positions.append(pos)
        amplitudes.append(rng.uniform(0.5, 1.0, size=nf))
    return PhoneInventory(np.array(positions), np.array(amplitudes))


def sample_speaker(config: CorpusConfig, rng: np.random.Generator, group: str,
                   speaker_id: int = 0) -> SpeakerParams:
    if group not in F0_RANGES:
        raise ValueError(f"unknown speaker group {group!r}")
    scale = float(np.exp(rng.uniform(-np.log(SPEAKER_SCALE), np.log(SPEAKER_SCALE))))
    f0 = float(rng.uniform(*F0_RANGES[group]))
    eq = random_eq_curve(rng, config.feat_dim)
    return SpeakerParams(speaker_id, scale, f0, eq, group)


def _bumps(centres: np.ndarray, amps: np.ndarray, dim: int, width: float) -> np.ndarray:
    x = np.linspace(0.0, 1.0, dim)
    z = (x[None, :] - centres[..., None]) / width
    return (amps[..., None] * np.exp(-0.5 * z * z)).sum(axis=-2)


def phone_envelopes(inventory: PhoneInventory, formant_scale: float, dim: int,
                    width: float) -> np.ndarray:
    """Formant part of the spectrum for every phone, shape (num_phones, dim)."""
    centres = inventory.positions * formant_scale
    if centres.max() >= 1.0 or centres.min() <= 0.0:
        raise ContractError(f"formant scale {formant_scale:.4f} pushes centres outside (0, 1)")
    return _bumps(centres, inventory.amplitudes, dim, width)


def render_frames(tokens, durations, speaker: SpeakerParams, inventory: PhoneInventory,
                  noise_std: float, rng: Optional[np.random.Generator],
                  width: float = 0.03) -> np.ndarray:
    """Render a (T, D) float32 frame matrix for a phone sequence and a speaker."""
    tokens = np.asarray(tokens, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if np.any(durations < 1):
        raise ContractError("durations must be >= 1")
    dim = len(speaker.eq_curve)
    env = phone_envelopes(inventory, speaker.formant_scale, dim, width)
    pitch = _bumps(np.array([speaker.f0_base]), np.array([PITCH_AMP]), dim, width)
    frames = (env[np.repeat(tokens, durations)] + pitch) * speaker.eq_curve
    if noise_std > 0:
        if rng is None:
            raise ContractError("noise_std > 0 needs an rng")
        frames = frames + rng.normal(0.0, noise_std, size=frames.shape)
    return frames.astype(np.float32)


def _draw_tokens(config: CorpusConfig, rng: np.random.Generator):
    n = int(rng.integers(config.min_tokens, config.max_tokens + 1))
    tokens = rng.integers(0, config.num_phones, size=n)
    return tokens, _draw_durations(config, rng, n)


def _draw_durations(config: CorpusConfig, rng: np.random.Generator, n: int):
    return rng.integers(config.min_dur, config.max_dur + 1, size=n)


def build_corpus(config: Optional[CorpusConfig] = None) -> Corpus:
    """Generate speakers, utterances and the train/valid/test/parallel splits.

    Every speaker contributes to train, valid and test, so the speaker probe
    is always evaluated on seen speakers. Parallel pairs render one token
    sequence with a group-A and a group-B speaker at independently drawn
    durations.
    """
    config = (config or CorpusConfig()).validate()
    seed = config.rng_seed
    inventory = build_inventory(config, derive_rng(seed, "inventory"))
    half = config.num_speakers // 2
    speakers = [
        sample_speaker(config, derive_rng(seed, "speaker", s), "A" if s < half else "B", s)
        for s in range(config.num_speakers)
    ]

    utterances, splits = [], {"train": [], "valid": [], "test": [], "parallel": []}
    n_train = config.utterances_per_speaker - config.valid_per_speaker - config.test_per_speaker
    for spk in speakers:
        for i in range(config.utterances_per_speaker):
            rng = derive_rng(seed, "utt", spk.speaker_id, i)
            tokens, durs = _draw_tokens(config, rng)
            frames = render_frames(tokens, durs, spk, inventory, config.noise_std, rng,
                                   config.bump_width)
            split = ("train" if i < n_train else
                     "valid" if i < n_train + config.valid_per_speaker else "test")
            splits[split].append(len(utterances))
            utterances.append(Utterance(f"s{spk.speaker_id:03d}_u{i:03d}", frames, tokens,
                                        durs, spk))

    group_a = [s for s in speakers if s.group == "A"]
    group_b = [s for s in speakers if s.group == "B"]
    for p in range(config.num_parallel_pairs):
        rng = derive_rng(seed, "parallel", p)
        tokens, _ = _draw_tokens(config, rng)
        for spk in (group_a[rng.integers(len(group_a))], group_b[rng.integers(len(group_b))]):
            durs = _draw_durations(config, rng, len(tokens))
            frames = render_frames(tokens, durs, spk, inventory, config.noise_std, rng,
                                   config.bump_width)
            splits["parallel"].append(len(utterances))
            utterances.append(Utterance(f"p{p:03d}_{spk.group}", frames, tokens, durs, spk,
                                        pair_id=p))
    return Corpus(config, inventory, speakers, utterances, splits)


# ---------------------------------------------------------------------------
# on-disk format: <dir>/corpus.json + <dir>/frames_<split>.bin (float32 LE rows)
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": dataclasses.asdict(corpus.config),
        "seed": corpus.config.rng_seed,
        "feat_dim": corpus.config.feat_dim,
        "inventory": {"positions": corpus.inventory.positions.tolist(),
                      "amplitudes": corpus.inventory.amplitudes.tolist()},
        "speakers": [s.to_dict() for s in corpus.speakers],
        "splits": {},
        "digest": corpus.digest(),
    }
    for name, idx in corpus.splits.items():
        fname = f"frames_{name}.bin"
        entries, offset = [], 0
        with open(os.path.join(out_dir, fname), "wb") as fh:
            for i in idx:
                u = corpus.utterances[i]
                fh.write(np.ascontiguousarray(u.frames, dtype="<f4").tobytes())
                entries.append({"utt_id": u.utt_id, "speaker_id": u.speaker_id,
                                "offset": offset, "num_frames": u.num_frames,
                                "tokens": u.tokens.tolist(), "durations": u.durations.tolist(),
                                "pair_id": u.pair_id})
                offset += u.num_frames
        manifest["splits"][name] = {"frames_file": fname, "utterances": entries}
    path = os.path.join(out_dir, CORPUS_FILE)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def load_corpus(in_dir: str) -> Corpus:
    path = os.path.join(in_dir, CORPUS_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no corpus index at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported corpus schema {manifest.get('schema_version')}",
                          path="schema_version")
    config = CorpusConfig.from_dict(manifest["config"])
    inventory = PhoneInventory(np.asarray(manifest["inventory"]["positions"]),
                               np.asarray(manifest["inventory"]["amplitudes"]))
    speakers = [SpeakerParams.from_dict(d) for d in manifest["speakers"]]
    dim = manifest["feat_dim"]
    utterances, splits = [], {}
    for name, spec in manifest["splits"].items():
        raw = np.fromfile(os.path.join(in_dir, spec["frames_file"]), dtype="<f4")
        raw = raw.reshape(-1, dim).astype(np.float32)
        splits[name] = []
        for e in spec["utterances"]:
            frames = raw[e["offset"]:e["offset"] + e["num_frames"]].copy()
            splits[name].append(len(utterances))
            utterances.append(Utterance(e["utt_id"], frames, np.asarray(e["tokens"]),
                                        np.asarray(e["durations"]), speakers[e["speaker_id"]],
                                        pair_id=e["pair_id"]))
    corpus = Corpus(config, inventory, speakers, utterances, splits)
    if corpus.digest() != manifest["digest"]:
        raise ContractError(f"corpus at {in_dir} does not match its manifest digest")
    return corpus
