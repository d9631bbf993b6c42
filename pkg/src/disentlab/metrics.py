"""
Probes and metrics over frozen representations and discrete unit sequences.

Layer numbering for probed activations: ``0..L`` are the encoder outputs
(0 is the projected input), ``L+1..L+P`` the predictor blocks.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Corpus
from .errors import ConfigError, ContractError, DimensionError
from .kmeans import Codebook, kmeans_assign, kmeans_fit
from .model import Model, extract_layers
from .rng import derive_rng

log = logging.getLogger(__name__)

METRIC_NAMES = ("sid_curve", "phone_probe", "pnmi", "abx_within", "abx_cross", "auto_bleu",
                "dtw_l0")


# ---------------------------------------------------------------------------
# linear probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    layer: Optional[int]
    task: str                 # "SID" or "phone"
    train_acc: float
    valid_acc: float
    test_acc: float
    num_classes: int
    best_iter: int = 0

    @property
    def accuracy(self) -> float:
        return self.test_acc

    @property
    def chance(self) -> float:
        return 1.0 / self.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chance"] = self.chance
        return d


def _accuracy(x, y, w, b) -> float:
    return float(np.mean(np.argmax(x @ w + b, axis=1) == y))


def linear_probe(train_x, train_y, valid_x, valid_y, test_x, test_y, num_classes=None,
                 l2: float = 1e-4, iters: int = 300, lr: float = 0.05, eval_every: int = 10,
                 layer: Optional[int] = None, task: str = "SID") -> ProbeResult:
    """Multinomial logistic regression, full-batch Adam from a zero init.

    Features are standardized with training statistics. The weights with the
    best validation accuracy (earliest on ties) are scored on the test set.
    """
    train_x, valid_x, test_x = (np.asarray(a, dtype=np.float64) for a in (train_x, valid_x, test_x))
    train_y, valid_y, test_y = (np.asarray(a, dtype=np.int64) for a in (train_y, valid_y, test_y))
    if len(train_x) != len(train_y) or len(valid_x) != len(valid_y) or len(test_x) != len(test_y):
        raise DimensionError("features and labels differ in length")
    seen = set(np.unique(train_y).tolist())
    unseen = sorted(set(np.unique(test_y).tolist()) - seen)
    if unseen:
        raise ContractError(f"test labels never seen in training: {unseen[:10]}")
    C = int(num_classes or max(train_y.max(), valid_y.max(), test_y.max()) + 1)

    mu = train_x.mean(0)
    sd = train_x.std(0)
    sd[sd < 1e-8] = 1.0
    train_x, valid_x, test_x = ((a - mu) / sd for a in (train_x, valid_x, test_x))
    n, d = train_x.shape
    onehot = np.zeros((n, C))
    onehot[np.arange(n), train_y] = 1.0

    w, b = np.zeros((d, C)), np.zeros(C)
    mw, vw, mb, vb = np.zeros_like(w), np.zeros_like(w), np.zeros_like(b), np.zeros_like(b)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    best = (-1.0, 0, w.copy(), b.copy())
    for it in range(iters + 1):
        if it % eval_every == 0 or it == iters:
            acc = _accuracy(valid_x, valid_y, w, b)
            if acc > best[0]:
                best = (acc, it, w.copy(), b.copy())
        if it == iters:
            break
        z = train_x @ w + b
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        g = (p - onehot) / n
        gw = train_x.T @ g + l2 * w
        gb = g.sum(0)
        t = it + 1
        for param, grad, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
            m *= beta1
            m += (1 - beta1) * grad
            v *= beta2
            v += (1 - beta2) * grad * grad
            param -= lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
    valid_acc, best_iter, w, b = best
    return ProbeResult(layer, task, _accuracy(train_x, train_y, w, b), valid_acc,
                       _accuracy(test_x, test_y, w, b), C, best_iter)


def _split_layers(model: Model, corpus: Corpus, splits=("train", "valid", "test")) -> dict:
    out = {}
    for name in splits:
        utts = corpus.split(name)
        out[name] = (utts, extract_layers(model, [u.frames for u in utts]))
    return out


def layerwise_sid_curve(model: Model, corpus: Corpus, layers: Optional[Sequence[int]] = None,
                        cache: Optional[dict] = None, **probe_kw) -> list:
    """SID probe accuracy of mean-pooled activations at every layer.

    Predictor layers are computed with the neutral speaker embedding.
    """
    data = cache if cache is not None else _split_layers(model, corpus)
    n_layers = len(data["train"][1][0])
    layers = range(n_layers) if layers is None else layers
    curve = []
    for l in layers:
        xs, ys = [], []
        for name in ("train", "valid", "test"):
            utts, acts = data[name]
            xs.append(np.stack([a[l].mean(0) for a in acts]))
            ys.append(np.array([u.speaker_id for u in utts]))
        curve.append(linear_probe(xs[0], ys[0], xs[1], ys[1], xs[2], ys[2],
                                  num_classes=corpus.num_speakers, layer=int(l), task="SID",
                                  **probe_kw))
    return curve


def phone_probe(model: Model, corpus: Corpus, layer: Optional[int] = None,
                cache: Optional[dict] = None, max_train_frames: int = 20000, seed: int = 0,
                **probe_kw) -> ProbeResult:
    """Per-frame phone probe on one layer (default: the encoder output)."""
    data = cache if cache is not None else _split_layers(model, corpus)
    layer = model.config.num_encoder_layers if layer is None else layer
    xs, ys = [], []
    for name in ("train", "valid", "test"):
        utts, acts = data[name]
        xs.append(np.concatenate([a[layer] for a in acts]))
        ys.append(np.concatenate([u.phone_labels for u in utts]))
    if len(xs[0]) > max_train_frames:
        keep = np.sort(derive_rng(seed, "phone-probe").choice(len(xs[0]), max_train_frames,
                                                              replace=False))
        xs[0], ys[0] = xs[0][keep], ys[0][keep]
    return linear_probe(xs[0], ys[0], xs[1], ys[1], xs[2], ys[2],
                        num_classes=corpus.config.num_phones, layer=layer, task="phone",
                        **probe_kw)


def label_histograms(label_seqs: Sequence[np.ndarray], K: int) -> np.ndarray:
    """Normalized unit-count histogram per sequence (bag of units)."""
    out = np.zeros((len(label_seqs), K))
    for i, s in enumerate(label_seqs):
        out[i] = np.bincount(np.asarray(s), minlength=K)[:K] / max(len(s), 1)
    return out


def label_sid_probe(labels: dict, corpus: Corpus, K: int, **probe_kw) -> ProbeResult:
    """SID probe on bag-of-units histograms: speaker information left in a labelling."""
    xs, ys = [], []
    for name in ("train", "valid", "test"):
        utts = corpus.split(name)
        xs.append(label_histograms([labels[u.utt_id] for u in utts], K))
        ys.append(np.array([u.speaker_id for u in utts]))
    return linear_probe(xs[0], ys[0], xs[1], ys[1], xs[2], ys[2],
                        num_classes=corpus.num_speakers, task="SID", **probe_kw)


def sid_drop_layer(curve: Sequence[ProbeResult], num_encoder_layers: int) -> int:
    """Encoder layer with the largest single-layer SID decrease (earliest on ties)."""
    acc = {r.layer: r.accuracy for r in curve}
    drops = [(acc[l - 1] - acc[l], -l) for l in range(1, num_encoder_layers + 1)]
    return -max(drops)[1]


# ---------------------------------------------------------------------------
# PNMI
# ---------------------------------------------------------------------------

def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def pnmi(cluster_labels, phone_labels) -> float:
    """I(phone; cluster) / H(phone) from the empirical joint distribution."""
    c = np.asarray(cluster_labels).ravel()
    p = np.asarray(phone_labels).ravel()
    if len(c) != len(p):
        raise DimensionError(f"{len(c)} cluster labels vs {len(p)} phone labels")
    _, pi = np.unique(p, return_inverse=True)
    _, ci = np.unique(c, return_inverse=True)
    joint = np.zeros((pi.max() + 1, ci.max() + 1))
    np.add.at(joint, (pi, ci), 1.0)
    hp = _entropy(joint.sum(1))
    if hp <= 0:
        raise ContractError("phone labels have zero entropy")
    mi = hp + _entropy(joint.sum(0)) - _entropy(joint.ravel())
    return float(min(max(mi / hp, 0.0), 1.0))


def corpus_pnmi(labels: dict, utts) -> float:
    return pnmi(np.concatenate([labels[u.utt_id] for u in utts]),
                np.concatenate([u.phone_labels for u in utts]))


def best_layer_by_pnmi(model: Model, corpus: Corpus, K: int = 100, seed: int = 0,
                       subsample: int = 10000, max_iters: int = 50,
                       layers: Optional[Sequence[int]] = None) -> int:
    """Encoder layer whose K-means units have the highest validation PNMI (ties: lower)."""
    data = _split_layers(model, corpus, ("train", "valid"))
    L = model.config.num_encoder_layers
    layers = range(1, L + 1) if layers is None else layers
    best = None
    for l in layers:
        train = np.concatenate([a[l] for a in data["train"][1]])
        if len(train) > subsample:
            train = train[np.sort(derive_rng(seed, "pnmi-layer", l).choice(len(train), subsample,
                                                                            replace=False))]
        cb = kmeans_fit(train, K, max_iters=max_iters, seed=seed, feature_source=f"layer{l}",
                        rng=derive_rng(seed, "pnmi-kmeans", l))
        utts, acts = data["valid"]
        score = pnmi(np.concatenate([kmeans_assign(a[l], cb) for a in acts]),
                     np.concatenate([u.phone_labels for u in utts]))
        log.info("layer %d valid PNMI %.4f", l, score)
        if best is None or score > best[0]:
            best = (score, l)
    return best[1]


def features_from_layer(model: Model, corpus: Corpus, layer: int, K: int = 100, seed: int = 0,
                        subsample: int = 20000, max_iters: int = 50):
    """Quantize one layer of every utterance with a codebook fit on training frames.

    Returns ``(labels by utt_id, codebook)``.
    """
    utts = corpus.utterances
    acts = extract_layers(model, [u.frames for u in utts], include_predictor=False)
    by_id = {u.utt_id: a[layer] for u, a in zip(utts, acts)}
    train = np.concatenate([by_id[u.utt_id] for u in corpus.split("train")])
    if len(train) > subsample:
        train = train[np.sort(derive_rng(seed, "unit-subsample").choice(len(train), subsample,
                                                                        replace=False))]
    cb = kmeans_fit(train, K, max_iters=max_iters, seed=seed, feature_source=f"layer{layer}",
                    rng=derive_rng(seed, "unit-kmeans"))
    return {uid: kmeans_assign(x, cb) for uid, x in by_id.items()}, cb


# ---------------------------------------------------------------------------
# ABX
# ---------------------------------------------------------------------------

def angular_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """arccos(cosine similarity) / pi between every row of ``a`` and of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    nb = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return np.arccos(np.clip(na @ nb.T, -1.0, 1.0)) / np.pi


def dtw_cost(cost: np.ndarray) -> float:
    """Minimum summed cost of a monotone alignment (match/insert/delete steps)."""
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    return float(acc[n, m])


def dtw_angular(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        raise ContractError("empty segment")
    return dtw_cost(angular_distances(a, b))


@dataclass
class AbxTask:
    triplets: list            # (a, b, x) segments, each (n_frames, dim)
    categories: list          # (category of a and x, category of b)
    mode: str                 # "within" or "cross"
    speakers: list = field(default_factory=list)   # (speaker of a/b, speaker of x)

    def __len__(self) -> int:
        return len(self.triplets)


def abx_score(task: AbxTask, distance: Callable = dtw_angular) -> float:
    """Fraction of triplets with d(x, a) < d(x, b); ties count one half."""
    if len(task) == 0:
        raise ContractError("empty ABX task set")
    total = 0.0
    for a, b, x in task.triplets:
        da, db = distance(x, a), distance(x, b)
        total += 1.0 if da < db else 0.5 if da == db else 0.0
    return total / len(task)


def phone_segments(utts) -> dict:
    """(speaker, phone) -> list of (utterance index, start, end) spans."""
    index: dict = {}
    for i, u in enumerate(utts):
        start = 0
        for tok, dur in zip(u.tokens, u.durations):
            index.setdefault((u.speaker_id, int(tok)), []).append((i, start, start + int(dur)))
            start += int(dur)
    return index


def build_abx_task(utts, features: Sequence[np.ndarray], mode: str, num_triplets: int,
                   rng: np.random.Generator) -> AbxTask:
    """Sample triplets from ground-truth phone spans.

    ``a`` and ``b`` come from one speaker; ``x`` shares the phone of ``a`` and
    comes from that speaker (within) or from another speaker (cross).
    """
    if mode not in ("within", "cross"):
        raise ContractError(f"unknown ABX mode {mode!r}")
    index = phone_segments(utts)
    speakers = sorted({s for s, _ in index})
    phones_of = {s: sorted(p for t, p in index if t == s) for s in speakers}

    def seg(entry):
        i, s, e = entry
        return features[i][s:e]

    task = AbxTask([], [], mode)
    attempts = 0
    while len(task) < num_triplets:
        attempts += 1
        if attempts > 50 * num_triplets:
            raise ContractError(f"could not sample {num_triplets} {mode} triplets")
        s = speakers[rng.integers(len(speakers))]
        if len(phones_of[s]) < 2:
            continue
        pa, pb = rng.choice(phones_of[s], size=2, replace=False)
        a_pool = index[(s, int(pa))]
        if mode == "within":
            if len(a_pool) < 2:
                continue
            ia, ix = rng.choice(len(a_pool), size=2, replace=False)
            a, x, sx = a_pool[ia], a_pool[ix], s
        else:
            others = [t for t in speakers if t != s and (t, int(pa)) in index]
            if not others:
                continue
            sx = others[rng.integers(len(others))]
            x_pool = index[(sx, int(pa))]
            a, x = a_pool[rng.integers(len(a_pool))], x_pool[rng.integers(len(x_pool))]
        b_pool = index[(s, int(pb))]
        b = b_pool[rng.integers(len(b_pool))]
        task.triplets.append((seg(a), seg(b), seg(x)))
        task.categories.append((int(pa), int(pb)))
        task.speakers.append((s, sx))
    return task


# ---------------------------------------------------------------------------
# rank labels and DTW-L0
# ---------------------------------------------------------------------------

@dataclass
class RankMap:
    ranks: np.ndarray     # cluster id -> rank
    ratios: np.ndarray    # cluster id -> normalized group-B occurrence ratio

    def __call__(self, seq) -> np.ndarray:
        return self.ranks[np.asarray(seq, dtype=np.int64)]


def rank_labels_by_group(label_seqs: Sequence[np.ndarray], groups: Sequence[str], K: int,
                         group_b: str = "B") -> RankMap:
    """Rank clusters by how much more often group ``group_b`` uses them.

    The ratio of cluster k is ``fB / (fA + fB)`` with ``f`` the cluster's
    frequency within each group; unused clusters get 0.5. Ranks ascend with
    the ratio, ties broken by cluster id.
    """
    nA, nB = np.zeros(K), np.zeros(K)
    for s, g in zip(label_seqs, groups):
        c = np.bincount(np.asarray(s, dtype=np.int64), minlength=K)[:K]
        if g == group_b:
            nB += c
        else:
            nA += c
    if nA.sum() == 0 or nB.sum() == 0:
        raise ContractError("both speaker groups need at least one labelled frame")
    fA, fB = nA / nA.sum(), nB / nB.sum()
    den = fA + fB
    ratios = np.where(den > 0, fB / np.where(den > 0, den, 1.0), 0.5)
    order = np.lexsort((np.arange(K), ratios))
    ranks = np.empty(K, dtype=np.int64)
    ranks[order] = np.arange(K)
    return RankMap(ranks, ratios)


def dtw_l0(seq_a, seq_b, rank_map: Optional[RankMap] = None) -> float:
    """Mismatch rate along the DTW alignment of two rank sequences.

    Among minimum-cost alignments the shortest one is used; returns
    cost / alignment length.
    """
    a = np.asarray(seq_a)
    b = np.asarray(seq_b)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("empty label sequence")
    if rank_map is not None:
        a, b = rank_map(a), rank_map(b)
    n, m = len(a), len(b)
    mism = (a[:, None] != b[None, :]).astype(np.int64)
    INF = (1 << 62, 0)
    acc = [[INF] * (m + 1) for _ in range(n + 1)]
    acc[0][0] = (0, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c, l = min(acc[i - 1][j - 1], acc[i - 1][j], acc[i][j - 1])
            acc[i][j] = (c + int(mism[i - 1, j - 1]), l + 1)
    cost, length = acc[n][m]
    return cost / length


def parallel_dtw_l0(labels: dict, corpus: Corpus, K: int, rank_split: str = "train") -> float:
    """Average DTW-L0 over same-token cross-group utterance pairs."""
    utts = corpus.split(rank_split)
    rm = rank_labels_by_group([labels[u.utt_id] for u in utts], [u.speaker.group for u in utts], K)
    pairs = corpus.parallel_pairs()
    if not pairs:
        raise ContractError("corpus has no parallel pairs")
    return float(np.mean([dtw_l0(labels[a.utt_id], labels[b.utt_id], rm) for a, b in pairs]))


# ---------------------------------------------------------------------------
# auto-BLEU
# ---------------------------------------------------------------------------

def auto_bleu(seq, k: int) -> float:
    """Fraction of k-gram positions whose k-gram occurs elsewhere in the sequence."""
    seq = list(seq)
    if k < 1 or len(seq) < k:
        raise ContractError(f"sequence of length {len(seq)} has no {k}-grams")
    grams = [tuple(seq[i:i + k]) for i in range(len(seq) - k + 1)]
    counts: dict = {}
    for g in grams:
        counts[g] = counts.get(g, 0) + 1
    return sum(counts[g] > 1 for g in grams) / len(grams)


def dedup(seq) -> list:
    """Collapse runs of repeated labels."""
    out = []
    for s in seq:
        if not out or out[-1] != s:
            out.append(s)
    return out


def corpus_auto_bleu(label_seqs, k: int = 2, deduplicate: bool = True) -> float:
    vals = []
    for s in label_seqs:
        s = dedup(s) if deduplicate else list(s)
        if len(s) >= k:
            vals.append(auto_bleu(s, k))
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def check_metric_names(names) -> list:
    bad = [n for n in names if n not in METRIC_NAMES]
    if bad:
        raise ConfigError(f"unknown metric(s) {bad}; valid names: {list(METRIC_NAMES)}",
                          path="metrics")
    return list(names)


def evaluate(model: Model, corpus: Corpus, metrics: Sequence[str] = METRIC_NAMES, seed: int = 0,
             K: int = 100, unit_layer: Optional[int] = None, abx_triplets: int = 1000) -> dict:
    """Compute the requested metrics; returns a JSON-ready report."""
    metrics = check_metric_names(metrics)
    L = model.config.num_encoder_layers
    unit_layer = L if unit_layer is None else unit_layer
    report = {"metrics": {}, "curves": [], "unit_layer": unit_layer, "seed": seed, "K": K}
    cache = None
    if {"sid_curve", "phone_probe"} & set(metrics):
        cache = _split_layers(model, corpus)
    if "sid_curve" in metrics:
        curve = layerwise_sid_curve(model, corpus, cache=cache)
        report["sid_curve"] = [r.to_dict() for r in curve]
        report["curves"] += [{"layer": r.layer, "task": "SID", "accuracy": r.accuracy}
                             for r in curve]
        report["metrics"]["sid_final"] = next(r.accuracy for r in curve if r.layer == L)
        report["metrics"]["sid_drop_layer"] = sid_drop_layer(curve, L)
    if "phone_probe" in metrics:
        res = phone_probe(model, corpus, cache=cache, seed=seed)
        report["phone_probe"] = res.to_dict()
        report["metrics"]["phone_acc"] = res.accuracy
    if {"abx_within", "abx_cross"} & set(metrics):
        test = corpus.split("test")
        feats = [a[unit_layer] for a in extract_layers(model, [u.frames for u in test],
                                                       include_predictor=False)]
        for mode in ("within", "cross"):
            if f"abx_{mode}" in metrics:
                task = build_abx_task(test, feats, mode, abx_triplets, derive_rng(seed, "abx", mode))
                report["metrics"][f"abx_{mode}"] = abx_score(task)
    if {"pnmi", "auto_bleu", "dtw_l0"} & set(metrics):
        labels, _ = features_from_layer(model, corpus, unit_layer, K=K, seed=seed)
        if "pnmi" in metrics:
            report["metrics"]["pnmi"] = corpus_pnmi(labels, corpus.split("test"))
        if "auto_bleu" in metrics:
            report["metrics"]["auto_bleu"] = corpus_auto_bleu(
                [labels[u.utt_id] for u in corpus.split("test")], k=2)
        if "dtw_l0" in metrics:
            report["metrics"]["dtw_l0"] = parallel_dtw_l0(labels, corpus, K)
    return report


def curves_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("layer", "task", "accuracy"))
    for r in report.get("curves", []):
        w.writerow((r["layer"], r["task"], repr(float(r["accuracy"]))))
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)


def compare_reports(a: dict, b: dict, name_a: str = "a", name_b: str = "b") -> list:
    """Side-by-side rows (metric, value_a, value_b, relative change of a vs b).

    Relative change is ``(b - a) / b``; for SID rows this is the relative
    reduction of speaker information achieved by ``a``.
    """
    rows = []
    keys = sorted(set(a.get("metrics", {})) | set(b.get("metrics", {})))
    for k in keys:
        va, vb = a["metrics"].get(k), b["metrics"].get(k)
        rel = None
        if isinstance(va, float) and isinstance(vb, float) and vb != 0:
            rel = (vb - va) / vb
        rows.append({"metric": k, name_a: va, name_b: vb, "relative_reduction": rel})
    la = {r["layer"]: r["accuracy"] for r in a.get("curves", []) if r["task"] == "SID"}
    lb = {r["layer"]: r["accuracy"] for r in b.get("curves", []) if r["task"] == "SID"}
    for l in sorted(set(la) & set(lb)):
        rel = (lb[l] - la[l]) / lb[l] if lb[l] else None
        rows.append({"metric": f"sid_layer{l}", name_a: la[l], name_b: lb[l],
                     "relative_reduction": rel})
    return rows
