import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disentlab import metrics as M
from disentlab.corpus import CorpusConfig, build_corpus
from disentlab.errors import ConfigError, ContractError, DimensionError
from disentlab.model import Model, ModelConfig
from disentlab.rng import derive_rng


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def test_probe_separable_two_class(rng):
    def make(n):
        y = rng.integers(0, 2, n)
        x = rng.normal(size=(n, 3))
        x[:, 0] += np.where(y == 1, 5.0, -5.0)
        return x, y
    r = M.linear_probe(*make(200), *make(100), *make(100))
    assert r.accuracy == 1.0 and r.chance == 0.5


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(7)
    C, n = 4, 2000
    x = rng.normal(size=(3 * n, 10))
    y = rng.permutation(np.arange(3 * n) % C)
    r = M.linear_probe(x[:n], y[:n], x[n:2 * n], y[n:2 * n], x[2 * n:], y[2 * n:], num_classes=C)
    sigma = math.sqrt(0.25 * 0.75 / n)
    assert abs(r.accuracy - 0.25) < 3 * sigma


def test_probe_identical_features_gives_majority(rng):
    y = np.array([0] * 30 + [1] * 60 + [2] * 10)
    x = np.ones((100, 4))
    r = M.linear_probe(x, y, x, y, x, y)
    assert r.accuracy == pytest.approx(0.6)


def test_probe_on_generative_one_hots():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 6, 300)
    x = np.eye(6)[y]
    r = M.linear_probe(x[:200], y[:200], x[200:250], y[200:250], x[250:], y[250:])
    assert r.accuracy == 1.0


def test_probe_errors(rng):
    x = rng.normal(size=(10, 2))
    with pytest.raises(ContractError):
        M.linear_probe(x, np.zeros(10, int), x, np.zeros(10, int), x, np.ones(10, int))
    with pytest.raises(DimensionError):
        M.linear_probe(x, np.zeros(9, int), x, np.zeros(10, int), x, np.zeros(10, int))


def test_probe_result_dict():
    d = M.ProbeResult(2, "SID", 1.0, 0.5, 0.25, 4).to_dict()
    assert d["chance"] == 0.25 and d["layer"] == 2 and d["test_acc"] == 0.25


# ---------------------------------------------------------------------------
# SID curves
# ---------------------------------------------------------------------------

def fake_curve(accs):
    return [M.ProbeResult(l, "SID", a, a, a, 10) for l, a in enumerate(accs)]


def test_sid_drop_layer_picks_largest_single_step():
    assert M.sid_drop_layer(fake_curve([0.9, 0.85, 0.5, 0.45, 0.4, 0.6]), 4) == 2
    assert M.sid_drop_layer(fake_curve([1.0, 0.75, 0.5, 0.25]), 3) == 1


def test_untrained_curve_is_roughly_flat(small_corpus):
    cfg = ModelConfig(input_dim=small_corpus.config.feat_dim, num_speakers=small_corpus.num_speakers)
    model = Model.create(cfg, derive_rng(0, "init"))
    curve = M.layerwise_sid_curve(model, small_corpus)
    assert len(curve) == cfg.num_encoder_layers + cfg.predictor_layers + 1
    base = curve[0].accuracy
    assert all(abs(r.accuracy - base) <= 0.15 for r in curve)


# ---------------------------------------------------------------------------
# PNMI
# ---------------------------------------------------------------------------

def test_pnmi_identity_is_exactly_one(rng):
    p = rng.integers(0, 30, 5000)
    assert M.pnmi(p, p) == 1.0
    assert M.pnmi((p * 7 + 3) % 30, p) == 1.0


def test_pnmi_independent_product_labels():
    phones, clusters = np.meshgrid(np.arange(30), np.arange(100), indexing="ij")
    assert M.pnmi(clusters.ravel(), phones.ravel()) < 0.02
    assert M.pnmi(clusters.ravel(), phones.ravel()) == pytest.approx(0.0, abs=1e-12)


def test_pnmi_hand_case():
    phones = [0, 0, 0, 1, 1, 1]
    clusters = [0, 0, 1, 0, 1, 1]
    # joint counts [[2, 1], [1, 2]] over six frames
    hp = math.log(2)
    hc = math.log(2)
    hpc = -(2 * (2 / 6) * math.log(2 / 6) + 2 * (1 / 6) * math.log(1 / 6))
    expected = (hp + hc - hpc) / hp
    assert M.pnmi(clusters, phones) == pytest.approx(expected, abs=1e-12)
    assert M.pnmi(clusters, phones) == pytest.approx(0.0817, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 6)), min_size=3, max_size=60))
def test_pnmi_relabel_invariance(pairs):
    p = np.array([a for a, _ in pairs])
    c = np.array([b for _, b in pairs])
    if len(set(p.tolist())) < 2:
        return
    perm_p, perm_c = np.array([3, 0, 4, 1, 2]), np.array([6, 2, 5, 0, 1, 4, 3])
    base = M.pnmi(c, p)
    assert 0.0 <= base <= 1.0
    assert M.pnmi(perm_c[c], perm_p[p]) == pytest.approx(base, abs=1e-12)


def test_pnmi_errors():
    with pytest.raises(DimensionError):
        M.pnmi([0, 1], [0, 1, 1])
    with pytest.raises(ContractError):
        M.pnmi([0, 1, 2], [4, 4, 4])


# ---------------------------------------------------------------------------
# best layer by PNMI
# ---------------------------------------------------------------------------

def _fake_extract(corpus, good_layer, num_layers, num_phones):
    by_frames = {id(u.frames): u for u in corpus.utterances}

    def extract(model, frames_list, batch_size=32, include_predictor=True):
        out = []
        for fr in frames_list:
            u = by_frames[id(fr)]
            rng = np.random.default_rng(len(u.phone_labels))
            layers = [rng.normal(size=(len(u.phone_labels), 4)) for _ in range(num_layers + 1)]
            layers[good_layer] = np.eye(num_phones)[u.phone_labels]
            out.append(layers)
        return out
    return extract


def test_best_layer_finds_one_hot_layer(small_corpus, monkeypatch):
    cfg = ModelConfig(input_dim=small_corpus.config.feat_dim, num_encoder_layers=4,
                      num_speakers=small_corpus.num_speakers)
    model = Model.create(cfg, derive_rng(0, "init"))
    monkeypatch.setattr(M, "extract_layers",
                        _fake_extract(small_corpus, 2, 4, small_corpus.config.num_phones))
    K = small_corpus.config.num_phones
    assert M.best_layer_by_pnmi(model, small_corpus, K=K) == 2
    assert M.best_layer_by_pnmi(model, small_corpus, K=K) == 2


def test_best_layer_single_layer_model(small_corpus):
    cfg = ModelConfig(input_dim=small_corpus.config.feat_dim, num_encoder_layers=1,
                      contrastive_layer=1, num_speakers=small_corpus.num_speakers)
    model = Model.create(cfg, derive_rng(0, "init"))
    assert M.best_layer_by_pnmi(model, small_corpus, K=8) == 1


# ---------------------------------------------------------------------------
# ABX
# ---------------------------------------------------------------------------

def brute_force_dtw(cost):
    """Minimum over every monotone alignment path, enumerated explicitly."""
    n, m = cost.shape
    best = [math.inf]

    def walk(i, j, total):
        total = cost[i, j] + total
        if (i, j) == (n - 1, m - 1):
            best[0] = min(best[0], total)
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, total)
        if i + 1 < n:
            walk(i + 1, j, total)
        if j + 1 < m:
            walk(i, j + 1, total)
    walk(0, 0, 0.0)
    return best[0]


def brute_force_distance(a, b):
    return brute_force_dtw(M.angular_distances(a, b))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_dtw_matches_path_enumeration(n, m, seed):
    cost = np.random.default_rng(seed).random((n, m))
    assert M.dtw_cost(cost) == brute_force_dtw(cost)


def test_abx_hand_built_set_matches_enumeration_oracle():
    rng = np.random.default_rng(11)
    triplets = []
    for la, lb, lx in [(3, 4, 5), (2, 5, 3), (5, 1, 4)]:
        a = rng.normal(size=(la, 3))
        b = rng.normal(size=(lb, 3))
        x = a[np.linspace(0, la - 1, lx).round().astype(int)] + 0.3 * rng.normal(size=(lx, 3))
        triplets.append((a, b, x))
    task = M.AbxTask(triplets, [(0, 1)] * 3, "within")
    oracle = np.mean([1.0 if brute_force_distance(x, a) < brute_force_distance(x, b) else
                      0.5 if brute_force_distance(x, a) == brute_force_distance(x, b) else 0.0
                      for a, b, x in triplets])
    assert M.abx_score(task) == oracle
    assert M.abx_score(task, brute_force_distance) == M.abx_score(task)


def test_abx_perfect_separation_and_ties():
    e = np.eye(4)
    a = np.stack([e[0]] * 3)
    b = np.stack([e[1]] * 2)
    x = np.stack([e[0]] * 4)
    assert M.abx_score(M.AbxTask([(a, b, x)] * 5, [(0, 1)] * 5, "within")) == 1.0
    assert M.abx_score(M.AbxTask([(a, a, x)], [(0, 1)], "within")) == 0.5


def test_abx_invariant_to_frame_rescaling(rng):
    trip = [tuple(rng.normal(size=(int(rng.integers(2, 5)), 3)) for _ in range(3))
            for _ in range(20)]
    scaled = [tuple(s * rng.uniform(0.1, 10.0, size=(len(s), 1)) for s in t) for t in trip]
    cat = [(0, 1)] * 20
    assert M.abx_score(M.AbxTask(trip, cat, "within")) == \
        M.abx_score(M.AbxTask(scaled, cat, "within"))
    for (a, b, x), (a2, b2, x2) in zip(trip, scaled):
        assert M.dtw_angular(x, a) == pytest.approx(M.dtw_angular(x2, a2), abs=1e-9)


def test_abx_errors():
    with pytest.raises(ContractError):
        M.abx_score(M.AbxTask([], [], "within"))
    with pytest.raises(ContractError):
        M.dtw_angular(np.zeros((0, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("mode", ["within", "cross"])
def test_build_abx_task_constraints(small_corpus, mode):
    utts = small_corpus.split("test")
    feats = [u.frames for u in utts]
    task = M.build_abx_task(utts, feats, mode, 50, np.random.default_rng(0))
    assert len(task) == 50
    for (a, b, x), (ca, cb), (sab, sx) in zip(task.triplets, task.categories, task.speakers):
        assert ca != cb and len(a) and len(b) and len(x)
        assert (sx == sab) == (mode == "within")


# ---------------------------------------------------------------------------
# rank labels / DTW-L0
# ---------------------------------------------------------------------------

def brute_force_l0(a, b):
    n, m = len(a), len(b)
    best = [(math.inf, 0)]

    def walk(i, j, cost, length):
        cost, length = cost + int(a[i] != b[j]), length + 1
        if (i, j) == (n - 1, m - 1):
            best[0] = min(best[0], (cost, length))
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, cost, length)
        if i + 1 < n:
            walk(i + 1, j, cost, length)
        if j + 1 < m:
            walk(i, j + 1, cost, length)
    walk(0, 0, 0, 0)
    return best[0][0] / best[0][1]


def test_dtw_l0_hand_cases():
    assert M.dtw_l0([1, 2, 3], [1, 2, 3]) == 0.0
    assert M.dtw_l0([1, 1, 2], [3, 4]) == 1.0
    assert M.dtw_l0([1, 1, 2, 3], [1, 2, 2, 3]) == 0.0
    assert M.dtw_l0([1, 2], [1, 3]) == 0.5


seqs = st.lists(st.integers(0, 3), min_size=1, max_size=6)


@settings(max_examples=100, deadline=None)
@given(seqs, seqs)
def test_dtw_l0_matches_enumeration_and_is_symmetric(a, b):
    assert M.dtw_l0(a, b) == brute_force_l0(a, b)
    assert M.dtw_l0(a, b) == M.dtw_l0(b, a)


@settings(max_examples=100, deadline=None)
@given(seqs, seqs)
def test_dtw_l0_zero_iff_zero_cost_alignment(a, b):
    zero = M.dtw_l0(a, b) == 0.0
    assert zero == (M.dedup(a) == M.dedup(b))


def test_rank_map_cases():
    # cluster 0 only in A, cluster 1 mixed, cluster 2 only in B
    rm = M.rank_labels_by_group([[0, 0, 1], [1, 2, 2]], ["A", "B"], 3)
    assert rm.ranks.tolist() == [0, 1, 2]
    assert rm.ratios[0] == 0.0 and rm.ratios[2] == 1.0
    even = M.rank_labels_by_group([[0, 1, 2, 3], [3, 2, 1, 0]], ["A", "B"], 4)
    assert even.ranks.tolist() == [0, 1, 2, 3]
    # ratios 0.8 for cluster 0 and 0.2 for cluster 1
    hand = M.rank_labels_by_group([[0, 1, 1, 1, 1], [0, 0, 0, 0, 1]], ["A", "B"], 2)
    assert hand.ratios.tolist() == pytest.approx([0.8, 0.2])
    assert hand.ranks.tolist() == [1, 0]
    assert sorted(rm(np.array([2, 0, 1])).tolist()) == [0, 1, 2]


def test_rank_map_needs_both_groups():
    with pytest.raises(ContractError):
        M.rank_labels_by_group([[0, 1]], ["A"], 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 9), min_size=1, max_size=8), min_size=2, max_size=6))
def test_rank_map_is_permutation(seqs_):
    groups = ["A", "B"] * (len(seqs_) // 2) + ["A"] * (len(seqs_) % 2)
    rm = M.rank_labels_by_group(seqs_, groups, 10)
    assert sorted(rm.ranks.tolist()) == list(range(10))


# ---------------------------------------------------------------------------
# auto-BLEU
# ---------------------------------------------------------------------------

def test_auto_bleu_hand_cases():
    s = "a b a b".split()
    assert M.auto_bleu(s, 1) == 1.0
    assert M.auto_bleu(s, 2) == pytest.approx(2 / 3, abs=1e-12)
    assert M.auto_bleu("a b c d e".split(), 1) == 0.0
    assert M.auto_bleu("a b c d e".split(), 3) == 0.0
    with pytest.raises(ContractError):
        M.auto_bleu(["a"], 2)


def test_corpus_auto_bleu_deduplicates():
    assert M.dedup([1, 1, 2, 2, 2, 1]) == [1, 2, 1]
    assert M.corpus_auto_bleu([[1, 1, 2, 2]], k=1) == 0.0
    assert M.corpus_auto_bleu([[1, 1, 2, 2]], k=1, deduplicate=False) == 1.0


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def test_metric_name_typo_lists_valid_names():
    with pytest.raises(ConfigError) as exc:
        M.check_metric_names(["sid_curve", "pnmii"])
    for name in M.METRIC_NAMES:
        assert name in str(exc.value)


def test_evaluate_on_small_model():
    small = build_corpus(CorpusConfig(num_phones=8, num_speakers=4, utterances_per_speaker=8,
                                      valid_per_speaker=2, test_per_speaker=2,
                                      num_parallel_pairs=4))
    cfg = ModelConfig(input_dim=small.config.feat_dim, num_encoder_layers=2,
                      contrastive_layer=1, num_speakers=small.num_speakers)
    model = Model.create(cfg, derive_rng(0, "init"))
    rep = M.evaluate(model, small, M.METRIC_NAMES, K=8, abx_triplets=20)
    m = rep["metrics"]
    for key in ("sid_final", "phone_acc", "abx_within", "abx_cross", "pnmi", "auto_bleu",
                "dtw_l0"):
        assert 0.0 <= m[key] <= 1.0, key
    rows = M.curves_csv(rep).strip().splitlines()
    assert len(rows) == 1 + cfg.num_encoder_layers + cfg.predictor_layers + 1
    again = M.evaluate(model, small, M.METRIC_NAMES, K=8, abx_triplets=20)
    assert M.report_json(again) == M.report_json(rep)


def test_compare_reports_relative_reduction():
    a = {"metrics": {"sid_final": 0.6}, "sid_curve": [{"layer": 0, "test_acc": 0.9}]}
    b = {"metrics": {"sid_final": 0.8}, "sid_curve": [{"layer": 0, "test_acc": 0.9}]}
    rows = {r["metric"]: r for r in M.compare_reports(a, b, "cv", "hub")}
    assert rows["sid_final"]["relative_reduction"] == pytest.approx(0.25)
