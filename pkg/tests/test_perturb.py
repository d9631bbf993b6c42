import numpy as np

from disentlab.corpus import CorpusConfig, SpeakerParams, Utterance, build_inventory, render_frames
from disentlab.perturb import RHO_MAX, TransformParams, apply_transform, identity_transform, \
    sample_transform


def _utt(inv, scale=1.0):
    spk = SpeakerParams(3, scale, 0.05, np.linspace(0.8, 1.2, 40), "A")
    tokens, durs = np.array([0, 5, 2, 7]), np.array([2, 3, 2, 4])
    return Utterance("u", render_frames(tokens, durs, spk, inv, 0.0, None), tokens, durs, spk)


INV = build_inventory(CorpusConfig(), np.random.default_rng(0))


def test_flip_probability_and_bounds():
    rng = np.random.default_rng(0)
    draws = [sample_transform(rng) for _ in range(10000)]
    r1 = np.array([d.rho1 for d in draws])
    r2 = np.array([d.rho2 for d in draws])
    assert abs(np.mean(r1 > 1) - 0.5) <= 0.02
    assert np.all(np.abs(np.log(r1)) <= np.log(RHO_MAX) + 1e-12)
    assert np.all(np.abs(np.log(r2)) <= np.log(RHO_MAX) + 1e-12)
    corr = np.corrcoef(r1 > 1, r2 > 1)[0, 1]
    assert abs(corr) <= 0.03
    # magnitudes are uniform on [1, 1.4] after undoing the flip
    mag = np.where(r1 >= 1, r1, 1 / r1)
    assert abs(mag.mean() - 1.2) < 0.01


def test_same_seed_same_params():
    a = sample_transform(np.random.default_rng(9))
    b = sample_transform(np.random.default_rng(9))
    assert (a.rho1, a.rho2) == (b.rho1, b.rho2) and np.array_equal(a.eq_curve, b.eq_curve)


def test_identity_transform_leaves_frames_unchanged():
    u = _utt(INV)
    out = apply_transform(u, identity_transform(40), INV)
    assert np.array_equal(out.frames, u.frames)


def test_content_and_speaker_id_preserved():
    u = _utt(INV)
    rng = np.random.default_rng(1)
    for _ in range(20):
        out = apply_transform(u, sample_transform(rng), INV)
        assert np.array_equal(out.phone_labels, u.phone_labels)
        assert out.speaker_id == u.speaker_id
        assert not np.allclose(out.frames, u.frames)


def test_inverse_recovers_frames():
    u = _utt(INV, 1.1)
    rng = np.random.default_rng(2)
    for _ in range(10):
        p = sample_transform(rng)
        back = apply_transform(apply_transform(u, p, INV), p.inverse(), INV)
        assert np.allclose(back.frames, u.frames, atol=1e-6)


def test_formant_ratios_preserved():
    positions = np.array([[0.2, 0.4]])
    p = TransformParams(1.4, 1.0, np.ones(40))
    scaled = positions * 1.0 * p.rho1
    assert np.allclose(scaled, [[0.28, 0.56]])
    assert scaled[0, 0] / scaled[0, 1] == positions[0, 0] / positions[0, 1]
    rng = np.random.default_rng(3)
    for _ in range(50):
        rho = sample_transform(rng).rho1
        s = INV.positions * rho
        assert np.allclose(s[:, :1] / s[:, 1:], INV.positions[:, :1] / INV.positions[:, 1:],
                           rtol=1e-14)


def test_keep_noise_carries_the_recording_noise():
    clean = _utt(INV, 1.1)
    noisy = Utterance("u", clean.frames + np.random.default_rng(3).normal(0, 0.05, clean.frames.shape)
                      .astype(np.float32), clean.tokens, clean.durations, clean.speaker)
    assert np.allclose(apply_transform(noisy, identity_transform(40), INV, keep_noise=True).frames,
                       noisy.frames, atol=1e-6)
    rng = np.random.default_rng(4)
    for _ in range(10):
        p = sample_transform(rng)
        a = apply_transform(noisy, p, INV, keep_noise=True)
        b = apply_transform(clean, p, INV)
        assert np.allclose(a.frames - b.frames, noisy.frames - clean.frames, atol=1e-5)
        back = apply_transform(a, p.inverse(), INV, keep_noise=True)
        assert np.allclose(back.frames, noisy.frames, atol=1e-5)
