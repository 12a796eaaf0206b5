import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegdiff import signal as sig
from eegdiff.signal import (
    CorpusFormatError, CorpusSpec, EegRecording, NotACorpusError, PreprocessConfig,
    bandpass_filter, detokenize, generate_synthetic_corpus, load_corpus, pad_channels,
    preprocess, save_corpus, tokenize,
)

FS = 1000.0


def sine(freq, n=2000, fs=FS, channels=1, phase=0.0):
    t = np.arange(n) / fs
    return EegRecording(np.tile(np.sin(2 * np.pi * freq * t + phase), (channels, 1)), fs)


def dtft_gain_db(kernel, freq, fs):
    # independent evaluation: direct sum over taps centred at zero
    n = np.arange(len(kernel)) - len(kernel) // 2
    h = sum(kernel[i] * np.exp(-2j * np.pi * freq * n[i] / fs) for i in range(len(kernel)))
    return 20 * np.log10(abs(h))


def interior_amplitude(x):
    core = x[300:-300]
    return np.sqrt(2 * np.mean(core**2))


def test_filter_passband_50hz_within_1db():
    k = sig.design_bandpass(5, 95, FS)
    assert len(k) == 101 and np.allclose(k, k[::-1])
    assert abs(dtft_gain_db(k, 50, FS)) < 1.0
    out = bandpass_filter(sine(50), 5, 95).samples[0]
    assert abs(20 * np.log10(interior_amplitude(out))) < 1.0


def test_filter_attenuates_1hz_by_20db():
    k = sig.design_bandpass(5, 95, FS)
    assert dtft_gain_db(k, 1, FS) <= -20
    out = bandpass_filter(sine(1, n=4000), 5, 95).samples[0]
    assert 20 * np.log10(interior_amplitude(out)) <= -20


def test_filter_removes_dc():
    rec = EegRecording(np.full((2, 600), 7.0), FS)
    out = bandpass_filter(rec, 5, 95).samples
    assert np.all(np.abs(out.mean(axis=1)) < 1e-3 * 7.0)
    assert out.shape == (2, 600)


def test_filter_is_zero_phase():
    x = sine(40, n=1000).samples[0]
    y = bandpass_filter(sine(40, n=1000), 5, 95).samples[0]
    core = slice(200, 800)
    lags = range(-10, 11)
    xc = [np.dot(x[core], np.roll(y, lag)[core]) for lag in lags]
    assert list(lags)[int(np.argmax(xc))] == 0


def test_filter_errors():
    with pytest.raises(ValueError):
        bandpass_filter(sine(10), 5, 600)
    with pytest.raises(ValueError):
        bandpass_filter(EegRecording(np.ones((1, 50)), FS), 5, 95)


def test_pad_channels_cyclic():
    rec = EegRecording(np.arange(3)[:, None] * np.ones((3, 4)), FS)
    out = pad_channels(rec, 8)
    assert out.samples[:, 0].tolist() == [0, 1, 2, 0, 1, 2, 0, 1]
    assert np.array_equal(pad_channels(rec, 3).samples, rec.samples)
    one = pad_channels(EegRecording(np.arange(5.0)[None], FS), 4)
    assert np.all(one.samples == np.arange(5.0))
    with pytest.raises(ValueError):
        pad_channels(rec, 2)


@given(st.integers(1, 6), st.integers(0, 10), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_pad_then_drop_is_identity(c, extra, seed):
    x = np.random.default_rng(seed).normal(size=(c, 7))
    out = pad_channels(EegRecording(x, FS), c + extra)
    assert np.array_equal(out.samples[:c], x)


def test_preprocess_shape_and_zscore():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 700)) * 30 + 5
    x[3] = 4.0  # constant channel
    cfg = PreprocessConfig(target_channels=32, target_length=512)
    out = preprocess(EegRecording(x, FS), cfg)
    assert out.samples.shape == (32, 512)
    assert np.all(np.abs(out.samples.mean(axis=1)) < 1e-5)
    live = [c for c in range(32) if c % 20 != 3]
    assert np.all(np.abs(out.samples[live].std(axis=1) - 1) < 1e-4)
    assert np.all(np.abs(out.samples[3]) < 1e-3)


def test_preprocess_paper_scale_shape():
    x = np.random.default_rng(1).normal(size=(60, 600))
    out = preprocess(EegRecording(x, FS), PreprocessConfig(target_channels=128, target_length=512))
    assert out.samples.shape == (128, 512)


def test_preprocess_too_short():
    with pytest.raises(ValueError):
        preprocess(EegRecording(np.ones((2, 300)), FS), PreprocessConfig())


def test_preprocess_idempotent():
    x = np.random.default_rng(2).normal(size=(32, 640))
    cfg = PreprocessConfig()
    once = preprocess(EegRecording(x, FS), cfg)
    twice = preprocess(once, cfg)
    assert np.max(np.abs(once.samples - twice.samples)) < 1e-5


def test_tokenize_examples():
    x = np.random.default_rng(3).normal(size=(32, 512)).astype(np.float32)
    seq = tokenize(EegRecording(x, FS), 4)
    assert seq.tokens.shape == (128, 32 * 4)
    np.testing.assert_array_equal(seq.tokens[5], x[:, 20:24].reshape(-1))
    whole = tokenize(EegRecording(x, FS), 512)
    np.testing.assert_array_equal(whole.tokens[0], x.reshape(-1))
    with pytest.raises(ValueError):
        tokenize(EegRecording(x, FS), 5)


@given(st.integers(1, 5), st.integers(1, 8), st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_tokenize_roundtrip_bit_exact(c, n, s, seed):
    x = np.random.default_rng(seed).normal(size=(c, n * s)).astype(np.float32)
    back = detokenize(tokenize(EegRecording(x, FS), s))
    assert back.tobytes() == x.tobytes()


SMALL = CorpusSpec(n_pretrain=6, n_train=16, n_test=8, raw_length=300, channels=8, min_channels=4)


def test_synthetic_corpus_deterministic():
    a = generate_synthetic_corpus(SMALL, 5)
    b = generate_synthetic_corpus(SMALL, 5)
    assert all(x.samples.tobytes() == y.samples.tobytes() for x, y in zip(a[0], b[0]))
    assert a[1].images.tobytes() == b[1].images.tobytes()
    assert all(x.samples.tobytes() == y.samples.tobytes() for x, y in zip(a[2].recordings, b[2].recordings))
    c = generate_synthetic_corpus(SMALL, 6)
    assert a[1].images.tobytes() != c[1].images.tobytes()


def test_synthetic_pairs_consistent():
    pre, train, test = generate_synthetic_corpus(SMALL, 0)
    assert all(r.label is None for r in pre)
    assert all(4 <= r.n_channels <= 8 for r in pre)
    assert np.array_equal(train.labels, [r.label for r in train.recordings])
    assert train.images.shape == (16, 3, 32, 32)
    assert train.images.min() >= 0 and train.images.max() <= 1


def test_zero_noise_recordings_differ_only_in_phase():
    spec = CorpusSpec(n_pretrain=0, n_train=64, n_test=0, raw_length=400, channels=4, min_channels=4,
                      noise_amp=0.0, subject_amp=0.0, n_subjects=1)
    _, train, _ = generate_synthetic_corpus(spec, 1)
    g = sig._class_structure(spec, 1)
    same = [r for r in train.recordings if r.label == 2][:2]
    t = np.arange(spec.raw_length) / spec.sample_rate_hz
    basis = np.concatenate([np.stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)])
                            for f in g.freqs[2]]).T
    amps = []
    for r in same:
        coef, res, *_ = np.linalg.lstsq(basis, r.samples.T.astype(np.float64), rcond=None)
        assert np.max(np.abs(basis @ coef - r.samples.T)) < 1e-4
        amps.append(np.hypot(coef[0::2], coef[1::2]))
    np.testing.assert_allclose(amps[0], amps[1], atol=1e-4)
    assert not np.allclose(same[0].samples, same[1].samples)


def bandpower_features(recs, cfg):
    x = sig.preprocess_batch(recs, cfg).astype(np.float64)
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    bins = np.array_split(np.arange(1, spec.shape[-1]), 32)
    feats = np.stack([spec[..., b].mean(axis=-1) for b in bins], axis=-1)
    return np.log(feats + 1e-8).reshape(len(recs), -1)


def test_class_information_present_in_bandpower():
    spec = CorpusSpec(n_pretrain=0, n_train=256, n_test=0)
    _, train, _ = generate_synthetic_corpus(spec, 0)
    f = bandpower_features(train.recordings, PreprocessConfig())
    f = (f - f.mean(0)) / (f.std(0) + 1e-8)
    X = np.concatenate([f, np.ones((len(f), 1))], axis=1)
    Y = np.eye(spec.n_classes)[train.labels]
    W = np.linalg.solve(X.T @ X + 1.0 * np.eye(X.shape[1]), X.T @ Y)
    acc = np.mean(np.argmax(X @ W, axis=1) == train.labels)
    assert acc > 2 / spec.n_classes


def test_corpus_roundtrip(tmp_path):
    pre, train, _ = generate_synthetic_corpus(SMALL, 3)
    save_corpus(tmp_path / "pre.eegc", pre)
    save_corpus(tmp_path / "train.eegc", train)
    pre2 = load_corpus(tmp_path / "pre.eegc")
    train2 = load_corpus(tmp_path / "train.eegc")
    assert [r.samples.tobytes() for r in pre] == [r.samples.tobytes() for r in pre2]
    assert [r.subject_id for r in pre] == [r.subject_id for r in pre2]
    assert train2.images.tobytes() == train.images.tobytes()
    assert train2.split == "train" and train2.n_classes == SMALL.n_classes
    assert np.array_equal(train2.labels, train.labels)


def test_corpus_truncated_names_range(tmp_path):
    pre, _, _ = generate_synthetic_corpus(SMALL, 3)
    p = tmp_path / "c.eegc"
    save_corpus(p, pre)
    data = p.read_bytes()
    p.write_bytes(data[:-10])
    with pytest.raises(CorpusFormatError, match=r"bytes \[\d+, \d+\)"):
        load_corpus(p)


def test_corpus_bad_magic_and_version(tmp_path):
    p = tmp_path / "c.eegc"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(NotACorpusError, match="not a corpus file"):
        load_corpus(p)
    save_corpus(p, [EegRecording(np.ones((1, 4)), FS)])
    data = bytearray(p.read_bytes())
    data[4] = 9
    p.write_bytes(bytes(data))
    with pytest.raises(CorpusFormatError, match="version"):
        load_corpus(p)


def test_corpus_rejects_non_finite(tmp_path):
    p = tmp_path / "c.eegc"
    save_corpus(p, [EegRecording(np.ones((1, 4)), FS)])
    data = bytearray(p.read_bytes())
    data[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    p.write_bytes(bytes(data))
    with pytest.raises(CorpusFormatError, match="non-finite"):
        load_corpus(p)
