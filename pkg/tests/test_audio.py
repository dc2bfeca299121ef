import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rdft.audio import (LOG_EPS, MelConfig, PROFILES, Standardizer, Waveform, build_dataset,
                        load_feature_cache, load_wav, log_mel, mel_center_frequencies,
                        mel_filterbank, mel_power, save_feature_cache, source_fingerprint,
                        synth_tone_dataset, write_wav)
from rdft.episodes import sample_episodes
from rdft.errors import (ConfigError, FormatError, IngestionError, InputTooShortError,
                         UnsupportedFormatError)
from rdft.protonet import classify, compute_prototypes, episode_accuracy

SMALL = MelConfig(16000, 512, 256, 16, 0.0, None, 16)


def raw_wav(ints, rate=8000, channels=1, fmt_tag=1, bits=16):
    payload = struct.pack(f"<{len(ints)}h", *ints)
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_load_wav_scaling():
    w = load_wav(raw_wav([0, 16384, -16384, 32767]))
    assert w.sample_rate == 8000
    np.testing.assert_array_equal(w.samples, [0.0, 0.5, -0.5, 32767 / 32768])
    assert abs(w.samples[3] - 0.99997) < 1e-5


def test_load_wav_stereo_average():
    w = load_wav(raw_wav([16384, -16384, 8192, 8192], channels=2))
    np.testing.assert_array_equal(w.samples, [0.0, 0.25])


def test_load_wav_skips_unknown_chunks():
    data = raw_wav([1, 2, 3])
    extra = b"LIST" + struct.pack("<I", 3) + b"abc" + b"\x00"
    data = data[:12] + extra + data[12:]
    data = data[:4] + struct.pack("<I", len(data) - 8) + data[8:]
    np.testing.assert_array_equal(load_wav(data).samples * 32768, [1, 2, 3])


def test_load_wav_errors():
    with pytest.raises(FormatError, match="offset 0"):
        load_wav(b"RIFX" + raw_wav([0])[4:])
    with pytest.raises(FormatError, match="WAVE"):
        load_wav(raw_wav([0])[:8] + b"AVI " + raw_wav([0])[12:])
    truncated = raw_wav([1, 2, 3, 4])[:-4]
    with pytest.raises(FormatError, match="offset 36"):
        load_wav(truncated)
    with pytest.raises(UnsupportedFormatError, match="format tag 3"):
        load_wav(raw_wav([0, 0], fmt_tag=3))
    with pytest.raises(UnsupportedFormatError, match="8 bits"):
        load_wav(raw_wav([0, 0], bits=8))


def test_write_wav_roundtrip():
    x = np.array([0.0, 0.5, -0.5, -1.0, 0.25])
    w = load_wav(write_wav(x, 22050))
    assert w.sample_rate == 22050
    np.testing.assert_array_equal(w.samples, x)


def test_filterbank_properties():
    for cfg in (*PROFILES.values(), SMALL):
        fb = mel_filterbank(cfg)
        assert fb.shape == (cfg.n_mels, cfg.n_fft // 2 + 1)
        assert np.all(fb >= 0)
        for row in fb:
            nz = np.flatnonzero(row)
            assert nz.size and np.all(np.diff(nz) == 1)
        assert np.all(fb @ np.ones(fb.shape[1]) > 0)


@pytest.mark.parametrize("mel_bin", [3, 8, 12, 20, 40])
def test_pure_tone_peaks_at_its_mel_bin(mel_bin):
    cfg = MelConfig(16000, 2048, 512, 48, 0.0, None, 8)
    # oracle: the filter centred at f has its triangle apex there
    f = mel_center_frequencies(cfg)[mel_bin]
    assert int(np.argmax(mel_filterbank(cfg)[:, int(round(f * cfg.n_fft / cfg.sample_rate))])) == mel_bin
    t = np.arange(cfg.num_samples) / cfg.sample_rate
    feats = log_mel(Waveform(np.sin(2 * np.pi * f * t), cfg.sample_rate), cfg)
    assert np.all(np.argmax(feats, axis=0) == mel_bin)


def test_silence_is_constant_log_eps():
    out = log_mel(Waveform(np.zeros(SMALL.num_samples), 16000), SMALL)
    assert out.shape == (16, 16)
    assert np.all(out == np.log(LOG_EPS))


def test_amplitude_doubling_quadruples_mel_power(rng):
    x = 0.2 * rng.standard_normal(SMALL.num_samples)
    a = mel_power(Waveform(x, 16000), SMALL)
    b = mel_power(Waveform(2 * x, 16000), SMALL)
    np.testing.assert_allclose(b, 4 * a, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(length=st.integers(512, 12000))
def test_output_shape_independent_of_length(length):
    x = np.random.default_rng(length).standard_normal(length) * 0.1
    assert log_mel(Waveform(x, 16000), SMALL).shape == (16, 16)


def test_too_short_and_rate_mismatch():
    with pytest.raises(InputTooShortError):
        log_mel(Waveform(np.zeros(100), 16000), SMALL)
    with pytest.raises(FormatError, match="sample rate"):
        log_mel(Waveform(np.zeros(1000), 8000), SMALL)


def test_mel_config_validation():
    with pytest.raises(ConfigError):
        MelConfig(16000, 512, 256, 16, 9000.0, None, 16)
    with pytest.raises(ConfigError):
        MelConfig(16000, 512, 0, 16)
    assert MelConfig(16000, 512, 256, 16).fmax == 8000


def _write_manifest(tmp_path, rows, rate=16000):
    for name, _ in rows:
        if not (tmp_path / name).exists():
            t = np.arange(SMALL.num_samples) / rate
            (tmp_path / name).write_bytes(write_wav(0.3 * np.sin(2 * np.pi * 440 * t), rate))
    text = "path,class_label\n" + "".join(f"{p},{c}\n" for p, c in rows)
    (tmp_path / "manifest.csv").write_text(text)
    return tmp_path / "manifest.csv"


def test_build_dataset_bookkeeping(tmp_path):
    m = _write_manifest(tmp_path, [("a.wav", "dog"), ("b.wav", "cat"), ("c.wav", "dog")])
    ds = build_dataset(m, SMALL)
    assert ds.classes == ["dog", "cat"]
    assert {k: len(v) for k, v in ds.class_index.items()} == {"dog": 2, "cat": 1}
    assert ds.feature_shape == (1, 16, 16)


def test_build_dataset_duplicates(tmp_path):
    m = _write_manifest(tmp_path, [("a.wav", "dog"), ("a.wav", "dog")])
    ds = build_dataset(m, SMALL)
    assert ds.class_index["dog"] == (0, 1)
    assert np.array_equal(ds.features[0], ds.features[1])


def test_build_dataset_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("path,class_label\n")
    with pytest.raises(IngestionError, match="no files"):
        build_dataset(tmp_path / "empty.csv", SMALL)
    (tmp_path / "missing.csv").write_text("path,class_label\nnope.wav,x\n")
    with pytest.raises(IngestionError, match="nope.wav"):
        build_dataset(tmp_path / "missing.csv", SMALL)
    m = _write_manifest(tmp_path, [("slow.wav", "x")], rate=8000)
    with pytest.raises(FormatError, match="sample rate"):
        build_dataset(m, SMALL)


def test_synthetic_dataset_basics():
    ds = synth_tone_dataset(10, 20, SMALL, 0.0, 0)
    assert len(ds) == 200 and len(ds.classes) == 10
    a, b = ds.class_index["tone03"][:2]
    assert np.array_equal(ds.features[a], ds.features[b])
    again = synth_tone_dataset(10, 20, SMALL, 0.1, 4)
    assert np.array_equal(again.features, synth_tone_dataset(10, 20, SMALL, 0.1, 4).features)
    with pytest.raises(ConfigError):
        synth_tone_dataset(1, 5, SMALL, 0.1, 0)


def test_synthetic_tones_separable_with_identity_embedding():
    ds = synth_tone_dataset(10, 20, SMALL, 0.05, 0)
    accs = []
    for ep in sample_episodes(ds, ds.classes, 5, 5, 5, 0, 100):
        xs, ys = ep.flat_support()
        xq, yq = ep.flat_query()
        protos = compute_prototypes(torch.tensor(xs.reshape(len(xs), -1), dtype=torch.float64), ys, 5)
        accs.append(episode_accuracy(classify(torch.tensor(xq.reshape(len(xq), -1), dtype=torch.float64),
                                              protos), yq))
    assert np.mean(accs) > 0.9


def test_standardizer_uses_training_classes_only():
    ds = synth_tone_dataset(4, 5, SMALL, 0.1, 0)
    st_ = Standardizer.fit(ds, ["tone00", "tone01"])
    out = st_.apply(ds)
    train_idx = list(ds.class_index["tone00"]) + list(ds.class_index["tone01"])
    assert abs(out.features[train_idx].mean()) < 1e-5
    assert abs(out.features[train_idx].std() - 1) < 1e-4


def test_feature_cache_roundtrip(tmp_path):
    ds = synth_tone_dataset(3, 4, SMALL, 0.1, 0)
    fp = source_fingerprint(SMALL, {"synthetic": 1})
    path = tmp_path / "f.bin"
    save_feature_cache(path, ds, fp)
    back = load_feature_cache(path, fp)
    assert np.array_equal(back.features, ds.features) and back.labels == ds.labels
    assert load_feature_cache(path, source_fingerprint(SMALL, {"synthetic": 2})) is None
    assert load_feature_cache(tmp_path / "absent.bin", fp) is None
    save_feature_cache(tmp_path / "g.bin", ds, fp)
    assert (tmp_path / "g.bin").read_bytes() == path.read_bytes()
