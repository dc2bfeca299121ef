"""WAV decoding, log-mel features, manifest datasets and synthetic tones."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from . import _binio
from .episodes import FewShotDataset
from .errors import (ConfigError, FormatError, IngestionError, InputTooShortError,
                     UnsupportedFormatError)

LOG_EPS = 1e-10
CACHE_MAGIC = b"RDFTFEAT"
_PCM = 1
_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate}")
        if len(self.samples) == 0:
            raise FormatError("waveform has no samples")


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 44100
    n_fft: int = 2048
    hop: int = 1024
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None
    target_frames: int = 208

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.sample_rate / 2)
        if self.sample_rate <= 0 or self.n_fft < 2 or self.hop < 1 or self.n_mels < 1:
            raise ConfigError("sample_rate > 0, n_fft >= 2, hop >= 1 and n_mels >= 1 are required")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin} fmax={self.fmax}"
            )
        if self.target_frames < 1:
            raise ConfigError("target_frames must be >= 1")

    @property
    def num_samples(self) -> int:
        """Waveform length that yields exactly ``target_frames`` frames."""
        return self.n_fft + (self.target_frames - 1) * self.hop

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(dataclasses.asdict(self), sort_keys=True).encode()).hexdigest()


PROFILES = {
    "esc50": MelConfig(44100, 2048, 1024, 64, 0.0, None, 208),
    "speech_commands": MelConfig(16000, 1024, 512, 64, 0.0, None, 32),
}


# -- WAV ----------------------------------------------------------------------

def load_wav(data: bytes) -> Waveform:
    """Decode a 16-bit PCM RIFF/WAVE file; stereo is averaged to mono."""
    if len(data) < 12:
        raise FormatError("file shorter than RIFF header", 0 if data[:4] != b"RIFF" else len(data))
    if data[:4] != b"RIFF":
        raise FormatError("missing RIFF magic", 0)
    if data[8:12] != b"WAVE":
        raise FormatError("missing WAVE form type", 8)
    pos = 12
    fmt = None
    pcm = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if body_start + size > len(data):
            if cid == b"data" and fmt is not None:
                raise FormatError(f"data chunk claims {size} bytes, only "
                                  f"{len(data) - body_start} present", pos)
            raise FormatError(f"truncated {cid!r} chunk", pos)
        body = data[body_start:body_start + size]
        if cid == b"fmt ":
            if size < 16:
                raise FormatError("fmt chunk too short", pos)
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _EXTENSIBLE and size >= 40:
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            if fmt is None:
                raise FormatError("data chunk before fmt chunk", pos)
            pcm = body
            break
        pos = body_start + size + (size & 1)
    if fmt is None:
        raise FormatError("no fmt chunk", pos)
    if pcm is None:
        raise FormatError("no data chunk", pos)
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != _PCM:
        raise UnsupportedFormatError(f"unsupported WAV encoding (format tag {audio_format}); only PCM")
    if bits != 16:
        raise UnsupportedFormatError(f"unsupported sample width {bits} bits; only 16-bit PCM")
    if channels not in (1, 2):
        raise UnsupportedFormatError(f"{channels} channels; only mono or stereo")
    frame_bytes = 2 * channels
    usable = len(pcm) - len(pcm) % frame_bytes
    samples = np.frombuffer(pcm[:usable], dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return Waveform(samples, rate)


def write_wav(samples, sample_rate: int, channels: int = 1) -> bytes:
    """Encode float samples in [-1, 1] as 16-bit PCM (interleaved if stereo)."""
    arr = np.asarray(samples, dtype=np.float64)
    ints = np.clip(np.round(arr * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(ints.tobytes())
    return buf.getvalue()


# -- features -------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    points = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return points[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters [n_mels, n_fft // 2 + 1], equally spaced on the mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_power(w: Waveform, cfg: MelConfig) -> np.ndarray:
    """Mel-projected power spectrogram [n_mels, target_frames] before the log."""
    if w.sample_rate != cfg.sample_rate:
        raise FormatError(f"waveform sample rate {w.sample_rate} != configured {cfg.sample_rate}")
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < cfg.n_fft:
        raise InputTooShortError(f"waveform has {len(x)} samples, need at least n_fft={cfg.n_fft}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[::cfg.hop]
    spec = np.abs(np.fft.rfft(frames * get_window("hann", cfg.n_fft), axis=1)) ** 2
    mel = mel_filterbank(cfg) @ spec.T
    T = mel.shape[1]
    if T > cfg.target_frames:
        start = (T - cfg.target_frames) // 2
        mel = mel[:, start:start + cfg.target_frames]
    elif T < cfg.target_frames:
        # silence padding: padded frames become log(eps) after the log
        mel = np.pad(mel, ((0, 0), (0, cfg.target_frames - T)))
    return mel


def log_mel(w: Waveform, cfg: MelConfig) -> np.ndarray:
    return np.log(mel_power(w, cfg) + LOG_EPS)


# -- datasets -------------------------------------------------------------------

def read_manifest(path) -> list[tuple[Path, str]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc.strerror}") from None
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"path", "class_label"} <= set(reader.fieldnames):
        raise IngestionError(f"manifest {path} needs a header with columns path,class_label")
    rows = [(path.parent / r["path"], r["class_label"].strip()) for r in reader]
    if not rows:
        raise IngestionError(f"manifest {path} lists no files")
    return rows


def build_dataset(manifest, cfg: MelConfig) -> FewShotDataset:
    """Load every manifest row (in order) into [1, n_mels, target_frames] features."""
    rows = read_manifest(manifest)
    missing = [str(p) for p, _ in rows if not p.is_file()]
    if missing:
        raise IngestionError("missing audio files: " + ", ".join(missing))
    feats, labels = [], []
    for p, label in rows:
        w = load_wav(p.read_bytes())
        if w.sample_rate != cfg.sample_rate:
            raise FormatError(f"{p}: sample rate {w.sample_rate} != configured {cfg.sample_rate}")
        feats.append(log_mel(w, cfg)[None].astype(np.float32))
        labels.append(label)
    return FewShotDataset(np.stack(feats), tuple(labels))


def tone_frequencies(num_classes: int, cfg: MelConfig) -> np.ndarray:
    margin = 0.05 * (cfg.fmax - cfg.fmin)
    lo, hi = cfg.fmin + margin, cfg.fmax - margin
    return np.geomspace(max(lo, 1.0), hi, num_classes)


def synth_tone_dataset(num_classes: int, per_class: int, cfg: MelConfig,
                       noise_level: float, rng_seed: int, amplitude: float = 0.5) -> FewShotDataset:
    """Class ``c`` is a sinusoid at a log-spaced frequency plus white noise of RMS ``noise_level``."""
    if num_classes < 2 or per_class < 1:
        raise ConfigError("synthetic dataset needs num_classes >= 2 and per_class >= 1")
    if noise_level < 0:
        raise ConfigError(f"noise_level must be >= 0, got {noise_level}")
    rng = np.random.default_rng(rng_seed)
    t = np.arange(cfg.num_samples) / cfg.sample_rate
    feats, labels = [], []
    for c, f in enumerate(tone_frequencies(num_classes, cfg)):
        tone = amplitude * np.sin(2 * np.pi * f * t)
        for _ in range(per_class):
            x = tone + noise_level * rng.standard_normal(len(t)) if noise_level > 0 else tone
            feats.append(log_mel(Waveform(x, cfg.sample_rate), cfg)[None].astype(np.float32))
            labels.append(f"tone{c:02d}")
    return FewShotDataset(np.stack(feats), tuple(labels))


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float

    @classmethod
    def fit(cls, dataset: FewShotDataset, classes) -> "Standardizer":
        idx = [i for c in classes for i in dataset.class_index[str(c)]]
        x = dataset.features[idx].astype(np.float64)
        return cls(float(x.mean()), float(x.std()) or 1.0)

    def apply(self, dataset: FewShotDataset) -> FewShotDataset:
        return dataset.with_features(((dataset.features - self.mean) / self.std).astype(np.float32))


def save_feature_cache(path, dataset: FewShotDataset, fingerprint: str) -> None:
    meta = {"fingerprint": fingerprint, "labels": list(dataset.labels)}
    Path(path).write_bytes(_binio.dumps(CACHE_MAGIC, meta, {"features": dataset.features}))


def load_feature_cache(path, fingerprint: str | None = None) -> FewShotDataset | None:
    """Cached dataset, or ``None`` when absent or built under another fingerprint."""
    path = Path(path)
    if not path.is_file():
        return None
    meta, tensors = _binio.loads(CACHE_MAGIC, path.read_bytes())
    if fingerprint is not None and meta["fingerprint"] != fingerprint:
        return None
    return FewShotDataset(tensors["features"], tuple(meta["labels"]))


def source_fingerprint(cfg: MelConfig, source: dict) -> str:
    """Fingerprint of feature settings plus whatever defines the raw data."""
    payload = json.dumps({"mel": cfg.fingerprint(), "source": source}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()
