"""EEG-like recordings: preprocessing, temporal tokenization, corpus files and
the synthetic paired corpus used in place of real EEG/image datasets."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FILTER_TAPS = 101
ZSCORE_EPS = 1e-8


@dataclass
class EegRecording:
    samples: np.ndarray  # C×L
    sample_rate_hz: float
    subject_id: int = 0
    label: int | None = None
    # band already applied by preprocessing; not persisted in corpus files
    filtered_band: tuple[float, float] | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or min(self.samples.shape) < 1:
            raise ValueError(f"recording must be C×L with C, L >= 1, got {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("recording contains non-finite samples")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def replace(self, **changes) -> "EegRecording":
        return dataclasses.replace(self, **changes)


@dataclass
class TokenSequence:
    tokens: np.ndarray  # N×(C·S)
    token_size: int
    n_channels: int
    subject_id: int = 0
    label: int | None = None

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class PairedDataset:
    recordings: list[EegRecording]
    images: np.ndarray  # n×3×H×W in [0, 1]
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.recordings) != len(self.images) or len(self.images) != len(self.labels):
            raise ValueError("recordings, images and labels differ in length")
        for rec, lab in zip(self.recordings, self.labels):
            if rec.label != lab:
                raise ValueError("recording label does not match image class")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class PreprocessConfig:
    low_hz: float = 5.0
    high_hz: float = 95.0
    target_channels: int = 32
    target_length: int = 512


# ------------------------------------------------------------------ filtering
def design_bandpass(low_hz: float, high_hz: float, sample_rate_hz: float,
                    taps: int = FILTER_TAPS) -> np.ndarray:
    """Symmetric Hamming-windowed sinc band-pass kernel.

    The window-weighted mean is removed so the DC gain is exactly zero, and
    the kernel is scaled to unit gain at the band centre.
    """
    if not 0 < low_hz < high_hz < sample_rate_hz / 2:
        raise ValueError(f"band ({low_hz}, {high_hz}) Hz invalid for fs={sample_rate_hz} Hz")
    n = np.arange(taps) - (taps - 1) / 2
    lo, hi = low_hz / sample_rate_hz, high_hz / sample_rate_hz
    window = np.hamming(taps)
    h = (2 * hi * np.sinc(2 * hi * n) - 2 * lo * np.sinc(2 * lo * n)) * window
    h = h - window * h.sum() / window.sum()
    return h / abs(frequency_response(h, (low_hz + high_hz) / 2, sample_rate_hz))


def frequency_response(kernel: np.ndarray, freq_hz: float, sample_rate_hz: float) -> complex:
    n = np.arange(kernel.size) - (kernel.size - 1) / 2
    return complex(np.sum(kernel * np.exp(-2j * np.pi * freq_hz * n / sample_rate_hz)))


def bandpass_filter(rec: EegRecording, low_hz: float, high_hz: float) -> EegRecording:
    """Zero-phase FIR band-pass of every channel; length is preserved."""
    kernel = design_bandpass(low_hz, high_hz, rec.sample_rate_hz)
    if rec.length < kernel.size:
        raise ValueError(f"recording length {rec.length} shorter than filter ({kernel.size} taps)")
    half = kernel.size // 2
    x = np.asarray(rec.samples, dtype=np.float64)
    padded = np.pad(x, ((0, 0), (half, half)), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=1)
    out = windows @ kernel[::-1]
    return rec.replace(samples=out, filtered_band=(low_hz, high_hz))


def pad_channels(rec: EegRecording, target_c: int) -> EegRecording:
    """Fill channels C..target_c-1 by cyclic replication of existing channels."""
    C = rec.n_channels
    if C > target_c:
        raise ValueError(f"recording has {C} channels, more than target {target_c}")
    order = np.arange(target_c) % C
    return rec.replace(samples=rec.samples[order])


def zscore_channels(x: np.ndarray, eps: float = ZSCORE_EPS) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def preprocess(rec: EegRecording, config: PreprocessConfig) -> EegRecording:
    """Band-pass, keep the first ``target_length`` samples, pad channels, z-score.

    The band-pass is skipped when the recording already carries the same band,
    which makes the pipeline idempotent.
    """
    band = (config.low_hz, config.high_hz)
    if rec.filtered_band != band:
        rec = bandpass_filter(rec, *band)
    if rec.length < config.target_length:
        raise ValueError(f"recording length {rec.length} shorter than target {config.target_length}")
    rec = rec.replace(samples=rec.samples[:, : config.target_length])
    rec = pad_channels(rec, config.target_channels)
    return rec.replace(samples=zscore_channels(rec.samples).astype(np.float32))


# --------------------------------------------------------------- tokenization
def tokenize(rec: EegRecording, token_size: int) -> TokenSequence:
    """Token i holds every channel over time steps [i·S, (i+1)·S), channel-major."""
    tokens = tokenize_array(rec.samples, token_size)
    return TokenSequence(tokens, token_size, rec.n_channels, rec.subject_id, rec.label)


def tokenize_array(x: np.ndarray, token_size: int) -> np.ndarray:
    """C×L → N×(C·S), or B×C×L → B×N×(C·S)."""
    *lead, C, L = x.shape
    if token_size < 1 or L % token_size:
        raise ValueError(f"length {L} not divisible by token size {token_size}")
    n = L // token_size
    y = x.reshape(*lead, C, n, token_size)
    y = np.moveaxis(y, -2, -3)  # ..., n, C, S
    return np.ascontiguousarray(y).reshape(*lead, n, C * token_size)


def detokenize(seq: TokenSequence) -> np.ndarray:
    return detokenize_array(seq.tokens, seq.n_channels, seq.token_size)


def detokenize_array(tokens: np.ndarray, n_channels: int, token_size: int) -> np.ndarray:
    *lead, n, _ = tokens.shape
    y = tokens.reshape(*lead, n, n_channels, token_size)
    y = np.moveaxis(y, -3, -2)
    return np.ascontiguousarray(y).reshape(*lead, n_channels, n * token_size)


# ----------------------------------------------------------- synthetic corpus
@dataclass
class CorpusSpec:
    n_classes: int = 8
    n_subjects: int = 4
    channels: int = 32
    min_channels: int = 24  # pretraining recordings vary in channel count
    raw_length: int = 640
    sample_rate_hz: float = 1000.0
    n_pretrain: int = 512
    n_train: int = 256
    n_test: int = 64
    image_size: int = 32
    freqs_per_class: int = 3
    freq_range_hz: tuple[float, float] = (15.0, 80.0)
    signal_amp: float = 1.0
    subject_amp: float = 1.0
    noise_amp: float = 1.0
    ar_coef: float = 0.9

    def validate(self) -> None:
        if self.n_classes < 2 or self.n_subjects < 1:
            raise ValueError("need at least 2 classes and 1 subject")
        if not 1 <= self.min_channels <= self.channels:
            raise ValueError("channel range invalid")
        if min(self.n_pretrain, self.n_train, self.n_test) < 0 or self.raw_length < FILTER_TAPS:
            raise ValueError("sample counts must be >= 0 and raw_length >= filter taps")
        if self.image_size < 8 or self.freqs_per_class < 1:
            raise ValueError("image_size >= 8 and freqs_per_class >= 1 required")
        lo, hi = self.freq_range_hz
        if not 0 < lo < hi < self.sample_rate_hz / 2:
            raise ValueError("frequency range must lie below Nyquist")
        if not 0 <= self.ar_coef < 1 or self.noise_amp < 0:
            raise ValueError("AR coefficient in [0, 1) and non-negative noise required")


# stream ids keep per-sample generators independent across corpus parts
_STREAM_PRETRAIN, _STREAM_TRAIN, _STREAM_TEST, _STREAM_CLASS, _STREAM_SUBJECT = range(5)


def _stream(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


@dataclass
class _Generators:
    freqs: np.ndarray  # K×F
    class_gain: np.ndarray  # K×F×C
    subject_offset: np.ndarray  # subjects×C
    subject_freq: np.ndarray  # subjects
    subject_gain: np.ndarray  # subjects×C


def _class_structure(spec: CorpusSpec, seed: int) -> _Generators:
    K, F, C = spec.n_classes, spec.freqs_per_class, spec.channels
    lo, hi = spec.freq_range_hz
    freqs = np.zeros((K, F))
    gains = np.zeros((K, F, C))
    for k in range(K):
        rng = _stream(seed, _STREAM_CLASS, k)
        freqs[k] = np.sort(rng.uniform(lo, hi, size=F))
        gains[k] = rng.normal(size=(F, C))
    offsets = np.zeros((spec.n_subjects, C))
    sfreq = np.zeros(spec.n_subjects)
    sgain = np.zeros((spec.n_subjects, C))
    for s in range(spec.n_subjects):
        rng = _stream(seed, _STREAM_SUBJECT, s)
        offsets[s] = rng.normal(size=C)
        sfreq[s] = rng.uniform(lo, hi)
        sgain[s] = rng.normal(size=C)
    return _Generators(freqs, gains, offsets, sfreq, sgain)


def _make_recording(spec: CorpusSpec, g: _Generators, k: int, s: int, n_channels: int,
                    rng: np.random.Generator) -> np.ndarray:
    L, fs = spec.raw_length, spec.sample_rate_hz
    t = np.arange(L) / fs
    x = np.zeros((n_channels, L))
    for j, f in enumerate(g.freqs[k]):
        phase = rng.uniform(0, 2 * np.pi)
        x += spec.signal_amp * g.class_gain[k, j, :n_channels, None] * np.sin(2 * np.pi * f * t + phase)
    phase = rng.uniform(0, 2 * np.pi)
    x += spec.subject_amp * (g.subject_offset[s, :n_channels, None]
                             + g.subject_gain[s, :n_channels, None] * np.sin(2 * np.pi * g.subject_freq[s] * t + phase))
    if spec.noise_amp > 0:
        e = rng.normal(size=(n_channels, L)) * spec.noise_amp * np.sqrt(1 - spec.ar_coef**2)
        noise = np.zeros_like(e)
        noise[:, 0] = rng.normal(size=n_channels) * spec.noise_amp
        for i in range(1, L):
            noise[:, i] = spec.ar_coef * noise[:, i - 1] + e[:, i]
        x += noise
    return x.astype(np.float32)


_SHAPES = ("circle", "square", "triangle", "cross", "ring", "hbar", "vbar", "diamond")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def class_image(k: int, n_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural 3×size×size image: class hue and primitive, jittered position and scale."""
    color = _hsv_to_rgb(k / n_classes, 0.85, 0.95)
    shape = _SHAPES[k % len(_SHAPES)]
    cy, cx = size / 2 + rng.uniform(-size / 8, size / 8, size=2)
    r = size * 0.28 * rng.uniform(0.8, 1.2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        m = dy**2 + dx**2 <= r**2
    elif shape == "square":
        m = (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    elif shape == "triangle":
        m = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    elif shape == "cross":
        m = ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r))
    elif shape == "ring":
        d2 = dy**2 + dx**2
        m = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    elif shape == "hbar":
        m = (np.abs(dy) <= r * 0.4) & (np.abs(dx) <= r * 1.2)
    elif shape == "vbar":
        m = (np.abs(dx) <= r * 0.4) & (np.abs(dy) <= r * 1.2)
    else:
        m = np.abs(dy) + np.abs(dx) <= r * 1.1
    img = np.full((3, size, size), 0.1)
    img[:, m] = color[:, None]
    return img.astype(np.float32)


def generate_synthetic_corpus(spec: CorpusSpec, seed: int
                              ) -> tuple[list[EegRecording], PairedDataset, PairedDataset]:
    """Unlabelled pretraining recordings plus train/test EEG-image pairs.

    Recordings mix class-keyed sinusoids (per-class frequencies and channel
    gains), a subject-specific offset and rhythm, and AR(1) noise.
    """
    spec.validate()
    g = _class_structure(spec, seed)
    K = spec.n_classes

    pretrain = []
    for i in range(spec.n_pretrain):
        rng = _stream(seed, _STREAM_PRETRAIN, i)
        k, s = int(rng.integers(K)), int(rng.integers(spec.n_subjects))
        c = int(rng.integers(spec.min_channels, spec.channels + 1))
        x = _make_recording(spec, g, k, s, c, rng)
        pretrain.append(EegRecording(x, spec.sample_rate_hz, s, None))

    def paired(n: int, stream: int, split: str) -> PairedDataset:
        recs, imgs, labels = [], [], []
        for i in range(n):
            rng = _stream(seed, stream, i)
            k = i % K  # balanced classes
            s = int(rng.integers(spec.n_subjects))
            recs.append(EegRecording(_make_recording(spec, g, k, s, spec.channels, rng),
                                     spec.sample_rate_hz, s, k))
            imgs.append(class_image(k, K, spec.image_size, rng))
            labels.append(k)
        images = np.stack(imgs) if imgs else np.zeros((0, 3, spec.image_size, spec.image_size), np.float32)
        return PairedDataset(recs, images, np.array(labels, dtype=np.int64), K, split)

    return pretrain, paired(spec.n_train, _STREAM_TRAIN, "train"), paired(spec.n_test, _STREAM_TEST, "test")


# ---------------------------------------------------------------- corpus I/O
MAGIC = b"EEGC"
VERSION = 1
_SPLITS = {"none": 0, "train": 1, "test": 2}


class CorpusFormatError(ValueError):
    pass


class NotACorpusError(CorpusFormatError):
    pass


def save_corpus(path, data: "list[EegRecording] | PairedDataset") -> None:
    """Write recordings or a paired dataset in the little-endian EEGC format."""
    paired = isinstance(data, PairedDataset)
    recs = data.recordings if paired else list(data)
    split = _SPLITS[data.split] if paired else 0
    n_classes = data.n_classes if paired else 0
    parts = [MAGIC, struct.pack("<HIBBH", VERSION, len(recs), int(paired), split, n_classes)]
    for i, rec in enumerate(recs):
        C, L = rec.samples.shape
        label = -1 if rec.label is None else int(rec.label)
        parts.append(struct.pack("<IifII", rec.subject_id, label, rec.sample_rate_hz, C, L))
        parts.append(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
        if paired:
            _, H, W = data.images[i].shape
            parts.append(struct.pack("<II", H, W))
            parts.append(np.ascontiguousarray(data.images[i], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise CorpusFormatError(
                f"truncated corpus: {what} needs bytes [{self.pos}, {end}) but file has {len(self.buf)} bytes"
            )
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        arr = np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise CorpusFormatError(f"non-finite values in {what}")
        return arr


def load_corpus(path) -> "list[EegRecording] | PairedDataset":
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise NotACorpusError(f"{path}: not a corpus file (bad magic {buf[:4]!r})")
    r = _Reader(buf)
    r.take(4, "magic")
    version, count, paired, split, n_classes = r.unpack("<HIBBH", "header")
    if version != VERSION:
        raise CorpusFormatError(f"unsupported corpus version {version} (expected {VERSION})")
    recs, images = [], []
    for i in range(count):
        subject, label, fs, C, L = r.unpack("<IifII", f"record {i} header")
        x = r.floats(C * L, f"record {i} samples").reshape(C, L)
        recs.append(EegRecording(x, float(fs), subject, None if label < 0 else label))
        if paired:
            H, W = r.unpack("<II", f"record {i} image header")
            images.append(r.floats(3 * H * W, f"record {i} image").reshape(3, H, W))
    if r.pos != len(buf):
        raise CorpusFormatError(f"{len(buf) - r.pos} trailing bytes after last record")
    if not paired:
        return recs
    split_name = {v: k for k, v in _SPLITS.items()}.get(split, "none")
    imgs = np.stack(images) if images else np.zeros((0, 3, 1, 1), np.float32)
    return PairedDataset(recs, imgs, np.array([r.label for r in recs], dtype=np.int64), n_classes, split_name)


def preprocess_batch(recs: list[EegRecording], config: PreprocessConfig) -> np.ndarray:
    """Stack preprocessed recordings into a B×C×L float32 array."""
    if not recs:
        return np.zeros((0, config.target_channels, config.target_length), np.float32)
    return np.stack([preprocess(r, config).samples for r in recs]).astype(np.float32)
