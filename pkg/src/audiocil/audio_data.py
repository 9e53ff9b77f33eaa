"""Audio datasets, manifest ingestion and log-mel features."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable

import numpy as np

logger = logging.getLogger(__name__)

CACHE_ENV = "AUDIOCIL_CACHE"
SPLITS = ("train", "test")


class AudioDataError(ValueError):
    pass


class UnknownDatasetError(AudioDataError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_fft: int = 400
    hop: int = 160
    n_mels: int = 64
    floor_epsilon: float = 1e-10
    clip_seconds: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise AudioDataError(f"feature config {k} must be positive, got {v!r}")

    @property
    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def n_frames(self) -> int:
        return 1 + self.clip_samples // self.hop


@dataclass
class AudioClip:
    id: str
    samples: np.ndarray
    sample_rate: int
    label: Hashable

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise AudioDataError(f"clip {self.id}: sample_rate must be positive")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioDataError(f"clip {self.id}: waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise AudioDataError(f"clip {self.id}: waveform contains NaN or Inf")


@dataclass(frozen=True)
class FeatureTensor:
    values: np.ndarray
    config_hash: str

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class ClipRef:
    id: str
    label: Hashable
    path: Path | None = None
    waveform: np.ndarray | None = None
    sample_rate: int | None = None


@dataclass
class Dataset:
    name: str
    split: str
    items: list[ClipRef]
    class_set: tuple = field(default=())

    def __post_init__(self):
        if not self.class_set:
            self.class_set = tuple(sorted({it.label for it in self.items}, key=_label_key))
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise AudioDataError(f"dataset {self.name}/{self.split}: clip ids are not unique")
        allowed = set(self.class_set)
        bad = [it.id for it in self.items if it.label not in allowed]
        if bad:
            raise AudioDataError(f"clips with labels outside class_set: {bad[:5]}")
        self._by_id = {it.id: it for it in self.items}

    def __len__(self) -> int:
        return len(self.items)

    @property
    def samples(self) -> list[tuple[str, Hashable]]:
        return [(it.id, it.label) for it in self.items]

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    def clip(self, clip_id: str) -> AudioClip:
        ref = self._by_id[clip_id]
        if ref.waveform is not None:
            return AudioClip(ref.id, ref.waveform, ref.sample_rate, ref.label)
        samples, sr = read_wav(ref.path)
        return AudioClip(ref.id, samples, sr, ref.label)


def _label_key(label):
    return (type(label).__name__, label)


# --------------------------------------------------------------------------- wav io


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM WAV file as float samples in [-1, 1] (mono mixdown)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            width = fh.getsampwidth()
            channels = fh.getnchannels()
            sr = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioDataError(f"cannot read audio file {path}: {exc}") from exc
    if width != 2:
        raise AudioDataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    if data.size == 0:
        raise AudioDataError(f"{path}: empty audio")
    return data, sr


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------- features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular HTK-mel filterbank of shape (n_mels, n_fft // 2 + 1)."""
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_freqs - lower) / (center - lower)
    down = (upper - fft_freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def resample(samples: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return samples
    n_out = int(round(len(samples) * sr_out / sr_in))
    t_out = np.arange(n_out) / sr_out
    t_in = np.arange(len(samples)) / sr_in
    return np.interp(t_out, t_in, samples)


def fix_length(samples: np.ndarray, length: int) -> np.ndarray:
    """Center-pad with zeros or center-truncate to ``length`` samples."""
    n = len(samples)
    if n == length:
        return samples
    if n > length:
        start = (n - length) // 2
        return samples[start : start + length]
    left = (length - n) // 2
    return np.pad(samples, (left, length - n - left))


def power_spectrogram(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centered (reflect-padded) periodic-Hann STFT power, shape (n_fft//2+1, n_frames)."""
    if len(samples) <= n_fft // 2:
        raise AudioDataError(
            f"clip of {len(samples)} samples is shorter than one analysis window ({n_fft})"
        )
    padded = np.pad(samples, n_fft // 2, mode="reflect")
    n_frames = 1 + (len(padded) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T


def extract_logmel(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> FeatureTensor:
    x = clip.samples
    if not np.all(np.isfinite(x)):
        raise AudioDataError(f"clip {clip.id}: waveform contains NaN")
    if len(x) < cfg.n_fft * clip.sample_rate / cfg.sample_rate:
        raise AudioDataError(f"clip {clip.id} is shorter than one analysis window")
    x = resample(x, clip.sample_rate, cfg.sample_rate)
    x = fix_length(x, cfg.clip_samples)
    power = power_spectrogram(x, cfg.n_fft, cfg.hop)
    mel = _filterbank(cfg) @ power
    values = np.log(np.maximum(mel, cfg.floor_epsilon))
    return FeatureTensor(values.astype(np.float32), cfg.config_hash)


_FB_CACHE: dict = {}


def _filterbank(cfg: FeatureConfig) -> np.ndarray:
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


class FeatureBank:
    """Log-mel features for every clip of one or more datasets, keyed by clip id.

    When ``cache_dir`` (or ``$AUDIOCIL_CACHE``) is set, features are stored as
    ``<cache_dir>/<config_hash>/<clip id>.npy`` and reused.
    """

    def __init__(self, cfg: FeatureConfig, cache_dir=None):
        self.cfg = cfg
        cache_dir = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV)
        self.cache_dir = Path(cache_dir) / cfg.config_hash if cache_dir else None
        self._store: dict[str, np.ndarray] = {}
        self.labels: dict[str, Hashable] = {}

    def add(self, dataset: Dataset) -> "FeatureBank":
        for ref in dataset.items:
            if ref.id in self._store:
                continue
            self._store[ref.id] = self._compute(dataset, ref.id)
            self.labels[ref.id] = ref.label
        return self

    def _compute(self, dataset: Dataset, clip_id: str) -> np.ndarray:
        path = None
        if self.cache_dir is not None:
            safe = hashlib.sha1(clip_id.encode()).hexdigest()
            path = self.cache_dir / f"{safe}.npy"
            if path.exists():
                return np.load(path)
        values = extract_logmel(dataset.clip(clip_id), self.cfg).values
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, values)
        return values

    def __getitem__(self, clip_id: str) -> np.ndarray:
        return self._store[clip_id]

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._store

    def stack(self, ids) -> np.ndarray:
        """Features for ``ids`` as an (N, 1, n_mels, n_frames) float32 array."""
        if len(ids) == 0:
            return np.zeros((0, 1, self.cfg.n_mels, self.cfg.n_frames), dtype=np.float32)
        return np.stack([self._store[i] for i in ids])[:, None]


# --------------------------------------------------------------------------- datasets


def generate_synthetic(num_classes: int, per_class: int, seed: int = 1993, split: str = "train",
                       sample_rate: int = 16000, seconds: float = 1.0) -> Dataset:
    """Harmonic tones: class ``c`` has fundamental 200 + 100*c Hz plus two harmonics.

    Every clip gets random component phases and Gaussian noise (sigma 0.05).
    Train and test draw from different seed streams.
    """
    if num_classes < 2:
        raise AudioDataError("synthetic dataset needs at least 2 classes")
    if split not in SPLITS:
        raise AudioDataError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    amps = (0.5, 0.25, 0.125)
    items = []
    for c in range(num_classes):
        f0 = 200.0 + 100.0 * c
        for k in range(per_class):
            phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
            x = sum(a * np.sin(2.0 * np.pi * (h + 1) * f0 * t + p)
                    for h, (a, p) in enumerate(zip(amps, phases)))
            x = x + rng.normal(0.0, 0.05, size=t.shape)
            x = np.clip(x, -1.0, 1.0)
            items.append(ClipRef(f"syn-{split}-{c:03d}-{k:04d}", c, waveform=x,
                                 sample_rate=sample_rate))
    return Dataset("synthetic", split, items, tuple(range(num_classes)))


def read_manifest(manifest_path, split: str, name: str = "manifest") -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise AudioDataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    items = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing_cols = {"id", "path", "label", "split"} - set(reader.fieldnames or ())
        if missing_cols:
            raise AudioDataError(f"{manifest_path}: missing columns {sorted(missing_cols)}")
        for row in reader:
            if row["split"] != split:
                continue
            path = root / row["path"]
            if not path.is_file():
                raise AudioDataError(f"audio file not found: {path}")
            items.append(ClipRef(row["id"], row["label"], path=path))
    if not items:
        raise AudioDataError(f"{manifest_path}: no rows for split {split!r}")
    return Dataset(name, split, items)


def _load_corpus(name: str, expected_classes: int):
    def loader(manifest_path, split, **_):
        if manifest_path is None:
            raise AudioDataError(f"dataset {name} requires a manifest_path")
        ds = read_manifest(manifest_path, split, name)
        if len(ds.class_set) != expected_classes:
            logger.warning("%s manifest has %d classes, expected %d",
                           name, len(ds.class_set), expected_classes)
        return ds
    return loader


def _load_synthetic(manifest_path, split, num_classes=10, train_per_class=30,
                    test_per_class=20, seed=1993, **_):
    if manifest_path is not None:
        return read_manifest(manifest_path, split, "synthetic")
    per_class = train_per_class if split == "train" else test_per_class
    return generate_synthetic(num_classes, per_class, seed, split)


DATASETS = {
    "ls-100": _load_corpus("ls-100", 100),
    "nsynth-100": _load_corpus("nsynth-100", 100),
    "synthetic": _load_synthetic,
}


def load_dataset(name: str, manifest_path=None, split: str = "train", **options) -> Dataset:
    """Load a registered dataset split.

    ``options`` are forwarded to the loader (the synthetic loader accepts
    ``num_classes``, ``train_per_class``, ``test_per_class`` and ``seed``).
    """
    if name not in DATASETS:
        raise UnknownDatasetError(
            f"unknown dataset {name!r}; registered: {sorted(DATASETS)}"
        )
    if split not in SPLITS:
        raise AudioDataError(f"unknown split {split!r}; expected one of {SPLITS}")
    return DATASETS[name](manifest_path, split, **options)
