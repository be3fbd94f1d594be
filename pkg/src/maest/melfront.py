"""PCM audio to log-compressed mel spectrograms, plus the half-precision store.

The front end mirrors the corpus build used for training: mono 16 kHz input,
96-band mel spectrograms from 32 ms Hann windows with a 16 ms hop, energies
compressed with log10(1 + 10000 x), and records persisted as little-endian
float16 payloads behind a plain-text index.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.io import wavfile

from .errors import (
    ConfigError,
    DegenerateStats,
    DomainError,
    EmptyInput,
    FormatError,
    InputTooShort,
    NotFound,
)

LOG_COMPRESS_GAIN = 10000.0
TARGET_SAMPLE_RATE = 16000
CROP_SECONDS = 30.0

# Spectrogram record header: magic, version, band_count, frame_count, hop_ms.
RECORD_MAGIC = b"MAESTSPC"
RECORD_VERSION = 1
_HEADER = struct.Struct("<8sHHIH")


@dataclass
class AudioClip:
    """Mono PCM audio, float32 samples in [-1, 1]."""

    samples: NDArray[np.float32]
    sample_rate: int = TARGET_SAMPLE_RATE

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    n_bands: int = 96
    window_ms: int = 32
    hop_ms: int = 16
    sample_rate: int = TARGET_SAMPLE_RATE
    fmin_hz: float = 0.0
    fmax_hz: float | None = None  # None -> Nyquist

    def __post_init__(self):
        if self.n_bands < 1:
            raise ConfigError("n_bands must be >= 1")
        if not (0 < self.hop_ms < self.window_ms):
            raise ConfigError("need window > hop > 0")

    @property
    def window_samples(self) -> int:
        return self.window_ms * self.sample_rate // 1000

    @property
    def hop_samples(self) -> int:
        return self.hop_ms * self.sample_rate // 1000


@dataclass
class MelSpectrogram:
    """Log-compressed mel energies, [bands, frames]."""

    data: NDArray[np.float32]
    hop_ms: int = 16

    @property
    def band_count(self) -> int:
        return self.data.shape[0]

    @property
    def frame_count(self) -> int:
        return self.data.shape[1]


@dataclass
class NormStats:
    """Corpus-wide scalar mean/std used to normalize model input."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateStats(f"std must be > 0, got {self.std}")


def load_wav(path, min_duration_s: float = 0.0) -> AudioClip:
    """Read a 16-bit or float PCM WAV file, downmix to mono.

    Only 16 kHz input is accepted; resampling is out of scope. The minimum
    duration is enforced for training-corpus ingestion and disabled
    (``min_duration_s=0``) everywhere else.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise NotFound(f"no such audio file: {path}")
    except ValueError as exc:
        raise FormatError(f"unreadable WAV file {path}: {exc}")
    if rate != TARGET_SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {rate}, expected {TARGET_SAMPLE_RATE}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float32)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 2:  # channel downmix by mean
        samples = samples.mean(axis=1).astype(np.float32)
    clip = AudioClip(samples=samples, sample_rate=rate)
    if min_duration_s > 0 and clip.duration_s < min_duration_s:
        raise InputTooShort(
            f"{path}: {clip.duration_s:.2f}s is below the {min_duration_s:.0f}s minimum"
        )
    return clip


def center_crop_30s(clip: AudioClip) -> AudioClip:
    """Take 30 seconds from the center; shorter clips pass through unchanged."""
    target = int(CROP_SECONDS * clip.sample_rate)
    n = len(clip.samples)
    if n <= target:
        return clip
    left = (n - target) // 2
    return AudioClip(samples=clip.samples[left : left + target], sample_rate=clip.sample_rate)


def log_compress(x):
    """log10(1 + 10000 x) applied elementwise; domain x >= 0."""
    arr = np.asarray(x)
    if np.any(arr < 0):
        raise DomainError("log_compress requires non-negative input")
    out = np.log10(1.0 + LOG_COMPRESS_GAIN * arr)
    return out if isinstance(x, np.ndarray) else float(out)


def hz_to_mel(hz):
    # HTK formula.
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> NDArray[np.float64]:
    """Triangular HTK-mel filterbank, [n_bands, n_fft//2 + 1], unit peak."""
    n_fft = cfg.window_samples
    fmax = cfg.fmax_hz if cfg.fmax_hz is not None else cfg.sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(fmax), cfg.n_bands + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate / n_fft
    fb = np.zeros((cfg.n_bands, len(bin_freqs)))
    for b in range(cfg.n_bands):
        left, center, right = hz_pts[b], hz_pts[b + 1], hz_pts[b + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        fb[b] = np.maximum(0.0, np.minimum(up, down))
    return fb


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    """Number of full analysis windows: floor((len - window)/hop) + 1."""
    if n_samples < cfg.window_samples:
        raise InputTooShort(
            f"clip of {n_samples} samples is shorter than one {cfg.window_samples}-sample window"
        )
    return (n_samples - cfg.window_samples) // cfg.hop_samples + 1


def frames_for_duration(seconds: float, cfg: MelConfig | None = None) -> int:
    """Frames produced by a clip of the given duration (same framing formula)."""
    cfg = cfg or MelConfig()
    return frame_count(int(round(seconds * cfg.sample_rate)), cfg)


def compute_mel(clip: AudioClip, cfg: MelConfig | None = None) -> MelSpectrogram:
    """Log-compressed mel spectrogram of a mono 16 kHz clip.

    Power spectrum of Hann-windowed frames (no padding or centering, so the
    frame count follows `frame_count` exactly), projected through the HTK
    triangular filterbank, then compressed with log10(1 + 10000 x).
    """
    cfg = cfg or MelConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise FormatError(
            f"clip sample rate {clip.sample_rate}, config expects {cfg.sample_rate}"
        )
    samples = np.asarray(clip.samples, dtype=np.float64)
    if samples.ndim != 1:
        raise FormatError("clip must be mono")
    n_frames = frame_count(len(samples), cfg)
    win = cfg.window_samples
    hop = cfg.hop_samples
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx]
    window = _hann_periodic(win)
    spectrum = np.fft.rfft(frames * window, n=win, axis=1)
    power = np.abs(spectrum) ** 2
    mel = mel_filterbank(cfg) @ power.T  # [bands, frames]
    return MelSpectrogram(data=log_compress(mel).astype(np.float32), hop_ms=cfg.hop_ms)


def _hann_periodic(n: int) -> NDArray[np.float64]:
    # Periodic (DFT-even) Hann, the usual STFT convention.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def normalize(spec: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    """(x - mean) / std elementwise."""
    if not stats.std > 0:
        raise DegenerateStats("std must be > 0")
    out = (spec.data.astype(np.float32) - np.float32(stats.mean)) / np.float32(stats.std)
    return MelSpectrogram(data=out.astype(np.float32), hop_ms=spec.hop_ms)


def denormalize(spec: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    out = spec.data.astype(np.float32) * np.float32(stats.std) + np.float32(stats.mean)
    return MelSpectrogram(data=out, hop_ms=spec.hop_ms)


def center_crop_frames(spec: MelSpectrogram, n_frames: int) -> MelSpectrogram:
    """Center crop along time; right-pads with zeros if the input is shorter."""
    frames = spec.frame_count
    if frames >= n_frames:
        left = (frames - n_frames) // 2
        data = spec.data[:, left : left + n_frames]
    else:
        data = np.zeros((spec.band_count, n_frames), dtype=spec.data.dtype)
        data[:, :frames] = spec.data
    return MelSpectrogram(data=data, hop_ms=spec.hop_ms)


class SpectrogramStore:
    """Directory of f16 spectrogram records plus a tab-separated index.

    Index lines are `track_id<TAB>relative_path<TAB>comma-separated-label-ids`.
    Records are little-endian float16, bands-major, behind an 18-byte header.
    Writes to distinct track ids are safe from concurrent workers; index
    updates are append-only and serialized by the caller.
    """

    INDEX_NAME = "index.tsv"

    def __init__(self, directory, create: bool = False):
        self.directory = Path(directory)
        if create:
            self.directory.mkdir(parents=True, exist_ok=True)
        if not self.directory.is_dir():
            raise NotFound(f"store directory does not exist: {self.directory}")
        self._index: dict[str, tuple[str, list[int]]] = {}
        self._load_index()

    def _index_path(self) -> Path:
        return self.directory / self.INDEX_NAME

    def _load_index(self):
        path = self._index_path()
        if not path.exists():
            return
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"malformed index line: {line!r}")
            track_id, rel, labels = parts
            label_ids = [int(t) for t in labels.split(",")] if labels else []
            self._index[track_id] = (rel, label_ids)

    def track_ids(self) -> list[str]:
        return list(self._index.keys())

    def __contains__(self, track_id: str) -> bool:
        return track_id in self._index

    def __len__(self) -> int:
        return len(self._index)

    def labels(self, track_id: str) -> list[int]:
        if track_id not in self._index:
            raise NotFound(f"unknown track id: {track_id}")
        return list(self._index[track_id][1])

    def track_labels(self) -> dict[str, list[int]]:
        return {tid: list(entry[1]) for tid, entry in self._index.items()}

    def write(self, spec: MelSpectrogram, track_id: str, labels=()) -> Path:
        if any(c in track_id for c in "\t\n/\\") or not track_id:
            raise ConfigError(f"track id not filename-safe: {track_id!r}")
        if not np.all(np.isfinite(spec.data)):
            raise FormatError(f"non-finite spectrogram for track {track_id}")
        rel = f"{track_id}.spc"
        payload = spec.data.astype(np.float16)  # numpy rounds to nearest even
        header = _HEADER.pack(
            RECORD_MAGIC, RECORD_VERSION, spec.band_count, spec.frame_count, spec.hop_ms
        )
        with open(self.directory / rel, "wb") as fh:
            fh.write(header)
            fh.write(payload.astype("<f2").tobytes(order="C"))
        label_ids = [int(l) for l in labels]
        with open(self._index_path(), "a", encoding="utf-8") as fh:
            fh.write(f"{track_id}\t{rel}\t{','.join(str(l) for l in label_ids)}\n")
        self._index[track_id] = (rel, label_ids)
        return self.directory / rel

    def read(self, track_id: str) -> MelSpectrogram:
        if track_id not in self._index:
            raise NotFound(f"unknown track id: {track_id}")
        rel, _ = self._index[track_id]
        raw = (self.directory / rel).read_bytes()
        if len(raw) < _HEADER.size:
            raise FormatError(f"record too short: {rel}")
        magic, version, bands, frames, hop_ms = _HEADER.unpack_from(raw)
        if magic != RECORD_MAGIC:
            raise FormatError(f"bad magic in {rel}: {magic!r}")
        if version != RECORD_VERSION:
            raise FormatError(f"unsupported record version {version} in {rel}")
        expected = bands * frames * 2
        payload = raw[_HEADER.size :]
        if len(payload) != expected:
            raise FormatError(
                f"payload of {rel} is {len(payload)} bytes, expected {expected}"
            )
        data = np.frombuffer(payload, dtype="<f2").reshape(bands, frames)
        return MelSpectrogram(data=data.astype(np.float32), hop_ms=hop_ms)


def compute_stats(store: SpectrogramStore, subset) -> NormStats:
    """Scalar mean/std over all cells of the subset, single streaming pass.

    Population (biased) convention; float64 accumulators.
    """
    subset = list(subset)
    if not subset:
        raise EmptyInput("compute_stats needs a non-empty subset")
    count = 0
    total = 0.0
    total_sq = 0.0
    for track_id in subset:
        data = store.read(track_id).data.astype(np.float64)
        count += data.size
        total += float(data.sum())
        total_sq += float(np.square(data).sum())
    mean = total / count
    var = total_sq / count - mean * mean
    if var <= 0:
        raise DegenerateStats(f"zero variance over subset of {len(subset)} records")
    return NormStats(mean=mean, std=math.sqrt(var))
