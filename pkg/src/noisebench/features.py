"""Log-mel spectrogram front end and fixed-length patch slicing.

Waveforms become 96-band log-mel matrices (Hann-windowed STFT power, HTK mel
triangles, natural log with a positive floor), which are then cut into
2-second patches that inherit the clip-level label: short clips are tiled
cyclically up to one patch, long clips yield consecutive non-overlapping
patches with the trailing remainder discarded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import AudioClip
from .errors import ConfigError


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 44100
    fft_size: int = 2048
    hop: int = 1024
    window: str = "hann"
    n_mels: int = 96
    fmin: float = 0.0
    fmax: float | None = None  # defaults to sample_rate / 2
    log_floor: float = 1e-10
    patch_seconds: float = 2.0

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.sample_rate / 2)
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")
        if not 1 <= self.hop <= self.fft_size:
            raise ConfigError("hop must satisfy 1 <= hop <= fft_size")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate / 2")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.patch_seconds <= 0:
            raise ConfigError("patch_seconds must be positive")

    @property
    def frame_rate(self) -> float:
        """STFT frames per second."""
        return self.sample_rate / self.hop

    @property
    def patch_frames(self) -> int:
        return int(round(self.patch_seconds * self.frame_rate))


@dataclass
class LogMelMatrix:
    values: np.ndarray  # (n_mels, n_frames)
    clip_id: str
    frame_rate: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class LogMelPatch:
    values: np.ndarray  # (n_mels, patch_frames)
    clip_id: str
    inherited_label: int
    patch_index: int


def _hann(n: int) -> np.ndarray:
    # Periodic Hann, the usual choice for spectral analysis.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(clip: AudioClip, cfg: FeatureConfig) -> np.ndarray:
    """Power spectrogram, shape (fft_size // 2 + 1, n_frames).

    Frame t covers samples [t * hop, t * hop + fft_size) of the
    reflection-padded signal; n_frames = ceil(len / hop). Each bin is the
    squared magnitude of the Hann-windowed DFT.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"clip {clip.clip_id!r} has sample rate {clip.sample_rate}, "
            f"config expects {cfg.sample_rate}"
        )
    x = np.asarray(clip.samples, dtype=np.float64)
    n = x.size
    n_frames = -(-n // cfg.hop)
    needed = (n_frames - 1) * cfg.hop + cfg.fft_size
    if needed > n:
        x = np.pad(x, (0, needed - n), mode="reflect" if n > 1 else "edge")
    frames = sliding_window_view(x, cfg.fft_size)[:: cfg.hop][:n_frames]
    spectrum = np.fft.rfft(frames * _hann(cfg.fft_size), axis=1)
    return (spectrum.real**2 + spectrum.imag**2).T


def mel_scale(freq_hz):
    """HTK mel scale: 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, fft_size // 2 + 1).

    Filter centers are equally spaced on the mel scale between fmin and
    fmax; each filter rises linearly from its left edge to a peak of 1 at
    its center and falls to zero at its right edge.
    """
    edges_hz = mel_to_hz(np.linspace(mel_scale(cfg.fmin), mel_scale(cfg.fmax), cfg.n_mels + 2))
    bin_hz = np.fft.rfftfreq(cfg.fft_size, d=1.0 / cfg.sample_rate)
    lower, center, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.max(axis=1) <= 0.0)
    if empty.size:
        raise ConfigError(
            f"mel filter {empty[0]} has empty support; reduce n_mels or "
            "increase fft_size"
        )
    return weights


def extract_logmel(clip: AudioClip, cfg: FeatureConfig) -> LogMelMatrix:
    """Natural-log mel spectrogram, floored at log(log_floor)."""
    power = stft_power(clip, cfg)
    mel_power = mel_filterbank(cfg) @ power
    values = np.log(np.maximum(mel_power, cfg.log_floor))
    return LogMelMatrix(values, clip.clip_id, cfg.frame_rate)


def patchify(matrix: LogMelMatrix, label: int, cfg: FeatureConfig) -> list[LogMelPatch]:
    """Cut a log-mel matrix into fixed-length patches carrying the clip label.

    Shorter inputs are tiled cyclically along time to fill one patch; longer
    inputs yield floor(n_frames / patch_frames) consecutive patches and the
    remainder is dropped.
    """
    n_patch = cfg.patch_frames
    if n_patch < 1:
        raise ConfigError("patch_frames must be >= 1; increase patch_seconds or frame rate")
    values = matrix.values
    n_frames = matrix.n_frames
    if n_frames < n_patch:
        reps = -(-n_patch // n_frames)
        chunks = [np.tile(values, reps)[:, :n_patch]]
    else:
        chunks = [
            values[:, i * n_patch : (i + 1) * n_patch] for i in range(n_frames // n_patch)
        ]
    return [
        LogMelPatch(chunk, matrix.clip_id, label, i) for i, chunk in enumerate(chunks)
    ]


# ---------------------------------------------------------------------------
# Feature cache: one binary file per clip, little-endian layout
#   int32 n_mels, int32 n_frames, float32 frame_rate, then row-major float32.
# ---------------------------------------------------------------------------

_CACHE_HEADER = struct.Struct("<iif")


def save_feature_cache(path: str | Path, matrix: LogMelMatrix) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(matrix.values, dtype="<f4")
    with path.open("wb") as fh:
        fh.write(_CACHE_HEADER.pack(values.shape[0], values.shape[1], matrix.frame_rate))
        fh.write(values.tobytes())


def load_feature_cache(path: str | Path, clip_id: str | None = None) -> LogMelMatrix:
    path = Path(path)
    with path.open("rb") as fh:
        n_mels, n_frames, frame_rate = _CACHE_HEADER.unpack(fh.read(_CACHE_HEADER.size))
        values = np.frombuffer(fh.read(4 * n_mels * n_frames), dtype="<f4")
    if values.size != n_mels * n_frames:
        raise ConfigError(f"{path}: truncated feature cache")
    return LogMelMatrix(
        values.reshape(n_mels, n_frames).copy(),
        clip_id if clip_id is not None else path.stem,
        frame_rate,
    )
