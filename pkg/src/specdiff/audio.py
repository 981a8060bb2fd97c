"""Mono audio container plus WAV read/write."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from specdiff.errors import ConfigError


class WavError(IOError):
    """Malformed, truncated, or unsupported WAV file."""


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ConfigError(f"AudioBuffer is mono only, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples must be finite")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def peak_normalize(x: np.ndarray, peak: float = 0.95) -> np.ndarray:
    m = np.max(np.abs(x)) if x.size else 0.0
    if m == 0:
        return x.copy()
    return x * (peak / m)


def write_wav(path, buf: AudioBuffer, subtype: str = "float32") -> None:
    """Write ``buf`` as mono ``float32`` or ``pcm16``."""
    if subtype == "float32":
        data = buf.samples.astype(np.float32)
    elif subtype == "pcm16":
        clipped = np.clip(buf.samples, -1.0, 1.0 - 2.0**-15)
        data = np.round(clipped * 32768.0).astype(np.int16)
    else:
        raise ConfigError(f"unsupported WAV subtype {subtype!r}")
    wavfile.write(Path(path), int(buf.sample_rate), data)


def read_wav(path) -> AudioBuffer:
    """Read a mono PCM16 or float32 WAV.

    Truncated files raise :class:`WavError` instead of returning the
    partial buffer scipy would hand back.
    """
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", wavfile.WavFileWarning)
            rate, data = wavfile.read(Path(path))
    except (ValueError, wavfile.WavFileWarning, EOFError) as exc:
        raise WavError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise WavError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample format {data.dtype}")
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    return AudioBuffer(samples, int(rate))
