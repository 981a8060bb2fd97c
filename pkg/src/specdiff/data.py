"""Deterministic synthetic audio standing in for speech/music corpora."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from specdiff.audio import AudioBuffer, peak_normalize, read_wav, write_wav
from specdiff.dsp import MelFilterbank, StftConfig, mel_spectrogram
from specdiff.errors import ConfigError

KINDS = ("harmonic_tone", "formant_noise", "am_pulse")
PEAK = 0.95


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "formant_noise"
    f0_min: float = 100.0
    f0_max: float = 400.0
    num_items: int = 8
    duration: float = 0.5
    seed: int = 0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0 < self.f0_min <= self.f0_max < self.sample_rate / 4:
            raise ConfigError("need 0 < f0_min <= f0_max < sample_rate / 4")
        if self.num_items < 1 or self.duration <= 0:
            raise ConfigError("num_items and duration must be positive")

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def harmonic_tone(rng, f0: float, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    count = min(8, int((sr / 2 - 1) // f0))
    amps = rng.uniform(0.1, 1.0, size=count) / np.arange(1, count + 1)
    amps[0] = 1.0  # keep the fundamental the strongest partial
    phases = rng.uniform(0, 2 * np.pi, size=count)
    return sum(a * np.sin(2 * np.pi * f0 * (h + 1) * t + p) for h, (a, p) in enumerate(zip(amps, phases)))


def resonator(freq: float, bandwidth: float, sr: int) -> tuple[np.ndarray, np.ndarray]:
    """Two-pole resonator coefficients ``(b, a)`` at ``freq`` Hz."""
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * freq / sr
    return np.array([1.0 - r]), np.array([1.0, -2.0 * r * np.cos(theta), r * r])


def formant_noise(rng, n: int, sr: int, formants=None) -> np.ndarray:
    if formants is None:
        count = int(rng.integers(2, 4))
        centers = np.sort(rng.uniform(300.0, 0.35 * sr, size=count))
        formants = [(f, rng.uniform(80.0, 250.0)) for f in centers]
    white = rng.standard_normal(n)
    out = np.zeros(n)
    for freq, bw in formants:
        b, a = resonator(freq, bw, sr)
        out += lfilter(b, a, white)
    return out


def am_pulse(rng, f0: float, n: int, sr: int) -> np.ndarray:
    period = int(round(sr / f0))
    pulses = np.zeros(n)
    pulses[rng.integers(0, period)::period] = 1.0
    b, a = resonator(rng.uniform(500.0, 0.3 * sr), 200.0, sr)
    rate = rng.uniform(2.0, 8.0)
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rate * np.arange(n) / sr + rng.uniform(0, 2 * np.pi))
    return lfilter(b, a, pulses) * envelope


def generate_dataset(spec: SyntheticSpec, stft_cfg: StftConfig | None = None,
                     fb: MelFilterbank | None = None) -> list[tuple[AudioBuffer, np.ndarray]]:
    """``num_items`` (audio, log-mel) pairs, a pure function of ``spec``."""
    stft_cfg = stft_cfg or StftConfig(256, 64)
    fb = fb or MelFilterbank.htk(spec.sample_rate, stft_cfg.fft_size, 32)
    n = int(round(spec.duration * spec.sample_rate))
    items = []
    for child in np.random.SeedSequence(spec.seed).spawn(spec.num_items):
        rng = np.random.default_rng(child)
        f0 = rng.uniform(spec.f0_min, spec.f0_max)
        if spec.kind == "harmonic_tone":
            x = harmonic_tone(rng, f0, n, spec.sample_rate)
        elif spec.kind == "formant_noise":
            x = formant_noise(rng, n, spec.sample_rate)
        else:
            x = am_pulse(rng, f0, n, spec.sample_rate)
        buf = AudioBuffer(peak_normalize(x, PEAK), spec.sample_rate)
        items.append((buf, mel_spectrogram(buf, stft_cfg, fb)))
    return items


def write_dataset(items, spec: SyntheticSpec, out_dir) -> Path:
    """WAV per item plus ``manifest.json`` listing files and the generating spec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (buf, _) in enumerate(items):
        name = f"{spec.kind}_{i:04d}.wav"
        write_wav(out / name, buf)
        files.append(name)
    manifest = {"spec": asdict(spec), "items": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out / "manifest.json"


def load_dataset_dir(path) -> list[AudioBuffer]:
    """Audio listed in ``manifest.json``, or every ``*.wav`` when no manifest exists."""
    path = Path(path)
    manifest = path / "manifest.json"
    if manifest.exists():
        names = json.loads(manifest.read_text())["items"]
        files = [path / n for n in names]
    else:
        files = sorted(path.glob("*.wav"))
    return [read_wav(f) for f in files]
