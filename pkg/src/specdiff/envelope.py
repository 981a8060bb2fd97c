"""Spectral envelopes, minimum-phase filters and spectrally shaped noise.

Pipeline: log-mel condition -> linear-frequency envelope (pseudo-inverse lift
plus cepstral smoothing) -> minimum-phase forward filter -> its reciprocal ->
``istft(M * stft(white))`` scaled so the expected power per sample is sigma**2.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from specdiff.dsp import (
    DEFAULT_LOG_FLOOR,
    MelFilterbank,
    StftConfig,
    _as_samples,
    istft_array,
    stft_array,
)
from specdiff.errors import ConfigError, NumericalError, ShapeError

INVERSION_FLOOR = 1e-12


class FilterKind(str, Enum):
    FORWARD_SG = "forward_sg"
    INVERSE_SPEC = "inverse_spec"


@dataclass(frozen=True)
class SpectralEnvelope:
    magnitudes: np.ndarray  # (frames, bins), linear amplitude

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.magnitudes, dtype=np.float64))
        if not np.all(np.isfinite(m)):
            raise NumericalError("envelope contains non-finite values")
        object.__setattr__(self, "magnitudes", m)

    @property
    def num_frames(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def fft_size(self) -> int:
        return 2 * (self.magnitudes.shape[1] - 1)


@dataclass(frozen=True)
class SpectralFilter:
    response: np.ndarray  # (frames, bins), complex
    kind: FilterKind = FilterKind.FORWARD_SG

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.response, dtype=np.complex128))
        if not np.all(np.isfinite(r)):
            raise NumericalError("filter response contains non-finite values")
        object.__setattr__(self, "response", r)
        object.__setattr__(self, "kind", FilterKind(self.kind))

    @classmethod
    def identity(cls, num_bins: int, num_frames: int = 1,
                 kind: FilterKind = FilterKind.FORWARD_SG) -> "SpectralFilter":
        return cls(np.ones((num_frames, num_bins), dtype=np.complex128), kind)

    @property
    def num_frames(self) -> int:
        return self.response.shape[0]


def _uncovered_fill(lifted: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    # bins outside every triangle (DC, Nyquist) get nothing from the
    # pseudo-inverse; copy the nearest covered bin instead of flooring them
    covered = np.flatnonzero(np.any(fb.weights > 0, axis=0))
    pick = covered[np.abs(np.arange(fb.num_bins)[:, None] - covered[None, :]).argmin(axis=1)]
    return lifted[..., pick]


def cepstral_lifter(n_fft: int, order: int) -> np.ndarray:
    """Symmetric lifter keeping quefrencies ``|n| < order`` with a half-Hann taper.

    The taper suppresses the Gibbs ripple a hard cut leaves around strong
    formants; ripple near the floor would otherwise be amplified by the
    inverted filter.
    """
    if not 0 < order < n_fft // 2:
        raise ConfigError(f"cepstral_order must be in [1, {n_fft // 2}), got {order}")
    taper = 0.5 + 0.5 * np.cos(np.pi * np.arange(order) / order)
    lift = np.zeros(n_fft)
    lift[:order] = taper
    lift[n_fft - order + 1:] = taper[1:][::-1]
    return lift


def cepstral_smooth(log_mag: np.ndarray, order: int) -> np.ndarray:
    """Lifter a onesided log spectrum down to its ``order`` lowest cepstral coefficients."""
    n_fft = 2 * (log_mag.shape[-1] - 1)
    lift = cepstral_lifter(n_fft, order)
    ceps = np.fft.irfft(log_mag, n=n_fft, axis=-1)
    return np.fft.rfft(ceps * lift, axis=-1).real


def estimate_envelope(mel: np.ndarray, fb: MelFilterbank, cepstral_order: int = 24,
                      floor_db: float = -40.0,
                      log_floor: float = DEFAULT_LOG_FLOOR) -> SpectralEnvelope:
    """Linear-frequency spectral envelope from a ``(num_mels, num_frames)`` log-mel grid.

    Mel amplitudes are lifted with the clamped pseudo-inverse, cepstrally
    smoothed, and floored at ``floor_db`` below the loudest envelope value of
    the whole grid (never below ``log_floor``), which caps the dynamic range,
    and so the gain of the inverted filter, at ``-floor_db`` dB.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] != fb.num_mels:
        raise ShapeError(f"mel grid must be ({fb.num_mels}, frames), got {mel.shape}")
    if not 0 < cepstral_order < fb.fft_size // 2:
        raise ConfigError(f"cepstral_order must be in [1, {fb.fft_size // 2}), got {cepstral_order}")
    if floor_db >= 0:
        raise ConfigError("floor_db must be negative")
    linear_mel = np.maximum(np.exp(mel) - log_floor, 0.0)
    lifted = _uncovered_fill((fb.pseudo_inverse @ linear_mel).T, fb)
    floor = max(lifted.max() * 10.0 ** (floor_db / 20.0), log_floor)
    smooth = np.exp(cepstral_smooth(np.log(np.maximum(lifted, floor)), cepstral_order))
    # smoothing can overshoot the lifted peak; re-floor against the result
    floor = max(smooth.max() * 10.0 ** (floor_db / 20.0), floor)
    return SpectralEnvelope(np.maximum(smooth, floor))


def real_cepstrum(log_mag: np.ndarray) -> np.ndarray:
    """Real cepstrum of a onesided log-magnitude spectrum (even full-length extension)."""
    n_fft = 2 * (log_mag.shape[-1] - 1)
    return np.fft.irfft(log_mag, n=n_fft, axis=-1)


def fold_cepstrum(ceps: np.ndarray) -> np.ndarray:
    """Fold an even cepstrum onto its causal half (minimum-phase lifter)."""
    n = ceps.shape[-1]
    out = np.zeros_like(ceps)
    out[..., 0] = ceps[..., 0]
    out[..., 1:n // 2] = 2.0 * ceps[..., 1:n // 2]
    if n % 2 == 0:
        out[..., n // 2] = ceps[..., n // 2]
    return out


def minimum_phase_filter(env: SpectralEnvelope) -> SpectralFilter:
    mags = env.magnitudes
    if np.any(mags <= 0):
        raise ValueError("minimum_phase_filter needs a strictly positive envelope")
    folded = fold_cepstrum(real_cepstrum(np.log(mags)))
    return SpectralFilter(np.exp(np.fft.rfft(folded, axis=-1)), FilterKind.FORWARD_SG)


def invert_filter(f: SpectralFilter) -> SpectralFilter:
    if np.any(np.abs(f.response) < INVERSION_FLOOR):
        raise NumericalError("filter magnitude below inversion floor; envelope was not floored")
    kind = FilterKind.INVERSE_SPEC if f.kind is FilterKind.FORWARD_SG else FilterKind.FORWARD_SG
    return SpectralFilter(1.0 / f.response, kind)


def fit_frames(response: np.ndarray, num_frames: int) -> np.ndarray:
    """Truncate, or tile the last frame, so the filter covers ``num_frames``."""
    have = response.shape[-2]
    if have >= num_frames:
        return response[..., :num_frames, :]
    tail = np.repeat(response[..., -1:, :], num_frames - have, axis=-2)
    return np.concatenate([response, tail], axis=-2)


def apply_filter(x, f: SpectralFilter, cfg: StftConfig) -> np.ndarray:
    """``istft(response * stft(x))``; ``x`` may carry leading batch axes."""
    samples = _as_samples(x)
    if f.response.shape[-1] != cfg.num_bins:
        raise ShapeError(f"filter has {f.response.shape[-1]} bins, STFT has {cfg.num_bins}")
    spec = stft_array(samples, cfg)
    return istft_array(fit_frames(f.response, spec.shape[-2]) * spec, cfg, samples.shape[-1])


def _bin_weights(num_bins: int) -> np.ndarray:
    # onesided bins stand for two full-spectrum bins except DC and Nyquist
    w = np.full(num_bins, 2.0)
    w[0] = w[-1] = 1.0
    return w


def mean_square_gain(response: np.ndarray) -> float:
    """Mean of ``|response|**2`` over the full (two-sided) spectrum and all frames."""
    w = _bin_weights(response.shape[-1])
    power = np.abs(response) ** 2
    return float(np.sum(power * w) / (power.shape[0] * np.sum(w)))


class ShapedNoiseSampler:
    """Draws ``sigma * g * istft(M_spec * stft(w))`` for white ``w``.

    ``g`` rescales the filter to unit mean-square magnitude so a flat envelope
    reduces exactly to i.i.d. ``N(0, sigma**2)``. The sampler holds no RNG.
    """

    def __init__(self, filter: SpectralFilter, stft_cfg: StftConfig, sigma: float = 0.05):
        if sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if filter.response.shape[-1] != stft_cfg.num_bins:
            raise ShapeError("filter bins do not match the STFT config")
        self.stft_cfg = stft_cfg
        self.sigma = float(sigma)
        self.filter = filter

    @property
    def filter(self) -> SpectralFilter:
        return self._filter

    @filter.setter
    def filter(self, value: SpectralFilter) -> None:
        self._filter = value
        self.normalization = 1.0 / np.sqrt(mean_square_gain(value.response))

    @classmethod
    def from_envelope(cls, env: SpectralEnvelope, stft_cfg: StftConfig,
                      sigma: float = 0.05) -> "ShapedNoiseSampler":
        return cls(invert_filter(minimum_phase_filter(env)), stft_cfg, sigma)

    def expected_band_power(self) -> np.ndarray:
        """Per-bin expected noise power (time-averaged), normalized per sample."""
        return self.sigma**2 * self.normalization**2 * np.mean(np.abs(self.filter.response) ** 2, axis=0)


def sample_shaped_noise(s: ShapedNoiseSampler, num_samples: int, rng: np.random.Generator,
                        batch: tuple[int, ...] = ()) -> np.ndarray:
    if s.sigma == 0:
        return np.zeros(batch + (num_samples,))
    white = rng.standard_normal(batch + (num_samples,))
    return (s.sigma * s.normalization) * apply_filter(white, s.filter, s.stft_cfg)
