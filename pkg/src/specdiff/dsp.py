"""STFT/ISTFT as exact linear operators, mel filterbank and log-mel features.

Everything here is float64 and pure. ``stft_array``/``istft_array`` are the
batched workhorses; ``stft``/``istft`` wrap them with the spectrogram type.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from specdiff.audio import AudioBuffer
from specdiff.errors import ConfigError, NumericalError, ShapeError

DEFAULT_LOG_FLOOR = 1e-5


def periodic_hann(n: int) -> np.ndarray:
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 256
    hop_size: int = 64
    win_length: int | None = None
    center_padding: bool = True

    def __post_init__(self):
        if self.win_length is None:
            object.__setattr__(self, "win_length", self.fft_size)
        if min(self.fft_size, self.hop_size, self.win_length) <= 0:
            raise ConfigError("fft_size, hop_size and win_length must be positive")
        if self.fft_size % 2:
            raise ConfigError(f"fft_size must be even, got {self.fft_size}")
        if self.win_length > self.fft_size:
            raise ConfigError(f"win_length {self.win_length} > fft_size {self.fft_size}")
        if self.hop_size > self.win_length:
            raise ConfigError(f"hop_size {self.hop_size} > win_length {self.win_length}")

    @property
    def window(self) -> np.ndarray:
        return periodic_hann(self.win_length)

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def padded_window(self) -> np.ndarray:
        """Window zero-padded (centered) to ``fft_size``."""
        w = np.zeros(self.fft_size)
        left = (self.fft_size - self.win_length) // 2
        w[left:left + self.win_length] = self.window
        return w

    def num_frames(self, length: int) -> int:
        if self.center_padding:
            return 1 + length // self.hop_size
        if length < self.fft_size:
            return 0
        return 1 + (length - self.fft_size) // self.hop_size


@dataclass(frozen=True)
class ComplexSpectrogram:
    frames: np.ndarray  # (num_frames, num_bins), complex
    config: StftConfig
    length: int | None = None  # source length, used by istft to trim

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.num_bins:
            raise ShapeError(
                f"spectrogram must be (frames, {self.config.num_bins}), got {self.frames.shape}"
            )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _as_samples(x) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        return x.samples.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _frame(xp: np.ndarray, cfg: StftConfig, num_frames: int) -> np.ndarray:
    idx = np.arange(num_frames)[:, None] * cfg.hop_size + np.arange(cfg.fft_size)[None, :]
    return xp[..., idx]


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Batched STFT over the last axis: ``(..., n) -> (..., frames, bins)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ShapeError("stft input is empty")
    if not np.all(np.isfinite(x)):
        raise NumericalError("stft input contains non-finite samples")
    if cfg.center_padding:
        pad = cfg.fft_size // 2
        if x.shape[-1] <= pad:
            raise ShapeError(f"signal of length {x.shape[-1]} too short for reflect padding {pad}")
        widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
        x = np.pad(x, widths, mode="reflect")
        frames = _frame(x, cfg, cfg.num_frames(x.shape[-1] - 2 * pad))
    else:
        frames = _frame(x, cfg, cfg.num_frames(x.shape[-1]))
    return np.fft.rfft(frames * cfg.padded_window(), axis=-1)


def _window_sumsquare(cfg: StftConfig, num_frames: int) -> np.ndarray:
    w2 = cfg.padded_window() ** 2
    total = np.zeros(cfg.fft_size + cfg.hop_size * (num_frames - 1))
    for f in range(num_frames):
        total[f * cfg.hop_size:f * cfg.hop_size + cfg.fft_size] += w2
    return total


def istft_array(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_array`.

    Frames are synthesis-windowed and divided by the window sum-of-squares, so
    ``istft_array(stft_array(x), cfg, len(x))`` returns ``x``.
    """
    spec = np.asarray(spec)
    if spec.ndim < 2 or spec.shape[-1] != cfg.num_bins:
        raise ShapeError(f"expected (..., frames, {cfg.num_bins}), got {spec.shape}")
    num_frames = spec.shape[-2]
    win = cfg.padded_window()
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1) * win
    out_len = cfg.fft_size + cfg.hop_size * (num_frames - 1)
    out = np.zeros(spec.shape[:-2] + (out_len,))
    for f in range(num_frames):
        out[..., f * cfg.hop_size:f * cfg.hop_size + cfg.fft_size] += frames[..., f, :]
    wss = _window_sumsquare(cfg, num_frames)
    nonzero = wss > 1e-10
    out[..., nonzero] /= wss[nonzero]
    if cfg.center_padding:
        out = out[..., cfg.fft_size // 2:]
        if length is None:
            length = cfg.hop_size * (num_frames - 1)
    if length is not None:
        if out.shape[-1] < length:
            widths = [(0, 0)] * (out.ndim - 1) + [(0, length - out.shape[-1])]
            out = np.pad(out, widths)
        out = out[..., :length]
    return out


def stft(x, cfg: StftConfig) -> ComplexSpectrogram:
    samples = _as_samples(x)
    if samples.ndim != 1:
        raise ShapeError("stft expects a mono signal")
    return ComplexSpectrogram(stft_array(samples, cfg), cfg, samples.shape[0])


def istft(S: ComplexSpectrogram, length: int | None = None) -> np.ndarray:
    return istft_array(S.frames, S.config, length if length is not None else S.length)


# -- mel ---------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    """Nonnegative ``(num_mels, num_bins)`` weights; rows must be nonzero.

    Use :meth:`htk` to build the standard triangular bank. Its rows sum to one,
    so a band value is the weighted mean magnitude under its triangle.
    """

    weights: np.ndarray
    sample_rate: int
    f_min: float = 0.0
    f_max: float | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"filterbank weights must be 2-D, got {w.shape}")
        if np.any(w < 0):
            raise ConfigError("filterbank weights must be nonnegative")
        empty = np.flatnonzero(~np.any(w > 0, axis=1))
        if empty.size:
            raise ConfigError(f"filterbank rows {empty.tolist()} have no positive weight")
        f_max = self.sample_rate / 2 if self.f_max is None else self.f_max
        if f_max > self.sample_rate / 2:
            raise ConfigError(f"f_max {f_max} exceeds Nyquist {self.sample_rate / 2}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "f_max", float(f_max))

    @classmethod
    def htk(cls, sample_rate: int, fft_size: int, num_mels: int,
            f_min: float = 0.0, f_max: float | None = None) -> "MelFilterbank":
        f_max = sample_rate / 2 if f_max is None else f_max
        if f_max > sample_rate / 2:
            raise ConfigError(f"f_max {f_max} exceeds Nyquist {sample_rate / 2}")
        edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), num_mels + 2))
        freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
        lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
        up = (freqs[None, :] - lo) / (mid - lo)
        down = (hi - freqs[None, :]) / (hi - mid)
        weights = np.maximum(0.0, np.minimum(up, down))
        weights /= weights.sum(axis=1, keepdims=True)
        return cls(weights, sample_rate, f_min, f_max)

    @property
    def num_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def num_bins(self) -> int:
        return self.weights.shape[1]

    @property
    def fft_size(self) -> int:
        return 2 * (self.num_bins - 1)

    def center_frequencies(self) -> np.ndarray:
        """Frequency (Hz) of each row's peak weight."""
        freqs = np.arange(self.num_bins) * self.sample_rate / self.fft_size
        return freqs[np.argmax(self.weights, axis=1)]

    @cached_property
    def pseudo_inverse(self) -> np.ndarray:
        # identical banks are rebuilt often (per trainer, per CLI call); share the solve
        return _cached_pinv(self.weights.shape, self.weights.tobytes(), self.sample_rate).copy()


def check_compatible(cfg: StftConfig, fb: MelFilterbank, sample_rate: int | None = None) -> None:
    if fb.num_bins != cfg.num_bins:
        raise ConfigError(f"filterbank has {fb.num_bins} bins, STFT has {cfg.num_bins}")
    if sample_rate is not None and sample_rate != fb.sample_rate:
        raise ConfigError(f"sample rate {sample_rate} != filterbank rate {fb.sample_rate}")


def mel_from_magnitude(mag: np.ndarray, fb: MelFilterbank,
                       log_floor: float = DEFAULT_LOG_FLOOR) -> np.ndarray:
    """``(..., frames, bins)`` magnitudes to ``(..., mels, frames)`` log-mel."""
    mel = np.einsum("mk,...fk->...mf", fb.weights, mag)
    return np.log(np.maximum(mel, log_floor))


def mel_spectrogram(x, cfg: StftConfig, fb: MelFilterbank,
                    log_floor: float = DEFAULT_LOG_FLOOR,
                    sample_rate: int | None = None) -> np.ndarray:
    """Log-amplitude mel grid ``log(max(fb @ |STFT(x)|, log_floor))``.

    Accepts an :class:`AudioBuffer` or an array (batched over leading axes).
    Returns shape ``(..., num_mels, num_frames)``.
    """
    if log_floor <= 0:
        raise ConfigError("log_floor must be positive")
    if isinstance(x, AudioBuffer):
        sample_rate = x.sample_rate
    check_compatible(cfg, fb, sample_rate)
    return mel_from_magnitude(np.abs(stft_array(_as_samples(x), cfg)), fb, log_floor)


@lru_cache(maxsize=16)
def _cached_pinv(shape, raw: bytes, sample_rate: int) -> np.ndarray:
    w = np.frombuffer(raw, dtype=np.float64).reshape(shape)
    return mel_pseudo_inverse(MelFilterbank(w.copy(), sample_rate))


def _project_rows_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto ``{p >= 0, sum(p) = 1}`` (sort-based)."""
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, v.shape[1] + 1)
    rho = v.shape[1] - 1 - np.argmax((u - css / k > 0)[:, ::-1], axis=1)
    theta = css[np.arange(v.shape[0]), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def mel_pseudo_inverse(fb: MelFilterbank, max_iter: int = 2000, tol: float = 1e-13) -> np.ndarray:
    """Nonnegative ``(num_bins, num_mels)`` lift from mel bands back to FFT bins.

    Least squares ``min ||F P - I||_F`` with every covered bin's row of ``P``
    held on the probability simplex: entries are nonnegative and sum to one,
    so a constant mel vector lifts to exactly that constant. Bins outside
    every band stay zero. Solved by projected FISTA, warm-started from the
    clamped and row-normalized unconstrained pseudo-inverse. Raises if the
    bank is rank deficient.
    """
    w = fb.weights
    rank = np.linalg.matrix_rank(w)
    if rank < w.shape[0]:
        raise ConfigError(f"filterbank is rank deficient: rank {rank} < {w.shape[0]} mels")
    covered = w.sum(axis=0) > 0
    p = np.maximum(np.linalg.pinv(w), 0.0)
    row_sums = p.sum(axis=1, keepdims=True)
    p = np.divide(p, row_sums, out=np.zeros_like(p), where=row_sums > 0)

    eye = np.eye(w.shape[0])
    step = 1.0 / np.linalg.norm(w, 2) ** 2
    y, t = p.copy(), 1.0
    for _ in range(max_iter):
        nxt = np.zeros_like(p)
        nxt[covered] = _project_rows_to_simplex((y - step * (w.T @ (w @ y - eye)))[covered])
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = nxt + (t - 1.0) / t_next * (nxt - p)
        done = np.linalg.norm(nxt - p) <= tol * max(np.linalg.norm(p), 1.0)
        p, t = nxt, t_next
        if done:
            break
    return p
