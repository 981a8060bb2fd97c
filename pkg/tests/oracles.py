"""Independent reference computations used by the test suite."""

import numpy as np
from scipy import signal


def naive_dft(frame: np.ndarray) -> np.ndarray:
    """O(N^2) onesided DFT, the oracle for every FFT-based result."""
    n = frame.shape[-1]
    k = np.arange(n // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)
    return basis @ frame


def naive_idft(bins: np.ndarray, n: int) -> np.ndarray:
    full = np.concatenate([bins, np.conj(bins[1:n // 2][::-1])])
    k = np.arange(n)[:, None]
    return np.real(np.exp(2j * np.pi * k * np.arange(n)[None, :] / n) @ full) / n


def interior(x, cfg):
    h = cfg.fft_size // 2
    return x[..., h:-h]


def welch_psd(x: np.ndarray, nperseg: int = 256) -> np.ndarray:
    """Two-sided Welch PSD per onesided bin, averaged over leading axes.

    Two-sided so white noise of variance s2 has density s2 in every bin.
    """
    _, p = signal.welch(x, fs=1.0, window="hann", nperseg=nperseg, noverlap=nperseg // 2,
                        return_onesided=False, detrend=False, axis=-1)
    p = p.reshape(-1, p.shape[-1]).mean(axis=0)
    return p[:nperseg // 2 + 1]


def band_average(per_bin: np.ndarray, fb) -> np.ndarray:
    return fb.weights @ per_bin


def db(x):
    return 10 * np.log10(x)


def full_spectrum(onesided: np.ndarray) -> np.ndarray:
    """Mirror a onesided per-bin quantity onto all ``2 * (bins - 1)`` DFT bins."""
    return np.concatenate([onesided, onesided[..., -2:0:-1]], axis=-1)


def shaped_psd_prediction(env: np.ndarray, sigma: float) -> np.ndarray:
    """Per-bin two-sided PSD of noise shaped by ``1 / env`` and scaled to power ``sigma**2``.

    Normalization is computed on the mirrored full spectrum, independently of
    the library's onesided bin weights.
    """
    inv2 = 1.0 / np.atleast_2d(env) ** 2
    norm = np.mean(full_spectrum(inv2))
    return sigma**2 * inv2.mean(axis=0) / norm


def bump_db(num_bins: int, center: int, width: float, depth_db: float) -> np.ndarray:
    k = np.arange(num_bins)
    return depth_db * np.exp(-0.5 * ((k - center) / width) ** 2)


def one_pole_response(a: float, num_bins: int) -> np.ndarray:
    w = np.pi * np.arange(num_bins) / (num_bins - 1)
    return 1.0 / (1.0 - a * np.exp(-1j * w))


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
