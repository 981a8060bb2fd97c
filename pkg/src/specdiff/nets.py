"""Miniature HiFi-GAN generator, multi-period and multi-resolution discriminators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from specdiff import autograd as ag
from specdiff.autograd import Tensor
from specdiff.dsp import DEFAULT_LOG_FLOOR, MelFilterbank, StftConfig
from specdiff.errors import ConfigError, ShapeError

LRELU_SLOPE = 0.1


class Module:
    """Named parameter container; subclasses register ``Tensor`` leaves and submodules."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=np.float64)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / ((1 + LRELU_SLOPE**2) * fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _bias(rng: np.random.Generator, n: int, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=n), requires_grad=True)


class Conv1d(Module):
    def __init__(self, rng, c_in, c_out, kernel, dilation=1, padding=None, zero_init=False):
        fan_in = c_in * kernel
        self.weight = (Tensor(np.zeros((c_out, c_in, kernel)), requires_grad=True) if zero_init
                       else _kaiming_uniform(rng, (c_out, c_in, kernel), fan_in))
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if zero_init else _bias(rng, c_out, fan_in)
        self.dilation = dilation
        self.padding = (kernel - 1) * dilation // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv1d(x, self.weight, self.bias, padding=self.padding, dilation=self.dilation)


class ConvTranspose1d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride, padding):
        self.weight = _kaiming_uniform(rng, (c_in, c_out, kernel), c_in * kernel // stride)
        self.bias = _bias(rng, c_out, c_in * kernel // stride)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv_transpose1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=(1, 1), padding=(0, 0)):
        fan_in = c_in * kernel[0] * kernel[1]
        self.weight = _kaiming_uniform(rng, (c_out, c_in) + tuple(kernel), fan_in)
        self.bias = _bias(rng, c_out, fan_in)
        self.stride = tuple(stride)
        self.padding = tuple(padding)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


# -- generator ----------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    num_mels: int = 32
    channels: int = 48
    upsample_rates: tuple[int, ...] = (8, 8)
    resblock_kernels: tuple[int, ...] = (3, 5)
    resblock_dilations: tuple[int, ...] = (1, 3)

    @property
    def hop(self) -> int:
        return int(np.prod(self.upsample_rates))


class ResBlock(Module):
    def __init__(self, rng, channels, kernel, dilations):
        self.convs1 = [Conv1d(rng, channels, channels, kernel, dilation=d) for d in dilations]
        self.convs2 = [Conv1d(rng, channels, channels, kernel) for _ in dilations]

    def __call__(self, x: Tensor) -> Tensor:
        for c1, c2 in zip(self.convs1, self.convs2):
            h = c1(ag.leaky_relu(x, LRELU_SLOPE))
            x = x + c2(ag.leaky_relu(h, LRELU_SLOPE))
        return x


class Generator(Module):
    """Mel ``(B, num_mels, F)`` to waveform ``(B, F * prod(upsample_rates))``.

    Transposed-conv upsampling stages, each followed by the mean of several
    dilated residual blocks, then a 1-channel projection and ``tanh``.
    """

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, zero_final: bool = False):
        if any(u % 2 for u in cfg.upsample_rates):
            raise ConfigError("upsample rates must be even so each stage multiplies length exactly")
        self.cfg = cfg
        self.conv_pre = Conv1d(rng, cfg.num_mels, cfg.channels, 7)
        self.ups, self.blocks = [], []
        ch = cfg.channels
        for u in cfg.upsample_rates:
            self.ups.append(ConvTranspose1d(rng, ch, ch // 2, 2 * u, u, u // 2))
            ch //= 2
            self.blocks.append(_BlockGroup(
                [ResBlock(rng, ch, k, cfg.resblock_dilations) for k in cfg.resblock_kernels]))
        self.conv_post = Conv1d(rng, ch, 1, 7, zero_init=zero_final)

    def __call__(self, s) -> Tensor:
        s = ag.as_tensor(s)
        if s.ndim == 2:
            s = s.reshape(1, *s.shape)
        if s.ndim != 3 or s.shape[1] != self.cfg.num_mels:
            raise ShapeError(f"generator expects (B, {self.cfg.num_mels}, frames), got {s.shape}")
        x = self.conv_pre(s)
        for up, group in zip(self.ups, self.blocks):
            x = up(ag.leaky_relu(x, LRELU_SLOPE))
            x = group(x)
        x = self.conv_post(ag.leaky_relu(x, 0.01))
        x = ag.tanh(x)
        return x.reshape(x.shape[0], x.shape[2])


class _BlockGroup(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        out = self.blocks[0](x)
        for blk in self.blocks[1:]:
            out = out + blk(x)
        return out * (1.0 / len(self.blocks))


# -- differentiable spectral front ends ---------------------------------------

class SpectralFrontEnd:
    """Batched, differentiable ``|STFT|`` matching :func:`specdiff.dsp.stft_array`."""

    def __init__(self, cfg: StftConfig):
        self.cfg = cfg
        self.window = cfg.padded_window()
        self._index_cache: dict[int, np.ndarray] = {}

    def _frame_index(self, length: int) -> np.ndarray:
        if length not in self._index_cache:
            cfg = self.cfg
            pad = cfg.fft_size // 2
            if length <= pad:
                raise ShapeError(f"signal of length {length} too short for reflect padding {pad}")
            src = np.arange(-pad, length + pad)
            src = np.abs(src)
            src = np.where(src >= length, 2 * (length - 1) - src, src)
            frames = cfg.num_frames(length)
            idx = np.arange(frames)[:, None] * cfg.hop_size + np.arange(cfg.fft_size)[None, :]
            self._index_cache[length] = src[idx]
        return self._index_cache[length]

    def magnitude(self, x: Tensor) -> Tensor:
        """``(B, T)`` -> ``(B, frames, bins)``."""
        frames = x[:, self._frame_index(x.shape[-1])]
        return ag.rfft_magnitude(frames * self.window)


class MelFrontEnd(SpectralFrontEnd):
    def __init__(self, cfg: StftConfig, fb: MelFilterbank, log_floor: float = DEFAULT_LOG_FLOOR):
        super().__init__(cfg)
        if fb.num_bins != cfg.num_bins:
            raise ConfigError("filterbank does not match the STFT config")
        self.fb_t = fb.weights.T.copy()
        self.log_floor = log_floor

    def __call__(self, x: Tensor) -> Tensor:
        """``(B, T)`` -> log-mel ``(B, mels, frames)``."""
        mel = self.magnitude(ag.as_tensor(x)) @ self.fb_t
        return ag.log(ag.clamp_min(mel, self.log_floor)).transpose(0, 2, 1)


# -- discriminators -------------------------------------------------------------

@dataclass(frozen=True)
class DiscriminatorConfig:
    periods: tuple[int, ...] = (2, 3, 5)
    mpd_channels: tuple[int, ...] = (8, 16, 32)
    resolutions: tuple[tuple[int, int, int], ...] = ((256, 64, 128), (512, 128, 256), (128, 32, 64))
    mrd_channels: int = 8
    mrd_layers: int = 3

    def __post_init__(self):
        for i, p in enumerate(self.periods):
            for q in self.periods[i + 1:]:
                if np.gcd(p, q) != 1:
                    raise ConfigError(f"MPD periods {p} and {q} are not coprime")
        for fft, hop, win in self.resolutions:
            if not hop <= win <= fft:
                raise ConfigError(f"MRD resolution {(fft, hop, win)} violates hop <= win <= fft")


FULL_SCALE_DISCRIMINATORS = DiscriminatorConfig(
    periods=(2, 3, 5, 7, 11),
    mpd_channels=(32, 128, 512, 1024),
    resolutions=((1024, 120, 600), (2048, 240, 1200), (512, 50, 240)),
    mrd_channels=32,
    mrd_layers=5,
)


class PeriodDiscriminator(Module):
    def __init__(self, rng, period: int, channels: tuple[int, ...]):
        self.period = period
        chans = (1,) + tuple(channels)
        self.convs = [Conv2d(rng, a, b, (5, 1), (3, 1), (2, 0)) for a, b in zip(chans[:-1], chans[1:])]
        self.convs.append(Conv2d(rng, chans[-1], chans[-1], (5, 1), (1, 1), (2, 0)))
        self.post = Conv2d(rng, chans[-1], 1, (3, 1), (1, 1), (1, 0))

    def __call__(self, y: Tensor) -> tuple[Tensor, list[Tensor]]:
        B, T = y.shape
        extra = (-T) % self.period
        if extra:
            y = ag.pad(y, ((0, 0), (0, extra)))
        x = y.reshape(B, 1, (T + extra) // self.period, self.period)
        feats = []
        for conv in self.convs:
            x = ag.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return x.reshape(B, -1), feats


class ResolutionDiscriminator(Module):
    def __init__(self, rng, resolution: tuple[int, int, int], channels: int, layers: int):
        fft, hop, win = resolution
        self.front = SpectralFrontEnd(StftConfig(fft, hop, win))
        self.convs = [Conv2d(rng, 1, channels, (3, 9), (1, 1), (1, 4))]
        for _ in range(layers - 1):
            self.convs.append(Conv2d(rng, channels, channels, (3, 9), (1, 2), (1, 4)))
        self.convs.append(Conv2d(rng, channels, channels, (3, 3), (1, 1), (1, 1)))
        self.post = Conv2d(rng, channels, 1, (3, 3), (1, 1), (1, 1))

    def __call__(self, y: Tensor) -> tuple[Tensor, list[Tensor]]:
        B = y.shape[0]
        x = self.front.magnitude(y)
        x = x.reshape(B, 1, *x.shape[1:])
        feats = []
        for conv in self.convs:
            x = ag.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return x.reshape(B, -1), feats


class Discriminators(Module):
    """MPD and MRD sub-discriminators evaluated together.

    Calling returns ``(scores, features)``: one ``(B, n)`` score tensor per
    sub-discriminator and, for each, its per-layer feature maps.
    """

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.mpd = [PeriodDiscriminator(rng, p, cfg.mpd_channels) for p in cfg.periods]
        self.mrd = [ResolutionDiscriminator(rng, r, cfg.mrd_channels, cfg.mrd_layers)
                    for r in cfg.resolutions]

    @property
    def subs(self) -> list[Module]:
        return self.mpd + self.mrd

    def __call__(self, y) -> tuple[list[Tensor], list[list[Tensor]]]:
        y = ag.as_tensor(y)
        if y.ndim == 1:
            y = y.reshape(1, -1)
        scores, feats = [], []
        for sub in self.subs:
            s, f = sub(y)
            scores.append(s)
            feats.append(f)
        return scores, feats
