"""Training loop: generator, discriminators, diffusion noise, adaptive cap, losses.

One step:
  1. ``G(s)`` from the teacher mel ``s = phi(x)``.
  2. Per element draw ``t`` from the triangular step distribution (modes
     ``standard``/``spec``) and noise shaped by the envelope of ``s``.
  3. Diffuse real and generated audio with independent noise draws.
  4. Discriminator update on the least-squares loss.
  5. Feed the discriminator's real scores to the adaptive cap controller.
  6. Generator update: adversarial + feature matching on diffused audio,
     mel L1 on clean audio.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from specdiff import autograd as ag
from specdiff.adaptive import AdaptiveState
from specdiff.audio import AudioBuffer
from specdiff.diffusion import DiffusionSchedule, build_schedule
from specdiff.dsp import MelFilterbank, StftConfig, mel_spectrogram
from specdiff.envelope import ShapedNoiseSampler, estimate_envelope, sample_shaped_noise
from specdiff.errors import ConfigError, NumericalError
from specdiff.losses import LossReport, LossWeights, MelLoss, discriminator_loss, generator_loss, mel_l1
from specdiff.nets import DiscriminatorConfig, Discriminators, Generator, GeneratorConfig, Module

log = logging.getLogger(__name__)

MODES = ("none", "standard", "spec")
METRIC_FIELDS = ("step", "d_loss", "g_adv", "g_fm", "g_mel", "r_d", "T", "lr")


@dataclass
class TrainConfig:
    """Flat key-value training configuration (JSON file keys match field names)."""

    steps: int = 2000
    batch_size: int = 2
    segment_length: int = 1024
    lr_init: float = 2e-4
    lr_decay: float = 0.999
    adam_betas: tuple[float, float] = (0.8, 0.99)
    mode: str = "spec"
    seed: int = 0
    checkpoint_every: int = 500
    # audio / mel
    sample_rate: int = 16000
    fft_size: int = 256
    hop_size: int = 64
    win_length: int = 256
    num_mels: int = 32
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-5
    # noise shaping and diffusion
    sigma: float = 0.05
    cepstral_order: int = 24
    floor_db: float = -40.0
    t_min: int = 5
    t_max: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    d_target: float = 0.6
    c_step: int = 1
    ada_window: int = 4
    reuse_t: bool = False
    r_d_source: str = "pooled"
    # losses
    lambda_fm: float = 2.0
    lambda_mel: float = 45.0
    # networks
    gen_channels: int = 48
    upsample_rates: tuple[int, ...] = (8, 8)
    resblock_kernels: tuple[int, ...] = (3, 5)
    resblock_dilations: tuple[int, ...] = (1, 3)
    mpd_periods: tuple[int, ...] = (2, 3, 5)
    mpd_channels: tuple[int, ...] = (8, 16, 32)
    mrd_resolutions: tuple[tuple[int, int, int], ...] = ((256, 64, 128), (512, 128, 256), (128, 32, 64))
    mrd_channels: int = 8
    mrd_layers: int = 3

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.upsample_rates = tuple(self.upsample_rates)
        self.resblock_kernels = tuple(self.resblock_kernels)
        self.resblock_dilations = tuple(self.resblock_dilations)
        self.mpd_periods = tuple(self.mpd_periods)
        self.mpd_channels = tuple(self.mpd_channels)
        self.mrd_resolutions = tuple(tuple(r) for r in self.mrd_resolutions)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.r_d_source not in ("pooled", "mpd", "mrd"):
            raise ConfigError(f"r_d_source must be pooled, mpd or mrd, got {self.r_d_source!r}")
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and checkpoint_every >= 1 required")
        if self.lr_init <= 0:
            raise ConfigError("lr_init must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        hop = int(np.prod(self.upsample_rates))
        if hop != self.hop_size:
            raise ConfigError(f"upsampling product {hop} must equal mel hop_size {self.hop_size}")
        if self.segment_length % hop:
            raise ConfigError(f"segment_length {self.segment_length} not a multiple of hop {hop}")
        if self.segment_length <= max(self.fft_size, *(r[0] for r in self.mrd_resolutions)) // 2:
            raise ConfigError("segment_length too short for the STFT front ends")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.fft_size, self.hop_size, self.win_length)

    def filterbank(self) -> MelFilterbank:
        return MelFilterbank.htk(self.sample_rate, self.fft_size, self.num_mels, self.f_min, self.f_max)

    @property
    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(self.num_mels, self.gen_channels, self.upsample_rates,
                               self.resblock_kernels, self.resblock_dilations)

    @property
    def discriminators(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.mpd_periods, self.mpd_channels, self.mrd_resolutions,
                                   self.mrd_channels, self.mrd_layers)


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, params: dict[str, ag.Tensor], lr: float, betas=(0.8, 0.99), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.m.{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}.v.{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays, prefix: str) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"{prefix}.m.{k}"])
            self.v[k] = np.array(arrays[f"{prefix}.v.{k}"])


class NumericalAbort(NumericalError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: Generator
    discriminators: Discriminators
    g_opt: Adam
    d_opt: Adam
    adaptive: AdaptiveState
    data_rng: np.random.Generator
    diffusion_rng: np.random.Generator
    step: int = 0
    epoch: int = 0

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "TrainState":
        init_seq, data_seq, diff_seq = np.random.SeedSequence(cfg.seed).spawn(3)
        init_rng = np.random.default_rng(init_seq)
        gen = Generator(cfg.generator, init_rng)
        disc = Discriminators(cfg.discriminators, init_rng)
        return cls(
            cfg=cfg,
            generator=gen,
            discriminators=disc,
            g_opt=Adam(dict(gen.named_parameters()), cfg.lr_init, cfg.adam_betas),
            d_opt=Adam(dict(disc.named_parameters()), cfg.lr_init, cfg.adam_betas),
            adaptive=AdaptiveState(t_current=cfg.t_min, t_min=cfg.t_min, t_max=cfg.t_max,
                                   d_target=cfg.d_target, c_step=cfg.c_step,
                                   window_size=cfg.ada_window),
            data_rng=np.random.default_rng(data_seq),
            diffusion_rng=np.random.default_rng(diff_seq),
        )

    @property
    def lr(self) -> float:
        return self.g_opt.lr


class _frozen:
    """Temporarily stop gradient bookkeeping for a module's parameters."""

    def __init__(self, module: Module):
        self.params = module.parameters()

    def __enter__(self):
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad = True


class Trainer:
    """Holds the derived, immutable pieces (schedule, filterbank, mel loss) for a config."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.stft_cfg = cfg.stft
        self.fb = cfg.filterbank()
        self.schedule: DiffusionSchedule = build_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)
        self.weights = LossWeights(cfg.lambda_fm, cfg.lambda_mel)
        self.mel_loss = MelLoss(self.stft_cfg, self.fb, cfg.log_floor)
        self.num_frames = cfg.segment_length // cfg.hop_size

    # -- conditioning and noise -------------------------------------------------
    def condition(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full log-mel of ``x`` and the generator condition (first ``L / hop`` frames)."""
        mel = mel_spectrogram(x, self.stft_cfg, self.fb, self.cfg.log_floor)
        return mel, mel[..., :self.num_frames]

    def noise_samplers(self, mel_full: np.ndarray) -> list[ShapedNoiseSampler]:
        samplers = []
        for mel in mel_full:
            env = estimate_envelope(mel, self.fb, self.cfg.cepstral_order, self.cfg.floor_db,
                                    self.cfg.log_floor)
            samplers.append(ShapedNoiseSampler.from_envelope(env, self.stft_cfg, self.cfg.sigma))
        return samplers

    def draw_noise(self, shape, samplers, rng: np.random.Generator) -> np.ndarray:
        if self.cfg.mode == "standard":
            if self.cfg.sigma == 0:
                return np.zeros(shape)
            return self.cfg.sigma * rng.standard_normal(shape)
        return np.stack([sample_shaped_noise(s, shape[-1], rng) for s in samplers])

    def diffusion_scales(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.schedule.signal_scale(t)[:, None], self.schedule.noise_scale(t)[:, None]

    # -- one step ---------------------------------------------------------------
    def train_step(self, state: TrainState, x: np.ndarray) -> LossReport:
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        B = x.shape[0]
        G, D = state.generator, state.discriminators
        mel_full, s = self.condition(x)
        g = G(s)
        diffusing = cfg.mode != "none"
        rng = state.diffusion_rng

        if diffusing:
            samplers = self.noise_samplers(mel_full) if cfg.mode == "spec" else None
            t_d = np.atleast_1d(state.adaptive.sample_t(rng, size=B))
            a, b = self.diffusion_scales(t_d)
            y = a * x + b * self.draw_noise(x.shape, samplers, rng)
            y_g = a * g.data + b * self.draw_noise(x.shape, samplers, rng)
        else:
            y, y_g = x, g.data

        # discriminator update
        state.d_opt.zero_grad()
        scores, _ = D(np.concatenate([y, y_g]))
        d_loss, d_terms = discriminator_loss([sc[:B] for sc in scores], [sc[B:] for sc in scores])
        if not np.isfinite(d_loss.item()):
            self._abort(state, LossReport(d_loss=d_loss.item(), d_per_sub=d_terms))
        d_loss.backward()
        state.d_opt.step()

        r_d = None
        if diffusing:
            real = self._r_d_outputs([sc.data[:B] for sc in scores])
            r_d = state.adaptive.observe(real)

        # generator update
        if diffusing:
            if not cfg.reuse_t:
                t_d = np.atleast_1d(state.adaptive.sample_t(rng, size=B))
                a, b = self.diffusion_scales(t_d)
            y = a * x + b * self.draw_noise(x.shape, samplers, rng)
            y_g_t = g * a + b * self.draw_noise(x.shape, samplers, rng)
        else:
            y_g_t = g
        state.g_opt.zero_grad()
        with _frozen(D):
            with ag.no_grad():
                _, feats_real = D(y)
            scores_fake, feats_fake = D(y_g_t)
            g_loss, report = generator_loss(scores_fake, feats_real, feats_fake, x, g,
                                            self.weights, self.mel_loss)
            report.d_loss = d_loss.item()
            report.d_per_sub = d_terms
            report.r_d = r_d
            report.t_cap = state.adaptive.t_current if diffusing else None
            if not report.is_finite():
                self._abort(state, report)
            g_loss.backward()
        state.g_opt.step()
        state.step += 1
        return report

    def _r_d_outputs(self, real_scores: list[np.ndarray]) -> np.ndarray:
        n_mpd = len(self.cfg.mpd_periods)
        if self.cfg.r_d_source == "mpd":
            real_scores = real_scores[:n_mpd]
        elif self.cfg.r_d_source == "mrd":
            real_scores = real_scores[n_mpd:]
        # one value per (element, sub-discriminator): its mean score
        return np.stack([sc.mean(axis=1) for sc in real_scores], axis=1)

    @staticmethod
    def _abort(state: TrainState, report: LossReport):
        """Raise :class:`NumericalAbort` before the offending update is applied."""
        norms = {k: float(np.linalg.norm(p.data))
                 for mod in (state.generator, state.discriminators)
                 for k, p in mod.named_parameters()}
        dump = {"step": state.step + 1, "losses": dataclasses.asdict(report), "param_norms": norms}
        raise NumericalAbort(f"non-finite loss at step {state.step + 1}", dump)

    # -- data -------------------------------------------------------------------
    def sample_batch(self, state: TrainState, dataset: list[np.ndarray]) -> np.ndarray:
        rng = state.data_rng
        L = self.cfg.segment_length
        batch = []
        for i in rng.integers(0, len(dataset), size=self.cfg.batch_size):
            item = dataset[i]
            if item.shape[0] < L:
                item = np.pad(item, (0, L - item.shape[0]))
            start = rng.integers(0, item.shape[0] - L + 1)
            batch.append(item[start:start + L])
        return np.stack(batch)

    def steps_per_epoch(self, dataset_size: int) -> int:
        return max(1, math.ceil(dataset_size / self.cfg.batch_size))

    def eval_mel_l1(self, state: TrainState, batch: np.ndarray) -> float:
        """Mel L1 between ``batch`` (any multiple of hop long) and its resynthesis."""
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if batch.shape[-1] % self.cfg.hop_size:
            raise ConfigError(f"eval length {batch.shape[-1]} not a multiple of hop {self.cfg.hop_size}")
        with ag.no_grad():
            mel = mel_spectrogram(batch, self.stft_cfg, self.fb, self.cfg.log_floor)
            g = state.generator(mel[..., :batch.shape[-1] // self.cfg.hop_size]).data
        return mel_l1(batch, g, self.stft_cfg, self.fb, self.cfg.log_floor)


# -- checkpoints and the outer loop -----------------------------------------------

def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def save_checkpoint(state: TrainState, directory) -> Path:
    """Write ``ckpt_<step>/`` with ``arrays.npz`` and ``manifest.json``."""
    path = Path(directory) / f"ckpt_{state.step:07d}"
    path.mkdir(parents=True, exist_ok=True)
    arrays = {}
    arrays.update({f"generator.{k}": v for k, v in state.generator.state_dict().items()})
    arrays.update({f"discriminators.{k}": v for k, v in state.discriminators.state_dict().items()})
    arrays.update(state.g_opt.state_arrays("g_opt"))
    arrays.update(state.d_opt.state_arrays("d_opt"))
    np.savez(path / "arrays.npz", **arrays)
    manifest = {
        "step": state.step,
        "epoch": state.epoch,
        "lr": state.lr,
        "adam_t": {"g": state.g_opt.t, "d": state.d_opt.t},
        "config": state.cfg.to_dict(),
        "adaptive": state.adaptive.to_dict(),
        "rng": {"data": _rng_state(state.data_rng), "diffusion": _rng_state(state.diffusion_rng)},
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (Path(directory) / "latest").write_text(path.name)
    return path


def latest_checkpoint(directory) -> Path | None:
    marker = Path(directory) / "latest"
    if not marker.exists():
        return None
    return Path(directory) / marker.read_text().strip()


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = cfg or TrainConfig.from_dict(manifest["config"])
    state = TrainState.initial(cfg)
    with np.load(path / "arrays.npz") as arrays:
        for name, meta in manifest["arrays"].items():
            if list(arrays[name].shape) != meta["shape"]:
                raise ConfigError(f"{name}: manifest shape {meta['shape']} != stored {arrays[name].shape}")
        state.generator.load_state_dict(_strip(arrays, "generator."))
        state.discriminators.load_state_dict(_strip(arrays, "discriminators."))
        state.g_opt.load_arrays(arrays, "g_opt")
        state.d_opt.load_arrays(arrays, "d_opt")
    state.g_opt.t, state.d_opt.t = manifest["adam_t"]["g"], manifest["adam_t"]["d"]
    state.g_opt.lr = state.d_opt.lr = manifest["lr"]
    state.step, state.epoch = manifest["step"], manifest["epoch"]
    state.adaptive = AdaptiveState.from_dict(manifest["adaptive"])
    state.data_rng = _restore_rng(manifest["rng"]["data"])
    state.diffusion_rng = _restore_rng(manifest["rng"]["diffusion"])
    return state


def load_generator(path) -> tuple[Generator, TrainConfig]:
    """Generator weights and config from a checkpoint directory (or its parent)."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        latest = latest_checkpoint(path)
        if latest is None:
            raise FileNotFoundError(f"no checkpoint found under {path}")
        path = latest
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = TrainConfig.from_dict(manifest["config"])
    gen = Generator(cfg.generator, np.random.default_rng(0))
    with np.load(path / "arrays.npz") as arrays:
        gen.load_state_dict(_strip(arrays, "generator."))
    return gen, cfg


def _strip(arrays, prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: arrays[k] for k in arrays.files if k.startswith(prefix)}


def _metrics_row(report: LossReport, step: int, lr: float) -> dict:
    return {
        "step": step, "d_loss": repr(report.d_loss), "g_adv": repr(report.g_adv),
        "g_fm": repr(report.g_fm), "g_mel": repr(report.g_mel),
        "r_d": "" if report.r_d is None else repr(report.r_d),
        "T": "" if report.t_cap is None else report.t_cap, "lr": repr(lr),
    }


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    state: TrainState
    checkpoint: Path
    metrics_path: Path


def train(cfg: TrainConfig, dataset, out_dir, resume: bool = True,
          stop_after: int | None = None) -> TrainResult:
    """Run ``cfg.steps`` steps, checkpointing every ``cfg.checkpoint_every``.

    Resumes from ``out_dir/latest`` when present. ``stop_after`` halts early
    (after writing a checkpoint) to simulate an interruption. A non-finite
    loss writes ``abort.json`` (step, losses, parameter norms) and re-raises.
    """
    items = [np.asarray(getattr(d, "samples", d), dtype=np.float64) for d in _audio_items(dataset)]
    if not items:
        raise ConfigError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    trainer = Trainer(cfg)

    ckpt = latest_checkpoint(out) if resume else None
    if ckpt is not None:
        state = load_checkpoint(ckpt, cfg)
        _truncate_metrics(metrics_path, state.step)
        log.info("resumed from %s at step %d", ckpt, state.step)
    else:
        state = TrainState.initial(cfg)
        with open(metrics_path, "w", newline="") as fh:
            csv.DictWriter(fh, METRIC_FIELDS).writeheader()
        ckpt = save_checkpoint(state, out)

    per_epoch = trainer.steps_per_epoch(len(items))
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, METRIC_FIELDS)
        while state.step < cfg.steps:
            batch = trainer.sample_batch(state, items)
            try:
                report = trainer.train_step(state, batch)
            except NumericalAbort as exc:
                fh.flush()
                (out / "abort.json").write_text(json.dumps(exc.dump, indent=1, default=repr))
                raise
            writer.writerow(_metrics_row(report, state.step, state.lr))
            if state.step % per_epoch == 0:
                state.epoch += 1
                state.g_opt.lr = state.d_opt.lr = cfg.lr_init * cfg.lr_decay**state.epoch
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                fh.flush()
                ckpt = save_checkpoint(state, out)
            if stop_after is not None and state.step >= stop_after:
                fh.flush()
                ckpt = save_checkpoint(state, out)
                break
    return TrainResult(state, ckpt, metrics_path)


def _audio_items(dataset):
    for item in dataset:
        if isinstance(item, tuple):
            item = item[0]
        yield item


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        with open(path, "w", newline="") as fh:
            csv.DictWriter(fh, METRIC_FIELDS).writeheader()
        return
    rows = [r for r in read_metrics(path) if int(r["step"]) <= step]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, METRIC_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def as_audio(x: np.ndarray, sample_rate: int) -> AudioBuffer:
    return AudioBuffer(np.asarray(x, dtype=np.float64), sample_rate)
