"""Command-line entry point. Every command reads and writes files only.

Exit codes: 0 ok, 2 config/input error, 3 numerical abort. Errors go to
stderr as ``specdiff-error:<kind>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from specdiff import autograd as ag
from specdiff.audio import AudioBuffer, WavError, read_wav, write_wav
from specdiff.data import SyntheticSpec, generate_dataset, load_dataset_dir, write_dataset
from specdiff.dsp import MelFilterbank, StftConfig, mel_spectrogram, stft_array
from specdiff.envelope import ShapedNoiseSampler, estimate_envelope, sample_shaped_noise
from specdiff.errors import ConfigError, NumericalError, ShapeError
from specdiff.losses import mel_l1
from specdiff.trainer import TrainConfig, load_generator, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
LSD_WINDOWS = (256, 512, 1024)


@dataclass(frozen=True)
class CliConfig:
    """Parsed flags shared by all commands."""

    command: str
    seed: int
    sample_rate: int = 16000
    fft_size: int = 256
    hop_size: int = 64
    num_mels: int = 32

    def __post_init__(self):
        if self.sample_rate <= 0 or self.num_mels < 1:
            raise ConfigError("sample rate and mel count must be positive")

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.fft_size, self.hop_size)

    def filterbank(self) -> MelFilterbank:
        return MelFilterbank.htk(self.sample_rate, self.fft_size, self.num_mels)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p} does not exist")
    return p


# -- CSV helpers ------------------------------------------------------------------

def write_matrix_csv(path, m: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in np.atleast_2d(m)])


def read_matrix_csv(path) -> np.ndarray:
    try:
        m = np.loadtxt(_existing(path), delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"{path}: not a numeric CSV ({exc})") from exc
    if not np.all(np.isfinite(m)):
        raise ConfigError(f"{path}: non-finite entries")
    return m


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args, cc: CliConfig) -> int:
    spec = SyntheticSpec.from_json(_existing(args.spec))
    if args.seed is not None:
        spec = SyntheticSpec(**{**spec.__dict__, "seed": args.seed})
    fb = MelFilterbank.htk(spec.sample_rate, cc.fft_size, cc.num_mels)
    items = generate_dataset(spec, cc.stft, fb)
    manifest = write_dataset(items, spec, args.out)
    print(f"wrote {len(items)} items, manifest {manifest}")
    return EXIT_OK


def cmd_mel(args, cc: CliConfig) -> int:
    buf = read_wav(_existing(args.inp))
    fb = MelFilterbank.htk(buf.sample_rate, cc.fft_size, cc.num_mels)
    write_matrix_csv(args.out, mel_spectrogram(buf, cc.stft, fb))
    return EXIT_OK


def band_power(power: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Per-band weighted average of per-bin power (filterbank rows sum to one)."""
    return fb.weights @ power


def noise_demo(mel: np.ndarray, fb: MelFilterbank, cfg: StftConfig, sigma: float,
               rng: np.random.Generator, realizations: int = 200):
    """Shaped noise for ``mel`` plus expected and empirical per-band power.

    Empirical power is the frame-averaged periodogram ``|STFT|^2 / sum(w^2)``
    over ``realizations`` independent draws; the first draw is returned as audio.
    """
    if mel.shape[0] != fb.num_mels:
        raise ShapeError(f"mel CSV has {mel.shape[0]} rows, filterbank has {fb.num_mels} bands")
    env = estimate_envelope(mel, fb)
    sampler = ShapedNoiseSampler.from_envelope(env, cfg, sigma)
    n = mel.shape[1] * cfg.hop_size
    noise = sample_shaped_noise(sampler, n, rng, batch=(realizations,))
    frames = stft_array(noise, cfg)
    per_bin = np.mean(np.abs(frames) ** 2, axis=(0, 1)) / np.sum(cfg.padded_window() ** 2)
    expected = band_power(sampler.expected_band_power(), fb)
    empirical = band_power(per_bin, fb)
    return noise[0], expected, empirical


def cmd_noise_demo(args, cc: CliConfig) -> int:
    if args.sigma < 0:
        raise ConfigError("--sigma must be nonnegative")
    mel = read_matrix_csv(args.mel)
    fb = MelFilterbank.htk(cc.sample_rate, cc.fft_size, mel.shape[0])
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    noise, expected, empirical = noise_demo(mel, fb, cc.stft, args.sigma, rng, args.realizations)
    write_wav(args.out, AudioBuffer(noise, cc.sample_rate))
    if args.psd:
        rows = []
        for k, (e, m) in enumerate(zip(expected, empirical)):
            ratio = 10 * np.log10(m / e) if e > 0 and m > 0 else 0.0
            rows.append([k, f"{fb.center_frequencies()[k]:.3f}", repr(float(e)), repr(float(m)),
                         repr(float(ratio))])
        _write_rows(args.psd, ["band", "center_hz", "expected", "empirical", "ratio_db"], rows)
    return EXIT_OK


def cmd_train(args, cc: CliConfig) -> int:
    cfg = TrainConfig.from_json(_existing(args.config)) if args.config else TrainConfig()
    changes = {}
    if args.mode:
        changes["mode"] = args.mode
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.steps is not None:
        changes["steps"] = args.steps
    cfg = cfg.replace(**changes) if changes else cfg
    data = load_dataset_dir(_existing(args.data))
    if not data:
        raise ConfigError(f"no audio found in {args.data}")
    if any(b.sample_rate != cfg.sample_rate for b in data):
        raise ConfigError(f"dataset sample rate differs from config ({cfg.sample_rate} Hz)")
    res = train(cfg, data, args.out, resume=not args.fresh)
    print(f"finished at step {res.state.step}; checkpoint {res.checkpoint}")
    return EXIT_OK


def synthesize(ckpt, mel: np.ndarray) -> tuple[np.ndarray, TrainConfig]:
    gen, cfg = load_generator(ckpt)
    with ag.no_grad():
        y = gen(mel[None]).data[0]
    return y, cfg


def cmd_synth(args, cc: CliConfig) -> int:
    mel = read_matrix_csv(args.mel)
    y, cfg = synthesize(_existing(args.ckpt), mel)
    write_wav(args.out, AudioBuffer(y, cfg.sample_rate))
    return EXIT_OK


def log_spectral_distance(ref: np.ndarray, hyp: np.ndarray, fft_size: int, eps: float = 1e-10) -> float:
    """Mean over frames of the RMS (over bins) difference of dB power spectra."""
    cfg = StftConfig(fft_size, fft_size // 4)
    pr = np.abs(stft_array(ref, cfg)) ** 2
    ph = np.abs(stft_array(hyp, cfg)) ** 2
    d = 10 * np.log10(pr + eps) - 10 * np.log10(ph + eps)
    return float(np.mean(np.sqrt(np.mean(d**2, axis=-1))))


def _wav_map(path: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(path.glob("*.wav"))}


def cmd_eval(args, cc: CliConfig) -> int:
    ref, hyp = _wav_map(_existing(args.ref)), _wav_map(_existing(args.hyp))
    names = sorted(set(ref) & set(hyp))
    if not names:
        raise ConfigError("no WAV file names shared by --ref and --hyp")
    rows, scores = [], []
    for name in names:
        a, b = read_wav(ref[name]), read_wav(hyp[name])
        if a.sample_rate != b.sample_rate:
            raise ConfigError(f"{name}: sample rates differ")
        n = min(len(a), len(b))
        fb = MelFilterbank.htk(a.sample_rate, cc.fft_size, cc.num_mels)
        x, y = a.samples[:n], b.samples[:n]
        row = [mel_l1(x, y, cc.stft, fb)] + [log_spectral_distance(x, y, w) for w in LSD_WINDOWS]
        scores.append(row)
        rows.append([name] + [repr(v) for v in row])
    rows.append(["mean"] + [repr(float(v)) for v in np.mean(scores, axis=0)])
    _write_rows(args.out, ["file", "mel_l1"] + [f"lsd_{w}" for w in LSD_WINDOWS], rows)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--sample-rate", type=int, default=16000)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write a synthetic dataset")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)

    sp = add("mel", cmd_mel, "log-mel CSV (rows = bands, columns = frames)")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)

    sp = add("noise-demo", cmd_noise_demo, "envelope-shaped noise WAV and per-band PSD CSV")
    sp.add_argument("--mel", required=True)
    sp.add_argument("--sigma", type=float, default=0.05)
    sp.add_argument("--out", required=True)
    sp.add_argument("--psd", default=None)
    sp.add_argument("--realizations", type=int, default=200)

    sp = add("train", cmd_train, "train a generator")
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("none", "standard", "spec"), default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")

    sp = add("synth", cmd_synth, "one generator pass from a mel CSV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--mel", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "mel-L1 and log-spectral distance between WAV folders")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--out", required=True)
    return p


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(f"specdiff-error:{kind}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cc = CliConfig(args.command, args.seed, args.sample_rate)
        return args.fn(args, cc)
    except NumericalError as exc:
        return _fail("numerical", exc, EXIT_NUMERICAL)
    except (ConfigError, ShapeError) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (WavError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail("input", exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
