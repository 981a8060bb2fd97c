"""Least-squares adversarial, feature-matching and mel reconstruction losses.

Reduction: mean over batch and positions inside each sub-discriminator (or
feature map), summed across sub-discriminators (or layers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from specdiff import autograd as ag
from specdiff.autograd import Tensor
from specdiff.dsp import DEFAULT_LOG_FLOOR, MelFilterbank, StftConfig, mel_spectrogram
from specdiff.errors import ConfigError, ShapeError
from specdiff.nets import MelFrontEnd


@dataclass(frozen=True)
class LossWeights:
    lambda_fm: float = 2.0
    lambda_mel: float = 45.0

    def __post_init__(self):
        if self.lambda_fm < 0 or self.lambda_mel < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class LossReport:
    d_loss: float = float("nan")
    g_adv: float = float("nan")
    g_fm: float = float("nan")
    g_mel: float = float("nan")
    g_total: float = float("nan")
    d_per_sub: list[float] = field(default_factory=list)
    adv_per_sub: list[float] = field(default_factory=list)
    r_d: float | None = None
    t_cap: int | None = None

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in (self.d_loss, self.g_adv, self.g_fm, self.g_mel, self.g_total))


def _check_pairs(a: list, b: list, what: str) -> None:
    if len(a) != len(b):
        raise ShapeError(f"{what}: {len(a)} real vs {len(b)} fake sub-discriminators")


def discriminator_loss(scores_real: list[Tensor], scores_fake: list[Tensor]) -> tuple[Tensor, list[float]]:
    """``sum_k mean((D_k(y) - 1)^2) + mean(D_k(y_g)^2)``; also returns the per-sub terms.

    Pass fake scores computed from a detached generator output.
    """
    _check_pairs(scores_real, scores_fake, "discriminator_loss")
    terms = [((ag.as_tensor(r) - 1.0) ** 2).mean() + (ag.as_tensor(f) ** 2).mean()
             for r, f in zip(scores_real, scores_fake)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, [t.item() for t in terms]


def adversarial_loss(scores_fake: list[Tensor]) -> tuple[Tensor, list[float]]:
    terms = [((ag.as_tensor(f) - 1.0) ** 2).mean() for f in scores_fake]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, [t.item() for t in terms]


def feature_matching_loss(feats_real: list[list[Tensor]], feats_fake: list[list[Tensor]]) -> Tensor:
    """Sum over every layer of every sub-discriminator of ``mean|D^i(y) - D^i(y_g)|``.

    Real-branch features are treated as constants.
    """
    _check_pairs(feats_real, feats_fake, "feature_matching_loss")
    total = None
    for fr_list, ff_list in zip(feats_real, feats_fake):
        if len(fr_list) != len(ff_list):
            raise ShapeError("feature lists have different layer counts")
        for fr, ff in zip(fr_list, ff_list):
            if fr.shape != ff.shape:
                raise ShapeError(f"feature shapes differ: {fr.shape} vs {ff.shape}")
            term = ag.tabs(ag.as_tensor(ff) - fr.data).mean()
            total = term if total is None else total + term
    return total


class MelLoss:
    """Differentiable ``mean|phi(x) - phi(x_hat)|`` on clean (non-diffused) audio."""

    def __init__(self, cfg: StftConfig, fb: MelFilterbank, log_floor: float = DEFAULT_LOG_FLOOR):
        self.cfg, self.fb, self.log_floor = cfg, fb, log_floor
        self.front = MelFrontEnd(cfg, fb, log_floor)

    def __call__(self, x, x_hat) -> Tensor:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        x_hat = ag.as_tensor(x_hat)
        if x.shape != x_hat.shape:
            raise ShapeError(f"mel loss needs equal shapes, got {x.shape} and {x_hat.shape}")
        if x.ndim == 1:
            x, x_hat = x[None], x_hat.reshape(1, -1)
        # target through the same front end, so x_hat == x gives exactly zero
        with ag.no_grad():
            target = self.front(x).data
        return ag.tabs(self.front(x_hat) - target).mean()


def mel_l1(x, x_hat, cfg: StftConfig, fb: MelFilterbank, log_floor: float = DEFAULT_LOG_FLOOR) -> float:
    """Mean absolute difference of the two log-mel grids."""
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    x_hat = np.asarray(getattr(x_hat, "samples", x_hat), dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"mel_l1 needs equal lengths, got {x.shape} and {x_hat.shape}")
    a = mel_spectrogram(x, cfg, fb, log_floor)
    b = mel_spectrogram(x_hat, cfg, fb, log_floor)
    return float(np.mean(np.abs(a - b)))


def generator_loss(scores_fake: list[Tensor], feats_real: list[list[Tensor]],
                   feats_fake: list[list[Tensor]], x, g_out: Tensor, w: LossWeights,
                   mel_loss: MelLoss) -> tuple[Tensor, LossReport]:
    """Adversarial + FM on diffused inputs, mel L1 on the clean ``x`` and ``G(s)``."""
    adv, adv_terms = adversarial_loss(scores_fake)
    fm = feature_matching_loss(feats_real, feats_fake)
    mel = mel_loss(x, g_out)
    total = adv + fm * w.lambda_fm + mel * w.lambda_mel
    report = LossReport(g_adv=adv.item(), g_fm=fm.item(), g_mel=mel.item(),
                        g_total=total.item(), adv_per_sub=adv_terms)
    return total, report
