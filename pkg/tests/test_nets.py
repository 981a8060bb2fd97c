import numpy as np
import pytest

from oracles import numeric_grad, rel_err
from specdiff import autograd as ag
from specdiff.autograd import Tensor
from specdiff.dsp import mel_spectrogram
from specdiff.errors import ConfigError, ShapeError
from specdiff.nets import (
    FULL_SCALE_DISCRIMINATORS, DiscriminatorConfig, Discriminators, Generator, GeneratorConfig,
    MelFrontEnd,
)

SMALL_G = GeneratorConfig(num_mels=6, channels=8, upsample_rates=(4, 2), resblock_kernels=(3,),
                          resblock_dilations=(1, 2))
SMALL_D = DiscriminatorConfig(periods=(2, 3), mpd_channels=(2, 3), resolutions=((32, 8, 16),),
                              mrd_channels=2, mrd_layers=2)


def sampled_param_check(module, loss_fn, per_param=4, seed=0):
    """Backward vs finite differences on a few random entries of every parameter."""
    module.zero_grad()
    loss_fn().backward()
    r = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        flat = p.data.reshape(-1)
        idx = r.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + 1e-5
            with ag.no_grad():
                fp = loss_fn().item()
            flat[i] = old - 1e-5
            with ag.no_grad():
                fm = loss_fn().item()
            flat[i] = old
            num = (fp - fm) / 2e-5
            ana = p.grad.reshape(-1)[i]
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-3), (name, num, ana)


def test_one_frame_gives_hop_samples():
    g = Generator(GeneratorConfig(), np.random.default_rng(0))
    out = g(np.zeros((1, 32, 1)))
    assert out.shape == (1, 64)


@pytest.mark.parametrize("rates", [(8, 8), (4, 4, 2), (2,)])
def test_length_contract(rates):
    cfg = GeneratorConfig(num_mels=4, channels=8, upsample_rates=rates, resblock_kernels=(3,))
    g = Generator(cfg, np.random.default_rng(0))
    assert g(np.zeros((2, 4, 7))).shape == (2, 7 * cfg.hop)


def test_zero_final_layer_gives_silence(rng):
    g = Generator(GeneratorConfig(), np.random.default_rng(0), zero_final=True)
    assert np.all(g(rng.standard_normal((1, 32, 5))).data == 0)


def test_default_generator_size():
    n = Generator(GeneratorConfig(), np.random.default_rng(0)).num_parameters()
    assert 30_000 <= n <= 80_000


def test_generator_rejects_wrong_bands():
    g = Generator(SMALL_G, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        g(np.zeros((1, 5, 3)))


def test_generator_gradient_fd(rng):
    g = Generator(SMALL_G, np.random.default_rng(1))
    s = rng.standard_normal((2, 6, 3))
    sampled_param_check(g, lambda: g(s).sum())


def test_discriminator_determinism(rng):
    d = Discriminators(SMALL_D, np.random.default_rng(0))
    y = rng.standard_normal((2, 96))
    s1, f1 = d(y)
    s2, f2 = d(y.copy())
    assert all(np.array_equal(a.data, b.data) for a, b in zip(s1, s2))
    assert all(np.array_equal(a.data, b.data) for fa, fb in zip(f1, f2) for a, b in zip(fa, fb))


def test_period_padding(rng):
    d = Discriminators(SMALL_D, np.random.default_rng(0))
    y = Tensor(rng.standard_normal((1, 101)), requires_grad=True)
    scores, feats = d(y)
    # period 2: 101 -> 102 samples -> 51 rows; first conv stride 3, pad 2, kernel 5
    assert feats[0][0].shape[2:] == ((51 + 4 - 5) // 3 + 1, 2)
    sum(s.sum() for s in scores).backward()
    assert y.grad.shape == (1, 101)


def test_score_gradient_wrt_input(rng):
    d = Discriminators(SMALL_D, np.random.default_rng(2))
    y = Tensor(rng.standard_normal((1, 61)), requires_grad=True)

    def total():
        scores, feats = d(y)
        out = scores[0].sum()
        for s in scores[1:]:
            out = out + s.sum()
        return out

    total().backward()
    def f():
        with ag.no_grad():
            return total().item()
    assert rel_err(y.grad, numeric_grad(f, y.data)) <= 1e-4


def test_discriminator_param_gradients(rng):
    d = Discriminators(SMALL_D, np.random.default_rng(3))
    y = rng.standard_normal((2, 64))

    def loss():
        scores, feats = d(y)
        out = (scores[0] ** 2).mean()
        for s in scores[1:]:
            out = out + (s ** 2).mean()
        return out
    sampled_param_check(d, loss)


def test_scores_and_features_align():
    d = Discriminators(DiscriminatorConfig(), np.random.default_rng(0))
    scores, feats = d(np.zeros((2, 1024)))
    assert len(scores) == len(feats) == 6
    for s, f in zip(scores, feats):
        assert s.shape[0] == 2 and len(f) >= 3


def test_config_invariants():
    with pytest.raises(ConfigError):
        DiscriminatorConfig(periods=(2, 4))
    with pytest.raises(ConfigError):
        DiscriminatorConfig(resolutions=((256, 200, 128),))
    assert FULL_SCALE_DISCRIMINATORS.periods == (2, 3, 5, 7, 11)
    assert FULL_SCALE_DISCRIMINATORS.resolutions == ((1024, 120, 600), (2048, 240, 1200), (512, 50, 240))


def test_mel_front_end_matches_numpy(cfg, fb, rng):
    x = rng.standard_normal((2, 1024))
    front = MelFrontEnd(cfg, fb)
    assert np.allclose(front(x).data, mel_spectrogram(x, cfg, fb), atol=1e-12)


def test_state_dict_round_trip():
    a = Generator(SMALL_G, np.random.default_rng(0))
    b = Generator(SMALL_G, np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
