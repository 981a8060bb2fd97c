import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import band_average, db, welch_psd
from specdiff.diffusion import NoiseSource, build_schedule, diffuse
from specdiff.envelope import ShapedNoiseSampler, SpectralEnvelope
from specdiff.errors import ConfigError


def direct_alpha_bar(beta, t):
    out = 1.0
    for b in beta[:t]:
        out *= 1.0 - b
    return out


def test_single_step_schedule():
    s = build_schedule(1, 1e-3, 0.02)
    assert np.array_equal(s.beta, [1e-3])
    assert np.array_equal(s.alpha_bar, [1 - 1e-3])


def test_constant_beta_closed_form():
    s = build_schedule(50, 0.01, 0.01)
    assert np.allclose(s.alpha_bar, 0.99 ** np.arange(1, 51), rtol=1e-13, atol=0)


def test_default_schedule_against_direct_product():
    s = build_schedule(500, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.isclose(s.beta[0], 1e-4) and np.isclose(s.beta[-1], 0.02)
    for t in (1, 2, 250, 499, 500):
        ref = direct_alpha_bar(s.beta, t)
        assert abs(s.alpha_bar[t - 1] / ref - 1) <= 1e-12
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.array_equal(s.alpha, 1 - s.beta)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_bad_schedule_rejected(args):
    with pytest.raises(ConfigError):
        build_schedule(*args)


def test_step_out_of_range(rng):
    s = build_schedule(10)
    for t in (0, 11):
        with pytest.raises(IndexError):
            diffuse(np.zeros(8), t, s, NoiseSource.standard(), rng)


def test_first_step_barely_moves(rng):
    s = build_schedule(500)
    x = np.sin(np.linspace(0, 40, 4000))
    y = diffuse(x, 1, s, NoiseSource.standard(0.05), rng)
    assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 2 * np.sqrt(s.beta[0])


@pytest.mark.parametrize("t", [1, 250, 500])
def test_zero_signal_variance(rng, t):
    s = build_schedule(500)
    y = diffuse(np.zeros((1000, 64)), t, s, NoiseSource.standard(0.05), rng)
    expected = (1 - s.alpha_bar[t - 1]) * 0.05**2
    assert abs(y.var(axis=0).mean() / expected - 1) <= 0.1


def test_spec_variant_marginal_variance(cfg, rng):
    s = build_schedule(500)
    k = np.arange(129)
    env = SpectralEnvelope(10 ** ((-20 * k / 128) / 20)[None])
    noise = NoiseSource.spec(ShapedNoiseSampler.from_envelope(env, cfg, 0.05))
    x = rng.standard_normal(2048) * 0.3
    y = diffuse(np.broadcast_to(x, (1000, 2048)), 300, s, noise, rng)
    resid = y - np.sqrt(s.alpha_bar[299]) * x
    expected = (1 - s.alpha_bar[299]) * 0.05**2
    assert abs(resid[:, 128:-128].var(axis=0).mean() / expected - 1) <= 0.1


def test_standard_matches_flat_spec(cfg, fb, rng):
    flat = ShapedNoiseSampler.from_envelope(SpectralEnvelope(np.ones((1, 129))), cfg, 0.05)
    a = NoiseSource.standard(0.05).draw((200, 8192), rng)
    b = NoiseSource.spec(flat).draw((200, 8192), rng)
    pa = db(band_average(welch_psd(a[:, 256:-256]), fb))
    pb = db(band_average(welch_psd(b[:, 256:-256]), fb))
    assert np.all(np.abs(pa - pb) <= 1.0)


def test_snr_decreases_with_t(rng):
    s = build_schedule(500)
    x = np.sin(np.linspace(0, 60, 1024))
    snr = []
    for t in (1, 10, 50, 100, 200, 300, 400, 500):
        y = diffuse(np.broadcast_to(x, (100, 1024)), t, s, NoiseSource.standard(0.05), rng)
        signal = np.sqrt(s.alpha_bar[t - 1]) * x
        snr.append(np.sum(signal**2) / np.mean(np.sum((y - signal) ** 2, axis=-1)))
    assert np.all(np.diff(snr) < 0)


@given(a=st.floats(-2, 2), seed=st.integers(0, 2**31), t=st.integers(1, 500))
def test_affine_for_fixed_eps(a, seed, t):
    s = build_schedule(500)
    r = np.random.default_rng(seed)
    x1, x2, eps = r.standard_normal((3, 32))
    src = NoiseSource.standard()
    y = lambda x: diffuse(x, t, s, src, r, eps=eps)
    lhs = y(a * x1 + (1 - a) * x2)
    assert np.allclose(lhs, a * y(x1) + (1 - a) * y(x2), atol=1e-12)


def test_per_element_steps(rng):
    s = build_schedule(500)
    x = np.ones((3, 16))
    eps = rng.standard_normal((3, 16))
    t = np.array([1, 100, 500])
    y = diffuse(x, t, s, NoiseSource.standard(), rng, eps=eps)
    for i in range(3):
        assert np.allclose(y[i], diffuse(x[i], int(t[i]), s, NoiseSource.standard(), rng, eps=eps[i]))


def test_independent_draws(rng):
    src = NoiseSource.standard(0.05)
    a, b = src.draw((2, 4096), rng)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1


def test_noise_source_needs_one_variant(cfg):
    with pytest.raises(ConfigError):
        NoiseSource()
    assert NoiseSource.standard().variant == "standard"
