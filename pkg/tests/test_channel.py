import numpy as np
import pytest
from hypothesis import given, strategies as st

from semcomm import channel as ch
from semcomm import nn_core
from semcomm.channel import ChannelConfig
from semcomm.errors import ConfigurationError


def test_snr_conversion():
    np.testing.assert_allclose(ch.snr_to_noise_variance([0.0, 10.0, -10.0]), [1.0, 0.1, 10.0], rtol=1e-15)
    assert ch.snr_to_noise_variance(float("inf")) == 0.0


def test_training_range_defaults():
    cfg = ChannelConfig()
    assert (cfg.snr_mode, cfg.lo_db, cfg.hi_db) == ("uniform", -4.0, 6.0)


def test_uniform_draws_cover_range(rng):
    d = ChannelConfig().draw_snr_db(100_000, rng)
    assert d.min() >= -4.0 and d.max() <= 6.0
    assert abs(d.mean() - 1.0) < 0.05


def test_fixed_snr_noise_variance(rng):
    x = np.zeros((200_000, 2))
    y, noise = ch.transmit(x, ChannelConfig.fixed(6.0), rng)
    np.testing.assert_allclose(noise.noise_variance, 10 ** -0.6)
    np.testing.assert_allclose(y.var(axis=0), 10 ** -0.6, rtol=0.01)


def test_noiseless_channel_is_identity(rng):
    x = rng.standard_normal((7, 3, 4))
    y, _ = ch.transmit(x, ChannelConfig.noiseless(), rng)
    assert np.array_equal(y, x)


def test_per_sample_snr_broadcasts_over_agents(rng):
    x = np.zeros((4, 3, 5))
    y, noise = ch.transmit(x, ChannelConfig(), rng)
    assert noise.noise_variance.shape == (4,)
    np.testing.assert_array_equal(y, np.sqrt(noise.noise_variance)[:, None, None] * noise.eps)


@pytest.mark.parametrize("kw", [{"snr_mode": "gaussian"}, {"lo_db": 7.0}, {"lo_db": float("nan")},
                                {"snr_mode": "fixed", "snr_db": float("nan")}])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        ChannelConfig(**kw)


@given(seed=st.integers(0, 2**32 - 1), var=st.floats(1e-3, 10.0))
def test_channel_score_is_log_density_gradient(seed, var):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    g = ch.log_channel_grad(x, y, np.array([var]))
    fd = nn_core.finite_difference(lambda v: float(ch.log_channel_density(v.reshape(1, 3), y, np.array([var]))[0]),
                                   x.ravel(), range(3))
    np.testing.assert_allclose(g.ravel(), fd, rtol=1e-6, atol=1e-6)


def test_log_density_against_scipy(rng):
    from scipy.stats import norm

    x, y = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 3))
    var = np.array([0.5, 2.0])
    ref = norm.logpdf(y, x, np.sqrt(var)[:, None, None]).sum(axis=(1, 2))
    np.testing.assert_allclose(ch.log_channel_density(x, y, var), ref, rtol=1e-12)


def test_score_needs_positive_variance():
    with pytest.raises(ConfigurationError):
        ch.log_channel_grad(np.zeros((1, 2)), np.zeros((1, 2)), np.array([0.0]))
