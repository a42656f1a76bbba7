import numpy as np
import pytest
from hypothesis import given, strategies as st

from semcomm import channel as ch
from semcomm import gradients as gr
from semcomm import nn_core, semantics
from semcomm import receiver as rx
from semcomm import transmitter as tx
from semcomm.errors import ConfigurationError
from semcomm.nn_core import MlpSpec
from semcomm.receiver import DecoderParams
from semcomm.transmitter import EncoderParams

SRC = semantics.GmSourceSpec(n_agents=2)


def system(rng, mode="dim"):
    enc = EncoderParams.init(MlpSpec((2, 6, 3, 3), ("relu", "relu", "linear")), 2, rng, mode)
    enc = enc.with_theta(enc.theta + 0.1 * rng.standard_normal(enc.theta.size))
    dec = DecoderParams.init(MlpSpec((3, 5), ("relu",)), MlpSpec((5, 4), ("softmax",)), 2, rng)
    return enc, dec


def loss_of(enc, dec, joint, batch, s2):
    def f(theta):
        fwd = tx.transmitter_forward(enc.with_theta(theta), joint.parts)
        y = ch.apply_noise(tx.policy_action(fwd.x_bar, batch.tx.eps_pi, s2) if s2 else fwd.x_bar, batch.noise)
        return float(-np.mean(rx.reward(rx.decode(dec, y), joint.labels)))
    return f


@pytest.mark.parametrize("s2", [0.0, 0.15])
@pytest.mark.parametrize("mode", ["dim", "batch"])
def test_reparam_is_exact_pathwise_derivative(rng, s2, mode):
    enc, dec = system(rng, mode)
    joint = semantics.sample_joint(SRC, 8, rng)
    batch = gr.draw_batch(enc, dec, joint, s2, ch.ChannelConfig(), rng, rng)
    g = gr.grad_reparam(enc, dec, batch).mean_grad
    coords = rng.choice(enc.theta.size, 20, replace=False)
    fd = nn_core.finite_difference(loss_of(enc, dec, joint, batch, s2), enc.theta, coords)
    assert np.max(nn_core.relative_error(g[coords], fd)) < 1e-4


def test_decoder_gradient_is_exact(rng):
    enc, dec = system(rng)
    joint = semantics.sample_joint(SRC, 8, rng)
    batch = gr.draw_batch(enc, dec, joint, 0.0, ch.ChannelConfig(), None, rng)
    g = gr.grad_decoder(dec, batch).mean_grad
    fd = nn_core.finite_difference(
        lambda p: float(-np.mean(rx.reward(rx.decode(dec.with_psi(p), batch.y), joint.labels))), dec.psi,
        range(dec.psi.size))
    assert np.max(nn_core.relative_error(g, fd)) < 1e-4


@given(seed=st.integers(0, 2**32 - 1))
def test_spg_equals_surrogate_reverse_mode_bitwise(seed):
    rng = np.random.default_rng(seed)
    enc, dec = system(rng)
    batch = gr.draw_batch(enc, dec, semantics.sample_joint(SRC, 6, rng), 0.15, ch.ChannelConfig(), rng, rng)
    assert np.array_equal(gr.grad_spg(enc, batch.tx, batch.rewards).mean_grad,
                          gr.surrogate_gradient(enc, batch.tx, batch.rewards))


def test_surrogate_gradient_matches_differences(rng):
    enc, dec = system(rng)
    batch = gr.draw_batch(enc, dec, semantics.sample_joint(SRC, 6, rng), 0.15, ch.ChannelConfig(), rng, rng)
    g = gr.surrogate_gradient(enc, batch.tx, batch.rewards)
    coords = rng.choice(enc.theta.size, 20, replace=False)
    fd = nn_core.finite_difference(lambda t: gr.surrogate_objective(enc, batch.tx, batch.rewards, t), enc.theta,
                                   coords)
    assert np.max(nn_core.relative_error(g[coords], fd)) < 1e-4


def test_spg_zero_rewards_give_zero_gradient(rng):
    enc, dec = system(rng)
    batch = gr.draw_batch(enc, dec, semantics.sample_joint(SRC, 6, rng), 0.15, ch.ChannelConfig(), rng, rng)
    assert np.array_equal(gr.grad_spg(enc, batch.tx, np.zeros(6)).mean_grad, np.zeros(enc.theta.size))


def test_spg_needs_stochastic_policy(rng):
    enc, dec = system(rng)
    batch = gr.draw_batch(enc, dec, semantics.sample_joint(SRC, 4, rng), 0.0, ch.ChannelConfig(), None, rng)
    with pytest.raises(ConfigurationError):
        gr.grad_spg(enc, batch.tx, batch.rewards)


def test_spg_reward_count_checked(rng):
    enc, dec = system(rng)
    batch = gr.draw_batch(enc, dec, semantics.sample_joint(SRC, 4, rng), 0.15, ch.ChannelConfig(), rng, rng)
    with pytest.raises(ConfigurationError):
        gr.grad_spg(enc, batch.tx, batch.rewards[:3])


def test_channel_reinforce_rejects_stochastic_policy(rng):
    enc, dec = system(rng)
    batch = gr.draw_batch(enc, dec, semantics.sample_joint(SRC, 4, rng), 0.15, ch.ChannelConfig(), rng, rng)
    with pytest.raises(ConfigurationError, match="do not mix"):
        gr.grad_reinforce_channel(enc, batch)


def test_channel_reinforce_is_score_times_reward(rng):
    enc, dec = system(rng)
    batch = gr.draw_batch(enc, dec, semantics.sample_joint(SRC, 5, rng), 0.0, ch.ChannelConfig(), None, rng)
    g = gr.grad_reinforce_channel(enc, batch).mean_grad
    # surrogate: -(1/N) sum r_n ln p(y_n | x_bar_n(theta)) differentiated at fixed y
    f = lambda t: float(-np.mean(batch.rewards * ch.log_channel_density(
        tx.transmitter_forward(enc.with_theta(t), batch.tx.fwd.parts).x_bar, batch.y, batch.noise.noise_variance)))
    coords = rng.choice(enc.theta.size, 20, replace=False)
    fd = nn_core.finite_difference(f, enc.theta, coords)
    assert np.max(nn_core.relative_error(g[coords], fd)) < 1e-4


def test_reparam_requires_noise_record(rng):
    enc, dec = system(rng)
    batch = gr.draw_batch(enc, dec, semantics.sample_joint(SRC, 4, rng), 0.0, ch.ChannelConfig(), None, rng)
    with pytest.raises(ConfigurationError):
        gr.grad_reparam(enc, dec, batch._replace(noise=None))


@pytest.mark.parametrize("kind", ["reparam", "spg", "decoder_supervised", "reinforce_channel"])
def test_per_sample_mean_equals_batch_gradient(rng, kind):
    enc, dec = system(rng)
    s2 = 0.15 if kind == "spg" else 0.0
    batch = gr.draw_batch(enc, dec, semantics.sample_joint(SRC, 9, rng), s2, ch.ChannelConfig(), rng, rng)
    fn = {
        "reparam": lambda ps: gr.grad_reparam(enc, dec, batch, ps),
        "spg": lambda ps: gr.grad_spg(enc, batch.tx, batch.rewards, ps),
        "decoder_supervised": lambda ps: gr.grad_decoder(dec, batch, ps),
        "reinforce_channel": lambda ps: gr.grad_reinforce_channel(enc, batch, ps),
    }[kind]
    full, rows = fn(False), fn(True)
    assert rows.estimator_kind == kind and rows.n_samples == 9
    np.testing.assert_allclose(rows.mean_grad, full.mean_grad, rtol=1e-10, atol=1e-14)
    assert np.all(rows.variance() >= 0)


def test_single_sample_variance_is_zero(rng):
    est = gr.GradEstimate(np.ones(3), np.ones((1, 3)), "spg")
    assert np.array_equal(est.variance(), np.zeros(3))
    with pytest.raises(ConfigurationError):
        gr.GradEstimate(np.ones(3), None, "spg").variance()


def test_entropy_and_milbo_estimate():
    assert gr.entropy([0.5, 0.5]) == pytest.approx(np.log(2))
    assert gr.entropy([1.0, 0.0]) == 0.0
    m = gr.milbo_estimate([-0.1, -0.3], prior=[0.5, 0.5])
    assert m.raw == pytest.approx(-0.2) and m.bound == pytest.approx(np.log(2) - 0.2)
    assert gr.milbo_estimate([-1.0, -3.0], weights=[3, 1]).raw == pytest.approx(-1.5)


def test_enumerated_likelihood_rows_are_distributions():
    sys_ = gr.EnumeratedSystem(np.array([-1.0, 1.0]), 0.5)
    lik = sys_.likelihood()
    assert lik.shape == (2, 41)
    np.testing.assert_allclose(lik.sum(axis=1), 1.0, atol=1e-15)
    np.testing.assert_allclose(sys_.posterior().sum(axis=1), 1.0, atol=1e-15)


def test_enumerated_mutual_information_limits():
    far = gr.EnumeratedSystem(np.array([-10.0, 10.0]), 0.1)
    assert far.mutual_information() == pytest.approx(np.log(2), abs=1e-9)
    same = gr.EnumeratedSystem(np.array([0.3, 0.3]), 1.0)
    assert abs(same.mutual_information()) < 1e-15


def test_enumerated_mi_below_continuous_mi():
    from scipy.integrate import quad
    from scipy.stats import norm

    s = 0.8
    f = lambda y: 0.5 * norm.pdf(y, -1, s) + 0.5 * norm.pdf(y, 1, s)
    h_y = quad(lambda y: -f(y) * np.log(f(y)), -12, 12)[0]
    continuous = h_y - 0.5 * np.log(2 * np.pi * np.e * s**2)
    binned = gr.EnumeratedSystem(np.array([-1.0, 1.0]), s).mutual_information()
    # quantising y is a channel, so it cannot add information; 41 bins lose little
    assert binned <= continuous + 1e-12
    assert continuous - binned < 0.01


@given(seed=st.integers(0, 2**32 - 1), std=st.floats(0.2, 3.0), p0=st.floats(0.05, 0.95))
def test_milbo_never_exceeds_mutual_information(seed, std, p0):
    rng = np.random.default_rng(seed)
    sys_ = gr.EnumeratedSystem(np.array([-1.0, 1.0]), std, prior=np.array([p0, 1 - p0]))
    q = rng.dirichlet(np.ones(2), size=41)
    mi = sys_.mutual_information()
    assert sys_.milbo(q).bound <= mi + 1e-12
    assert abs(sys_.milbo(sys_.posterior()).bound - mi) < 1e-12


def test_decoder_table_shape(rng):
    dec = DecoderParams.init(MlpSpec((1, 4), ("relu",)), MlpSpec((4, 2), ("softmax",)), 1, rng)
    q = gr.EnumeratedSystem(np.array([-1.0, 1.0]), 0.5).decoder_table(dec)
    assert q.shape == (41, 2)
