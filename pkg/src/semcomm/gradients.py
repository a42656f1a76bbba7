"""Monte Carlo gradient estimators of the amortised cross-entropy.

Four estimators share one sampled batch:

* ``decoder_supervised``: backprop of ``-ln q(z|y)`` into the decoder.
* ``reparam``: pathwise derivative through the recorded policy and channel noise.
* ``reinforce_channel``: score of the channel density times the reward.
* ``spg``: score of the transmit policy times the reward; needs no channel model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

from . import channel as ch
from . import receiver as rx
from . import transmitter as tx
from .errors import ConfigurationError
from .receiver import DecoderParams
from .semantics import JointBatch
from .transmitter import EncoderParams

ESTIMATOR_KINDS = ("decoder_supervised", "reinforce_channel", "reparam", "spg")


class TxRecord(NamedTuple):
    """Everything the transmitter knows about one exploration batch."""

    fwd: tx.TxForward
    x: np.ndarray
    eps_pi: np.ndarray | None
    sigma_pi2: float


class SampleBatch(NamedTuple):
    labels: np.ndarray
    tx: TxRecord
    y: np.ndarray
    noise: ch.NoiseDraw | None
    probs: np.ndarray
    rewards: np.ndarray
    decode_cache: rx.DecodeCache

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass
class GradEstimate:
    mean_grad: np.ndarray
    per_sample: np.ndarray | None
    estimator_kind: str

    @property
    def n_samples(self) -> int:
        return 0 if self.per_sample is None else self.per_sample.shape[0]

    def variance(self) -> np.ndarray:
        """Per-coordinate unbiased sample variance of the per-sample terms."""
        if self.per_sample is None:
            raise ConfigurationError("per-sample gradients were not retained")
        if self.n_samples < 2:
            return np.zeros(self.mean_grad.shape)
        return self.per_sample.var(axis=0, ddof=1)

    def standard_error(self) -> np.ndarray:
        return np.sqrt(self.variance() / max(self.n_samples, 1))

    def covariance_trace(self) -> float:
        return float(self.variance().sum())


def _estimate(rows_or_sum: np.ndarray, per_sample: bool, kind: str) -> GradEstimate:
    if per_sample:
        return GradEstimate(rows_or_sum.mean(axis=0), rows_or_sum, kind)
    return GradEstimate(rows_or_sum, None, kind)


def transmit_batch(enc: EncoderParams, parts, sigma_pi2: float, policy_rng) -> TxRecord:
    fwd = tx.transmitter_forward(enc, parts)
    sym = tx.sample_policy(fwd.x_bar, sigma_pi2, policy_rng)
    return TxRecord(fwd, sym.x, sym.eps_pi, sigma_pi2)


def receive_batch(dec: DecoderParams, labels, y) -> tuple[np.ndarray, np.ndarray, rx.DecodeCache]:
    probs, cache = rx.decode_cached(dec, y)
    return probs, rx.reward(probs, labels), cache


def draw_batch(
    enc: EncoderParams,
    dec: DecoderParams,
    joint: JointBatch,
    sigma_pi2: float,
    channel_config: ch.ChannelConfig,
    policy_rng: np.random.Generator | None,
    channel_rng: np.random.Generator,
) -> SampleBatch:
    """Run the full chain z -> s -> x_bar -> x -> y -> q once, recording all noise."""
    rec = transmit_batch(enc, joint.parts, sigma_pi2, policy_rng)
    y, noise = ch.transmit(rec.x, channel_config, channel_rng)
    probs, rewards, cache = receive_batch(dec, joint.labels, y)
    return SampleBatch(np.asarray(joint.labels), rec, y, noise, probs, rewards, cache)


def _scaled_upstream(upstream: np.ndarray, per_sample: bool) -> np.ndarray:
    return upstream if per_sample else upstream / upstream.shape[0]


def grad_decoder(dec: DecoderParams, batch: SampleBatch, per_sample: bool = False) -> GradEstimate:
    """Gradient of the Monte Carlo cross-entropy with respect to ``psi``."""
    g_probs = _scaled_upstream(rx.reward_upstream(batch.probs, batch.labels), per_sample)
    g_psi, _ = rx.decode_backward(dec, batch.decode_cache, g_probs, per_sample=per_sample)
    return _estimate(g_psi, per_sample, "decoder_supervised")


def grad_reparam(enc: EncoderParams, dec: DecoderParams, batch: SampleBatch, per_sample: bool = False) -> GradEstimate:
    """Pathwise gradient with respect to ``theta`` through
    ``y = sqrt(1 - s2) x_bar + sqrt(s2) eps_pi + sqrt(var) eps``."""
    rec = batch.tx
    if batch.noise is None or (rec.sigma_pi2 > 0 and rec.eps_pi is None):
        raise ConfigurationError("reparametrisation needs the recorded policy and channel noise")
    g_probs = _scaled_upstream(rx.reward_upstream(batch.probs, batch.labels), per_sample)
    _, g_y = rx.decode_backward(dec, batch.decode_cache, g_probs)
    g_xbar = np.sqrt(1.0 - rec.sigma_pi2) * g_y
    return _estimate(tx.transmitter_backward(enc, rec.fwd, g_xbar, per_sample), per_sample, "reparam")


def grad_reinforce_channel(enc: EncoderParams, batch: SampleBatch, per_sample: bool = False,
                           audit=None) -> GradEstimate:
    """Score-function gradient through the channel density (deterministic policy only)."""
    rec = batch.tx
    if rec.sigma_pi2 != 0.0:
        raise ConfigurationError("channel REINFORCE needs a deterministic policy; do not mix estimators")
    if batch.noise is None:
        raise ConfigurationError("channel REINFORCE needs the recorded noise variance")
    if audit is not None:
        audit.record("tx", "channel_density")
    score = ch.log_channel_grad(rec.fwd.x_bar, batch.y, batch.noise.noise_variance)
    upstream = -batch.rewards[:, None, None] * score
    g = tx.transmitter_backward(enc, rec.fwd, _scaled_upstream(upstream, per_sample), per_sample)
    return _estimate(g, per_sample, "reinforce_channel")


def _surrogate_terms(enc: EncoderParams, rec: TxRecord, theta=None):
    if rec.sigma_pi2 <= 0.0:
        raise ConfigurationError("stochastic policy gradient needs sigma_pi2 > 0", "sigma_pi2")
    if theta is None:
        return rec.fwd
    return tx.transmitter_forward(enc.with_theta(np.asarray(theta, dtype=np.float64)), rec.fwd.parts)


def surrogate_objective(enc: EncoderParams, rec: TxRecord, rewards, theta=None) -> float:
    """``-(1/N) sum_n ln p_theta(x_n | s_n) * r_n`` with actions and rewards held fixed."""
    fwd = _surrogate_terms(enc, rec, theta)
    log_p = tx.log_policy_density(fwd.x_bar, rec.x, rec.sigma_pi2).sum(axis=1)
    return float(-np.mean(log_p * np.asarray(rewards, dtype=np.float64)))


def surrogate_gradient(enc: EncoderParams, rec: TxRecord, rewards, per_sample: bool = False) -> np.ndarray:
    """Reverse-mode gradient of :func:`surrogate_objective` at ``enc.theta``."""
    fwd = _surrogate_terms(enc, rec)
    r = np.asarray(rewards, dtype=np.float64)
    score = tx.log_policy_grad(fwd.x_bar, rec.x, rec.sigma_pi2)
    upstream = _scaled_upstream(-r[:, None, None] * score, per_sample)
    return tx.transmitter_backward(enc, fwd, upstream, per_sample)


def grad_spg(enc: EncoderParams, rec: TxRecord, rewards, per_sample: bool = False) -> GradEstimate:
    """Stochastic policy gradient from transmitter-side data and opaque scalar rewards."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != (rec.x.shape[0],):
        raise ConfigurationError(f"{rewards.size} rewards for {rec.x.shape[0]} transmissions")
    return _estimate(surrogate_gradient(enc, rec, rewards, per_sample), per_sample, "spg")


def entropy(prior) -> float:
    p = np.asarray(prior, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


class MilboEstimate(NamedTuple):
    raw: float  # E[ln q(z|y)]
    bound: float | None  # raw + H[z] when the prior is known


def milbo_estimate(rewards, prior=None, weights=None) -> MilboEstimate:
    """Average log-posterior at the truth; with ``weights`` an exact expectation."""
    r = np.asarray(rewards, dtype=np.float64).ravel()
    if weights is None:
        raw = float(np.mean(r))
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()
        raw = float(np.sum(w * r) / np.sum(w))
    return MilboEstimate(raw, None if prior is None else raw + entropy(prior))


@dataclass
class EnumeratedSystem:
    """Binary source ``s = z`` sent as a scalar level, AWGN, output quantised into bins.

    Bin edges span ``[min(level) - 4 sigma, max(level) + 4 sigma]`` in ``n_bins``
    equal cells; the two outer cells also absorb the Gaussian tails, so the
    joint pmf over ``(z, bin)`` is exact.
    """

    levels: np.ndarray  # (2,) transmit value per class
    noise_std: float
    prior: np.ndarray = None
    n_bins: int = 41

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        if self.prior is None:
            self.prior = np.array([0.5, 0.5])
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.noise_std <= 0:
            raise ConfigurationError("noise_std must be positive", "noise_std")

    @property
    def edges(self) -> np.ndarray:
        lo = self.levels.min() - 4 * self.noise_std
        hi = self.levels.max() + 4 * self.noise_std
        return np.linspace(lo, hi, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    def likelihood(self) -> np.ndarray:
        """``p(bin | z)`` as a ``(2, n_bins)`` matrix."""
        cdf = ndtr((self.edges[None, :] - self.levels[:, None]) / self.noise_std)
        cdf[:, 0], cdf[:, -1] = 0.0, 1.0
        return np.diff(cdf, axis=1)

    def joint(self) -> np.ndarray:
        return self.prior[:, None] * self.likelihood()

    def posterior(self) -> np.ndarray:
        """``p(z | bin)`` as ``(n_bins, 2)``."""
        j = self.joint()
        return (j / j.sum(axis=0, keepdims=True)).T

    def mutual_information(self) -> float:
        j = self.joint()
        pb = j.sum(axis=0, keepdims=True)
        pz = self.prior[:, None]
        mask = j > 0
        return float(np.sum(j[mask] * np.log(j[mask] / (pz * pb)[mask])))

    def milbo(self, q: np.ndarray) -> MilboEstimate:
        """Exact MILBO of a decoder table ``q[bin, z]``."""
        q = np.asarray(q, dtype=np.float64)
        log_q = np.log(np.maximum(q.T, rx.REWARD_CLAMP))  # (2, n_bins)
        return milbo_estimate(log_q, prior=self.prior, weights=self.joint())

    def decoder_table(self, dec: DecoderParams) -> np.ndarray:
        """Evaluate a one-agent, scalar-input decoder at every bin centre."""
        return rx.decode(dec, self.centers[:, None, None])
