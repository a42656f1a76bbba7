"""Per-agent encoders, power normalisation and the Gaussian exploration policy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn_core
from .errors import ConfigurationError
from .nn_core import MlpSpec

NORM_FLOOR = 1e-12
NORM_MODES = ("dim", "batch")


@dataclass
class PolicyConfig:
    exploration_variance: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.exploration_variance < 1.0:
            raise ConfigurationError("exploration variance must lie in [0, 1)", "sigma_pi2")

    @property
    def deterministic(self) -> bool:
        return self.exploration_variance == 0.0


class TransmitSymbol(NamedTuple):
    x_bar: np.ndarray
    x: np.ndarray
    eps_pi: np.ndarray | None


@dataclass
class EncoderParams:
    """Encoders for all agents; ``theta`` is the concatenation of per-agent vectors."""

    spec: MlpSpec
    theta: np.ndarray
    n_agents: int
    norm_mode: str = "dim"

    def __post_init__(self):
        if self.spec.activations[-1] != "linear":
            raise ConfigurationError("encoder output layer must be linear", "encoder")
        if self.norm_mode not in NORM_MODES:
            raise ConfigurationError(f"norm_mode must be one of {NORM_MODES}", "norm_mode")
        if self.theta.shape != (self.n_agents * self.spec.n_params,):
            raise ConfigurationError(
                f"theta has {self.theta.size} entries, expected {self.n_agents} x {self.spec.n_params}"
            )

    @classmethod
    def init(cls, spec: MlpSpec, n_agents: int, rng: np.random.Generator, norm_mode: str = "dim"):
        theta = np.concatenate([nn_core.init_params(spec, rng) for _ in range(n_agents)])
        return cls(spec, theta, n_agents, norm_mode)

    @property
    def n_tx(self) -> int:
        return self.spec.out_width

    def agent_params(self, i: int) -> np.ndarray:
        p = self.spec.n_params
        return self.theta[i * p : (i + 1) * p]

    def with_theta(self, theta: np.ndarray) -> "EncoderParams":
        return EncoderParams(self.spec, theta, self.n_agents, self.norm_mode)


def encode(theta_i: np.ndarray, spec: MlpSpec, s_i) -> np.ndarray:
    return nn_core.forward(theta_i, spec, s_i)


def normalize_power(raw, norm_mode: str = "dim") -> np.ndarray:
    """Scale to unit average power per channel use.

    ``dim``: every vector gets squared norm ``n_tx``. ``batch``: one common
    scale so the batch mean of ``||x||^2 / n_tx`` is 1, using the batch itself.
    Zero norms are floored at 1e-12.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n_tx = raw.shape[-1]
    if norm_mode == "dim":
        norm = np.sqrt(np.sum(raw * raw, axis=-1, keepdims=True))
        return np.sqrt(n_tx) * raw / np.maximum(norm, NORM_FLOOR)
    if norm_mode == "batch":
        power = np.mean(np.sum(raw * raw, axis=-1)) / n_tx
        return raw / np.maximum(np.sqrt(power), NORM_FLOOR)
    raise ConfigurationError(f"unknown norm_mode {norm_mode!r}", "norm_mode")


def normalize_power_backward(raw, upstream, norm_mode: str = "dim") -> np.ndarray:
    """Vector-Jacobian product of :func:`normalize_power`."""
    raw = np.asarray(raw, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    n_tx = raw.shape[-1]
    if norm_mode == "dim":
        norm = np.sqrt(np.sum(raw * raw, axis=-1, keepdims=True))
        floored = norm <= NORM_FLOOR
        safe = np.maximum(norm, NORM_FLOOR)
        u = raw / safe
        proj = g - u * np.sum(u * g, axis=-1, keepdims=True)
        return np.sqrt(n_tx) * np.where(floored, g, proj) / safe
    if norm_mode == "batch":
        total = np.sum(raw * raw)
        count = raw.size // n_tx
        rms = np.sqrt(total / (count * n_tx))
        if rms <= NORM_FLOOR:
            return g / NORM_FLOOR
        c = 1.0 / rms
        return c * g - c * raw * np.sum(g * raw) / total
    raise ConfigurationError(f"unknown norm_mode {norm_mode!r}", "norm_mode")


def sample_policy(x_bar, sigma_pi2: float, rng: np.random.Generator | None) -> TransmitSymbol:
    """Gaussian policy ``x ~ N(sqrt(1 - s2) x_bar, s2 I)``; ``s2 = 0`` returns ``x_bar`` itself."""
    x_bar = np.asarray(x_bar, dtype=np.float64)
    if not 0.0 <= sigma_pi2 < 1.0:
        raise ConfigurationError("exploration variance must lie in [0, 1)", "sigma_pi2")
    if sigma_pi2 == 0.0:
        return TransmitSymbol(x_bar, x_bar, None)
    eps = rng.standard_normal(x_bar.shape)
    return TransmitSymbol(x_bar, policy_action(x_bar, eps, sigma_pi2), eps)


def policy_action(x_bar, eps_pi, sigma_pi2: float) -> np.ndarray:
    return np.sqrt(1.0 - sigma_pi2) * x_bar + np.sqrt(sigma_pi2) * eps_pi


def log_policy_density(x_bar, x, sigma_pi2: float) -> np.ndarray:
    """``ln N(x; sqrt(1 - s2) x_bar, s2 I)`` summed over the last axis."""
    if sigma_pi2 <= 0:
        raise ConfigurationError("deterministic policy has no density", "sigma_pi2")
    x_bar, x = np.asarray(x_bar, dtype=np.float64), np.asarray(x, dtype=np.float64)
    d = x - np.sqrt(1.0 - sigma_pi2) * x_bar
    n = x.shape[-1]
    return -0.5 * np.sum(d * d, axis=-1) / sigma_pi2 - 0.5 * n * np.log(2.0 * np.pi * sigma_pi2)


def log_policy_grad(x_bar, x, sigma_pi2: float) -> np.ndarray:
    """Score of the policy with respect to the mean input ``x_bar``."""
    if sigma_pi2 <= 0:
        raise ConfigurationError("deterministic policy has no score function", "sigma_pi2")
    a = np.sqrt(1.0 - sigma_pi2)
    return a * (np.asarray(x, dtype=np.float64) - a * np.asarray(x_bar, dtype=np.float64)) / sigma_pi2


class TxForward(NamedTuple):
    parts: np.ndarray  # (N, A, d)
    raw: np.ndarray  # (N, A, n_tx)
    x_bar: np.ndarray  # (N, A, n_tx)
    caches: list


def transmitter_forward(enc: EncoderParams, parts) -> TxForward:
    """Encode and normalise every agent's view; returns caches for backward."""
    parts = np.asarray(parts, dtype=np.float64)
    if parts.ndim != 3 or parts.shape[1] != enc.n_agents:
        raise ConfigurationError(f"expected (N, {enc.n_agents}, d) agent views, got {parts.shape}")
    raws, caches = [], []
    for i in range(enc.n_agents):
        out, cache = nn_core.forward_cached(enc.agent_params(i), enc.spec, parts[:, i, :])
        raws.append(out)
        caches.append(cache)
    raw = np.stack(raws, axis=1)
    if enc.norm_mode == "dim":
        x_bar = normalize_power(raw, "dim")
    else:
        x_bar = np.stack([normalize_power(raw[:, i], "batch") for i in range(enc.n_agents)], axis=1)
    return TxForward(parts, raw, x_bar, caches)


def transmitter_backward(enc: EncoderParams, fwd: TxForward, g_xbar, per_sample: bool = False) -> np.ndarray:
    """Chain an upstream gradient on ``x_bar`` to ``theta``.

    Returns ``(A * P,)`` or, per-sample, ``(N, A * P)`` row contributions.
    """
    g_xbar = np.asarray(g_xbar, dtype=np.float64)
    blocks = []
    for i in range(enc.n_agents):
        if enc.norm_mode == "dim":
            g_raw = normalize_power_backward(fwd.raw[:, i], g_xbar[:, i], "dim")
        else:
            g_raw = normalize_power_backward(fwd.raw[:, i], g_xbar[:, i], "batch")
        grad = nn_core.backward(
            enc.agent_params(i), enc.spec, fwd.parts[:, i], g_raw, cache=fwd.caches[i], per_sample=per_sample
        )
        blocks.append(grad.params)
    return np.concatenate(blocks, axis=1 if per_sample else 0)
