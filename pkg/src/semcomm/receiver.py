"""Variational decoder: a weight-tied per-agent Rx network, mean pooling and a softmax head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn_core
from .errors import ConfigurationError
from .nn_core import MlpSpec

REWARD_CLAMP = 1e-30


@dataclass
class DecoderParams:
    """``psi`` holds the shared Rx parameters followed by the head parameters.

    ``rx_spec=None`` means no Rx module: agent signals are pooled directly.
    """

    rx_spec: MlpSpec | None
    head_spec: MlpSpec
    psi: np.ndarray
    n_agents: int

    def __post_init__(self):
        if self.head_spec.activations[-1] != "softmax":
            raise ConfigurationError("decoder head must end in softmax", "head")
        if self.rx_spec is not None and self.rx_spec.out_width != self.head_spec.in_width:
            raise ConfigurationError("shared Rx output width must match head input width", "n_rx")
        if self.psi.shape != (self.n_rx_params + self.head_spec.n_params,):
            raise ConfigurationError(f"psi has {self.psi.size} entries, layout needs "
                                     f"{self.n_rx_params + self.head_spec.n_params}")

    @classmethod
    def init(cls, rx_spec: MlpSpec | None, head_spec: MlpSpec, n_agents: int, rng: np.random.Generator):
        blocks = [] if rx_spec is None else [nn_core.init_params(rx_spec, rng)]
        head = nn_core.init_params(head_spec, rng)
        return cls(rx_spec, head_spec, np.concatenate(blocks + [head]), n_agents)

    @property
    def n_class(self) -> int:
        return self.head_spec.out_width

    @property
    def in_width(self) -> int:
        return (self.rx_spec or self.head_spec).in_width

    @property
    def n_rx_params(self) -> int:
        return 0 if self.rx_spec is None else self.rx_spec.n_params

    @property
    def rx_params(self) -> np.ndarray:
        return self.psi[: self.n_rx_params]

    @property
    def head_params(self) -> np.ndarray:
        return self.psi[self.n_rx_params :]

    def with_psi(self, psi: np.ndarray) -> "DecoderParams":
        return DecoderParams(self.rx_spec, self.head_spec, psi, self.n_agents)


class DecodeCache(NamedTuple):
    y: np.ndarray
    rx_cache: object
    pooled: np.ndarray
    head_cache: object


def decode_cached(dec: DecoderParams, y) -> tuple[np.ndarray, DecodeCache]:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[1] != dec.n_agents or y.shape[2] != dec.in_width:
        raise ConfigurationError(f"expected received signals (N, {dec.n_agents}, {dec.in_width}), got {y.shape}")
    n, a, w = y.shape
    if dec.rx_spec is None:
        h, rx_cache = y, None
    else:
        flat, rx_cache = nn_core.forward_cached(dec.rx_params, dec.rx_spec, y.reshape(n * a, w))
        h = flat.reshape(n, a, -1)
    # summing sorted values makes pooling bitwise invariant to agent order
    pooled = np.sort(h, axis=1).sum(axis=1) / a
    probs, head_cache = nn_core.forward_cached(dec.head_params, dec.head_spec, pooled)
    return probs, DecodeCache(y, rx_cache, pooled, head_cache)


def decode(dec: DecoderParams, y) -> np.ndarray:
    """Posterior ``q(z | y_1..y_A)`` for a batch ``y`` of shape ``(N, A, n_tx)``."""
    return decode_cached(dec, y)[0]


def decode_backward(dec: DecoderParams, cache: DecodeCache, g_probs, per_sample: bool = False):
    """Returns ``(g_psi, g_y)``; ``g_psi`` is ``(N, P)`` when ``per_sample``."""
    n, a, w = cache.y.shape
    head = nn_core.backward(dec.head_params, dec.head_spec, cache.pooled, g_probs,
                            cache=cache.head_cache, per_sample=per_sample)
    g_h = np.repeat(head.input[:, None, :] / a, a, axis=1)
    if dec.rx_spec is None:
        return head.params, g_h
    rx = nn_core.backward(dec.rx_params, dec.rx_spec, cache.y.reshape(n * a, w), g_h.reshape(n * a, -1),
                          cache=cache.rx_cache, per_sample=per_sample)
    g_y = rx.input.reshape(n, a, w)
    if per_sample:
        g_rx = rx.params.reshape(n, a, -1).sum(axis=1)
        return np.concatenate([g_rx, head.params], axis=1), g_y
    return np.concatenate([rx.params, head.params]), g_y


def reward(probs, labels) -> np.ndarray:
    """``ln q(z | y)`` at the true labels, with probabilities clamped at 1e-30."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    return np.log(np.maximum(probs[np.arange(labels.size), labels], REWARD_CLAMP))


def reward_upstream(probs, labels) -> np.ndarray:
    """Per-sample gradient of ``-reward`` with respect to ``probs`` (zero inside the clamp)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.arange(labels.size)
    p = probs[idx, labels]
    g = np.zeros_like(probs)
    g[idx, labels] = np.where(p >= REWARD_CLAMP, -1.0 / np.maximum(p, REWARD_CLAMP), 0.0)
    return g


def classify(probs) -> np.ndarray:
    """MAP class index; ties go to the lowest index."""
    return np.argmax(np.atleast_2d(probs), axis=1)
