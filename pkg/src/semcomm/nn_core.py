"""Dense networks over flat float64 parameter vectors.

Each layer stores an augmented weight matrix of shape ``(in + 1, out)``
whose last row is the bias; inputs get a constant 1 column appended.
All layers of one network live contiguously in a single 1-D array so
gradients, optimiser moments and per-sample gradient matrices share one
layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, TrainingError

ACTIVATIONS = ("relu", "linear", "softmax")


class LayerDesc(NamedTuple):
    in_width: int
    out_width: int
    activation: str
    offset: int

    @property
    def size(self) -> int:
        return (self.in_width + 1) * self.out_width


@dataclass(frozen=True)
class MlpSpec:
    """Widths include the input: ``(in, h1, ..., out)``, one activation per layer."""

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        acts = tuple(self.activations)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", acts)
        if len(widths) < 2:
            raise ConfigurationError("an MLP needs at least one layer", "layer_widths")
        if any(w < 1 for w in widths):
            raise ConfigurationError(f"widths must be positive, got {widths}", "layer_widths")
        if len(acts) != len(widths) - 1:
            raise ConfigurationError(
                f"{len(widths) - 1} layers but {len(acts)} activations", "activations"
            )
        for i, a in enumerate(acts):
            if a not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {a!r}", "activations")
            if a == "softmax" and i != len(acts) - 1:
                raise ConfigurationError("softmax is only allowed on the final layer", "activations")

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def layers(self) -> list[LayerDesc]:
        out, offset = [], 0
        for (i, o), a in zip(zip(self.layer_widths[:-1], self.layer_widths[1:]), self.activations):
            out.append(LayerDesc(i, o, a, offset))
            offset += (i + 1) * o
        return out

    @property
    def n_params(self) -> int:
        return sum(layer.size for layer in self.layers)

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activations": list(self.activations)}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), tuple(d["activations"]))


class MlpGrad(NamedTuple):
    params: np.ndarray  # (P,) or (N, P) when per-sample
    input: np.ndarray  # (N, in)


class ForwardCache(NamedTuple):
    inputs: list  # augmented layer inputs, each (N, in + 1)
    outputs: list  # post-activation outputs, each (N, out)


def weights(params: np.ndarray, layer: LayerDesc) -> np.ndarray:
    """View of one layer's augmented weight matrix."""
    return params[layer.offset : layer.offset + layer.size].reshape(layer.in_width + 1, layer.out_width)


def init_params(spec: MlpSpec, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """He-normal weights and zero biases."""
    params = np.zeros(spec.n_params)
    for layer in spec.layers:
        w = weights(params, layer)
        std = gain * np.sqrt(2.0 / layer.in_width)
        w[:-1] = rng.standard_normal((layer.in_width, layer.out_width)) * std
    return params


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check(params: np.ndarray, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ConfigurationError(f"input shape {x.shape} does not match MLP input width {spec.in_width}")
    if params.shape != (spec.n_params,):
        raise ConfigurationError(f"parameter vector shape {params.shape}, expected ({spec.n_params},)")
    return x


def _augment(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)


def forward_cached(params: np.ndarray, spec: MlpSpec, x) -> tuple[np.ndarray, ForwardCache]:
    a = _check(params, spec, x)
    inputs, outputs = [], []
    for layer in spec.layers:
        a_aug = _augment(a)
        z = a_aug @ weights(params, layer)
        if layer.activation == "relu":
            a = np.maximum(z, 0.0)
        elif layer.activation == "softmax":
            a = softmax(z)
        else:
            a = z
        inputs.append(a_aug)
        outputs.append(a)
    return a, ForwardCache(inputs, outputs)


def forward(params: np.ndarray, spec: MlpSpec, x) -> np.ndarray:
    return forward_cached(params, spec, x)[0]


def backward(
    params: np.ndarray,
    spec: MlpSpec,
    x,
    upstream,
    cache: ForwardCache | None = None,
    per_sample: bool = False,
) -> MlpGrad:
    """Reverse-mode derivative of ``sum(upstream * forward(x))``.

    With ``per_sample`` the parameter gradient is returned as an ``(N, P)``
    matrix of row contributions whose column sum is the full gradient.
    ReLU uses subgradient 0 at 0.
    """
    x = _check(params, spec, x)
    if cache is None:
        _, cache = forward_cached(params, spec, x)
    g = np.asarray(upstream, dtype=np.float64)
    n = x.shape[0]
    if g.shape != (n, spec.out_width):
        raise ConfigurationError(f"upstream shape {g.shape}, expected {(n, spec.out_width)}")
    blocks = [None] * len(spec.layers)
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        out = cache.outputs[idx]
        if layer.activation == "relu":
            delta = g * (out > 0.0)
        elif layer.activation == "softmax":
            delta = out * (g - np.sum(g * out, axis=1, keepdims=True))
        else:
            delta = g
        a_aug = cache.inputs[idx]
        if per_sample:
            blocks[idx] = np.einsum("ni,no->nio", a_aug, delta).reshape(n, -1)
        else:
            blocks[idx] = (a_aug.T @ delta).ravel()
        g = delta @ weights(params, layer)[:-1].T
    axis = 1 if per_sample else 0
    return MlpGrad(np.concatenate(blocks, axis=axis), g)


@dataclass
class AdamState:
    """Moments and hyper-parameters; ``weight_decay`` is an L2 term added to the gradient."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive", "learning_rate")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must lie in [0, 1)", "beta1/beta2")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive", "epsilon")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative", "weight_decay")

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **hyper)

    def copy(self) -> "AdamState":
        return AdamState(
            self.first_moment.copy(),
            self.second_moment.copy(),
            self.step_count,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.weight_decay,
        )


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One Adam update. Moments in ``state`` are updated in place; new params are returned."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.first_moment.shape != params.shape:
        raise ConfigurationError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise TrainingError(
            f"non-finite gradient in {bad.size} of {grad.size} entries (first index {bad[0]}, "
            f"value {grad[bad[0]]}) at Adam step {state.step_count + 1}"
        )
    if state.weight_decay:
        grad = grad + state.weight_decay * params
    state.step_count += 1
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1**state.step_count)
    v_hat = state.second_moment / (1.0 - state.beta2**state.step_count)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon), state


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_spec(rng: np.random.Generator, max_layers: int = 4, max_width: int = 8, softmax_head: bool | None = None) -> MlpSpec:
    """A random architecture for gradient checks."""
    n_layers = int(rng.integers(1, max_layers + 1))
    widths = tuple(int(w) for w in rng.integers(1, max_width + 1, size=n_layers + 1))
    acts = [str(rng.choice(["relu", "linear"])) for _ in range(n_layers)]
    if softmax_head is None:
        softmax_head = bool(rng.integers(2))
    if softmax_head and widths[-1] > 1:
        acts[-1] = "softmax"
    return MlpSpec(widths, tuple(acts))


def finite_difference(fn, params: np.ndarray, coords: Sequence[int], h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at the given coordinates."""
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        p = params.copy()
        p[c] += h
        f_plus = fn(p)
        p[c] -= 2 * h
        f_minus = fn(p)
        out[k] = (f_plus - f_minus) / (2 * h)
    return out
