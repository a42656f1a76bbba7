"""Semantic sources: hidden labels, observations and agent partitions."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, IngestionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def one_hot(labels, n_class: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_class))
    out[np.arange(labels.size), labels] = 1.0
    return out


class JointBatch(NamedTuple):
    labels: np.ndarray  # (N,) class indices
    full: np.ndarray  # (N, ...) raw observation
    parts: np.ndarray  # (N, n_agents, part_dim) flattened agent views

    def one_hot(self, n_class: int) -> np.ndarray:
        return one_hot(self.labels, n_class)


def split_contiguous(s: np.ndarray, n_agents: int) -> np.ndarray:
    """(N, D) -> (N, n_agents, D // n_agents) by equal contiguous blocks."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[1] % n_agents:
        raise ConfigurationError(f"obs_dim {s.shape[1]} not divisible by n_agents {n_agents}", "n_agents")
    return s.reshape(s.shape[0], n_agents, s.shape[1] // n_agents)


def hypercube_means(n_class: int, obs_dim: int) -> np.ndarray:
    """Class means on +-1 corners.

    For the default K=4, D=4 the corners are (b0, b0, b1, b1) over the two
    bits of the class index, so with a two-way contiguous split each agent
    sees one bit and recovering the label needs both agents.
    """
    if n_class > 2**obs_dim:
        raise ConfigurationError(f"{n_class} classes do not fit on a {obs_dim}-cube", "n_class")
    n_bits = max(1, int(np.ceil(np.log2(n_class))))
    means = np.empty((n_class, obs_dim))
    for k in range(n_class):
        bits = [(k >> (n_bits - 1 - b)) & 1 for b in range(n_bits)]
        if obs_dim % n_bits == 0:
            reps = obs_dim // n_bits
            code = np.repeat(bits, reps)
        else:
            code = np.array([(k >> (obs_dim - 1 - d)) & 1 for d in range(obs_dim)])
        means[k] = 1.0 - 2.0 * code
    return means


@dataclass
class GmSourceSpec:
    """Gaussian-mixture semantic channel ``s = mean[z] + std * n``."""

    n_class: int = 4
    obs_dim: int = 4
    n_agents: int = 2
    class_std: float = 0.5
    class_means: np.ndarray | None = None
    class_prior: np.ndarray | None = None

    def __post_init__(self):
        if self.n_class < 1 or self.obs_dim < 1 or self.n_agents < 1:
            raise ConfigurationError("n_class, obs_dim and n_agents must be positive")
        if self.obs_dim % self.n_agents:
            raise ConfigurationError(f"n_agents {self.n_agents} must divide obs_dim {self.obs_dim}", "n_agents")
        if self.class_std < 0:
            raise ConfigurationError("class_std must be non-negative", "class_std")
        if self.class_means is None:
            self.class_means = hypercube_means(self.n_class, self.obs_dim)
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        if self.class_means.shape != (self.n_class, self.obs_dim):
            raise ConfigurationError(
                f"class_means shape {self.class_means.shape}, expected {(self.n_class, self.obs_dim)}", "class_means"
            )
        if self.class_prior is None:
            self.class_prior = np.full(self.n_class, 1.0 / self.n_class)
        self.class_prior = np.asarray(self.class_prior, dtype=np.float64)
        if self.class_prior.shape != (self.n_class,) or np.any(self.class_prior < 0):
            raise ConfigurationError("class_prior must be a non-negative vector of length n_class", "class_prior")
        if abs(self.class_prior.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"class_prior sums to {self.class_prior.sum()!r}", "class_prior")

    @property
    def part_dim(self) -> int:
        return self.obs_dim // self.n_agents

    def to_dict(self) -> dict:
        return {
            "n_class": self.n_class,
            "obs_dim": self.obs_dim,
            "n_agents": self.n_agents,
            "class_std": self.class_std,
            "class_means": self.class_means.tolist(),
            "class_prior": self.class_prior.tolist(),
        }


def sample_joint(spec: GmSourceSpec, batch_size: int, rng: np.random.Generator) -> JointBatch:
    if batch_size < 1:
        raise ConfigurationError("batch_size must be at least 1", "batch_size")
    labels = rng.choice(spec.n_class, size=batch_size, p=spec.class_prior)
    s = spec.class_means[labels] + spec.class_std * rng.standard_normal((batch_size, spec.obs_dim))
    return JointBatch(labels, s, split_contiguous(s, spec.n_agents))


def gm_true_posterior(spec: GmSourceSpec, y_eff, effective_variance: float, scale: float = 1.0) -> np.ndarray:
    """Exact Bayes posterior for ``y_eff = scale * mean[z] + N(0, effective_variance I)``."""
    if effective_variance <= 0:
        raise ConfigurationError("effective_variance must be positive", "effective_variance")
    y = np.atleast_2d(np.asarray(y_eff, dtype=np.float64))
    d2 = ((y[:, None, :] - scale * spec.class_means[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(divide="ignore"):
        logits = np.log(spec.class_prior)[None, :] - d2 / (2.0 * effective_variance)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, n_dims: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IngestionError("file does not exist", path)
    with _open(path) as f:
        data = f.read()
    header = 4 + 4 * n_dims
    if len(data) < header:
        raise IngestionError(f"truncated header ({len(data)} bytes)", path)
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise IngestionError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}", path)
    dims = struct.unpack(f">{n_dims}I", data[4:header])
    expected = int(np.prod(dims))
    if len(data) - header != expected:
        raise IngestionError(f"payload has {len(data) - header} bytes, header implies {expected}", path)
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"{labels.shape[0]} labels for {images.shape[0]} images", labels_path)
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_idx` for uint8 data (used for fixtures and subsets)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def partition_quadrants(image) -> np.ndarray:
    """Square image (or batch of images) -> (..., 4, side/2 * side/2).

    Order: top-left, top-right, bottom-left, bottom-right; row-major inside.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ConfigurationError(f"need an image or a batch of images, got shape {img.shape}")
    single = img.ndim == 2
    if single:
        img = img[None]
    n, h, w = img.shape
    if h != w or h % 2:
        raise ConfigurationError(f"need a square image with even side, got {h}x{w}")
    r = h // 2
    parts = img.reshape(n, 2, r, 2, r).transpose(0, 1, 3, 2, 4).reshape(n, 4, r * r)
    return parts[0] if single else parts


def reassemble_quadrants(parts) -> np.ndarray:
    p = np.asarray(parts, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[None]
    n, _, m = p.shape
    r = int(round(np.sqrt(m)))
    img = p.reshape(n, 2, 2, r, r).transpose(0, 1, 3, 2, 4).reshape(n, 2 * r, 2 * r)
    return img[0] if single else img


@dataclass
class MnistQuadrantSpec:
    images_path: str
    labels_path: str
    subset_size: int | None = None
    n_agents: int = field(default=4, init=False)
    quadrant_dims: tuple = field(default=(14, 14), init=False)


class Dataset(NamedTuple):
    """A finite labelled set with precomputed agent views."""

    labels: np.ndarray  # (M,)
    parts: np.ndarray  # (M, n_agents, part_dim)
    n_class: int

    def __len__(self):
        return self.labels.shape[0]

    def batch(self, idx) -> JointBatch:
        parts = self.parts[idx]
        return JointBatch(self.labels[idx], parts.reshape(parts.shape[0], -1), parts)


def load_mnist_quadrants(spec: MnistQuadrantSpec, n_class: int = 10) -> Dataset:
    images, labels = load_idx(spec.images_path, spec.labels_path)
    if spec.subset_size is not None:
        images, labels = images[: spec.subset_size], labels[: spec.subset_size]
    return Dataset(labels, partition_quadrants(images), n_class)


def gm_dataset(spec: GmSourceSpec, size: int, rng: np.random.Generator) -> Dataset:
    b = sample_joint(spec, size, rng)
    return Dataset(b.labels, b.parts, spec.n_class)
