"""Real-valued AWGN channel with optional per-sample SNR randomisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError


def snr_to_noise_variance(snr_db):
    """Noise variance for unit signal power: ``10 ** (-snr_db / 10)``."""
    return 10.0 ** (-np.asarray(snr_db, dtype=np.float64) / 10.0)


@dataclass
class ChannelConfig:
    """``snr_mode`` is ``fixed`` (uses ``snr_db``) or ``uniform`` over ``[lo_db, hi_db]``."""

    snr_mode: str = "uniform"
    snr_db: float = 6.0
    lo_db: float = -4.0
    hi_db: float = 6.0

    def __post_init__(self):
        if self.snr_mode not in ("fixed", "uniform"):
            raise ConfigurationError(f"unknown snr_mode {self.snr_mode!r}", "channel.snr_mode")
        if self.snr_mode == "uniform":
            if not (np.isfinite(self.lo_db) and np.isfinite(self.hi_db)):
                raise ConfigurationError("uniform SNR bounds must be finite", "channel.lo_db")
            if self.lo_db > self.hi_db:
                raise ConfigurationError("lo_db must not exceed hi_db", "channel.lo_db")
        elif np.isnan(self.snr_db):
            raise ConfigurationError("snr_db is NaN", "channel.snr_db")

    @classmethod
    def fixed(cls, snr_db: float) -> "ChannelConfig":
        return cls("fixed", snr_db=snr_db)

    @classmethod
    def noiseless(cls) -> "ChannelConfig":
        return cls("fixed", snr_db=float("inf"))

    def draw_snr_db(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.snr_mode == "fixed":
            return np.full(n, float(self.snr_db))
        return rng.uniform(self.lo_db, self.hi_db, size=n)

    def to_dict(self) -> dict:
        return {"snr_mode": self.snr_mode, "snr_db": self.snr_db, "lo_db": self.lo_db, "hi_db": self.hi_db}


class NoiseDraw(NamedTuple):
    eps: np.ndarray  # same shape as x
    noise_variance: np.ndarray  # (N,), one per batch element


def apply_noise(x, noise: NoiseDraw) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    std = np.sqrt(noise.noise_variance).reshape((-1,) + (1,) * (x.ndim - 1))
    return x + std * noise.eps


def transmit(x, config: ChannelConfig, rng: np.random.Generator) -> tuple[np.ndarray, NoiseDraw]:
    """``y = x + sqrt(var) * eps`` with one SNR draw per batch element (axis 0)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    var = snr_to_noise_variance(config.draw_snr_db(n, rng))
    noise = NoiseDraw(rng.standard_normal(x.shape), var)
    return apply_noise(x, noise), noise


def log_channel_density(x_bar, y, noise_variance) -> np.ndarray:
    x_bar, y = np.asarray(x_bar, dtype=np.float64), np.asarray(y, dtype=np.float64)
    var = np.asarray(noise_variance, dtype=np.float64).reshape((-1,) + (1,) * (y.ndim - 1))
    d = y - x_bar
    k = y[0].size
    axes = tuple(range(1, y.ndim))
    return -0.5 * np.sum(d * d / var, axis=axes) - 0.5 * k * np.log(2 * np.pi * var.reshape(-1))


def log_channel_grad(x_bar, y, noise_variance) -> np.ndarray:
    """Score ``(y - x_bar) / var`` of the AWGN density with respect to its input."""
    var = np.asarray(noise_variance, dtype=np.float64)
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise ConfigurationError("channel score needs a finite positive noise variance", "noise_variance")
    y = np.asarray(y, dtype=np.float64)
    var = var.reshape((-1,) + (1,) * (y.ndim - 1)) if var.ndim else var
    return (y - np.asarray(x_bar, dtype=np.float64)) / var
