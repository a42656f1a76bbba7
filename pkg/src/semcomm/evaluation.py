"""Error-rate sweeps, convergence comparisons, gradient variance probes and oracle baselines.

All results write to CSV with a header row; plotting is left to other tools.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import channel as ch
from . import gradients as gr
from . import receiver as rx
from . import semantics
from .errors import ConfigurationError
from .receiver import DecoderParams
from .semantics import Dataset, GmSourceSpec, JointBatch
from .transmitter import EncoderParams

DEFAULT_SNR_GRID = (-4.0, -2.0, 0.0, 2.0, 4.0, 6.0)
EVAL_CHUNK = 20000


def draw_eval(source, n: int, rng: np.random.Generator) -> JointBatch:
    """Fresh samples from a GM source, or a random subset of a finite dataset."""
    if isinstance(source, GmSourceSpec):
        return semantics.sample_joint(source, n, rng)
    if isinstance(source, Dataset):
        idx = rng.permutation(len(source))[:n] if n <= len(source) else rng.integers(0, len(source), n)
        return source.batch(np.sort(idx))
    raise ConfigurationError(f"cannot draw evaluation samples from {type(source).__name__}", "source")


class SweepRow(NamedTuple):
    snr_db: float
    error_rate: float
    ce_loss: float
    n_eval_samples: int


@dataclass
class SnrSweepResult:
    rows: list

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("snr_db,error_rate,ce_loss,n_eval_samples\n")
            for r in self.rows:
                f.write(f"{r.snr_db!r},{r.error_rate!r},{r.ce_loss!r},{r.n_eval_samples}\n")

    def at(self, snr_db: float) -> SweepRow:
        for r in self.rows:
            if r.snr_db == snr_db:
                return r
        raise KeyError(snr_db)


def evaluate_point(enc: EncoderParams, dec: DecoderParams, source, snr_db: float, n_eval: int,
                   rng: np.random.Generator) -> SweepRow:
    """Error rate and mean cross-entropy at one SNR with the deterministic policy."""
    if n_eval < 1:
        raise ConfigurationError("n_eval must be at least 1", "eval.n_eval")
    cfg = ch.ChannelConfig.fixed(snr_db)
    errors, ce, done = 0, 0.0, 0
    while done < n_eval:
        m = min(EVAL_CHUNK, n_eval - done)
        joint = draw_eval(source, m, rng)
        batch = gr.draw_batch(enc, dec, joint, 0.0, cfg, None, rng)
        errors += int(np.sum(rx.classify(batch.probs) != joint.labels))
        ce -= float(batch.rewards.sum())
        done += m
    return SweepRow(float(snr_db), errors / n_eval, ce / n_eval, n_eval)


def sweep_snr(state, source, snr_list_db: Sequence[float] = DEFAULT_SNR_GRID, n_eval: int = 10_000,
              rng: np.random.Generator | None = None) -> SnrSweepResult:
    """Error rate and CE at each SNR on ``n_eval`` fresh samples; rows sorted by SNR."""
    if n_eval < 1:
        raise ConfigurationError("n_eval must be at least 1", "eval.n_eval")
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = [evaluate_point(state.enc, state.dec, source, float(s), n_eval, rng) for s in sorted(snr_list_db)]
    return SnrSweepResult(rows)


def bayes_oracle(spec: GmSourceSpec, n: int, rng: np.random.Generator) -> dict:
    """Monte Carlo error and CE of the exact posterior ``p(z | s)``.

    No receiver sees more than ``s``, so these lower-bound every trained system.
    """
    joint = semantics.sample_joint(spec, n, rng)
    if spec.class_std == 0:
        post = semantics.one_hot(joint.labels, spec.n_class)
    else:
        post = semantics.gm_true_posterior(spec, joint.full, spec.class_std**2)
    r = rx.reward(post, joint.labels)
    return {
        "error_rate": float(np.mean(rx.classify(post) != joint.labels)),
        "ce_loss": float(-r.mean()),
        "ce_se": float(r.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        "n_samples": n,
    }


@dataclass
class ConvergenceTrace:
    """Per-epoch CE of ``R`` runs on a shared epoch grid."""

    epochs: np.ndarray  # (E,)
    losses: np.ndarray  # (R, E)
    label: str = ""

    @classmethod
    def from_traces(cls, traces: Sequence[Sequence[tuple]], label: str = "") -> "ConvergenceTrace":
        length = min(len(t) for t in traces)
        epochs = np.array([e for e, _, _ in traces[0][:length]], dtype=np.float64)
        for t in traces[1:]:
            if not np.array_equal(epochs, [e for e, _, _ in t[:length]]):
                raise ConfigurationError("runs disagree on the epoch grid")
        losses = np.array([[c for _, _, c in t[:length]] for t in traces], dtype=np.float64)
        return cls(epochs, losses, label)

    @property
    def mean(self) -> np.ndarray:
        return self.losses.mean(axis=0)

    @property
    def min(self) -> np.ndarray:
        return self.losses.min(axis=0)

    @property
    def max(self) -> np.ndarray:
        return self.losses.max(axis=0)

    def first_crossing(self, threshold: float) -> float | None:
        """First epoch at which the mean CE is at or below ``threshold``."""
        hit = np.flatnonzero(self.mean <= threshold)
        return float(self.epochs[hit[0]]) if hit.size else None

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("epoch,run,ce_loss\n")
            for r, row in enumerate(self.losses):
                for e, c in zip(self.epochs, row):
                    f.write(f"{float(e)!r},{r},{float(c)!r}\n")


class ConvergenceComparison(NamedTuple):
    a: ConvergenceTrace
    b: ConvergenceTrace
    threshold: float
    epoch_a: float | None
    epoch_b: float | None
    ratio: float | None  # epochs of b over epochs of a
    lower_bound: bool  # b never crossed: ratio uses its last epoch


def compare_traces(a: ConvergenceTrace, b: ConvergenceTrace, threshold: float) -> ConvergenceComparison:
    ea, eb = a.first_crossing(threshold), b.first_crossing(threshold)
    if ea is None:
        return ConvergenceComparison(a, b, threshold, None, eb, None, False)
    if eb is None:
        return ConvergenceComparison(a, b, threshold, ea, None, float(b.epochs[-1]) / ea, True)
    return ConvergenceComparison(a, b, threshold, ea, eb, eb / ea, False)


def convergence_compare(run_a: Callable[[int], list], run_b: Callable[[int], list], runs: int,
                        threshold: float) -> ConvergenceComparison:
    """Run both trainers ``runs`` times (run index as seed offset) and compare mean traces."""
    if runs < 1:
        raise ConfigurationError("runs must be at least 1", "runs")
    a = ConvergenceTrace.from_traces([run_a(r) for r in range(runs)], "a")
    b = ConvergenceTrace.from_traces([run_b(r) for r in range(runs)], "b")
    return compare_traces(a, b, threshold)


class Moments(NamedTuple):
    mean: np.ndarray
    variance: np.ndarray  # per coordinate, ddof=1
    n: int

    @property
    def standard_error(self) -> np.ndarray:
        return np.sqrt(self.variance / max(self.n, 1))


def _combine(acc, rows):
    """Chan et al. pairwise merge of (n, mean, M2) with a block of rows."""
    m = rows.shape[0]
    mean_b = rows.mean(axis=0)
    m2_b = ((rows - mean_b) ** 2).sum(axis=0)
    if acc is None:
        return m, mean_b, m2_b
    n, mean_a, m2_a = acc
    tot = n + m
    delta = mean_b - mean_a
    return tot, mean_a + delta * (m / tot), m2_a + m2_b + delta**2 * (n * m / tot)


def _estimate_rows(kind, enc, dec, joint, sigma_pi2, channel, rng):
    batch = gr.draw_batch(enc, dec, joint, sigma_pi2, channel, rng, rng)
    if kind == "spg":
        return gr.grad_spg(enc, batch.tx, batch.rewards, per_sample=True).per_sample
    if kind == "reparam":
        return gr.grad_reparam(enc, dec, batch, per_sample=True).per_sample
    if kind == "reinforce_channel":
        return gr.grad_reinforce_channel(enc, batch, per_sample=True).per_sample
    if kind == "decoder_supervised":
        return gr.grad_decoder(dec, batch, per_sample=True).per_sample
    raise ConfigurationError(f"unknown estimator {kind!r}", "estimator")


def estimator_moments(kind: str, enc: EncoderParams, dec: DecoderParams, source: GmSourceSpec,
                      sigma_pi2: float, channel: ch.ChannelConfig, n_samples: int,
                      rng: np.random.Generator, chunk: int = 50_000) -> Moments:
    """Mean and per-coordinate variance of per-sample gradient terms, streamed in chunks."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be at least 1", "n_samples")
    acc, done = None, 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        rows = _estimate_rows(kind, enc, dec, semantics.sample_joint(source, m, rng), sigma_pi2, channel, rng)
        acc = _combine(acc, rows)
        done += m
    n, mean, m2 = acc
    var = m2 / (n - 1) if n > 1 else np.zeros_like(mean)
    return Moments(mean, var, n)


class VarianceRow(NamedTuple):
    estimator: str
    sigma_pi2: float
    grad_var_trace: float
    n_samples: int
    degenerate: bool  # fewer than two samples: variance undefined, reported as 0


@dataclass
class VarianceProbeResult:
    rows: list

    def trace(self, estimator: str, sigma_pi2: float) -> float:
        for r in self.rows:
            if r.estimator == estimator and r.sigma_pi2 == sigma_pi2:
                return r.grad_var_trace
        raise KeyError((estimator, sigma_pi2))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("estimator,sigma_pi2,grad_var_trace,n_samples\n")
            for r in self.rows:
                f.write(f"{r.estimator},{r.sigma_pi2!r},{r.grad_var_trace!r},{r.n_samples}\n")


def variance_probe(enc: EncoderParams, dec: DecoderParams, source: GmSourceSpec, estimators: Sequence[str],
                   sigmas: Sequence[float], n_samples: int, channel: ch.ChannelConfig,
                   rng: np.random.Generator) -> VarianceProbeResult:
    """Trace of the per-sample gradient covariance for every (estimator, sigma) pair.

    ``reinforce_channel`` needs a deterministic policy and is probed at sigma 0
    only, whatever ``sigmas`` holds.
    """
    rows = []
    for kind in estimators:
        for s in ([0.0] if kind == "reinforce_channel" else sigmas):
            mom = estimator_moments(kind, enc, dec, source, float(s), channel, n_samples, rng)
            rows.append(VarianceRow(kind, float(s), float(mom.variance.sum()), mom.n, mom.n < 2))
    return VarianceProbeResult(rows)
