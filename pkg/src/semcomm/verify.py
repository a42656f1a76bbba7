"""Oracle suites behind ``semcomm verify``.

Each check yields a :class:`CheckResult` row ``(suite, check, statistic, threshold, passed)``.
"""

from __future__ import annotations

import time
from typing import Callable, NamedTuple

import numpy as np

from . import channel as ch
from . import evaluation as ev
from . import feedback_link as fl
from . import gradients as gr
from . import nn_core, semantics
from . import receiver as rx
from . import training as T
from . import transmitter as tx
from .nn_core import AdamState, MlpSpec
from .receiver import DecoderParams
from .transmitter import EncoderParams


class CheckResult(NamedTuple):
    suite: str
    check: str
    statistic: float
    threshold: float
    passed: bool

    def as_dict(self) -> dict:
        return {"suite": self.suite, "check": self.check, "statistic": float(self.statistic),
                "threshold": float(self.threshold), "pass": bool(self.passed)}


class TinySystem(NamedTuple):
    source: semantics.GmSourceSpec
    enc: EncoderParams
    dec: DecoderParams
    channel: ch.ChannelConfig


def tiny_system(seed: int = 0, warmup_steps: int = 300, batch_size: int = 100) -> TinySystem:
    """Frozen K=2, obs_dim=2, n_tx=2 system after a short model-aware warm-up.

    The encoder is a single linear layer so that per-sample gradient terms
    stay light-tailed; hidden ReLU units that fire rarely make the score
    estimators heavy-tailed enough to break normal-theory standard errors.
    """
    rng = np.random.default_rng(seed)
    source = semantics.GmSourceSpec(n_class=2, obs_dim=2, n_agents=1)
    enc = EncoderParams.init(MlpSpec((2, 2), ("linear",)), 1, rng)
    dec = DecoderParams.init(MlpSpec((2, 8), ("relu",)), MlpSpec((8, 2), ("softmax",)), 1, rng)
    channel = ch.ChannelConfig()
    enc_opt, dec_opt = AdamState.zeros(enc.theta.size), AdamState.zeros(dec.psi.size)
    for _ in range(warmup_steps):
        batch = gr.draw_batch(enc, dec, semantics.sample_joint(source, batch_size, rng), 0.0, channel, None, rng)
        g_theta = gr.grad_reparam(enc, dec, batch).mean_grad
        g_psi = gr.grad_decoder(dec, batch).mean_grad
        enc = enc.with_theta(nn_core.adam_step(enc.theta, g_theta, enc_opt)[0])
        dec = dec.with_psi(nn_core.adam_step(dec.psi, g_psi, dec_opt)[0])
    return TinySystem(source, enc, dec, channel)


def gradcheck(seed: int = 0, n_archs: int = 5, n_coords: int = 20, tol: float = 1e-4) -> list[CheckResult]:
    """Backward versus central differences on random networks and the full Tx/Rx chain."""
    rng = np.random.default_rng(seed)
    out = []
    for a in range(n_archs):
        spec = nn_core.random_spec(rng)
        while spec.n_params < n_coords:
            spec = nn_core.random_spec(rng)
        params = nn_core.init_params(spec, rng) + 0.1 * rng.standard_normal(spec.n_params)
        x = rng.standard_normal((7, spec.in_width))
        up = rng.standard_normal((7, spec.out_width))
        analytic = nn_core.backward(params, spec, x, up).params
        coords = rng.choice(spec.n_params, size=n_coords, replace=False)
        numeric = nn_core.finite_difference(lambda p: float(np.sum(up * nn_core.forward(p, spec, x))), params, coords)
        err = float(np.max(nn_core.relative_error(analytic[coords], numeric)))
        out.append(CheckResult("gradcheck", f"mlp_{a}_{'-'.join(map(str, spec.layer_widths))}", err, tol, err < tol))
    out.extend(_chain_gradcheck(rng, n_coords, tol))
    return out


def _generic(enc: EncoderParams, rng) -> EncoderParams:
    """Jitter all parameters, biases included.

    With zero initial biases an input that silences every hidden ReLU gives a
    raw output of exactly zero, where power normalisation is undefined.
    """
    return enc.with_theta(enc.theta + 0.1 * rng.standard_normal(enc.theta.size))


def _chain_gradcheck(rng, n_coords, tol):
    source = semantics.GmSourceSpec(n_agents=2)
    rows = []
    for mode in ("dim", "batch"):
        enc = _generic(EncoderParams.init(MlpSpec((2, 6, 3, 3), ("relu", "relu", "linear")), 2, rng, mode), rng)
        dec = DecoderParams.init(MlpSpec((3, 5), ("relu",)), MlpSpec((5, 4), ("softmax",)), 2, rng)
        joint = semantics.sample_joint(source, 9, rng)
        batch = gr.draw_batch(enc, dec, joint, 0.15, ch.ChannelConfig(), rng, rng)

        def loss_theta(theta):
            fwd = tx.transmitter_forward(enc.with_theta(theta), joint.parts)
            x = tx.policy_action(fwd.x_bar, batch.tx.eps_pi, 0.15)
            y = ch.apply_noise(x, batch.noise)
            return float(-np.mean(rx.reward(rx.decode(dec, y), joint.labels)))

        def loss_psi(psi):
            return float(-np.mean(rx.reward(rx.decode(dec.with_psi(psi), batch.y), joint.labels)))

        for name, fn, params, grad in (
            ("theta", loss_theta, enc.theta, gr.grad_reparam(enc, dec, batch).mean_grad),
            ("psi", loss_psi, dec.psi, gr.grad_decoder(dec, batch).mean_grad),
        ):
            coords = rng.choice(params.size, size=min(n_coords, params.size), replace=False)
            err = float(np.max(nn_core.relative_error(grad[coords], nn_core.finite_difference(fn, params, coords))))
            rows.append(CheckResult("gradcheck", f"chain_{mode}_{name}", err, tol, err < tol))
    return rows


def _max_z(a: ev.Moments, b: ev.Moments) -> float:
    se = np.sqrt(a.standard_error**2 + b.standard_error**2)
    return float(np.max(np.abs(a.mean - b.mean) / se))


def unbiasedness(seed: int = 0, n_samples: int = 200_000, sigma_pi2: float = 0.15, z_max: float = 3.0):
    """SPG and channel REINFORCE against the pathwise gradient on independent draws."""
    sys_ = tiny_system(seed)
    rng = np.random.default_rng([seed, 1])
    rows = []
    for kind, s2 in (("spg", sigma_pi2), ("reinforce_channel", 0.0)):
        a = ev.estimator_moments(kind, sys_.enc, sys_.dec, sys_.source, s2, sys_.channel, n_samples, rng)
        b = ev.estimator_moments("reparam", sys_.enc, sys_.dec, sys_.source, s2, sys_.channel, n_samples, rng)
        z = _max_z(a, b)
        rows.append(CheckResult("unbiasedness", f"{kind}_vs_reparam_sigma{s2}", z, z_max, z < z_max))
    return rows


def variance(seed: int = 0, n_samples: int = 10_000, sigmas=(0.0375, 0.075, 0.15)):
    """Covariance-trace ordering: pathwise below SPG, SPG falling as exploration grows."""
    sys_ = tiny_system(seed)
    rng = np.random.default_rng([seed, 2])
    probe = ev.variance_probe(sys_.enc, sys_.dec, sys_.source, ["spg"], sigmas, n_samples, sys_.channel, rng)
    rep = ev.variance_probe(sys_.enc, sys_.dec, sys_.source, ["reparam"], [max(sigmas)], n_samples,
                            sys_.channel, rng)
    spg_top, rep_top = probe.trace("spg", max(sigmas)), rep.trace("reparam", max(sigmas))
    rows = [CheckResult("variance", f"reparam_below_spg_sigma{max(sigmas)}", rep_top / spg_top, 1.0,
                        rep_top < spg_top)]
    traces = [probe.trace("spg", s) for s in sorted(sigmas)]
    for (s_lo, t_lo), (s_hi, t_hi) in zip(zip(sorted(sigmas), traces), zip(sorted(sigmas)[1:], traces[1:])):
        rows.append(CheckResult("variance", f"spg_decreasing_{s_lo}_to_{s_hi}", t_hi / t_lo, 1.0, t_hi < t_lo))
    return rows


def milbo(seed: int = 0, n_decoders: int = 100, tol: float = 1e-3):
    """Bound and tightness of E[ln q] + H[z] on the enumerated binary system."""
    rng = np.random.default_rng(seed)
    system = gr.EnumeratedSystem(np.array([-1.0, 1.0]), noise_std=0.7)
    mi = system.mutual_information()
    worst = -np.inf
    for _ in range(n_decoders):
        dec = DecoderParams.init(MlpSpec((1, 8), ("relu",)), MlpSpec((8, 2), ("softmax",)), 1, rng)
        dec = dec.with_psi(dec.psi * rng.uniform(0.2, 3.0))
        worst = max(worst, system.milbo(system.decoder_table(dec)).bound - mi)
    exact = abs(system.milbo(system.posterior()).bound - mi)
    return [
        CheckResult("milbo", f"bound_holds_{n_decoders}_decoders", worst, tol, worst <= tol),
        CheckResult("milbo", "exact_posterior_tight", exact, tol, exact <= tol),
    ]


def energy(seed: int = 0, n_samples: int = 100_000, sigmas=(0.0, 0.15, 0.5), tol: float = 0.01):
    """Mean transmit energy per agent equals ``n_tx`` for any exploration variance."""
    rng = np.random.default_rng(seed)
    source = semantics.GmSourceSpec(n_agents=2)
    parts = semantics.sample_joint(source, n_samples, rng).parts
    rows = []
    for mode in ("dim", "batch"):
        enc = _generic(EncoderParams.init(MlpSpec((2, 16, 4, 4), ("relu", "relu", "linear")), 2, rng, mode), rng)
        x_bar = tx.transmitter_forward(enc, parts).x_bar
        for s2 in sigmas:
            x = tx.sample_policy(x_bar, s2, rng).x
            rel = float(abs(np.mean(np.sum(x**2, axis=2)) / enc.n_tx - 1.0))
            rows.append(CheckResult("energy", f"mean_energy_{mode}_sigma{s2}", rel, tol, rel < tol))
    return rows


def _u64(rng) -> int:
    edge = rng.integers(0, 8)
    if edge == 0:
        return 0
    if edge == 1:
        return 2**64 - 1
    return int(rng.integers(0, 2**64, dtype=np.uint64))


def random_message(rng: np.random.Generator) -> fl.Message:
    """Random pilot or reward message, edge values included."""
    if rng.random() < 0.5:
        return fl.PilotBatchMsg(_u64(rng), int(rng.integers(0, 2**32)), _u64(rng))
    n = int(rng.integers(0, 8)) if rng.random() < 0.95 else int(rng.integers(8, 600))
    pick = rng.integers(0, 4, size=n)
    vals = np.select([pick == 0, pick == 1, pick == 2],
                     [-rng.exponential(5.0, n), 0.0, np.log(rx.REWARD_CLAMP)], -5e-324)
    return fl.RewardMsg(_u64(rng), tuple(float(v) for v in vals))


def _protocol_run(link):
    source = semantics.GmSourceSpec(n_agents=2)
    ds = semantics.gm_dataset(source, 1000, np.random.default_rng(3))
    arch = T.Architecture(2, 2, 4, n_tx=4, n_feat=8, n_rx=8)
    state = T.init_state(arch, {"data": 1, "init": 2, "policy": 3, "channel": 4}, "rl_spg")
    schedule = T.Schedule(n_epochs=4, rx_finetune_epochs=2, alternation_block=3, batch_size=100,
                          epoch_accounting="alternating_halved")
    return T.train_rl_spg(state, ds, schedule, ch.ChannelConfig(), 0.15, link=link), ds, arch, schedule


def protocol(seed: int = 0, n_messages: int = 100_000):
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(n_messages):
        msg = random_message(rng)
        if fl.decode_frame(fl.encode_frame(msg)) != msg:
            failures += 1
    rows = [CheckResult("protocol", f"round_trip_{n_messages}", failures, 0, failures == 0)]

    a, ds, arch, schedule = _protocol_run(fl.InProcessLink())
    with fl.StreamLink() as link:
        b, *_ = _protocol_run(link)
    same = (np.array_equal(a.enc.theta, b.enc.theta) and np.array_equal(a.dec.psi, b.dec.psi)
            and a.trace == b.trace)
    rows.append(CheckResult("protocol", "inprocess_equals_stream", float(not same), 0, same))

    audit = fl.AuditTrace()
    T.train_rl_spg(T.init_state(arch, {"data": 1, "init": 2, "policy": 3, "channel": 4}, "rl_spg"), ds,
                   schedule, ch.ChannelConfig(), 0.15, audit=audit)
    rl_ok = fl.barrier_audit(audit).passed
    rows.append(CheckResult("protocol", "barrier_audit_rl_passes", float(not rl_ok), 0, rl_ok))
    audit = fl.AuditTrace()
    T.train_model_aware(T.init_state(arch, {"data": 1, "init": 2, "policy": 3, "channel": 4}), ds,
                        T.Schedule(n_epochs=1, batch_size=100), ch.ChannelConfig(), audit=audit)
    ma_fails = not fl.barrier_audit(audit).passed
    rows.append(CheckResult("protocol", "barrier_audit_model_aware_fails", float(not ma_fails), 0, ma_fails))
    return rows


SUITES: dict[str, Callable[..., list]] = {
    "gradcheck": gradcheck,
    "unbiasedness": unbiasedness,
    "variance": variance,
    "milbo": milbo,
    "energy": energy,
    "protocol": protocol,
}


def run_suites(names, seed: int = 0) -> tuple[list[CheckResult], dict]:
    rows, timings = [], {}
    for name in names:
        t0 = time.perf_counter()
        rows.extend(SUITES[name](seed=seed))
        timings[name] = time.perf_counter() - t0
    return rows, timings
