"""Training regimes: model-aware joint, model-free alternating SPG, perfect links.

An epoch is one pass over the pilot set in batches of ``batch_size``. Under
``alternating_halved`` accounting every single-sided SGD step counts as half
an iteration, so one raw pass of alternating steps is reported as half an
epoch, matching the cost of one joint step per batch.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from . import gradients as gr
from . import nn_core
from .errors import BarrierViolation, CheckpointError, ConfigurationError, TrainingError
from .feedback_link import AuditTrace, InProcessLink, PilotBatchMsg, RewardMsg, barrier_audit
from .nn_core import AdamState, MlpSpec
from .receiver import DecoderParams
from .semantics import Dataset
from .transmitter import EncoderParams

REGIMES = ("model_aware", "rl_spg", "perfect_comm")
CHECKPOINT_MAGIC = b"SPGCKPT1"
CHECKPOINT_VERSION = 1
STREAMS = {"data": 0, "init": 1, "policy": 2, "channel": 3}


@dataclass
class Schedule:
    n_epochs: int = 200
    rx_finetune_epochs: int = 0
    alternation_block: int = 10
    batch_size: int = 500
    epoch_accounting: str = "joint"

    def __post_init__(self):
        if self.n_epochs < 1:
            raise ConfigurationError("must be positive", "schedule.n_epochs")
        if self.rx_finetune_epochs < 0:
            raise ConfigurationError("must be non-negative", "schedule.rx_finetune_epochs")
        if self.alternation_block < 1:
            raise ConfigurationError("must be positive", "schedule.alternation_block")
        if self.batch_size < 1:
            raise ConfigurationError("must be positive", "schedule.batch_size")
        if self.epoch_accounting not in ("joint", "alternating_halved"):
            raise ConfigurationError("must be 'joint' or 'alternating_halved'", "schedule.epoch_accounting")

    @property
    def epoch_weight(self) -> float:
        return 0.5 if self.epoch_accounting == "alternating_halved" else 1.0


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator per named stream, even when seeds coincide."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[stream]]))


class PilotSequence:
    """A-priori known training order shared by both ends.

    Global pilot index ``j`` maps to ``perm_e[j % L]`` with ``e = j // L`` and
    ``L`` the number of samples used per pass; ``perm_e`` is derived from the
    shared seed and ``e`` alone.
    """

    def __init__(self, size: int, seed: int, batch_size: int):
        if size < batch_size:
            raise ConfigurationError(f"pilot set of {size} is smaller than one batch of {batch_size}", "batch_size")
        self.size = size
        self.seed = int(seed)
        self.steps_per_epoch = size // batch_size
        self.period = self.steps_per_epoch * batch_size
        self._cache: dict[int, np.ndarray] = {}

    def _perm(self, e: int) -> np.ndarray:
        if e not in self._cache:
            if len(self._cache) > 4:
                self._cache.clear()
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, STREAMS["data"], e]))
            self._cache[e] = rng.permutation(self.size)
        return self._cache[e]

    def indices(self, offset: int, count: int) -> np.ndarray:
        j = np.arange(offset, offset + count)
        e, p = j // self.period, j % self.period
        out = np.empty(count, dtype=np.int64)
        for epoch in np.unique(e):
            mask = e == epoch
            out[mask] = self._perm(int(epoch))[p[mask]]
        return out


class TxPilotView:
    """Transmitter half of the pilot sequence: agent observations only."""

    def __init__(self, dataset: Dataset, seq: PilotSequence):
        self._parts = dataset.parts
        self._seq = seq

    def parts(self, offset: int, count: int) -> np.ndarray:
        return self._parts[self._seq.indices(offset, count)]


class RxPilotView:
    """Receiver half of the pilot sequence: labels only."""

    def __init__(self, dataset: Dataset, seq: PilotSequence):
        self._labels = dataset.labels
        self._seq = seq

    def labels(self, offset: int, count: int) -> np.ndarray:
        return self._labels[self._seq.indices(offset, count)]


@dataclass
class TrainerState:
    enc: EncoderParams
    dec: DecoderParams
    enc_opt: AdamState
    dec_opt: AdamState
    rngs: dict
    seeds: dict
    regime: str = "model_aware"
    epoch: float = 0.0
    raw_steps: int = 0
    pilot_offset: int = 0
    batch_id: int = 0
    trace: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


@dataclass
class Architecture:
    """Desk-scale networks: feature layer, Tx ReLU + Linear, shared Rx ReLU, softmax head."""

    n_agents: int
    part_dim: int
    n_class: int
    n_tx: int = 4
    n_feat: int = 16
    n_rx: int = 16
    norm_mode: str = "dim"
    perfect_comm: bool = False

    def __post_init__(self):
        for name in ("n_agents", "part_dim", "n_class", "n_tx", "n_feat", "n_rx"):
            if getattr(self, name) < 1:
                raise ConfigurationError("must be at least 1", name)

    @property
    def encoder_spec(self) -> MlpSpec:
        if self.perfect_comm:
            return MlpSpec((self.part_dim, self.n_feat, self.n_feat), ("relu", "linear"))
        return MlpSpec((self.part_dim, self.n_feat, self.n_tx, self.n_tx), ("relu", "relu", "linear"))

    @property
    def rx_spec(self) -> MlpSpec | None:
        return None if self.perfect_comm else MlpSpec((self.n_tx, self.n_rx), ("relu",))

    @property
    def head_spec(self) -> MlpSpec:
        width = self.n_feat if self.perfect_comm else self.n_rx
        return MlpSpec((width, self.n_class), ("softmax",))

    @property
    def channel_uses(self) -> int:
        return self.n_feat if self.perfect_comm else self.n_tx


def init_state(arch: Architecture, seeds: dict, regime: str = "model_aware", learning_rate: float = 1e-3,
               weight_decay: float = 1e-4) -> TrainerState:
    if regime not in REGIMES:
        raise ConfigurationError(f"unknown regime {regime!r}", "regime")
    seeds = {k: int(seeds[k]) for k in STREAMS}
    init = stream_rng(seeds["init"], "init")
    enc = EncoderParams.init(arch.encoder_spec, arch.n_agents, init, arch.norm_mode)
    dec = DecoderParams.init(arch.rx_spec, arch.head_spec, arch.n_agents, init)
    hyper = dict(learning_rate=learning_rate, weight_decay=weight_decay)
    return TrainerState(
        enc, dec, AdamState.zeros(enc.theta.size, **hyper), AdamState.zeros(dec.psi.size, **hyper),
        rngs={"policy": stream_rng(seeds["policy"], "policy"), "channel": stream_rng(seeds["channel"], "channel")},
        seeds=seeds, regime=regime,
    )


def _check_loss(state: TrainerState, ce: float) -> None:
    if not np.isfinite(ce):
        err = TrainingError(f"non-finite cross-entropy at raw step {state.raw_steps} (epoch {state.epoch})")
        err.trace = list(state.trace)
        raise err


def _adam(params, grad, opt, state):
    try:
        return nn_core.adam_step(params, grad, opt)[0]
    except TrainingError as exc:
        exc.trace = list(state.trace)
        raise


def train_model_aware(state: TrainerState, dataset: Dataset, schedule: Schedule, channel: ch.ChannelConfig,
                      audit: AuditTrace | None = None) -> TrainerState:
    """Joint Adam updates of encoders and decoder through the noise layer."""
    seq = PilotSequence(len(dataset), state.seeds["data"], schedule.batch_size)
    for _ in range(schedule.n_epochs):
        ces = []
        for _ in range(seq.steps_per_epoch):
            joint = dataset.batch(seq.indices(state.pilot_offset, schedule.batch_size))
            state.pilot_offset += schedule.batch_size
            batch = gr.draw_batch(state.enc, state.dec, joint, 0.0, channel, None, state.rngs["channel"])
            if audit is not None:
                audit.record("tx", "psi")
                audit.record("tx", "channel_model")
                audit.record("rx", "theta")
            g_theta = gr.grad_reparam(state.enc, state.dec, batch).mean_grad
            g_psi = gr.grad_decoder(state.dec, batch).mean_grad
            ce = float(-batch.rewards.mean())
            _check_loss(state, ce)
            state.enc = state.enc.with_theta(_adam(state.enc.theta, g_theta, state.enc_opt, state))
            state.dec = state.dec.with_psi(_adam(state.dec.psi, g_psi, state.dec_opt, state))
            state.raw_steps += 1
            ces.append(ce)
        state.epoch += schedule.epoch_weight
        state.trace.append((state.epoch, state.regime, float(np.mean(ces))))
    return state


def train_perfect_comm(state: TrainerState, dataset: Dataset, schedule: Schedule) -> TrainerState:
    """Normalised features straight into the head: no Tx/Rx modules, no noise."""
    if state.dec.rx_spec is not None:
        raise ConfigurationError("perfect-communication benchmark uses an architecture without Rx module", "regime")
    return train_model_aware(state, dataset, schedule, ch.ChannelConfig.noiseless())


class TransmitterAgent:
    """Holds theta, its optimiser and the policy stream; sees pilot observations and scalar rewards."""

    def __init__(self, state: TrainerState, pilots: TxPilotView, sigma_pi2: float, audit: AuditTrace):
        self.enc, self.opt, self.rng = state.enc, state.enc_opt, state.rngs["policy"]
        self.pilot_offset, self.batch_id = state.pilot_offset, state.batch_id
        self.pilots = pilots
        self.sigma_pi2 = sigma_pi2
        self.audit = audit
        self._pending = {}

    def announce(self, count: int) -> PilotBatchMsg:
        msg = PilotBatchMsg(self.batch_id, count, self.pilot_offset)
        self.batch_id += 1
        self.pilot_offset += count
        return msg

    def transmit(self, msg: PilotBatchMsg, explore: bool) -> np.ndarray:
        self.audit.record("tx", "pilot_s")
        self.audit.record("tx", "theta")
        parts = self.pilots.parts(msg.pilot_index_offset, msg.sample_count)
        rec = gr.transmit_batch(self.enc, parts, self.sigma_pi2 if explore else 0.0, self.rng)
        if explore:
            self._pending[msg.batch_id] = rec
        self.audit.record("tx", "x")
        return rec.x

    def learn(self, msg: RewardMsg) -> None:
        self.audit.record("tx", "reward")
        rec = self._pending.pop(msg.batch_id)
        grad = gr.grad_spg(self.enc, rec, msg.as_array()).mean_grad
        self.audit.record("tx", "theta")
        self.enc = self.enc.with_theta(nn_core.adam_step(self.enc.theta, grad, self.opt)[0])

    def write_back(self, state: TrainerState) -> None:
        state.enc, state.enc_opt = self.enc, self.opt
        state.pilot_offset, state.batch_id = self.pilot_offset, self.batch_id


class ReceiverAgent:
    """Holds psi and its optimiser; sees pilot labels and received signals."""

    def __init__(self, state: TrainerState, pilots: RxPilotView, audit: AuditTrace):
        self.dec, self.opt = state.dec, state.dec_opt
        self.pilots = pilots
        self.audit = audit

    def _decode(self, msg: PilotBatchMsg, y):
        self.audit.record("rx", "pilot_z")
        self.audit.record("rx", "y")
        self.audit.record("rx", "psi")
        labels = self.pilots.labels(msg.pilot_index_offset, msg.sample_count)
        probs, rewards, cache = gr.receive_batch(self.dec, labels, y)
        ce = float(-rewards.mean())
        if not np.isfinite(ce):
            raise TrainingError(f"non-finite cross-entropy on pilot batch {msg.batch_id}")
        return labels, probs, rewards, cache, ce

    def learn(self, msg: PilotBatchMsg, y) -> float:
        labels, probs, rewards, cache, ce = self._decode(msg, y)
        batch = gr.SampleBatch(labels, None, y, None, probs, rewards, cache)
        grad = gr.grad_decoder(self.dec, batch).mean_grad
        self.dec = self.dec.with_psi(nn_core.adam_step(self.dec.psi, grad, self.opt)[0])
        return ce

    def score(self, msg: PilotBatchMsg, y) -> tuple[RewardMsg, float]:
        _, _, rewards, _, ce = self._decode(msg, y)
        return RewardMsg(msg.batch_id, tuple(rewards.tolist())), ce

    def write_back(self, state: TrainerState) -> None:
        state.dec, state.dec_opt = self.dec, self.opt


def _decoder_step(txa, rxa, link, channel, rng, batch_size) -> float:
    msg = txa.announce(batch_size)
    link.send_to_rx(msg)
    y, _ = ch.transmit(txa.transmit(msg, explore=False), channel, rng)
    return rxa.learn(link.recv_at_rx(), y)


def _encoder_step(txa, rxa, link, channel, rng, batch_size) -> float:
    msg = txa.announce(batch_size)
    link.send_to_rx(msg)
    y, _ = ch.transmit(txa.transmit(msg, explore=True), channel, rng)
    reward_msg, ce = rxa.score(link.recv_at_rx(), y)
    link.send_to_tx(reward_msg)
    txa.learn(link.recv_at_tx())
    return ce


def _agents(state, dataset, schedule, sigma_pi2, audit):
    seq = PilotSequence(len(dataset), state.seeds["data"], schedule.batch_size)
    txa = TransmitterAgent(state, TxPilotView(dataset, seq), sigma_pi2, audit)
    rxa = ReceiverAgent(state, RxPilotView(dataset, seq), audit)
    return seq, txa, rxa


def _run_alternating(state, dataset, schedule, channel, sigma_pi2, link, audit, epochs, decoder_only):
    seq, txa, rxa = _agents(state, dataset, schedule, sigma_pi2, audit)
    rng = state.rngs["channel"]
    try:
        for _ in range(epochs):
            dec_ces, enc_ces = [], []
            for _ in range(seq.steps_per_epoch):
                if decoder_only or (state.raw_steps // schedule.alternation_block) % 2 == 0:
                    dec_ces.append(_decoder_step(txa, rxa, link, channel, rng, schedule.batch_size))
                else:
                    enc_ces.append(_encoder_step(txa, rxa, link, channel, rng, schedule.batch_size))
                state.raw_steps += 1
            state.epoch += schedule.epoch_weight
            state.trace.append((state.epoch, state.regime, float(np.mean(dec_ces or enc_ces))))
    except TrainingError as exc:
        exc.trace = list(state.trace)
        raise
    finally:
        txa.write_back(state)
        rxa.write_back(state)
    return state


def train_rl_spg(state: TrainerState, dataset: Dataset, schedule: Schedule, channel: ch.ChannelConfig,
                 sigma_pi2: float = 0.15, link=None, audit: AuditTrace | None = None) -> TrainerState:
    """Alternate ``alternation_block`` decoder steps (no sampler) with as many
    SPG encoder steps (sampler on, rewards over ``link``), then fine-tune the receiver.

    The recorded loss per raw epoch is the mean cross-entropy of its decoder
    steps, i.e. of deterministic transmissions, when it has any.
    """
    if not 0.0 < sigma_pi2 < 1.0:
        raise ConfigurationError("RL encoder steps need 0 < sigma_pi2 < 1", "sigma_pi2")
    link = link if link is not None else InProcessLink()
    audit = audit if audit is not None else AuditTrace()
    _run_alternating(state, dataset, schedule, channel, sigma_pi2, link, audit, schedule.n_epochs, False)
    result = barrier_audit(audit)
    if not result.passed:
        raise BarrierViolation("; ".join(result.violations))
    state.meta["barrier_audit"] = "pass"
    return finetune_receiver(state, dataset, schedule, channel, schedule.rx_finetune_epochs, link=link, audit=audit)


def finetune_receiver(state: TrainerState, dataset: Dataset, schedule: Schedule, channel: ch.ChannelConfig,
                      epochs: int, link=None, audit: AuditTrace | None = None) -> TrainerState:
    """Decoder-only supervised epochs on deterministic transmissions; theta is untouched."""
    if epochs <= 0:
        return state
    link = link if link is not None else InProcessLink()
    audit = audit if audit is not None else AuditTrace()
    return _run_alternating(state, dataset, schedule, channel, 0.0, link, audit, epochs, True)


def train(state: TrainerState, dataset: Dataset, schedule: Schedule, channel: ch.ChannelConfig,
          sigma_pi2: float = 0.15, link=None) -> TrainerState:
    """Dispatch on ``state.regime``."""
    if state.regime == "rl_spg":
        return train_rl_spg(state, dataset, schedule, channel, sigma_pi2, link=link)
    if state.regime == "perfect_comm":
        state = train_perfect_comm(state, dataset, schedule)
    else:
        state = train_model_aware(state, dataset, schedule, channel)
    return finetune_receiver(state, dataset, schedule, channel, schedule.rx_finetune_epochs)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("epoch,regime,ce_loss\n")
        for epoch, regime, ce in trace:
            f.write(f"{epoch!r},{regime},{ce!r}\n")


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def _adam_meta(opt: AdamState) -> dict:
    return {k: getattr(opt, k) for k in ("step_count", "learning_rate", "beta1", "beta2", "epsilon", "weight_decay")}


def save_checkpoint(path, state: TrainerState, config: dict | None = None) -> None:
    """Container: magic | version u32 | header length u32 | JSON header | float64 LE arrays | crc32."""
    arrays = {
        "theta": state.enc.theta, "psi": state.dec.psi,
        "enc_m": state.enc_opt.first_moment, "enc_v": state.enc_opt.second_moment,
        "dec_m": state.dec_opt.first_moment, "dec_v": state.dec_opt.second_moment,
    }
    header = {
        "config": config or {},
        "regime": state.regime,
        "epoch": state.epoch,
        "raw_steps": state.raw_steps,
        "pilot_offset": state.pilot_offset,
        "batch_id": state.batch_id,
        "seeds": state.seeds,
        "rngs": {k: _rng_state(v) for k, v in state.rngs.items()},
        "encoder": {"spec": state.enc.spec.to_dict(), "n_agents": state.enc.n_agents, "norm_mode": state.enc.norm_mode},
        "decoder": {"rx_spec": None if state.dec.rx_spec is None else state.dec.rx_spec.to_dict(),
                    "head_spec": state.dec.head_spec.to_dict(), "n_agents": state.dec.n_agents},
        "enc_opt": _adam_meta(state.enc_opt),
        "dec_opt": _adam_meta(state.dec_opt),
        "trace": state.trace,
        "meta": state.meta,
        "arrays": [[name, int(a.size)] for name, a in arrays.items()],
    }
    head = json.dumps(header).encode("utf-8")
    body = b"".join(np.asarray(a, dtype="<f8").tobytes() for a in arrays.values())
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head + body
    with open(path, "wb") as f:
        f.write(blob + struct.pack("<I", zlib.crc32(blob)))


def load_checkpoint(path) -> tuple[TrainerState, dict]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 20 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, head_len = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    try:
        h = json.loads(blob[16 : 16 + head_len].decode("utf-8"))
        arrays, pos = {}, 16 + head_len
        for name, size in h["arrays"]:
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
        if pos != len(blob) - 4:
            raise CheckpointError(f"{path}: array payload length mismatch")
        e, d = h["encoder"], h["decoder"]
        enc = EncoderParams(MlpSpec.from_dict(e["spec"]), arrays["theta"], e["n_agents"], e["norm_mode"])
        rx_spec = None if d["rx_spec"] is None else MlpSpec.from_dict(d["rx_spec"])
        dec = DecoderParams(rx_spec, MlpSpec.from_dict(d["head_spec"]), arrays["psi"], d["n_agents"])
        enc_opt = AdamState(arrays["enc_m"], arrays["enc_v"], **h["enc_opt"])
        dec_opt = AdamState(arrays["dec_m"], arrays["dec_v"], **h["dec_opt"])
        state = TrainerState(
            enc, dec, enc_opt, dec_opt,
            rngs={k: _restore_rng(v) for k, v in h["rngs"].items()},
            seeds=h["seeds"], regime=h["regime"], epoch=h["epoch"], raw_steps=h["raw_steps"],
            pilot_offset=h["pilot_offset"], batch_id=h["batch_id"],
            trace=[tuple(t) for t in h["trace"]], meta=h["meta"],
        )
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return state, h["config"]
