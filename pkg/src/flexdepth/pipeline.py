"""Two-step training: progressive self-pruning, then fixed-mask joint
training with the sandwich rule and layer dropout. Also hosts the plain
separate-training and auxiliary-loss baselines and greedy evaluation.

Trainers are driven by the global step counter, so a run can be restored
from any interval checkpoint and continued deterministically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import ctc
from .autodiff import Tape
from .data import Batch, Utterance, batch_stream, collate
from .encoder import EncoderConfig, MaskableEncoder, bind_params
from .optim import Adam
from .pruning import (SubnetSpec, ZeroOutState, masks_from_scores,
                      simple_topk_gate, sparsity_penalty, zero_out_gate,
                      zero_out_update)
from .schedules import k_schedule, oclr_lr

METHODS = ("simple_topk", "zero_out")
MODES = ("joint", "separate", "aux_loss")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 6000
    step1_fraction: float = 0.6
    iterations: int = 32
    subnet_loss_scale: float = 0.3      # weight of each subnet's CTC term
    sparsity_scale: float = 0.3         # weight of the zero-out gate penalty
    layer_dropout: float = 0.3          # step-2 drop probability
    method: str = "simple_topk"
    temperature: float = 1.0
    lr_peak: float = 4e-4
    lr_floor: float = 4e-6
    lr_final: float = 1e-7
    warm_fraction: float = 0.45
    decay_fraction: float = 0.45
    batch_size: int = 4
    seed: int = 0
    subnet_layers: tuple[int, ...] = (32, 16, 8)
    aux_loss_scale: float = 0.3
    checkpoint_interval: int = 0        # 0 = only at phase boundaries

    def __post_init__(self):
        if not 0.0 < self.step1_fraction < 1.0:
            raise ValueError(
                f"step1_fraction must be in (0, 1), got {self.step1_fraction}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.subnet_loss_scale < 0 or self.sparsity_scale < 0:
            raise ValueError("loss scales must be non-negative")
        if not 0.0 <= self.layer_dropout < 1.0:
            raise ValueError(
                f"layer_dropout must be in [0, 1), got {self.layer_dropout}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got "
                             f"{self.method!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def step1_steps(self) -> int:
        return int(self.step1_fraction * self.total_steps)

    @property
    def delta_t(self) -> int:
        return self.step1_steps // self.iterations

    def lr_at(self, step: int) -> float:
        return oclr_lr(step, self.total_steps, lr_peak=self.lr_peak,
                       lr_floor=self.lr_floor, lr_final=self.lr_final,
                       warm_fraction=self.warm_fraction,
                       decay_fraction=self.decay_fraction)

    def subnet_spec(self) -> SubnetSpec:
        return SubnetSpec(tuple(self.subnet_layers))


class MetricsWriter:
    """Line-delimited JSON records; deterministic byte output."""

    def __init__(self, fh=None):
        self.fh = fh
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.fh is not None:
            self.fh.write(json.dumps(record, sort_keys=True))
            self.fh.write("\n")
            self.fh.flush()


def sandwich_select(rng: np.random.Generator, spec: SubnetSpec) -> tuple[int, ...]:
    """Positions of the nets trained this step: the supernet, the smallest
    subnet, and one uniformly sampled medium when more than two exist."""
    M = spec.count
    if M < 2:
        raise ValueError(f"sandwich rule needs at least 2 sizes, got {M}")
    if M == 2:
        return (0, 1)
    mid = int(rng.integers(1, M - 1))
    return (0, mid, M - 1)


@dataclass
class TrainState:
    step: int
    iteration: int
    k: int
    params: dict[str, np.ndarray]
    scores: np.ndarray
    adam: Adam
    rng: np.random.Generator
    zero_out: ZeroOutState | None = None
    masks: list[np.ndarray] | None = None
    last_checkpoint: str | None = None


CheckpointFn = Callable[["object", str], str]


def _finite_or_abort(state: TrainState, value: float, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingAborted(
            f"non-finite {what} at step {state.step}; last good checkpoint: "
            f"{state.last_checkpoint}", state.last_checkpoint)


@dataclass(frozen=True)
class Step1Slot:
    iteration: int
    k: int
    boundary: bool   # last step of its pruning iteration


class _TrainerBase:
    """Shared step-indexed machinery: state, streams, checkpoints."""

    config: TrainConfig
    enc_config: EncoderConfig

    def _init_state(self, include_aux: bool = False) -> TrainState:
        root = np.random.SeedSequence(self.config.seed)
        init_ss, train_ss = root.spawn(2)
        L = self.enc_config.num_layers
        return TrainState(
            step=0, iteration=0, k=L,
            params=self.encoder.init_params(np.random.default_rng(init_ss),
                                            include_aux=include_aux),
            scores=np.zeros(L),
            adam=Adam(),
            rng=np.random.default_rng(train_ss))

    def _make_stream(self, skip: int = 0):
        stream = batch_stream(self.train_utts, self.config.batch_size,
                              self.config.seed)
        for _ in range(skip):
            next(stream)
        return stream

    def _checkpoint(self, tag: str) -> None:
        if self.checkpoint_fn is not None:
            self.state.last_checkpoint = self.checkpoint_fn(self, tag)

    def _maybe_interval_checkpoint(self) -> None:
        interval = self.config.checkpoint_interval
        if interval and self.state.step % interval == 0:
            self._checkpoint(f"step{self.state.step}")

    # -- state (de)serialization ------------------------------------------------

    def state_tensors(self) -> tuple[dict[str, np.ndarray], dict]:
        state = self.state
        tensors = dict(state.params)
        tensors["scores"] = state.scores
        tensors.update(state.adam.state_tensors())
        if state.masks is not None:
            for i, m in enumerate(state.masks):
                tensors[f"mask.{i}"] = m
        extras = {
            "step": state.step,
            "iteration": state.iteration,
            "k": state.k,
            "adam_t": state.adam.t,
            "rng_state": _rng_state_json(state.rng),
            "num_masks": 0 if state.masks is None else len(state.masks),
        }
        if state.zero_out is not None:
            extras["zero_out"] = {"suppressed": list(state.zero_out.suppressed),
                                  "k": state.zero_out.k}
        return tensors, extras

    def restore(self, tensors: dict[str, np.ndarray], extras: dict) -> None:
        state = self.state
        param_names = set(state.params)
        state.params = {k: tensors[k].copy() for k in param_names}
        state.scores = tensors["scores"].copy()
        state.adam.load_state_tensors(tensors, extras["adam_t"])
        state.step = int(extras["step"])
        state.iteration = int(extras["iteration"])
        state.k = int(extras["k"])
        state.rng = _rng_from_json(extras["rng_state"])
        if extras.get("num_masks"):
            state.masks = [tensors[f"mask.{i}"].copy()
                           for i in range(extras["num_masks"])]
        if "zero_out" in extras:
            state.zero_out = ZeroOutState(
                tuple(int(j) for j in extras["zero_out"]["suppressed"]),
                int(extras["zero_out"]["k"]))
        self._stream = self._make_stream(skip=state.step)


def _rng_state_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


class JointTrainer(_TrainerBase):
    """Step 1 progressive self-pruning + Step 2 sandwich-rule joint training."""

    def __init__(self, enc_config: EncoderConfig, config: TrainConfig,
                 train_utts: Sequence[Utterance],
                 metrics: MetricsWriter | None = None,
                 checkpoint_fn: CheckpointFn | None = None,
                 mask_freeze_fn: Callable[["JointTrainer"], None] | None = None):
        spec = config.subnet_spec()
        spec.validate_supernet(enc_config.num_layers)
        self.enc_config = enc_config
        self.config = config
        self.spec = spec
        self.encoder = MaskableEncoder(enc_config)
        self.metrics = metrics or MetricsWriter()
        self.checkpoint_fn = checkpoint_fn
        self.mask_freeze_fn = mask_freeze_fn
        self.train_utts = list(train_utts)
        self.state = self._init_state()
        if config.method == "zero_out":
            self.state.zero_out = ZeroOutState((), enc_config.num_layers)
        self._stream = self._make_stream()
        self._slots = self._step1_slots()

    def _step1_slots(self) -> list[Step1Slot]:
        cfg = self.config
        L = self.enc_config.num_layers
        per_iter = [cfg.delta_t] * cfg.iterations
        per_iter[-1] += cfg.step1_steps - cfg.delta_t * cfg.iterations
        slots = []
        for i in range(1, cfg.iterations + 1):
            k = k_schedule(i, L, self.spec.k_min, cfg.iterations)
            n = per_iter[i - 1]
            slots.extend(Step1Slot(i, k, j == n - 1) for j in range(n))
        return slots

    # -- loss assembly ------------------------------------------------------------

    def _net_loss(self, tape, bound, batch: Batch, gate=None,
                  layer_dropout=None):
        out = self.encoder.forward(
            tape, bound, batch.features, batch.lengths, gate=gate,
            layer_dropout=layer_dropout,
            rng=self.state.rng if layer_dropout else None)
        return ctc.ctc_loss_batch(out.log_probs, out.out_lengths, batch.labels)

    def _apply_update(self, tape, bound, loss, s_leaf=None) -> None:
        ad.backward(tape, loss)
        grads = {name: t.grad for name, t in bound.items()}
        trainables = dict(self.state.params)
        if s_leaf is not None:
            grads["scores"] = s_leaf.grad
            trainables["scores"] = self.state.scores
        self.state.adam.step(trainables, grads,
                             self.config.lr_at(self.state.step))

    # -- phases ---------------------------------------------------------------------

    def _step1_step(self, slot: Step1Slot) -> None:
        cfg = self.config
        state = self.state
        state.iteration, state.k = slot.iteration, slot.k
        batch = next(self._stream)
        lr = cfg.lr_at(state.step)

        tape = Tape()
        bound = bind_params(tape, state.params)
        s_leaf = tape.leaf(state.scores, requires_grad=True, name="scores")

        sup = self._net_loss(tape, bound, batch)
        loss = sup.loss
        sub_val = 0.0
        pen_val = 0.0
        skipped = len(sup.skipped)

        if cfg.method == "simple_topk":
            if cfg.subnet_loss_scale > 0:
                gate = simple_topk_gate(s_leaf, state.k, cfg.temperature)
                sub = self._net_loss(tape, bound, batch, gate=gate)
                loss = ad.add(loss, ad.scale(sub.loss, cfg.subnet_loss_scale))
                sub_val = float(sub.loss.values)
                skipped += len(sub.skipped)
        else:
            gate_full = zero_out_gate(s_leaf, state.zero_out)
            if cfg.subnet_loss_scale > 0:
                suppressed = set(state.zero_out.suppressed)
                entries = [0.0 if j in suppressed else
                           ad.slice_tensor(gate_full, j)
                           for j in range(self.enc_config.num_layers)]
                sub = self._net_loss(tape, bound, batch, gate=entries)
                loss = ad.add(loss, ad.scale(sub.loss, cfg.subnet_loss_scale))
                sub_val = float(sub.loss.values)
                skipped += len(sub.skipped)
            if cfg.sparsity_scale > 0:
                pen = sparsity_penalty(gate_full, state.k, cfg.sparsity_scale)
                loss = ad.add(loss, pen)
                pen_val = float(pen.values)

        total = float(loss.values)
        _finite_or_abort(state, total, "loss")
        self._apply_update(tape, bound, loss, s_leaf)
        if slot.boundary and cfg.method == "zero_out":
            state.zero_out = zero_out_update(state.scores, state.k)
        self.metrics.write({
            "step": state.step, "phase": "step1", "iteration": slot.iteration,
            "k": slot.k, "lr": lr, "loss": total,
            "loss_full": float(sup.loss.values), "loss_sub": sub_val,
            "penalty": pen_val, "ctc_skipped": skipped,
        })
        state.step += 1
        self._maybe_interval_checkpoint()

    def freeze_masks(self) -> list[np.ndarray]:
        self.state.masks = masks_from_scores(self.state.scores, self.spec)
        if self.mask_freeze_fn is not None:
            self.mask_freeze_fn(self)
        return self.state.masks

    def _step2_step(self, dropout_spec) -> None:
        cfg = self.config
        state = self.state
        batch = next(self._stream)
        lr = cfg.lr_at(state.step)
        selected = sandwich_select(state.rng, self.spec)

        tape = Tape()
        bound = bind_params(tape, state.params)
        sup = self._net_loss(tape, bound, batch, layer_dropout=dropout_spec)
        loss = sup.loss
        skipped = len(sup.skipped)
        subnet_losses = {}
        if cfg.subnet_loss_scale > 0:
            for pos in selected:
                if pos == 0:
                    continue
                sub = self._net_loss(tape, bound, batch, gate=state.masks[pos])
                loss = ad.add(loss, ad.scale(sub.loss, cfg.subnet_loss_scale))
                subnet_losses[str(self.spec.layer_counts[pos])] = \
                    float(sub.loss.values)
                skipped += len(sub.skipped)

        total = float(loss.values)
        _finite_or_abort(state, total, "loss")
        self._apply_update(tape, bound, loss)
        self.metrics.write({
            "step": state.step, "phase": "step2", "iteration": None,
            "k": self.spec.k_min, "lr": lr, "loss": total,
            "loss_full": float(sup.loss.values),
            "subnet_losses": subnet_losses, "penalty": 0.0,
            "ctc_skipped": skipped,
        })
        state.step += 1
        self._maybe_interval_checkpoint()

    def step1_train(self) -> TrainState:
        cfg = self.config
        while self.state.step < cfg.step1_steps:
            self._step1_step(self._slots[self.state.step])
        self._checkpoint("step1-final")
        return self.state

    def step2_train(self) -> TrainState:
        cfg = self.config
        if self.state.masks is None:
            self.freeze_masks()
        droppable = np.where(self.state.masks[-1] == 0)[0]
        survival = 1.0 - cfg.layer_dropout
        dropout_spec = ({int(j): survival for j in droppable}
                        if cfg.layer_dropout > 0 else None)
        while self.state.step < cfg.total_steps:
            self._step2_step(dropout_spec)
        self._checkpoint("final")
        return self.state

    def run(self) -> TrainState:
        if self.state.step < self.config.step1_steps:
            self.step1_train()
        return self.step2_train()


class SeparateTrainer(_TrainerBase):
    """Plain single-model CTC training (the per-size baseline); with
    `include_aux`, adds the auxiliary half-depth CTC head."""

    def __init__(self, enc_config: EncoderConfig, config: TrainConfig,
                 train_utts: Sequence[Utterance],
                 metrics: MetricsWriter | None = None,
                 checkpoint_fn: CheckpointFn | None = None,
                 include_aux: bool = False, phase: str = "separate"):
        self.enc_config = enc_config
        self.config = config
        self.encoder = MaskableEncoder(enc_config)
        self.metrics = metrics or MetricsWriter()
        self.checkpoint_fn = checkpoint_fn
        self.train_utts = list(train_utts)
        self.include_aux = include_aux
        self.phase = phase
        self.state = self._init_state(include_aux=include_aux)
        self._stream = self._make_stream()

    def _one_step(self) -> None:
        cfg = self.config
        state = self.state
        batch = next(self._stream)
        lr = cfg.lr_at(state.step)
        tape = Tape()
        bound = bind_params(tape, state.params)
        record = {"step": state.step, "phase": self.phase, "iteration": None,
                  "k": self.enc_config.num_layers, "lr": lr, "penalty": 0.0}
        if self.include_aux:
            out = self.encoder.forward(tape, bound, batch.features,
                                       batch.lengths,
                                       tap_block=self.enc_config.blocks // 2)
            main = ctc.ctc_loss_batch(out.log_probs, out.out_lengths,
                                      batch.labels)
            aux_lp = self.encoder.aux_head(bound, out.tap)
            aux = ctc.ctc_loss_batch(aux_lp, out.out_lengths, batch.labels)
            loss = ad.add(main.loss, ad.scale(aux.loss, cfg.aux_loss_scale))
            record.update(loss_full=float(main.loss.values),
                          loss_aux=float(aux.loss.values),
                          ctc_skipped=len(main.skipped) + len(aux.skipped))
        else:
            out = self.encoder.forward(tape, bound, batch.features,
                                       batch.lengths)
            res = ctc.ctc_loss_batch(out.log_probs, out.out_lengths,
                                     batch.labels)
            loss = res.loss
            record.update(loss_full=float(res.loss.values),
                          ctc_skipped=len(res.skipped))
        total = float(loss.values)
        record["loss"] = total
        _finite_or_abort(state, total, "loss")
        ad.backward(tape, loss)
        grads = {name: t.grad for name, t in bound.items()}
        state.adam.step(state.params, grads, lr)
        self.metrics.write(record)
        state.step += 1
        self._maybe_interval_checkpoint()

    def run(self) -> TrainState:
        while self.state.step < self.config.total_steps:
            self._one_step()
        self._checkpoint("final")
        return self.state


def make_aux_trainer(enc_config: EncoderConfig, config: TrainConfig,
                     train_utts: Sequence[Utterance],
                     metrics: MetricsWriter | None = None,
                     checkpoint_fn: CheckpointFn | None = None
                     ) -> SeparateTrainer:
    """Supernet training with an extra CTC head at the half-depth tap."""
    return SeparateTrainer(enc_config, config, train_utts, metrics,
                           checkpoint_fn, include_aux=True, phase="aux_loss")


# -- evaluation ------------------------------------------------------------------


@dataclass
class EvalResult:
    label_error_rate: float     # corpus-level fraction
    hyps: list[list[int]] = field(default_factory=list)
    refs: list[list[int]] = field(default_factory=list)


def decode_dataset(enc_config: EncoderConfig, params: dict[str, np.ndarray],
                   utts: Sequence[Utterance], gate: np.ndarray | None = None,
                   batch_size: int = 32, use_aux_head: bool = False
                   ) -> EvalResult:
    model = MaskableEncoder(enc_config)
    hyps: list[list[int]] = []
    refs: list[list[int]] = []
    for start in range(0, len(utts), batch_size):
        chunk = collate(list(utts[start:start + batch_size]))
        tape = Tape(recording=False)
        bound = bind_params(tape, params, trainable=False)
        if use_aux_head:
            out = model.forward(tape, bound, chunk.features, chunk.lengths,
                                gate=gate, tap_block=enc_config.blocks // 2)
            log_probs = model.aux_head(bound, out.tap).values
        else:
            out = model.forward(tape, bound, chunk.features, chunk.lengths,
                                gate=gate)
            log_probs = out.log_probs.values
        for i in range(len(chunk.labels)):
            hyps.append(ctc.greedy_decode(log_probs[i, :out.out_lengths[i]]))
            refs.append(chunk.labels[i])
    return EvalResult(ctc.corpus_label_error_rate(hyps, refs), hyps, refs)


def aux_half_gate(num_layers: int) -> np.ndarray:
    """Gate keeping only the bottom half of the blocks (the aux tap's view)."""
    gate = np.zeros(num_layers)
    gate[:num_layers // 2] = 1.0
    return gate
