"""Optimization: cosine schedule, AdamW, single phases, and the two-phase pipeline.

A phase trains only adapter parameters. The two-phase pipeline runs a warm-up
phase on general data, writes the adapters to a checkpoint, reloads them as the
initialization of the task phase, and trains on task data. With a zero-sample
warm-up it reduces exactly to plain LoRA training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import EOS_ID, Corpus, raw_documents, tokenize
from .errors import ConfigError, ContractError, DataError
from .init_schemes import InitSpec, initialize
from .model import AdapterSet, Model, save_adapters
from .objectives import ObjectiveConfig, batch_loss

log = logging.getLogger(__name__)

PHASES = ("warmup", "adapt")
SCHEDULERS = ("cosine", "constant")


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Half-cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be at least 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **hyper)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
               state: OptimizerState, lr: float) -> None:
    """One decoupled-weight-decay Adam update with bias correction, in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ContractError("parameter, gradient and moment lists differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * update


class AdamW:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState.for_params(self.params, beta1=betas[0], beta2=betas[1],
                                               eps=eps, weight_decay=weight_decay)

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class PhasePlan:
    phase: str = "adapt"
    sample_count: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    lr_max: float = 3e-4
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    scheduler: str = "cosine"
    corpus: str = "task"
    lr_min: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.sample_count < 0:
            raise ConfigError("sample_count must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if self.phase == "warmup" and self.objective.kind != "sft":
            raise ConfigError("the warm-up phase trains with the sft objective")

    @property
    def steps_per_epoch(self) -> int:
        return self.sample_count // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class TrainedState:
    adapters: AdapterSet
    trace: list[dict] = field(default_factory=list)
    label: str = ""

    @property
    def steps(self) -> int:
        return len(self.trace)

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for rec in self.trace:
            by_epoch.setdefault(rec["epoch"], []).append(rec["loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def run_phase(model: Model, plan: PhasePlan, corpus: Corpus | Sequence) -> TrainedState:
    """Train ``model``'s adapters in place on the first ``plan.sample_count`` examples.

    Shuffling is seeded per epoch by ``(plan.seed, epoch)``; the trailing
    partial batch is dropped. For DPO the reference policy is a frozen copy
    of the model as it stands when the phase begins.
    """
    if model.adapters is None:
        raise ContractError("run_phase needs adapters attached to the model")
    examples = list(corpus)
    if len(examples) < plan.sample_count:
        raise DataError(
            f"{plan.phase} phase needs {plan.sample_count} examples, corpus has {len(examples)}"
        )
    examples = examples[:plan.sample_count]
    base_before = model.base_hash()
    trace: list[dict] = []
    total = plan.total_steps
    if total:
        ref_model = model.frozen_copy() if plan.objective.needs_reference else None
        opt = AdamW(model.trainable_parameters(), weight_decay=plan.weight_decay)
        step = 0
        for epoch in range(plan.epochs):
            order = np.random.default_rng([plan.seed, epoch]).permutation(len(examples))
            for b in range(plan.steps_per_epoch):
                batch = [examples[i] for i in order[b * plan.batch_size:(b + 1) * plan.batch_size]]
                if plan.scheduler == "cosine":
                    lr = cosine_lr(step, total, plan.lr_max, plan.lr_min)
                else:
                    lr = plan.lr_max
                with ad.Tape():
                    loss = batch_loss(model, batch, plan.objective, ref_model)
                    ad.backward(loss)
                opt.step(lr)
                opt.zero_grad()
                trace.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()})
                step += 1
        log.debug("%s phase: %d steps, final loss %.4f", plan.phase, total, trace[-1]["loss"])
    if model.base_hash() != base_before:
        raise ContractError("base weights changed during adapter training")
    return TrainedState(model.adapters.copy(), trace)


def run_vanilla(base: Model, plan: PhasePlan, corpus, init_seed: int,
                scheme: str = "vanilla") -> tuple[Model, TrainedState]:
    """Plain LoRA: fresh adapters from ``scheme``, then one task phase."""
    model = initialize(base, InitSpec(scheme, init_seed))
    state = run_phase(model, plan, corpus)
    state.label = f"LoRA({plan.sample_count})"
    return model, state


def run_warmup(base: Model, plan: PhasePlan, general: Corpus | Sequence, init_seed: int,
               checkpoint_dir=None) -> TrainedState:
    """Warm-up phase from vanilla adapters; optionally saved as a checkpoint."""
    model = initialize(base, InitSpec("vanilla", init_seed))
    state = run_phase(model, plan, general)
    if checkpoint_dir is not None:
        save_adapters(state.adapters, checkpoint_dir, base.config,
                      {"phase": "warmup", "m": plan.sample_count, "seed": plan.seed,
                       "init_seed": init_seed, "lr_max": plan.lr_max, "epochs": plan.epochs})
    return state


def run_d2lora(base: Model, m: int, n: int, warmup_plan: PhasePlan, adapt_plan: PhasePlan,
               general: Corpus | Sequence, task: Corpus | Sequence, init_seed: int,
               checkpoint_dir=None) -> tuple[Model, TrainedState]:
    """Warm-up on ``m`` general samples, checkpoint, then adapt on ``n`` task samples.

    If ``checkpoint_dir`` already holds a warm-up checkpoint it is reused
    instead of retraining.
    """
    warmup_plan = replace(warmup_plan, phase="warmup", sample_count=m)
    adapt_plan = replace(adapt_plan, phase="adapt", sample_count=n)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is None:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            run_warmup(base, warmup_plan, general, init_seed, tmp)
            model = initialize(base, InitSpec("d2lora", init_seed, tmp))
    else:
        if not (ckpt / "manifest.json").exists():
            run_warmup(base, warmup_plan, general, init_seed, ckpt)
        model = initialize(base, InitSpec("d2lora", init_seed, str(ckpt)))
    state = run_phase(model, adapt_plan, task)
    state.label = f"D2LoRA({m},{n})"
    return model, state


# ---------------------------------------------------------------- base pre-training


def pretraining_documents(corpora) -> list[list[int]]:
    """EOS-terminated token documents from the raw-text rendering of every example."""
    return [tokenize(doc) + [EOS_ID] for corpus in corpora for ex in corpus for doc in raw_documents(ex)]


def pack_documents(docs: Sequence[Sequence[int]], context: int, seed: int) -> np.ndarray:
    """Shuffle documents, concatenate them, and cut the stream into rows of
    ``context + 1`` ids so every position up to ``context`` gets trained."""
    order = np.random.default_rng(seed).permutation(len(docs))
    stream = np.concatenate([np.asarray(docs[i], dtype=np.int64) for i in order])
    rows = stream.size // (context + 1)
    if rows < 1:
        raise DataError(f"documents hold {stream.size} ids, fewer than one {context + 1}-id row")
    return stream[:rows * (context + 1)].reshape(rows, context + 1)


def pretrain_base(model: Model, documents: Sequence[Sequence[int]], steps: int, lr: float = 3e-3,
                  batch_size: int = 16, seed: int = 0,
                  context: int | None = None) -> tuple[Model, list[float]]:
    """Full-parameter language-model pass standing in for a pretrained checkpoint.

    Documents are packed into ``context``-long windows (default
    ``min(max_seq, 192)``). Returns a new adapter-free model and the per-step
    losses; ``model`` is left untouched.
    """
    from .model import forward

    context = context or min(model.config.max_seq, 192)
    out = model.copy()
    out.adapters = None
    params = out.base_parameters()
    for p in params:
        p.requires_grad = True
    opt = AdamW(params)
    rows = pack_documents(documents, context, seed)
    if len(rows) < batch_size:
        raise DataError(f"pre-training needs at least {batch_size} packed rows, got {len(rows)}")
    per_epoch = len(rows) // batch_size
    mask = np.ones((batch_size, context))
    losses = []
    order = None
    for step in range(steps):
        epoch, b = divmod(step, per_epoch)
        if b == 0:
            order = np.random.default_rng([seed, epoch]).permutation(len(rows))
        batch = rows[order[b * batch_size:(b + 1) * batch_size]]
        with ad.Tape():
            loss = ad.softmax_cross_entropy(forward(out, batch[:, :-1]), batch[:, 1:], mask)
            ad.backward(loss)
        opt.step(cosine_lr(step, steps, lr, lr * 0.1))
        opt.zero_grad()
        losses.append(loss.item())
    for p in params:
        p.requires_grad = False
    return out, losses
