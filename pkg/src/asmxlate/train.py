"""Training loops: causal-LM pretraining of the backbone and adaptation-only fine-tuning.

One optimizer step consumes ``grad_accum_steps`` micro-batches of
``batch_size`` sequences. Gradients of the *summed* token NLL are accumulated
and divided once by the total number of scored tokens, so accumulating k
micro-batches gives exactly the update of one batch k times larger.
"""

from __future__ import annotations

import copy
import csv
import enum
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import torch
import torch.nn as nn

from .adaptation import AdaptationState, Strategy
from .corpus.samples import Sample
from .model import Backbone, sequence_nll
from .tokenizer import PAD, TokenStream, Vocab, build_example, sequence_length

log = logging.getLogger(__name__)


class Trainable(str, enum.Enum):
    FULL_BACKBONE = "full"
    ADAPTATION_ONLY = "adaptation"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    grad_accum_steps: int = 8
    learning_rate: float = 2e-4
    max_steps: int = 100
    weight_decay: float = 0.0
    seed: int = 0
    trainable: Trainable = Trainable.FULL_BACKBONE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    max_grad_norm: float | None = None
    groups: tuple[str, ...] = ("adapters", "lora", "prefixes")
    checkpoint_every: int = 0

    def __post_init__(self):
        self.trainable = Trainable(self.trainable)
        self.groups = tuple(self.groups)
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ValueError("batch_size and grad_accum_steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_steps < 0 or self.weight_decay < 0 or self.checkpoint_every < 0:
            raise ValueError("max_steps, weight_decay and checkpoint_every must be non-negative")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum_steps

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        return self.learning_rate

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = self.trainable.value
        d["groups"] = list(self.groups)
        return d


@dataclass
class LossRecord:
    step: int
    loss: float
    lr: float


def write_history_csv(history: Sequence[LossRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for rec in history:
            w.writerow([rec.step, repr(rec.loss), repr(rec.lr)])


# -- optimizer ----------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)


@torch.no_grad()
def optimizer_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamWState,
                   cfg: TrainConfig, lr: float | None = None) -> AdamWState:
    """One AdamW update in place: decoupled weight decay, then the bias-corrected Adam step."""
    lr = cfg.learning_rate if lr is None else lr
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1 - cfg.beta1 ** state.step
    bc2 = 1 - cfg.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if cfg.weight_decay:
            p.mul_(1 - lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


# -- batching -----------------------------------------------------------


def _index_stream(n: int, seed: int) -> Iterator[int]:
    rng = random.Random(seed)
    order = list(range(n))
    while True:
        rng.shuffle(order)
        yield from order


def pad_batch(examples: Sequence[tuple[Sequence[int], Sequence[bool]]]) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(ids) for ids, _ in examples)
    ids = torch.full((len(examples), T), PAD, dtype=torch.long)
    mask = torch.zeros((len(examples), T), dtype=torch.bool)
    for i, (seq, m) in enumerate(examples):
        ids[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[i, : len(m)] = torch.tensor(m, dtype=torch.bool)
    return ids, mask


def _run(model: Backbone, adaptation: AdaptationState | None, examples: list, tasks: list | None,
         params: list[nn.Parameter], cfg: TrainConfig, on_checkpoint: Callable[[int], None] | None = None
         ) -> list[LossRecord]:
    history: list[LossRecord] = []
    if cfg.max_steps == 0:
        return history
    if not params:
        raise ValueError("nothing to train")
    torch.manual_seed(cfg.seed)
    stream = _index_stream(len(examples), cfg.seed)
    opt = AdamWState()
    model.train(cfg.trainable is Trainable.FULL_BACKBONE and model.cfg.dropout > 0)
    for step in range(cfg.max_steps):
        for p in params:
            p.grad = None
        total_nll, total_count = 0.0, 0
        for _ in range(cfg.grad_accum_steps):
            idx = [next(stream) for _ in range(cfg.batch_size)]
            # micro-batches are split by task so each routes through its own adapter
            groups: dict = {}
            for i in idx:
                groups.setdefault(tasks[i] if tasks else None, []).append(i)
            for task, members in groups.items():
                ids, mask = pad_batch([examples[i] for i in members])
                nll, count = sequence_nll(model, ids, mask, adaptation, task)
                nll.backward()
                total_nll += float(nll.detach())
                total_count += count
        if total_count == 0:
            raise ValueError("batch contains no target tokens")
        loss = total_nll / total_count
        lr = cfg.lr_at(step)
        if not math.isfinite(loss):
            tail = ", ".join(f"{r.loss:.4g}" for r in history[-5:])
            raise TrainingDiverged(f"non-finite loss {loss} at step {step} (lr={lr}); previous losses: [{tail}]")
        grads = [p.grad / total_count if p.grad is not None else torch.zeros_like(p) for p in params]
        if cfg.max_grad_norm is not None:
            norm = torch.sqrt(sum((g * g).sum() for g in grads))
            if norm > cfg.max_grad_norm:
                grads = [g * (cfg.max_grad_norm / norm) for g in grads]
        optimizer_step(params, grads, opt, cfg, lr)
        history.append(LossRecord(step, loss, lr))
        if step % 50 == 0 or step == cfg.max_steps - 1:
            log.info("step %d loss %.4f lr %.3g", step, loss, lr)
        if on_checkpoint is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(step + 1)
    for p in params:
        p.grad = None
    model.eval()
    return history


def pretrain_clm(params: Backbone, corpus: Sequence[TokenStream | Sequence[int]], cfg: TrainConfig,
                 on_checkpoint: Callable[[int, Backbone], None] | None = None) -> tuple[Backbone, list[LossRecord]]:
    """Next-token training of every backbone tensor on whole sequences; returns a trained copy.

    ``on_checkpoint(step, model)`` is called every ``cfg.checkpoint_every`` steps.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if cfg.trainable is not Trainable.FULL_BACKBONE:
        raise ValueError("pretraining updates the backbone; use trainable='full'")
    model = copy.deepcopy(params)
    examples = []
    for seq in corpus:
        ids = list(seq.ids if isinstance(seq, TokenStream) else seq)
        if len(ids) > model.cfg.max_context:
            raise ValueError(f"sequence of {len(ids)} tokens exceeds max_context={model.cfg.max_context}")
        if len(ids) < 2:
            raise ValueError("pretraining sequences need at least two tokens")
        examples.append((ids, [True] * len(ids)))
    trainable = list(model.parameters())
    for p in trainable:
        p.requires_grad_(True)
    hook = (lambda step: on_checkpoint(step, model)) if on_checkpoint else None
    history = _run(model, None, examples, None, trainable, cfg, hook)
    return model, history


def finetune(backbone: Backbone, state: AdaptationState, data: Sequence[Sample], vocab: Vocab,
             cfg: TrainConfig, on_checkpoint: Callable[[int, AdaptationState], None] | None = None
             ) -> tuple[AdaptationState, list[LossRecord]]:
    """Train adaptation parameters on supervised pairs with the backbone frozen.

    The loss covers only the output segment (conditional NLL of the output
    given the input and task). Only the tensors belonging to tasks present in
    ``data`` and to ``cfg.groups`` receive updates. Returns a trained copy of
    ``state``; ``on_checkpoint(step, state)`` is called every
    ``cfg.checkpoint_every`` steps.
    """
    if cfg.trainable is not Trainable.ADAPTATION_ONLY:
        raise ValueError("fine-tuning requires trainable='adaptation'")
    if not data:
        raise ValueError("fine-tuning data is empty")
    state = copy.deepcopy(state)
    use_prefix = state.strategy is Strategy.SEQ2SEQ
    tasks = [s.task for s in data]
    for s in data:
        if not state.has_task(s.task):
            raise ValueError(f"sample {s.id!r}: task {s.task.value!r} has no adapter or prefix in this state")
        if sequence_length(vocab, s, state.n_prefix) > backbone.cfg.max_context:
            raise ValueError(f"sample {s.id!r} exceeds max_context={backbone.cfg.max_context}; filter first")
    examples = [build_example(vocab, s, use_prefix, state.n_prefix) for s in data]
    before = backbone.checksums()
    backbone.freeze()
    groups = state.parameter_groups(set(tasks))
    params = [p for name in cfg.groups for p in groups.get(name, [])]
    for p in state.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    hook = (lambda step: on_checkpoint(step, state)) if on_checkpoint else None
    history = _run(backbone, state, examples, tasks, params, cfg, hook)
    if backbone.checksums() != before:
        raise AssertionError("backbone parameters changed during adaptation training")
    return state, history
