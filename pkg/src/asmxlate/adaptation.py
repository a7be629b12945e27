"""Parameter-efficient adaptation on top of a frozen backbone.

Two strategies share this module:

* Multi-Adapter (``ma``): one bottleneck adapter per task after every block's
  feed-forward sublayer, ``f + relu(f @ down) @ up``, and one LoRA set per task
  living alongside it. Nothing trainable is shared between tasks.
* Seq2Seq Unified (``s2s``): a single shared LoRA set and one learned prefix
  embedding per task that replaces the embedding of that task's prefix token.

LoRA deltas follow the row-vector convention ``x @ (W + s * down @ up)`` with
``down`` of shape ``d_in x r`` and ``up`` of shape ``r x d_out``. The ``up``
factors of both adapters and LoRA start at zero, so a fresh state leaves the
backbone function unchanged bit for bit.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import torch
import torch.nn as nn

from . import checkpoint
from .corpus.samples import Task
from .model import PROJECTIONS, Backbone, ModelConfig, load_exact, tensor_digest
from .tokenizer import TASK_PREFIX

SHARED = "shared"


class Strategy(str, enum.Enum):
    MULTI_ADAPTER = "ma"
    SEQ2SEQ = "s2s"


class AdaptationError(ValueError):
    pass


class TaskAdapter(nn.Module):
    """Per-layer bottleneck pairs for one task."""

    def __init__(self, task: Task, n_layers: int, d_model: int, rank: int = 8, generator=None):
        super().__init__()
        if rank >= d_model:
            raise AdaptationError(f"adapter rank {rank} must be smaller than d_model {d_model}")
        self.task = task
        self.rank = rank
        self.down = nn.ParameterList(
            nn.Parameter(torch.randn(d_model, rank, generator=generator) / math.sqrt(d_model)) for _ in range(n_layers)
        )
        self.up = nn.ParameterList(nn.Parameter(torch.zeros(rank, d_model)) for _ in range(n_layers))

    def residual(self, h: torch.Tensor, layer: int) -> torch.Tensor:
        return torch.relu(h @ self.down[layer]) @ self.up[layer]


def adapter_apply(h: torch.Tensor, adapter: TaskAdapter, layer: int) -> torch.Tensor:
    if not 0 <= layer < len(adapter.down):
        raise AdaptationError(f"layer {layer} out of range")
    if h.shape[-1] != adapter.down[layer].shape[0]:
        raise AdaptationError(f"hidden size {h.shape[-1]} != adapter width {adapter.down[layer].shape[0]}")
    return h + adapter.residual(h, layer)


class LoraFactors(nn.Module):
    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float | None = None, generator=None):
        super().__init__()
        self.rank = rank
        self.scaling = (rank if alpha is None else alpha) / rank
        self.down = nn.Parameter(torch.randn(d_in, rank, generator=generator) / math.sqrt(d_in))
        self.up = nn.Parameter(torch.zeros(rank, d_out))

    def delta(self) -> torch.Tensor:
        return self.scaling * (self.down @ self.up)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scaling * ((x @ self.down) @ self.up)


def lora_apply(x: torch.Tensor, base: torch.Tensor, factors: LoraFactors) -> torch.Tensor:
    if x.shape[-1] != base.shape[0] or factors.down.shape[0] != base.shape[0] or factors.up.shape[1] != base.shape[1]:
        raise AdaptationError(
            f"shape mismatch: x {tuple(x.shape)}, base {tuple(base.shape)}, "
            f"factors {tuple(factors.down.shape)} x {tuple(factors.up.shape)}"
        )
    return x @ base + factors(x)


def lora_key(layer: int, proj: str) -> str:
    return f"{layer}_{proj}"


class LoraSet(nn.Module):
    """LoRA factors for every attention and feed-forward projection of every layer."""

    def __init__(self, cfg: ModelConfig, rank: int = 4, alpha: float | None = None, generator=None,
                 projections: Iterable[str] = PROJECTIONS):
        super().__init__()
        self.rank = rank
        self.alpha = alpha
        self.factors = nn.ModuleDict()
        for layer in range(cfg.n_layers):
            for proj in projections:
                d_in, d_out = cfg.proj_shape(proj)
                self.factors[lora_key(layer, proj)] = LoraFactors(d_in, d_out, rank, alpha, generator)

    def get(self, layer: int, proj: str) -> LoraFactors | None:
        key = lora_key(layer, proj)
        return self.factors[key] if key in self.factors else None


@dataclass
class Route:
    """What a single forward pass applies, resolved from a state and a task."""

    lora: list[tuple[float, LoraSet]] = field(default_factory=list)
    adapters: list[tuple[float, TaskAdapter]] = field(default_factory=list)
    prefixes: dict[int, torch.Tensor] = field(default_factory=dict)

    def lora_terms(self, layer: int, proj: str):
        for weight, lset in self.lora:
            f = lset.get(layer, proj)
            if f is not None:
                yield weight, f

    def adapter_terms(self):
        return self.adapters


class AdaptationState(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        strategy: Strategy | str,
        tasks: Iterable[Task] = tuple(Task),
        r_adapter: int = 8,
        r_lora: int | None = 4,
        lora_alpha: float | None = None,
        n_prefix: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        self.cfg = cfg
        self.strategy = Strategy(strategy)
        self.tasks = tuple(Task(t) for t in tasks)
        if not self.tasks:
            raise AdaptationError("an adaptation state needs at least one task")
        self.r_adapter = r_adapter
        self.r_lora = r_lora
        self.lora_alpha = lora_alpha
        self.n_prefix = n_prefix
        self.active_task = self.tasks[0]
        self.mix: dict[Task, float] | None = None
        g = torch.Generator().manual_seed(seed)
        self.adapters = nn.ModuleDict()
        self.lora = nn.ModuleDict()
        self.prefixes = nn.ParameterDict()
        if self.strategy is Strategy.MULTI_ADAPTER:
            for t in self.tasks:
                self.adapters[t.value] = TaskAdapter(t, cfg.n_layers, cfg.d_model, r_adapter, g)
                if r_lora:
                    self.lora[t.value] = LoraSet(cfg, r_lora, lora_alpha, g)
        else:
            if r_lora:
                self.lora[SHARED] = LoraSet(cfg, r_lora, lora_alpha, g)
            for t in self.tasks:
                self.prefixes[t.value] = nn.Parameter(torch.zeros(n_prefix, cfg.d_model))

    @classmethod
    def create(cls, backbone: Backbone, strategy: Strategy | str, **kwargs) -> "AdaptationState":
        """New state whose prefixes start at the backbone's prefix-token embeddings."""
        state = cls(backbone.cfg, strategy, **kwargs)
        with torch.no_grad():
            for key, p in state.prefixes.items():
                p.copy_(backbone.tok_emb[TASK_PREFIX[Task(key)]].expand_as(p))
        return state

    # -- routing ---------------------------------------------------------

    def has_task(self, task: Task) -> bool:
        return task in self.tasks

    def route(self, task: Task | str | None = None) -> Route:
        task = self.active_task if task is None else Task(task)
        if task not in self.tasks:
            raise AdaptationError(f"task {task.value!r} is not part of this {self.strategy.value} state")
        r = Route()
        if self.strategy is Strategy.MULTI_ADAPTER:
            weights = self.mix if self.mix else {task: 1.0}
            for t, w in weights.items():
                r.adapters.append((w, self.adapters[t.value]))
                if t.value in self.lora:
                    r.lora.append((w, self.lora[t.value]))
        else:
            if SHARED in self.lora:
                r.lora.append((1.0, self.lora[SHARED]))
            r.prefixes = {TASK_PREFIX[Task(k)]: p for k, p in self.prefixes.items()}
        return r

    def lora_for(self, task: Task | None = None) -> LoraSet | None:
        key = SHARED if self.strategy is Strategy.SEQ2SEQ else (task or self.active_task).value
        return self.lora[key] if key in self.lora else None

    def parameter_groups(self, tasks: Iterable[Task] | None = None) -> dict[str, list[nn.Parameter]]:
        """Trainable tensors keyed by group (adapters / lora / prefixes), limited to ``tasks``."""
        tasks = set(self.tasks if tasks is None else tasks)
        groups: dict[str, list[nn.Parameter]] = {"adapters": [], "lora": [], "prefixes": []}
        for key, mod in self.adapters.items():
            if Task(key) in tasks:
                groups["adapters"].extend(mod.parameters())
        for key, mod in self.lora.items():
            if key == SHARED or Task(key) in tasks:
                groups["lora"].extend(mod.parameters())
        for key, p in self.prefixes.items():
            if Task(key) in tasks:
                groups["prefixes"].append(p)
        return groups

    def checksums(self) -> dict[str, str]:
        return {name: tensor_digest(t) for name, t in self.state_dict().items()}

    # -- persistence -----------------------------------------------------

    def meta(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "tasks": [t.value for t in self.tasks],
            "r_adapter": self.r_adapter,
            "r_lora": self.r_lora,
            "lora_alpha": self.lora_alpha,
            "n_prefix": self.n_prefix,
            "active_task": self.active_task.value,
            "d_model": self.cfg.d_model,
            "n_layers": self.cfg.n_layers,
            "d_ff": self.cfg.d_ff,
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = self.meta()
        if extra:
            meta["extra"] = extra
        checkpoint.save(path, "adaptation", meta, self.state_dict())

    @classmethod
    def load(cls, path: str | Path, backbone_cfg: ModelConfig) -> "AdaptationState":
        header, tensors = checkpoint.load(path, kind="adaptation")
        m = header["meta"]
        for key in ("d_model", "n_layers", "d_ff"):
            if m[key] != getattr(backbone_cfg, key):
                raise checkpoint.CheckpointError(
                    f"{path}: adaptation {key}={m[key]} does not match backbone {key}={getattr(backbone_cfg, key)}"
                )
        state = cls(backbone_cfg, m["strategy"], [Task(t) for t in m["tasks"]], m["r_adapter"], m["r_lora"],
                    m["lora_alpha"], m["n_prefix"])
        load_exact(state, tensors, str(path))
        state.active_task = Task(m["active_task"])
        return state


def select_task(state: AdaptationState, task: Task | str) -> AdaptationState:
    """A view of ``state`` with a different active task; parameters are shared, not copied."""
    task = Task(task)
    if task not in state.tasks:
        raise AdaptationError(f"task {task.value!r} has no {'adapter' if state.strategy is Strategy.MULTI_ADAPTER else 'prefix'}")
    view = copy.copy(state)
    view.active_task = task
    return view


def with_mix(state: AdaptationState, weights: Mapping[Task | str, float]) -> AdaptationState:
    """Multi-Adapter view that blends task adapters (and their LoRA sets) with convex weights."""
    if state.strategy is not Strategy.MULTI_ADAPTER:
        raise AdaptationError("adapter mixing only applies to the multi-adapter strategy")
    mix = {Task(t): float(w) for t, w in weights.items()}
    if any(w < 0 for w in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise AdaptationError("mixing weights must be non-negative and sum to 1")
    for t in mix:
        if t not in state.tasks:
            raise AdaptationError(f"task {t.value!r} not in state")
    view = copy.copy(state)
    view.mix = mix
    return view


@torch.no_grad()
def lora_merge(base: Backbone, lora: LoraSet) -> Backbone:
    """A new backbone with every LoRA delta folded into its projection; ``base`` is untouched."""
    merged = copy.deepcopy(base)
    for key, factors in lora.factors.items():
        layer, proj = key.split("_", 1)
        w = merged.blocks[int(layer)].w[proj]
        if tuple(w.shape) != (factors.down.shape[0], factors.up.shape[1]):
            raise AdaptationError(f"LoRA factors for {key} do not match projection shape {tuple(w.shape)}")
        w.add_(factors.delta())
    return merged
