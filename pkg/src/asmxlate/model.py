"""Decoder-only causal transformer backbone.

Pre-norm blocks, learned absolute positions, GELU feed-forward. Weights are
stored in row-vector orientation (``y = x @ W + b``, ``W`` is ``d_in x d_out``)
so that LoRA deltas and adapter projections compose with them directly.

Adaptation is threaded through :meth:`Backbone.forward` as a resolved
:class:`~asmxlate.adaptation.Route`; with no route the output is the pure
backbone function.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .tokenizer import EOS, TokenStream, Vocab

if TYPE_CHECKING:
    from .adaptation import AdaptationState, Route

PROJECTIONS = ("q", "k", "v", "o", "fc1", "fc2")


class ContextOverflow(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_context: int = 1024
    dropout: float = 0.0
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def proj_shape(self, name: str) -> tuple[int, int]:
        d, f = self.d_model, self.d_ff
        return {"fc1": (d, f), "fc2": (f, d)}.get(name, (d, d))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.w = nn.ParameterDict()
        self.b = nn.ParameterDict()
        for name in PROJECTIONS:
            d_in, d_out = cfg.proj_shape(name)
            self.w[name] = nn.Parameter(torch.empty(d_in, d_out))
            self.b[name] = nn.Parameter(torch.zeros(d_out))
        self.drop = nn.Dropout(cfg.dropout)

    def proj(self, x: torch.Tensor, name: str, layer: int, route: Route | None) -> torch.Tensor:
        y = x @ self.w[name] + self.b[name]
        if route is not None:
            for weight, factors in route.lora_terms(layer, name):
                y = y + weight * factors(x)
        return y

    def forward(self, x: torch.Tensor, layer: int, route: Route | None) -> torch.Tensor:
        B, T, D = x.shape
        H = self.cfg.n_heads
        h = self.ln1(x)
        q = self.proj(h, "q", layer, route).view(B, T, H, D // H).transpose(1, 2)
        k = self.proj(h, "k", layer, route).view(B, T, H, D // H).transpose(1, 2)
        v = self.proj(h, "v", layer, route).view(B, T, H, D // H).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // H)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(causal, float("-inf")).softmax(dim=-1)
        att = self.drop(att)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        x = x + self.drop(self.proj(y, "o", layer, route))
        f = self.proj(F.gelu(self.proj(self.ln2(x), "fc1", layer, route)), "fc2", layer, route)
        if route is not None:
            for weight, adapter in route.adapter_terms():
                f = f + weight * adapter.residual(f, layer)
        return x + self.drop(f)


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_context, cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = None if cfg.tie_embeddings else nn.Parameter(torch.empty(cfg.d_model, cfg.vocab_size))
        self.reset_parameters(seed)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        std = 0.02
        with torch.no_grad():
            self.tok_emb.copy_(torch.randn(self.tok_emb.shape, generator=g) * std)
            self.pos_emb.copy_(torch.randn(self.pos_emb.shape, generator=g) * std)
            for block in self.blocks:
                for name in PROJECTIONS:
                    w = block.w[name]
                    scale = std / math.sqrt(2 * self.cfg.n_layers) if name in ("o", "fc2") else std
                    w.copy_(torch.randn(w.shape, generator=g) * scale)
            if self.head is not None:
                self.head.copy_(torch.randn(self.head.shape, generator=g) * std)

    def output_matrix(self) -> torch.Tensor:
        return self.tok_emb.t() if self.head is None else self.head

    def embed(self, ids: torch.Tensor, route: Route | None) -> torch.Tensor:
        x = self.tok_emb[ids]
        if route is not None:
            for token_id, vectors in route.prefixes.items():
                hit = ids == token_id
                if not bool(hit.any()):
                    continue
                slot = (hit.long().cumsum(-1) - 1).clamp(min=0) % vectors.shape[0]
                x = torch.where(hit.unsqueeze(-1), vectors[slot], x)
        return x + self.pos_emb[: ids.shape[-1]]

    def forward(
        self,
        ids: torch.Tensor | Sequence[int] | TokenStream,
        adaptation: AdaptationState | None = None,
        task=None,
        return_hidden: bool = False,
    ) -> torch.Tensor:
        """Logits of shape ``(..., T, vocab_size)``; position k sees tokens <= k only."""
        ids = as_ids(ids)
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids.unsqueeze(0)
        T = ids.shape[-1]
        if T > self.cfg.max_context:
            raise ContextOverflow(f"sequence of {T} tokens exceeds max_context={self.cfg.max_context}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise ValueError(f"token id out of range for vocab_size={self.cfg.vocab_size}")
        route = adaptation.route(task) if adaptation is not None else None
        x = self.embed(ids, route)
        for layer, block in enumerate(self.blocks):
            x = block(x, layer, route)
        x = self.ln_f(x)
        out = x if return_hidden else x @ self.output_matrix()
        return out.squeeze(0) if squeeze else out

    # -- persistence -----------------------------------------------------

    def checksums(self) -> dict[str, str]:
        return {name: tensor_digest(t) for name, t in self.state_dict().items()}

    def save(self, path: str | Path, vocab: Vocab, extra: dict | None = None) -> None:
        meta = {"config": asdict(self.cfg), "vocab": {"mnemonics": list(vocab.mnemonics),
                "max_context": vocab.max_context, "mnemonic_source": vocab.mnemonic_source}}
        if extra:
            meta["extra"] = extra
        checkpoint.save(path, "backbone", meta, self.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> tuple["Backbone", Vocab]:
        header, tensors = checkpoint.load(path, kind="backbone")
        meta = header["meta"]
        cfg = ModelConfig(**meta["config"])
        v = meta["vocab"]
        vocab = Vocab(tuple(v["mnemonics"]), v["max_context"], v["mnemonic_source"])
        if vocab.size != cfg.vocab_size:
            raise checkpoint.CheckpointError(f"{path}: vocabulary size {vocab.size} != config {cfg.vocab_size}")
        model = cls(cfg)
        load_exact(model, tensors, str(path))
        return model, vocab


def load_exact(module: nn.Module, tensors: dict[str, torch.Tensor], origin: str) -> None:
    own = module.state_dict()
    if set(own) != set(tensors):
        missing, unexpected = sorted(set(own) - set(tensors)), sorted(set(tensors) - set(own))
        raise checkpoint.CheckpointError(f"{origin}: tensor names differ (missing {missing}, unexpected {unexpected})")
    for name, t in tensors.items():
        if tuple(own[name].shape) != tuple(t.shape):
            raise checkpoint.CheckpointError(
                f"{origin}: shape mismatch for {name}: checkpoint {tuple(t.shape)} vs model {tuple(own[name].shape)}"
            )
    module.load_state_dict({k: t.to(own[k].dtype) for k, t in tensors.items()})


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def as_ids(ids) -> torch.Tensor:
    if isinstance(ids, TokenStream):
        ids = ids.ids
    if isinstance(ids, torch.Tensor):
        return ids.long()
    return torch.tensor(list(ids), dtype=torch.long)


def clm_loss(logits: torch.Tensor, targets, mask=None) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` over the positions ``mask`` keeps.

    ``logits[..., k, :]`` scores ``targets[..., k]``; shift before calling.
    """
    targets = as_ids(targets).to(logits.device)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    mask = torch.ones_like(targets, dtype=torch.bool) if mask is None else torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise ValueError("every position is masked out")
    nll = -logits.log_softmax(-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll[mask].mean()


def sequence_nll(
    model: Backbone, ids: torch.Tensor, mask: torch.Tensor, adaptation=None, task=None
) -> tuple[torch.Tensor, int]:
    """Summed next-token NLL and count; ``mask[..., k]`` selects target token k (k >= 1)."""
    logits = model(ids[..., :-1], adaptation, task)
    nll = -logits.log_softmax(-1).gather(-1, ids[..., 1:].unsqueeze(-1)).squeeze(-1)
    keep = mask[..., 1:]
    return nll[keep].sum(), int(keep.sum())


@torch.no_grad()
def generate(
    model: Backbone,
    adaptation,
    prompt: TokenStream | Sequence[int],
    max_new: int,
    temperature: float | None = None,
    seed: int = 0,
    task=None,
    with_logprobs: bool = False,
):
    """Extend ``prompt`` token by token until EOS or ``max_new`` tokens.

    Greedy when ``temperature`` is None, otherwise sampled from the
    temperature-scaled softmax with a generator seeded by ``seed``. Returns the
    full sequence (prompt included) as a TokenStream, plus the per-token
    log-probabilities of the generated tokens when ``with_logprobs`` is set.
    """
    role = prompt.role if isinstance(prompt, TokenStream) else None
    ids = list(prompt.ids if isinstance(prompt, TokenStream) else prompt)
    if len(ids) + max_new > model.cfg.max_context:
        raise ContextOverflow(
            f"prompt of {len(ids)} tokens plus {max_new} new exceeds max_context={model.cfg.max_context}"
        )
    g = torch.Generator().manual_seed(seed) if temperature is not None else None
    logprobs = []
    for _ in range(max_new):
        logits = model(torch.tensor(ids), adaptation, task)[-1]
        lp = logits.log_softmax(-1)
        if temperature is None:
            nxt = int(torch.argmax(lp))
        else:
            nxt = int(torch.multinomial((logits / temperature).softmax(-1), 1, generator=g))
        ids.append(nxt)
        logprobs.append(float(lp[nxt]))
        if nxt == EOS:
            break
    stream = TokenStream(tuple(ids), role) if role is not None else TokenStream(tuple(ids))
    return (stream, logprobs) if with_logprobs else stream


@torch.no_grad()
def perplexity(model: Backbone, adaptation, corpus: Sequence, masks: Sequence | None = None, task=None) -> float:
    """exp of the mean next-token NLL over every scored token in the corpus."""
    if not corpus:
        raise ValueError("perplexity of an empty corpus")
    total, count = 0.0, 0
    for k, seq in enumerate(corpus):
        ids = as_ids(seq)
        mask = torch.ones_like(ids, dtype=torch.bool) if masks is None else torch.as_tensor(masks[k], dtype=torch.bool)
        if len(ids) < 2:
            continue
        nll, n = sequence_nll(model, ids, mask, adaptation, task)
        total += float(nll)
        count += n
    if count == 0:
        raise ValueError("corpus has no scorable tokens")
    return math.exp(total / count)


def clone(model: Backbone) -> Backbone:
    return copy.deepcopy(model)
