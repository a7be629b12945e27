"""Edit similarity and embedding-based semantic similarity between code strings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from ..model import Backbone, ContextOverflow
from ..tokenizer import BOS, Role, Vocab


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance, two-row dynamic programme."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_similarity(a: str, b: str, unit: str = "char", vocab: Vocab | None = None,
                    role: Role = Role.SOURCE) -> float:
    """``1 - dist(a, b) / max(|a|, |b|)``; two empty strings score 1.

    ``unit="token"`` measures distance over tokenizer ids instead of characters.
    """
    if unit == "char":
        sa, sb = a, b
    elif unit == "token":
        if vocab is None:
            raise ValueError("token-level edit similarity needs a vocabulary")
        sa, sb = vocab.encode(a, role).ids, vocab.encode(b, role).ids
    else:
        raise ValueError(f"unknown unit {unit!r}")
    longest = max(len(sa), len(sb))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(sa, sb) / longest


@dataclass
class Embedder:
    """Contextual token vectors from the final layer of a backbone."""

    backbone: Backbone
    vocab: Vocab
    adaptation: object = None
    task: object = None

    @torch.no_grad()
    def token_vectors(self, text: str, role: Role = Role.SOURCE) -> tuple[tuple[int, ...], torch.Tensor]:
        ids = self.vocab.encode(text, role).ids
        if not ids:
            raise ValueError("string is empty after tokenization")
        if len(ids) + 1 > self.backbone.cfg.max_context:
            raise ContextOverflow(f"{len(ids)} tokens do not fit max_context={self.backbone.cfg.max_context}")
        hidden = self.backbone(torch.tensor((BOS,) + ids), self.adaptation, self.task, return_hidden=True)[1:]
        hidden = hidden.double()
        return ids, hidden / hidden.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def semantic_similarity(a: str, b: str, embedder: Embedder, role: Role = Role.SOURCE) -> float:
    """Greedy-matching F1 over token embeddings, in [0, 1].

    Every token of one string is matched to its most similar token in the
    other by cosine; precision and recall are the mean best-match cosines
    (each mapped from [-1, 1] to [0, 1]) and the score is their harmonic
    mean. Identical token sequences score exactly 1.
    """
    ids_a, ea = embedder.token_vectors(a, role)
    ids_b, eb = embedder.token_vectors(b, role)
    if ids_a == ids_b:
        return 1.0
    cos = (ea @ eb.T).clamp(-1.0, 1.0)
    recall = (float(cos.max(dim=1).values.mean()) + 1.0) / 2.0
    precision = (float(cos.max(dim=0).values.mean()) + 1.0) / 2.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
