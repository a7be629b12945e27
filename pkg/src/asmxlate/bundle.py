"""A frozen backbone, its vocabulary and an optional adaptation state, used together for inference."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .adaptation import AdaptationState, Strategy
from .corpus.samples import Sample, Task
from .model import Backbone, ContextOverflow, generate, sequence_nll
from .tokenizer import EOS, Vocab, build_example, build_prompt


class TranslationRefused(ContextOverflow):
    """The input leaves no room in the context window for any output."""


@dataclass
class ModelBundle:
    backbone: Backbone
    vocab: Vocab
    adaptation: AdaptationState | None = None

    @property
    def uses_prefix(self) -> bool:
        return self.adaptation is not None and self.adaptation.strategy is Strategy.SEQ2SEQ

    @property
    def n_prefix(self) -> int:
        return self.adaptation.n_prefix if self.adaptation is not None else 1

    @property
    def max_context(self) -> int:
        return min(self.backbone.cfg.max_context, self.vocab.max_context)

    def prompt(self, text: str, task: Task) -> list[int]:
        return build_prompt(self.vocab, text, task, self.uses_prefix, self.n_prefix)

    def routed_task(self, task: Task) -> Task | None:
        """Task handed to the backbone, or None when the state cannot route it."""
        if self.adaptation is None or not self.adaptation.has_task(task):
            return None
        return task

    @classmethod
    def load(cls, backbone_path: str | Path, adaptation_path: str | Path | None = None) -> "ModelBundle":
        backbone, vocab = Backbone.load(backbone_path)
        backbone.freeze()
        state = AdaptationState.load(adaptation_path, backbone.cfg) if adaptation_path else None
        return cls(backbone, vocab, state)


def translate(bundle: ModelBundle, text: str, task: Task, temperature: float | None = None, seed: int = 0,
              max_new: int | None = None) -> str:
    """Generate the translation of ``text`` for ``task``.

    Decoding is greedy unless a temperature is given; sampling is seeded. The
    input is never truncated: if the prompt cannot fit together with at least
    one output token, TranslationRefused is raised.
    """
    task = Task(task)
    if bundle.adaptation is not None and not bundle.adaptation.has_task(task):
        raise ValueError(f"adaptation state has no parameters for task {task.value!r}")
    prompt = bundle.prompt(text, task)
    room = bundle.max_context - len(prompt)
    if room < 1:
        raise TranslationRefused(
            f"input needs {len(prompt)} tokens with its special tokens, which leaves no room for output in the "
            f"{bundle.max_context}-token context; inputs are never truncated"
        )
    max_new = room if max_new is None else min(max_new, room)
    out = generate(bundle.backbone, bundle.adaptation, prompt, max_new, temperature, seed, bundle.routed_task(task))
    body = list(out.ids[len(prompt):])
    if body and body[-1] == EOS:
        body.pop()
    return bundle.vocab.decode(body)


@torch.no_grad()
def conditional_nll(bundle: ModelBundle, sample: Sample, use_prefix: bool | None = None) -> tuple[float, int]:
    """Summed NLL of the output segment (plus EOS) given the input, and the token count.

    ``use_prefix`` overrides the bundle's own layout so that two bundles can be
    scored on identical token sequences.
    """
    use_prefix = bundle.uses_prefix if use_prefix is None else use_prefix
    ids, mask = build_example(bundle.vocab, sample, use_prefix, bundle.n_prefix)
    if len(ids) > bundle.backbone.cfg.max_context:
        raise ContextOverflow(f"sample {sample.id!r} needs {len(ids)} tokens")
    nll, n = sequence_nll(bundle.backbone, torch.tensor(ids), torch.tensor(mask), bundle.adaptation,
                          bundle.routed_task(sample.task))
    return float(nll), n

