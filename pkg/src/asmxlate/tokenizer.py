"""Hybrid tokenizer: one token per leading instruction mnemonic, bytes otherwise.

ID layout: the six special tokens first, then the 256 byte tokens, then one
token per mnemonic. Source text is always byte-encoded. In assembly text the
first word of every line (after any indentation) becomes an opcode token when
it is a known mnemonic followed by whitespace or end of line; everything else,
newlines included, is emitted byte by byte, so decoding is lossless.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus.samples import Sample, Task
from .corpus.vm import TOY_MNEMONICS

DEFAULT_MAX_CONTEXT = 1024
VOCAB_FORMAT = "asmxlate-vocab/1"

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<asm2src>", "<src2asm>")
PAD, BOS, EOS, SEP, PREFIX_ASM2SRC, PREFIX_SRC2ASM = range(len(SPECIALS))
BYTE_OFFSET = len(SPECIALS)
TASK_PREFIX = {Task.ASM2SRC: PREFIX_ASM2SRC, Task.SRC2ASM: PREFIX_SRC2ASM}

# common x86 mnemonics as printed by IDA / Ghidra / objdump (Intel syntax)
X86_MNEMONICS = tuple(
    """
    push pop call ret retn leave enter nop int int3 hlt
    mov movzx movsx movsxd movsb movsw movsd movsq movabs lea xchg cmpxchg bswap
    add adc sub sbb imul mul idiv div inc dec neg not
    and or xor test cmp shl shr sal sar rol ror rcl rcr bt bts btr btc bsf bsr
    jmp je jne jz jnz ja jae jb jbe jg jge jl jle js jns jo jno jp jnp jc jnc jecxz jrcxz loop
    sete setne setz setnz seta setae setb setbe setg setge setl setle sets setns
    cmove cmovne cmovz cmovnz cmova cmovae cmovb cmovbe cmovg cmovge cmovl cmovle cmovs cmovns
    cdq cqo cwde cdqe cbw
    stosb stosw stosd stosq lodsb lodsd scasb cmpsb rep repe repne lock
    pushad popad pushfd popfd pushf popf cld std clc stc
    movd movq movaps movups movdqa movdqu pxor xorps addss subss mulss divss addsd subsd mulsd divsd cvtsi2sd cvttsd2si
    syscall sysenter cpuid rdtsc
    """.split()
)


class Role(str, enum.Enum):
    ASSEMBLY = "asm"
    SOURCE = "src"


def output_role(task: Task) -> Role:
    return Role.SOURCE if task is Task.ASM2SRC else Role.ASSEMBLY


def input_role(task: Task) -> Role:
    return Role.ASSEMBLY if task is Task.ASM2SRC else Role.SOURCE


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class TokenStream:
    ids: tuple[int, ...]
    role: Role = Role.SOURCE
    excluded: bool = False

    def __len__(self) -> int:
        return len(self.ids)


def _dedupe(words: Iterable[str]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for w in words:
        seen.setdefault(w, None)
    return tuple(seen)


@dataclass(frozen=True)
class Vocab:
    mnemonics: tuple[str, ...] = field(default_factory=lambda: _dedupe(TOY_MNEMONICS + X86_MNEMONICS))
    max_context: int = DEFAULT_MAX_CONTEXT
    mnemonic_source: str = "toy+x86-default"

    def __post_init__(self):
        if len(set(self.mnemonics)) != len(self.mnemonics):
            raise TokenizerError("duplicate mnemonics in vocabulary")
        missing = set(TOY_MNEMONICS) - set(self.mnemonics)
        if missing:
            raise TokenizerError(f"vocabulary lacks toy mnemonics {sorted(missing)}")
        object.__setattr__(self, "_opcode_ids", {m: BYTE_OFFSET + 256 + i for i, m in enumerate(self.mnemonics)})

    @property
    def size(self) -> int:
        return BYTE_OFFSET + 256 + len(self.mnemonics)

    @property
    def tokens(self) -> list[str]:
        return list(SPECIALS) + [f"<0x{b:02X}>" for b in range(256)] + [f"op:{m}" for m in self.mnemonics]

    def opcode_id(self, mnemonic: str) -> int | None:
        return self._opcode_ids.get(mnemonic)

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < BYTE_OFFSET

    def encode(self, text: str, role: Role = Role.SOURCE) -> TokenStream:
        data = text.encode("utf-8")
        if role is not Role.ASSEMBLY:
            return TokenStream(tuple(BYTE_OFFSET + b for b in data), role)
        ids: list[int] = []
        for k, line in enumerate(data.split(b"\n")):
            if k:
                ids.append(BYTE_OFFSET + 0x0A)
            body = line.lstrip(b" \t")
            indent = len(line) - len(body)
            ids.extend(BYTE_OFFSET + b for b in line[:indent])
            end = 0
            while end < len(body) and body[end] not in b" \t\r":
                end += 1
            opcode = self.opcode_id(body[:end].decode("utf-8", "replace")) if end else None
            if opcode is not None:
                ids.append(opcode)
                body = body[end:]
            ids.extend(BYTE_OFFSET + b for b in body)
        return TokenStream(tuple(ids), role)

    def decode(self, stream: TokenStream | Sequence[int]) -> str:
        ids = stream.ids if isinstance(stream, TokenStream) else stream
        out = bytearray()
        n_bytes_end = BYTE_OFFSET + 256
        for i in ids:
            if not 0 <= i < self.size:
                raise TokenizerError(f"token id {i} out of range for vocabulary of size {self.size}")
            if i < BYTE_OFFSET:
                continue
            if i < n_bytes_end:
                out.append(i - BYTE_OFFSET)
            else:
                out += self.mnemonics[i - n_bytes_end].encode("utf-8")
        return out.decode("utf-8", errors="replace")

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": VOCAB_FORMAT,
                "tokens": self.tokens,
                "max_context": self.max_context,
                "mnemonic_source": self.mnemonic_source,
            },
            indent=1,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, data: dict) -> "Vocab":
        if data.get("format") != VOCAB_FORMAT:
            raise TokenizerError(f"unsupported vocabulary format {data.get('format')!r}")
        tokens = data["tokens"]
        expected_head = list(SPECIALS) + [f"<0x{b:02X}>" for b in range(256)]
        if tokens[: len(expected_head)] != expected_head:
            raise TokenizerError("vocabulary does not start with the fixed special and byte tokens")
        tail = tokens[len(expected_head):]
        if not all(t.startswith("op:") for t in tail):
            raise TokenizerError("non-opcode token after the byte range")
        return cls(tuple(t[3:] for t in tail), int(data["max_context"]), data.get("mnemonic_source", ""))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def count_specials(n_prefix: int = 1) -> int:
    """BOS, SEP and EOS plus the task-prefix slots."""
    return 3 + n_prefix


def sequence_length(vocab: Vocab, sample: Sample, n_prefix: int = 1) -> int:
    x = vocab.encode(sample.input_text, input_role(sample.task))
    y = vocab.encode(sample.output_text, output_role(sample.task))
    return len(x) + len(y) + count_specials(n_prefix)


def filter_by_length(
    samples: Sequence[Sample], vocab: Vocab, max_context: int | None = None, n_prefix: int = 1
) -> tuple[list[Sample], list[Sample]]:
    """Split samples into those that fit the context whole and those that do not.

    Nothing is ever truncated: an over-length sample is excluded outright.
    """
    max_context = vocab.max_context if max_context is None else max_context
    if max_context < 1:
        raise ValueError("max_context must be >= 1")
    kept, excluded = [], []
    for s in samples:
        (kept if sequence_length(vocab, s, n_prefix) <= max_context else excluded).append(s)
    return kept, excluded


def build_prompt(vocab: Vocab, text: str, task: Task, use_prefix: bool, n_prefix: int = 1) -> list[int]:
    """``[BOS, (task prefix x n_prefix), input..., SEP]``."""
    head = [BOS] + ([TASK_PREFIX[task]] * n_prefix if use_prefix else [])
    return head + list(vocab.encode(text, input_role(task)).ids) + [SEP]


def build_example(vocab: Vocab, sample: Sample, use_prefix: bool, n_prefix: int = 1) -> tuple[list[int], list[bool]]:
    """Token ids for a supervised pair and the mask of positions whose token is a training target.

    Only the output segment and the closing EOS are targets.
    """
    prompt = build_prompt(vocab, sample.input_text, sample.task, use_prefix, n_prefix)
    target = list(vocab.encode(sample.output_text, output_role(sample.task)).ids) + [EOS]
    return prompt + target, [False] * len(prompt) + [True] * len(target)


def clm_ids(vocab: Vocab, text: str, role: Role) -> list[int]:
    return [BOS] + list(vocab.encode(text, role).ids) + [EOS]
