"""Assembly text normalization: canonical formatting, register renaming,
address placeholder substitution.

Rules, applied in that order:

* canonicalize -- comments stripped, blank lines dropped, mnemonic and register
  names lower-cased, one space between mnemonic and operands, ``", "`` between
  operands, hex literals rewritten as lowercase ``0x`` form (``0X1F``, ``1Fh``
  and ``0x001f`` all become ``0x1f``).
* randomize_addresses -- absolute address literals (hex literals >= 0x10000 and
  disassembler labels such as ``FUN_00401000`` / ``sub_401000``) become
  ``ADDR_<k>``; ``k`` is drawn without replacement from a pool shuffled by the
  seed, one placeholder per distinct literal.
* rename_registers -- registers become ``REG0, REG1, ...`` in order of first
  appearance within the input.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass

X86_REGISTERS = frozenset(
    """
    rax rbx rcx rdx rsi rdi rbp rsp rip
    eax ebx ecx edx esi edi ebp esp eip
    ax bx cx dx si di bp sp ip
    al bl cl dl ah bh ch dh sil dil bpl spl
    cs ds es fs gs ss
    """.split()
    + [f"r{i}{s}" for i in range(8, 16) for s in ("", "d", "w", "b")]
    + [f"xmm{i}" for i in range(16)]
    + [f"ymm{i}" for i in range(16)]
    + [f"st{i}" for i in range(8)]
)
TOY_REGISTERS = frozenset(f"r{i}" for i in range(8))
REGISTERS = X86_REGISTERS | TOY_REGISTERS

SIZE_KEYWORDS = frozenset("byte word dword qword tword xmmword ptr short near far offset".split())
PREFIXES = frozenset("rep repe repz repne repnz lock".split())

ADDRESS_POOL_SIZE = 4096
ADDRESS_MIN = 0x10000

_IDENT = re.compile(r"\b[A-Za-z_][A-Za-z0-9_]*\b")
_HEX_C = re.compile(r"\b0[xX]([0-9A-Fa-f]+)\b")
_HEX_MASM = re.compile(r"\b([0-9][0-9A-Fa-f]*)[hH]\b")
_PLACEHOLDER_REG = re.compile(r"REG\d+")
_ADDRESS = re.compile(
    r"\b(?:0[xX][0-9A-Fa-f]+|(?:FUN|LAB|DAT|PTR|sub|loc|off|unk|byte|word|dword|qword)_[0-9A-Fa-f]{4,})\b"
)


@dataclass(frozen=True)
class NormalizationConfig:
    canonicalize: bool = True
    rename_registers: bool = False
    randomize_addresses: bool = False
    rng_seed: int = 0


def is_register(token: str) -> bool:
    return token.lower() in REGISTERS or _PLACEHOLDER_REG.fullmatch(token) is not None


def _split_operands(text: str) -> list[str]:
    ops, depth, cur = [], 0, []
    for ch in text:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth = max(depth - 1, 0)
        if ch == "," and depth == 0:
            ops.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    ops.append("".join(cur))
    return [" ".join(op.split()) for op in ops]


def _lower_known(match: re.Match) -> str:
    word = match.group(0)
    low = word.lower()
    if low in REGISTERS or low in SIZE_KEYWORDS:
        return low
    return word


def _canon_operand(op: str) -> str:
    op = _HEX_C.sub(lambda m: hex(int(m.group(1), 16)), op)
    op = _HEX_MASM.sub(lambda m: hex(int(m.group(1), 16)), op)
    return _IDENT.sub(_lower_known, op)


def canonicalize_line(line: str) -> str:
    line = line.split(";", 1)[0].strip()
    if not line:
        return ""
    head, _, rest = line.partition(" ")
    if head.endswith(":"):
        tail = canonicalize_line(rest)
        return f"{head} {tail}" if tail else head
    words = line.split(None, 1)
    mnemonic = words[0].lower()
    rest = words[1] if len(words) > 1 else ""
    if mnemonic in PREFIXES and rest:
        nxt = rest.split(None, 1)
        mnemonic = f"{mnemonic} {nxt[0].lower()}"
        rest = nxt[1] if len(nxt) > 1 else ""
    if not rest.strip():
        return mnemonic
    operands = [_canon_operand(op) for op in _split_operands(rest)]
    return f"{mnemonic} {', '.join(operands)}"


def canonicalize(asm: str) -> str:
    lines = (canonicalize_line(line) for line in asm.splitlines())
    return "\n".join(line for line in lines if line)


def _is_address(literal: str) -> bool:
    if literal[:2].lower() == "0x":
        return int(literal, 16) >= ADDRESS_MIN
    return True


def randomize_addresses(asm: str, seed: int) -> str:
    rng = random.Random(seed)
    pool: list[int] = []
    mapping: dict[str, str] = {}

    def draw() -> int:
        if not pool:
            base = len(mapping) // ADDRESS_POOL_SIZE * ADDRESS_POOL_SIZE
            pool.extend(rng.sample(range(base, base + ADDRESS_POOL_SIZE), ADDRESS_POOL_SIZE))
        return pool.pop()

    def sub(m: re.Match) -> str:
        lit = m.group(0)
        if not _is_address(lit):
            return lit
        key = lit.lower()
        if key.startswith("0x"):
            key = hex(int(key, 16))
        if key not in mapping:
            mapping[key] = f"ADDR_{draw()}"
        return mapping[key]

    return _ADDRESS.sub(sub, asm)


def rename_registers(asm: str) -> str:
    mapping: dict[str, str] = {}

    def sub(m: re.Match) -> str:
        tok = m.group(0)
        if not is_register(tok):
            return tok
        key = tok if _PLACEHOLDER_REG.fullmatch(tok) else tok.lower()
        if key not in mapping:
            mapping[key] = f"REG{len(mapping)}"
        return mapping[key]

    return _IDENT.sub(sub, asm)


def normalize_asm(asm: str, cfg: NormalizationConfig = NormalizationConfig()) -> str:
    if cfg.canonicalize:
        asm = canonicalize(asm)
    if cfg.randomize_addresses:
        asm = randomize_addresses(asm, cfg.rng_seed)
    if cfg.rename_registers:
        asm = rename_registers(asm)
    return asm
