"""Reference executor for the toy three-address assembly dialect.

Dialect::

    registers   r0 .. r7, 32-bit two's complement, all start at 0
    mov d, s    d <- s
    add d, s    d <- d + s          (sets Z when the result is 0)
    sub d, s    d <- d - s          (sets Z)
    mul d, s    d <- d * s          (sets Z)
    cmp a, s    Z <- (a == s)
    jmp L       jump to L
    jz  L       jump to L when Z is set
    ret s       halt with exit code s & 0xff

``s`` is a register or a decimal / ``0x`` immediate, ``d`` and ``a`` are
registers. ``L`` is a label defined by a ``name:`` line or a 0-based
instruction index. ``;`` starts a comment. Falling off the end of the program
is an error.
"""

from __future__ import annotations

import re

DEFAULT_BUDGET = 100_000
TOY_MNEMONICS = ("mov", "add", "sub", "mul", "cmp", "jmp", "jz", "ret")

_REG = re.compile(r"r([0-7])")
_LABEL = re.compile(r"([A-Za-z_.][A-Za-z0-9_.]*):")


class VMError(RuntimeError):
    pass


class UnknownInstruction(VMError):
    pass


class BudgetExceeded(VMError):
    pass


def _wrap32(v: int) -> int:
    v &= 0xFFFFFFFF
    return v - (1 << 32) if v & 0x80000000 else v


def _parse(asm: str) -> tuple[list[tuple[str, list[str], int]], dict[str, int]]:
    program, labels = [], {}
    for lineno, raw in enumerate(asm.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        m = _LABEL.match(line)
        if m:
            labels[m.group(1)] = len(program)
            line = line[m.end():].strip()
            if not line:
                continue
        op, _, rest = line.partition(" ")
        op = op.lower()
        if op not in TOY_MNEMONICS:
            raise UnknownInstruction(f"line {lineno}: unknown instruction {op!r}")
        args = [a.strip() for a in rest.split(",")] if rest.strip() else []
        program.append((op, args, lineno))
    return program, labels


def run_toy_vm(asm: str, budget: int = DEFAULT_BUDGET) -> int:
    """Execute toy assembly and return its exit code in [0, 255]."""
    program, labels = _parse(asm)
    regs = [0] * 8
    zero = False
    pc = 0
    steps = 0

    def reg(tok: str, lineno: int) -> int:
        m = _REG.fullmatch(tok)
        if not m:
            raise VMError(f"line {lineno}: expected register, got {tok!r}")
        return int(m.group(1))

    def value(tok: str, lineno: int) -> int:
        if _REG.fullmatch(tok):
            return regs[int(tok[1])]
        try:
            return _wrap32(int(tok, 0))
        except ValueError:
            raise VMError(f"line {lineno}: bad operand {tok!r}") from None

    def target(tok: str, lineno: int) -> int:
        if tok in labels:
            return labels[tok]
        try:
            return int(tok)
        except ValueError:
            raise VMError(f"line {lineno}: undefined label {tok!r}") from None

    arity = {"mov": 2, "add": 2, "sub": 2, "mul": 2, "cmp": 2, "jmp": 1, "jz": 1, "ret": 1}
    while True:
        if not 0 <= pc < len(program):
            raise VMError("control fell off the end of the program")
        if steps >= budget:
            raise BudgetExceeded(f"instruction budget of {budget} exhausted")
        steps += 1
        op, args, lineno = program[pc]
        if len(args) != arity[op]:
            raise VMError(f"line {lineno}: {op} takes {arity[op]} operand(s)")
        pc += 1
        if op == "ret":
            return value(args[0], lineno) & 0xFF
        if op == "jmp":
            pc = target(args[0], lineno)
        elif op == "jz":
            if zero:
                pc = target(args[0], lineno)
        elif op == "cmp":
            zero = regs[reg(args[0], lineno)] == value(args[1], lineno)
        else:
            d = reg(args[0], lineno)
            s = value(args[1], lineno)
            if op == "mov":
                regs[d] = s
                continue
            if op == "add":
                r = regs[d] + s
            elif op == "sub":
                r = regs[d] - s
            else:
                r = regs[d] * s
            regs[d] = _wrap32(r)
            zero = regs[d] == 0
