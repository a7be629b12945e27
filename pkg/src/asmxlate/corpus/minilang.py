"""A tiny C subset with an interpreter and a code generator for the toy VM.

Grammar::

    program := "int" "main" "(" ")" "{" stmt* "}"  |  stmt*
    stmt    := "int" NAME "=" expr ";" | NAME "=" expr ";" | "return" expr ";"
    expr    := term (("+" | "-") term)*
    term    := unary ("*" unary)*
    unary   := "-" unary | INT | NAME | "(" expr ")"

Arithmetic is 32-bit two's complement; the exit code is the returned value
masked to 8 bits, which is what a hosted C compiler yields as well as long as
no intermediate overflows (the generator guarantees that).
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Union

from .vm import _wrap32, run_toy_vm

TEMP_REGS = 4  # r0..r3 evaluate expressions
VAR_BASE = 4  # r4..r7 hold locals
MAX_VARS = 4


class MiniLangError(ValueError):
    pass


@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Num, Var, Neg, BinOp]


@dataclass(frozen=True)
class Decl:
    name: str
    expr: Expr
    declare: bool = True


@dataclass(frozen=True)
class Return:
    expr: Expr


Stmt = Union[Decl, Return]

_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_]\w*)|(\S))")


def _tokenize(text: str) -> list[str]:
    toks, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            break
        toks.append(m.group(m.lastindex))
        pos = m.end()
    return toks


class _Parser:
    def __init__(self, toks: list[str]):
        self.toks = toks
        self.i = 0

    def peek(self) -> str | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, expected: str | None = None) -> str:
        tok = self.peek()
        if tok is None or (expected is not None and tok != expected):
            raise MiniLangError(f"expected {expected or 'token'!r}, got {tok!r}")
        self.i += 1
        return tok

    def program(self) -> list[Stmt]:
        wrapped = self.toks[:4] == ["int", "main", "(", ")"]
        if wrapped:
            self.i = 4
            self.take("{")
        stmts = []
        while self.peek() is not None and self.peek() != "}":
            stmts.append(self.stmt())
        if wrapped:
            self.take("}")
        if self.peek() is not None:
            raise MiniLangError(f"trailing input at {self.peek()!r}")
        return stmts

    def stmt(self) -> Stmt:
        tok = self.peek()
        if tok == "return":
            self.take()
            e = self.expr()
            self.take(";")
            return Return(e)
        declare = tok == "int"
        if declare:
            self.take()
        name = self.take()
        if not re.fullmatch(r"[A-Za-z_]\w*", name):
            raise MiniLangError(f"bad variable name {name!r}")
        self.take("=")
        e = self.expr()
        self.take(";")
        return Decl(name, e, declare)

    def expr(self) -> Expr:
        e = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            e = BinOp(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek() == "*":
            self.take()
            e = BinOp("*", e, self.unary())
        return e

    def unary(self) -> Expr:
        tok = self.take()
        if tok == "-":
            return Neg(self.unary())
        if tok == "(":
            e = self.expr()
            self.take(")")
            return e
        if tok.isdigit():
            return Num(int(tok))
        if re.fullmatch(r"[A-Za-z_]\w*", tok) and tok not in ("int", "return"):
            return Var(tok)
        raise MiniLangError(f"unexpected token {tok!r}")


def parse(source: str) -> list[Stmt]:
    return _Parser(_tokenize(source)).program()


def _eval(e: Expr, env: dict[str, int]) -> int:
    if isinstance(e, Num):
        return _wrap32(e.value)
    if isinstance(e, Var):
        if e.name not in env:
            raise MiniLangError(f"undefined variable {e.name!r}")
        return env[e.name]
    if isinstance(e, Neg):
        return _wrap32(-_eval(e.operand, env))
    a, b = _eval(e.left, env), _eval(e.right, env)
    return _wrap32(a + b if e.op == "+" else a - b if e.op == "-" else a * b)


def interpret(source: str | list[Stmt]) -> int:
    """Run a program directly on its AST; returns the exit code in [0, 255]."""
    stmts = parse(source) if isinstance(source, str) else source
    env: dict[str, int] = {}
    for st in stmts:
        if isinstance(st, Return):
            return _eval(st.expr, env) & 0xFF
        if not st.declare and st.name not in env:
            raise MiniLangError(f"assignment to undeclared {st.name!r}")
        env[st.name] = _eval(st.expr, env)
    raise MiniLangError("program has no return statement")


class _CodeGen:
    def __init__(self):
        self.lines: list[str] = []
        self.vars: dict[str, int] = {}

    def operand(self, e: Expr) -> str | None:
        if isinstance(e, Num):
            return str(e.value)
        if isinstance(e, Var):
            if e.name not in self.vars:
                raise MiniLangError(f"undefined variable {e.name!r}")
            return f"r{self.vars[e.name]}"
        return None

    def expr(self, e: Expr, dst: int, free: int) -> None:
        leaf = self.operand(e)
        if leaf is not None:
            self.lines.append(f"mov r{dst}, {leaf}")
            return
        if isinstance(e, Neg):
            self.expr(e.operand, dst, free)
            self.lines.append(f"mul r{dst}, -1")
            return
        op = {"+": "add", "-": "sub", "*": "mul"}[e.op]
        self.expr(e.left, dst, free)
        rhs = self.operand(e.right)
        if rhs is None:
            if free >= TEMP_REGS:
                raise MiniLangError("expression too deep for the temporary registers")
            self.expr(e.right, free, free + 1)
            rhs = f"r{free}"
        self.lines.append(f"{op} r{dst}, {rhs}")

    def stmt(self, st: Stmt) -> None:
        if isinstance(st, Return):
            self.expr(st.expr, 0, 1)
            self.lines.append("ret r0")
            return
        leaf = self.operand(st.expr)
        if st.name not in self.vars:
            if not st.declare:
                raise MiniLangError(f"assignment to undeclared {st.name!r}")
            if len(self.vars) >= MAX_VARS:
                raise MiniLangError("too many local variables")
            self.vars[st.name] = VAR_BASE + len(self.vars)
        reg = self.vars[st.name]
        if leaf is not None:
            self.lines.append(f"mov r{reg}, {leaf}")
        else:
            self.expr(st.expr, 0, 1)
            self.lines.append(f"mov r{reg}, r0")


def compile_to_asm(source: str | list[Stmt]) -> str:
    stmts = parse(source) if isinstance(source, str) else source
    gen = _CodeGen()
    for st in stmts:
        gen.stmt(st)
        if isinstance(st, Return):
            break
    else:
        raise MiniLangError("program has no return statement")
    return "\n".join(gen.lines)


def render_expr(e: Expr) -> str:
    if isinstance(e, Num):
        return str(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        inner = render_expr(e.operand)
        return f"-({inner})" if isinstance(e.operand, BinOp) else f"-{inner}"
    left = render_expr(e.left)
    right = render_expr(e.right)
    if isinstance(e.left, BinOp) and e.op == "*" and e.left.op != "*":
        left = f"({left})"
    if isinstance(e.right, BinOp) and (e.op == "*" or e.op == "-" or e.right.op != "*"):
        right = f"({right})"
    return f"{left} {e.op} {right}"


def render(stmts: list[Stmt]) -> str:
    parts = []
    for st in stmts:
        if isinstance(st, Return):
            parts.append(f"return {render_expr(st.expr)};")
        else:
            parts.append(f"{'int ' if st.declare else ''}{st.name} = {render_expr(st.expr)};")
    return "int main() { " + " ".join(parts) + " }"


@dataclass(frozen=True)
class MiniProgram:
    source: str
    asm: str
    expected_exit_code: int


VAR_NAMES = ("a", "b", "c", "d")
_VALUE_BOUND = 1 << 20


def _random_expr(rng: random.Random, names: list[str], depth: int) -> Expr:
    if depth == 0 or rng.random() < 0.35:
        if names and rng.random() < 0.5:
            return Var(rng.choice(names))
        return Num(rng.randint(0, 9))
    op = rng.choice("+-*")
    return BinOp(op, _random_expr(rng, names, depth - 1), _random_expr(rng, names, depth - 1))


def _bounded(e: Expr, env: dict[str, int]) -> bool:
    if isinstance(e, BinOp):
        if not (_bounded(e.left, env) and _bounded(e.right, env)):
            return False
    if isinstance(e, Neg) and not _bounded(e.operand, env):
        return False
    return abs(_eval(e, env)) < _VALUE_BOUND


def random_program(rng: random.Random, max_vars: int = 3, max_depth: int = 2) -> list[Stmt]:
    while True:
        stmts: list[Stmt] = []
        env: dict[str, int] = {}
        names: list[str] = []
        ok = True
        for name in VAR_NAMES[: rng.randint(0, max_vars)]:
            e = _random_expr(rng, names, max_depth)
            if not _bounded(e, env):
                ok = False
                break
            env[name] = _eval(e, env)
            stmts.append(Decl(name, e))
            names.append(name)
        ret = _random_expr(rng, names, max_depth)
        if ok and _bounded(ret, env):
            stmts.append(Return(ret))
            return stmts


def make_program(source: str) -> MiniProgram:
    stmts = parse(source)
    asm = compile_to_asm(stmts)
    code = interpret(stmts)
    if run_toy_vm(asm) != code:
        raise AssertionError(f"code generator disagrees with interpreter on {source!r}")
    return MiniProgram(source, asm, code)


def gen_mini_corpus(n: int, rng_seed: int = 0, max_vars: int = 3, max_depth: int = 2) -> list[MiniProgram]:
    """``n`` random programs, each paired with its toy assembly and exit code.

    Deterministic in ``rng_seed``; duplicate programs are skipped so every
    source text in the result is distinct.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(rng_seed)
    seen: set[str] = set()
    out = []
    while len(out) < n:
        source = render(random_program(rng, max_vars, max_depth))
        if source in seen:
            continue
        seen.add(source)
        out.append(make_program(source))
    return out
