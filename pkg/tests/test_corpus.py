import json
import re

import pytest
from hypothesis import given, settings, strategies as st

from asmxlate.corpus import (
    BudgetExceeded,
    CorpusError,
    NormalizationConfig,
    Sample,
    Task,
    UnknownInstruction,
    VMError,
    compile_to_asm,
    dumps_jsonl,
    gen_mini_corpus,
    ingest_jsonl,
    interpret,
    normalize_asm,
    programs_to_samples,
    run_toy_vm,
    write_jsonl,
)
from asmxlate.corpus.normalize import REGISTERS


# -- ingestion ------------------------------------------------------------


def test_ingest_maps_fields(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps({"src": "int f(){return 1;}", "asm": "mov eax, 1\nret", "task": "asm2src"}) + "\n")
    [s] = ingest_jsonl(p)
    assert s.input_text == "mov eax, 1\nret"
    assert s.output_text == "int f(){return 1;}"
    assert s.task is Task.ASM2SRC


def test_ingest_src2asm_direction(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps({"src": "S", "asm": "A", "task": "src2asm", "id": "x"}) + "\n")
    [s] = ingest_jsonl(p)
    assert (s.input_text, s.output_text, s.id) == ("S", "A", "x")


def test_ingest_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert ingest_jsonl(p) == []


def test_ingest_unknown_task_names_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"src": "a", "asm": "b", "task": "bogus"}) + "\n")
    with pytest.raises(CorpusError, match=r":1: unknown task 'bogus'"):
        ingest_jsonl(p)


def test_ingest_reports_every_bad_line(tmp_path):
    good = json.dumps({"src": "a", "asm": "b", "task": "asm2src"})
    p = tmp_path / "bad.jsonl"
    p.write_text(f"{good}\n{{not json\n{good}\n{json.dumps({'src': 'a'})}\n")
    with pytest.raises(CorpusError) as exc:
        ingest_jsonl(p)
    assert ":2: malformed JSON" in str(exc.value)
    assert ":4: missing keys" in str(exc.value)


def test_ingest_missing_file(tmp_path):
    with pytest.raises(CorpusError, match="not found"):
        ingest_jsonl(tmp_path / "nope.jsonl")


def test_sample_rejects_empty_sides():
    with pytest.raises(ValueError):
        Sample("", "x", Task.ASM2SRC)


_texts = st.text(min_size=1, max_size=40)


@given(st.lists(st.tuples(_texts, _texts, st.sampled_from(list(Task)), st.text(max_size=8)), max_size=8))
@settings(max_examples=60, deadline=None)
def test_ingest_round_trip(tmp_path_factory, rows):
    samples = [Sample.from_pair(src, asm, task, id) for src, asm, task, id in rows]
    path = tmp_path_factory.mktemp("rt") / "c.jsonl"
    write_jsonl(samples, path)
    assert ingest_jsonl(path) == samples


# -- normalization --------------------------------------------------------


def test_canonicalize_casing_and_spacing():
    assert normalize_asm("MOV  EAX,0X1F", NormalizationConfig(canonicalize=True)) == "mov eax, 0x1f"


def test_canonicalize_literal_forms():
    cfg = NormalizationConfig()
    assert normalize_asm("Add ECX , 1Fh ; bump", cfg) == "add ecx, 0x1f"
    assert normalize_asm("mov eax,  DWORD PTR [EBP +  8]", cfg) == "mov eax, dword ptr [ebp + 8]"
    assert normalize_asm("\n\n  RET  \n", cfg) == "ret"
    assert normalize_asm("REP MOVSB", cfg) == "rep movsb"
    assert normalize_asm("call _CreateFileA@28", cfg) == "call _CreateFileA@28"


def test_rename_first_appearance():
    cfg = NormalizationConfig(canonicalize=False, rename_registers=True)
    assert normalize_asm("mov eax, ebx\nadd eax, ebx", cfg) == "mov REG0, REG1\nadd REG0, REG1"


def test_rename_is_case_insensitive_per_register():
    cfg = NormalizationConfig(canonicalize=False, rename_registers=True)
    assert normalize_asm("mov EAX, ecx\nxor eax, ECX", cfg) == "mov REG0, REG1\nxor REG0, REG1"


def test_address_placeholders_are_consistent_and_seeded():
    asm = "call FUN_00401000\nmov eax, [0x00402000]\njmp 0x402000\ncall FUN_00401000\nadd eax, 0x10"
    cfg = NormalizationConfig(randomize_addresses=True, rng_seed=11)
    a = normalize_asm(asm, cfg)
    assert a == normalize_asm(asm, cfg)
    lines = a.split("\n")
    assert len(re.findall(r"ADDR_\d+", a)) == 4
    assert len(set(re.findall(r"ADDR_\d+", a))) == 2
    assert lines[0].split()[1] == lines[3].split()[1]
    # leading zeros do not make a different literal
    assert re.findall(r"ADDR_\d+", lines[1])[0] == lines[2].split()[1]
    assert lines[0].split()[1] != lines[2].split()[1]
    # small immediates are not addresses
    assert lines[4] == "add eax, 0x10"
    assert normalize_asm(asm, NormalizationConfig(randomize_addresses=True, rng_seed=12)) != a


_REG_NAMES = sorted(REGISTERS)
_MNEMONICS = ["MOV", "add", "Xor", "push", "cmp", "lea", "jmp", "ret"]


@st.composite
def asm_text(draw):
    lines = []
    for _ in range(draw(st.integers(1, 6))):
        mnem = draw(st.sampled_from(_MNEMONICS))
        ops = []
        for _ in range(draw(st.integers(0, 2))):
            kind = draw(st.sampled_from(["reg", "hex", "dec", "mem", "label"]))
            if kind == "reg":
                r = draw(st.sampled_from(_REG_NAMES))
                ops.append(r.upper() if draw(st.booleans()) else r)
            elif kind == "hex":
                ops.append(draw(st.sampled_from(["0x", "0X"])) + format(draw(st.integers(0, 2**32)), "X"))
            elif kind == "dec":
                ops.append(str(draw(st.integers(0, 999))))
            elif kind == "mem":
                ops.append(f"[{draw(st.sampled_from(_REG_NAMES))} + {draw(st.integers(0, 64))}]")
            else:
                ops.append(f"FUN_{draw(st.integers(0x401000, 0x40ffff)):08X}")
        sep = draw(st.sampled_from([",", " ,", ",  "]))
        lines.append(draw(st.sampled_from(["", "  ", "\t"])) + mnem + draw(st.sampled_from([" ", "   "])) + sep.join(ops))
    return "\n".join(lines)


@given(asm_text(), st.booleans(), st.booleans())
@settings(max_examples=200, deadline=None)
def test_normalization_idempotent(asm, canon, rename):
    cfg = NormalizationConfig(canonicalize=canon, rename_registers=rename, randomize_addresses=False)
    once = normalize_asm(asm, cfg)
    assert normalize_asm(once, cfg) == once


@given(asm_text(), st.integers(0, 2**64 - 1))
@settings(max_examples=100, deadline=None)
def test_normalization_deterministic(asm, seed):
    cfg = NormalizationConfig(rename_registers=True, randomize_addresses=True, rng_seed=seed)
    assert normalize_asm(asm, cfg) == normalize_asm(asm, cfg)


def _first_appearance_oracle(asm: str) -> dict[str, str]:
    order: list[str] = []
    for tok in re.findall(r"[A-Za-z_][A-Za-z0-9_]*", asm):
        if tok.lower() in REGISTERS and tok.lower() not in order:
            order.append(tok.lower())
    return {r: f"REG{i}" for i, r in enumerate(order)}


@given(asm_text())
@settings(max_examples=200, deadline=None)
def test_rename_is_bijection(asm):
    cfg = NormalizationConfig(canonicalize=False, rename_registers=True)
    expected = _first_appearance_oracle(asm)
    assert len(set(expected.values())) == len(expected)
    out = normalize_asm(asm, cfg)
    # rebuilding the text from the oracle mapping must give the same result
    rebuilt = re.sub(
        r"\b[A-Za-z_][A-Za-z0-9_]*\b",
        lambda m: expected.get(m.group(0).lower(), m.group(0)),
        asm,
    )
    assert out == rebuilt


# -- toy VM -----------------------------------------------------------------


def test_vm_mov_ret():
    assert run_toy_vm("mov r0, 7\nret r0") == 7


def test_vm_default_registers_zero():
    assert run_toy_vm("ret r0") == 0


def test_vm_infinite_loop_hits_budget():
    with pytest.raises(BudgetExceeded):
        run_toy_vm("top:\njmp top", budget=1000)


def test_vm_unknown_instruction():
    with pytest.raises(UnknownInstruction):
        run_toy_vm("push r0\nret r0")


def test_vm_falls_off_end():
    with pytest.raises(VMError):
        run_toy_vm("mov r0, 1")


def test_vm_loop_with_labels():
    # r0 accumulates 5+4+3+2+1 = 15
    asm = """
        mov r1, 5      ; counter
    loop:
        add r0, r1
        sub r1, 1
        jz done
        jmp loop
    done:
        ret r0
    """
    assert run_toy_vm(asm) == 15


def test_vm_wraps_exit_code():
    assert run_toy_vm("mov r0, 0\nsub r0, 3\nret r0") == 253
    assert run_toy_vm("mov r0, 300\nret r0") == 44
    assert run_toy_vm("mov r1, 2\ncmp r1, 2\njz 4\nret 1\nret 9") == 9


# -- mini corpus ----------------------------------------------------------


def test_return_sum_compiles_to_five():
    asm = compile_to_asm("return 2+3;")
    assert run_toy_vm(asm) == 5
    assert interpret("return 2+3;") == 5


def test_return_zero():
    assert interpret("return 0;") == 0
    assert run_toy_vm(compile_to_asm("int main() { return 0; }")) == 0


def test_interpreter_precedence_and_negation():
    src = "int main() { int a = 2 + 3 * 4; int b = -(a - 20); a = a * b; return a - (b - 1); }"
    # a = 14, b = 6, a = 84, result 84 - 5 = 79
    assert interpret(src) == 79
    assert run_toy_vm(compile_to_asm(src)) == 79


def test_gen_deterministic():
    assert gen_mini_corpus(10, 42) == gen_mini_corpus(10, 42)
    assert gen_mini_corpus(10, 42) != gen_mini_corpus(10, 43)


def test_gen_rejects_zero():
    with pytest.raises(ValueError):
        gen_mini_corpus(0, 1)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_semantic_agreement(seed):
    for prog in gen_mini_corpus(100, seed):
        assert interpret(prog.source) == run_toy_vm(prog.asm) == prog.expected_exit_code
        assert 0 <= prog.expected_exit_code <= 255


def test_programs_to_samples_both_directions():
    progs = gen_mini_corpus(3, 5)
    samples = programs_to_samples(progs)
    assert len(samples) == 6
    assert [s.task for s in samples] == [Task.ASM2SRC, Task.SRC2ASM] * 3
    assert samples[0].input_text == progs[0].asm and samples[1].input_text == progs[0].source
    assert dumps_jsonl(samples) == dumps_jsonl(programs_to_samples(gen_mini_corpus(3, 5)))
