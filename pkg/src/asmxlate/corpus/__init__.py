from .minilang import MiniLangError, MiniProgram, compile_to_asm, gen_mini_corpus, interpret, make_program, parse
from .normalize import NormalizationConfig, normalize_asm
from .samples import CorpusError, Sample, Task, dumps_jsonl, ingest_jsonl, parse_records, write_jsonl
from .vm import TOY_MNEMONICS, BudgetExceeded, UnknownInstruction, VMError, run_toy_vm


def programs_to_samples(programs: list[MiniProgram]) -> list[Sample]:
    """Both translation directions for every program, ids ``p<k>-<task>``."""
    out = []
    for k, prog in enumerate(programs):
        for task in Task:
            out.append(Sample.from_pair(prog.source, prog.asm, task, f"p{k}-{task.value}"))
    return out
