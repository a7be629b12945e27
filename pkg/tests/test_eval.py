import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asmxlate.adaptation import AdaptationState
from asmxlate.bundle import ModelBundle, TranslationRefused, conditional_nll, translate
from asmxlate.corpus import Sample, Task
from asmxlate.eval import (
    Embedder,
    SandboxConfig,
    SandboxUnavailable,
    compare_perplexity,
    edit_similarity,
    evaluate_corpus,
    levenshtein,
    reexecutability,
    semantic_similarity,
)
from asmxlate.model import Backbone, ContextOverflow, ModelConfig
from asmxlate.tokenizer import Role, Vocab

from c_programs import BAD, GOOD
from oracles import levenshtein_bruteforce

FAST = SandboxConfig(time_limit=1.0)

short_text = st.text(alphabet="abcx \n", max_size=8)


@pytest.fixture(scope="module")
def small_bundle():
    vocab = Vocab(max_context=256)
    cfg = ModelConfig(vocab.size, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_context=256)
    return ModelBundle(Backbone(cfg, seed=3).freeze(), vocab)


# -- edit similarity --------------------------------------------------------


@given(short_text, short_text)
@settings(max_examples=300, deadline=None)
def test_levenshtein_matches_recursive_definition(a, b):
    assert levenshtein(a, b) == levenshtein_bruteforce(a, b)


@given(short_text, short_text)
@settings(max_examples=200, deadline=None)
def test_edit_similarity_bounds_and_symmetry(a, b):
    s = edit_similarity(a, b)
    assert 0.0 <= s <= 1.0
    assert s == edit_similarity(b, a)
    assert (s == 1.0) == (a == b)


def test_edit_similarity_edge_cases():
    assert edit_similarity("", "") == 1.0
    assert edit_similarity("abc", "") == 0.0
    assert edit_similarity("kitten", "sitting") == pytest.approx(1 - 3 / 7)


def test_edit_similarity_token_unit(vocab):
    a = "mov r0, 1\nret"
    b = "mov r0, 2\nret"
    # "mov" and "ret" are single tokens, so the one substitution weighs more per token
    tok = edit_similarity(a, b, unit="token", vocab=vocab, role=Role.ASSEMBLY)
    assert tok == pytest.approx(1 - 1 / len(vocab.encode(a, Role.ASSEMBLY)))
    assert tok < edit_similarity(a, b)
    with pytest.raises(ValueError):
        edit_similarity(a, b, unit="token")
    with pytest.raises(ValueError):
        edit_similarity(a, b, unit="word")


# -- semantic similarity ----------------------------------------------------


def test_semantic_similarity_identity_range_and_symmetry(small_bundle):
    emb = Embedder(small_bundle.backbone, small_bundle.vocab)
    a = "int main() { return 1; }"
    b = "int main() { int x = 2; return x; }"
    assert semantic_similarity(a, a, emb) == 1.0
    s = semantic_similarity(a, b, emb)
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(semantic_similarity(b, a, emb), abs=1e-12)


def test_semantic_similarity_rejects_empty_and_overlong(small_bundle):
    emb = Embedder(small_bundle.backbone, small_bundle.vocab)
    with pytest.raises(ValueError, match="empty"):
        semantic_similarity("", "x", emb)
    with pytest.raises(ContextOverflow):
        semantic_similarity("y" * 500, "x", emb)


# -- sandbox ----------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(GOOD))
def test_sandbox_accepts_good_programs(name):
    assert reexecutability(GOOD[name], FAST).score == 1


@pytest.mark.parametrize("name", sorted(BAD))
def test_sandbox_rejects_bad_programs_at_the_right_stage(name):
    src, stage = BAD[name]
    res = reexecutability(src, FAST)
    assert (res.score, res.stage) == (0, stage)


def test_sandbox_exit_code_check():
    assert reexecutability(GOOD["nonzero_exit"], FAST, expected=3).score == 1
    res = reexecutability(GOOD["nonzero_exit"], FAST, expected=0)
    assert (res.score, res.stage, res.exit_code) == (0, "mismatch", 3)


def test_sandbox_monotone_in_limits():
    busy = "int main(void) { volatile long x = 0; for (long i = 0; i < 300000000; i++) x += i; return 0; }"
    tight = reexecutability(busy, SandboxConfig(time_limit=0.05))
    loose = reexecutability(busy, SandboxConfig(time_limit=10.0))
    assert tight.stage == "timeout"
    assert loose.score == 1
    assert reexecutability(GOOD["malloc_small"], SandboxConfig(memory_limit=512 * 2**20)).score == 1


def test_sandbox_compile_log_has_no_temp_paths():
    res = reexecutability(BAD["syntax_error"][0], FAST)
    assert "/tmp" not in res.detail and "<workdir>" in res.detail


def test_sandbox_missing_compiler():
    cfg = SandboxConfig(compile_command="no-such-cc-xyz -o {out} {src}")
    with pytest.raises(SandboxUnavailable):
        reexecutability(GOOD["return_zero"], cfg)


def test_sandbox_config_validation():
    with pytest.raises(ValueError):
        SandboxConfig(compile_command="gcc prog.c")
    with pytest.raises(ValueError):
        SandboxConfig(time_limit=0)
    assert SandboxConfig().command("a b.c", "out") == ["gcc", "-O2", "-o", "out", "a b.c"]


# -- translation and reports ------------------------------------------------


def test_translate_refuses_overlong_input(small_bundle):
    with pytest.raises(TranslationRefused, match="256-token"):
        translate(small_bundle, "x" * 300, Task.SRC2ASM)


def test_translate_is_deterministic(small_bundle):
    a = translate(small_bundle, "int main() { return 0; }", Task.SRC2ASM, max_new=20)
    assert a == translate(small_bundle, "int main() { return 0; }", Task.SRC2ASM, max_new=20)
    s1 = translate(small_bundle, "int main() { return 0; }", Task.SRC2ASM, temperature=1.0, seed=5, max_new=20)
    s2 = translate(small_bundle, "int main() { return 0; }", Task.SRC2ASM, temperature=1.0, seed=5, max_new=20)
    assert s1 == s2


def _mixed_samples(toy_samples):
    long = Sample("z" * 400, "int main() { return 0; }", Task.ASM2SRC, id="too-long")
    return list(toy_samples[:4]) + [long]


def test_report_excludes_overlong_and_is_deterministic(small_bundle, toy_samples):
    samples = _mixed_samples(toy_samples)
    a = evaluate_corpus(small_bundle, samples, metrics=("edit_sim", "sem_sim", "reexec", "ppl"), sandbox=FAST)
    b = evaluate_corpus(small_bundle, samples, metrics=("edit_sim", "sem_sim", "reexec", "ppl"), sandbox=FAST,
                        jobs=3)
    assert a.to_json() == b.to_json()
    assert a.to_csv() == b.to_csv()
    by_id = {r.id: r for r in a.records}
    assert by_id["too-long"].excluded and by_id["too-long"].edit_sim is None
    agg = a.aggregates["overall"]
    assert agg["n_samples"] == 5 and agg["n_excluded"] == 1 and agg["n_scored"] == 4
    scored = [r for r in a.records if not r.excluded]
    assert agg["mean_edit_sim"] == pytest.approx(sum(r.edit_sim for r in scored) / 4)
    assert agg["perplexity"] > 1.0
    for r in a.records:
        if r.excluded:
            continue
        assert (r.reexec is not None) == (r.task == Task.ASM2SRC.value)
    data = json.loads(a.to_json())
    assert data["schema_version"] and data["environment"]["sandbox"]["time_limit"] == 1.0


def test_report_records_per_sample_errors(small_bundle, toy_samples, monkeypatch):
    import asmxlate.eval.report as report

    real = report.translate

    def flaky(bundle, text, task, *args):
        if text == toy_samples[1].input_text:
            raise RuntimeError("boom")
        return real(bundle, text, task, *args, max_new=8)

    monkeypatch.setattr(report, "translate", flaky)
    rep = evaluate_corpus(small_bundle, toy_samples[:3], metrics=("edit_sim",))
    assert "boom" in rep.records[1].error
    assert rep.records[0].edit_sim is not None and rep.records[2].edit_sim is not None
    assert rep.aggregates["overall"]["n_errors"] == 1


def test_report_missing_compiler_fails_before_work(small_bundle, toy_samples):
    with pytest.raises(SandboxUnavailable):
        evaluate_corpus(small_bundle, toy_samples[:2], sandbox=SandboxConfig(compile_command="nocc {src} {out}"))


def test_report_rejects_unknown_metric(small_bundle, toy_samples):
    with pytest.raises(ValueError):
        evaluate_corpus(small_bundle, toy_samples[:1], metrics=("bleu",))


# -- perplexity comparison --------------------------------------------------


def test_compare_perplexity_identity_and_errors(small_bundle, toy_samples):
    same = compare_perplexity(small_bundle, small_bundle, toy_samples[:6])
    assert same.delta == 0.0 and same.n_samples == 6
    with pytest.raises(ValueError, match="empty"):
        compare_perplexity(small_bundle, small_bundle, [])
    other = ModelBundle(small_bundle.backbone, Vocab(("mov", "add", "sub", "mul", "cmp", "jmp", "jz", "ret"),
                                                     max_context=256))
    with pytest.raises(ValueError, match="tokenizer"):
        compare_perplexity(small_bundle, other, toy_samples[:2])


def test_compare_perplexity_matches_manual_sum(small_bundle, toy_samples):
    state = AdaptationState.create(small_bundle.backbone, "s2s", seed=1)
    with torch.no_grad():
        for p in state.lora.parameters():
            p.normal_(0, 0.2)
    adapted = ModelBundle(small_bundle.backbone, small_bundle.vocab, state)
    cmp = compare_perplexity(small_bundle, adapted, toy_samples[:4])
    nll = sum(conditional_nll(adapted, s)[0] for s in toy_samples[:4])
    count = sum(conditional_nll(adapted, s)[1] for s in toy_samples[:4])
    assert cmp.ppl_adapted == pytest.approx(float(torch.exp(torch.tensor(nll / count, dtype=torch.float64))))
    assert cmp.delta != 0.0
