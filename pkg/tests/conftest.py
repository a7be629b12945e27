import pytest
import torch

from asmxlate.adaptation import AdaptationState
from asmxlate.corpus import NormalizationConfig, gen_mini_corpus, normalize_asm, programs_to_samples
from asmxlate.model import Backbone, ModelConfig
from asmxlate.tokenizer import Role, Vocab, clm_ids
from asmxlate.train import TrainConfig, finetune, pretrain_clm

torch.set_num_threads(1)

# desk-scale recipe shared by the memorization-based tests
DESK_CONTEXT = 256
DESK_PRETRAIN = dict(batch_size=8, grad_accum_steps=1, learning_rate=3e-3, max_steps=300, seed=0)
DESK_FINETUNE = dict(batch_size=8, grad_accum_steps=1, learning_rate=1e-2, max_steps=500, seed=0,
                     trainable="adaptation")


def desk_config(vocab: Vocab) -> ModelConfig:
    return ModelConfig(vocab.size, d_model=64, n_layers=2, n_heads=4, d_ff=256, max_context=DESK_CONTEXT)


def pretraining_streams(vocab, programs):
    cfg = NormalizationConfig(canonicalize=True)
    out = []
    for p in programs:
        out.append(clm_ids(vocab, p.source, Role.SOURCE))
        out.append(clm_ids(vocab, normalize_asm(p.asm, cfg), Role.ASSEMBLY))
    return out


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture(scope="session")
def desk_vocab():
    return Vocab(max_context=DESK_CONTEXT)


@pytest.fixture
def tiny_cfg(vocab):
    return ModelConfig(vocab.size, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_context=32)


@pytest.fixture(scope="session")
def toy_programs():
    return gen_mini_corpus(16, 7, max_vars=2)


@pytest.fixture(scope="session")
def toy_samples(toy_programs):
    return programs_to_samples(toy_programs)


@pytest.fixture(scope="session")
def pretrained(desk_vocab, toy_programs):
    """Backbone pretrained on the toy corpus, plus its untrained twin and the loss history."""
    init = Backbone(desk_config(desk_vocab), seed=0)
    trained, history = pretrain_clm(init, pretraining_streams(desk_vocab, toy_programs), TrainConfig(**DESK_PRETRAIN))
    return init, trained.freeze(), history


@pytest.fixture(scope="session")
def memorized_ma(pretrained, desk_vocab, toy_samples):
    """Multi-adapter state fine-tuned on all 32 toy pairs."""
    _, backbone, _ = pretrained
    state = AdaptationState.create(backbone, "ma")
    trained, history = finetune(backbone, state, toy_samples, desk_vocab, TrainConfig(**DESK_FINETUNE))
    return backbone, trained, history


_CRITERIA: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one check per acceptance criterion")


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA.append((status, props["criterion"], props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for status, label, detail in sorted(_CRITERIA, key=lambda row: int(row[1].split()[1].rstrip(":"))):
        terminalreporter.write_line(f"{status} {label}" + (f" ({detail})" if detail else ""))
