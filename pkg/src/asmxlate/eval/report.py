"""Corpus-level evaluation: translate every sample, score it, aggregate per task."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..bundle import ModelBundle, conditional_nll, translate
from ..corpus.samples import Sample, Task
from ..tokenizer import output_role, sequence_length
from .metrics import Embedder, edit_similarity, semantic_similarity
from .sandbox import ExecResult, SandboxConfig, compiler_path, reexecutability

SCHEMA_VERSION = "asmxlate-eval/1"
METRICS = ("edit_sim", "sem_sim", "reexec", "ppl")
CSV_FIELDS = ("id", "task", "excluded", "error", "edit_sim", "sem_sim", "reexec", "reexec_stage", "nll", "n_tokens",
              "translation")


@dataclass
class SampleRecord:
    id: str
    task: str
    reference: str
    translation: str | None = None
    excluded: bool = False
    error: str | None = None
    edit_sim: float | None = None
    sem_sim: float | None = None
    reexec: int | None = None
    reexec_stage: str | None = None
    reexec_detail: str | None = None
    nll: float | None = None
    n_tokens: int | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _csv_cell(value):
    """CSV cell text; control characters other than tab and newline are written as \\xNN escapes."""
    if value is None:
        return ""
    if isinstance(value, str):
        return "".join(c if c in "\t\n" or ord(c) >= 32 else f"\\x{ord(c):02x}" for c in value)
    return value


def _mean(values: list) -> float | None:
    return sum(values) / len(values) if values else None


def aggregate(records: Sequence[SampleRecord]) -> dict:
    """Summary statistics over the non-excluded records; excluded ones are only counted."""
    scored = [r for r in records if not r.excluded]
    out = {
        "n_samples": len(records),
        "n_excluded": len(records) - len(scored),
        "n_scored": len(scored),
        "n_errors": sum(r.error is not None for r in scored),
    }
    for name in ("edit_sim", "sem_sim"):
        vals = [getattr(r, name) for r in scored if getattr(r, name) is not None]
        out[f"mean_{name}"] = _mean(vals)
    runs = [r.reexec for r in scored if r.reexec is not None]
    out["reexec_rate"] = _mean(runs)
    out["n_reexec"] = len(runs)
    nll = [(r.nll, r.n_tokens) for r in scored if r.nll is not None]
    count = sum(n for _, n in nll)
    out["perplexity"] = math.exp(sum(v for v, _ in nll) / count) if count else None
    return out


@dataclass
class EvalReport:
    environment: dict
    records: list[SampleRecord] = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        by_task = {t.value: aggregate([r for r in self.records if r.task == t.value]) for t in Task}
        return {"overall": aggregate(self.records), "by_task": by_task}

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "environment": self.environment,
            "aggregates": self.aggregates,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    def to_csv(self) -> str:
        """One row per sample; a lossy view for spreadsheets, the JSON form is authoritative."""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: _csv_cell(v) for k, v in r.to_dict().items()})
        return buf.getvalue()

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(self.to_json(), encoding="utf-8")
        if csv_path is not None:
            Path(csv_path).write_text(self.to_csv(), encoding="utf-8")


def model_digest(bundle: ModelBundle) -> str:
    h = hashlib.sha256(json.dumps(bundle.backbone.checksums(), sort_keys=True).encode())
    if bundle.adaptation is not None:
        h.update(json.dumps(bundle.adaptation.checksums(), sort_keys=True).encode())
    return h.hexdigest()


def evaluate_corpus(
    bundle: ModelBundle,
    samples: Sequence[Sample],
    metrics: Sequence[str] = ("edit_sim", "sem_sim", "reexec"),
    sandbox: SandboxConfig | None = None,
    seed: int = 0,
    temperature: float | None = None,
    unit: str = "char",
    jobs: int = 1,
    match_reference_exit: bool = False,
) -> EvalReport:
    """Translate and score every sample.

    Samples too long for the context are reported as excluded and never
    scored. A failure on one sample is recorded on its row and does not stop
    the run. Re-executability applies to assembly-to-source samples only, since
    only those produce C. Semantic similarity embeds both strings with the
    unadapted backbone, so scores stay comparable across adaptation states. An
    empty translation has no tokens to match and scores 0 there.

    With ``match_reference_exit`` the reference program is run as well and a
    translation must reproduce its exit code.

    Raises SandboxUnavailable before any work when re-executability is
    requested and the compiler is missing.
    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    sandbox = sandbox or SandboxConfig()
    env = {
        "seed": seed,
        "temperature": temperature,
        "metrics": sorted(metrics),
        "edit_unit": unit,
        "max_context": bundle.max_context,
        "strategy": bundle.adaptation.strategy.value if bundle.adaptation is not None else None,
        "model_sha256": model_digest(bundle),
    }
    if "reexec" in metrics:
        env["compiler"] = compiler_path(sandbox)
        env["sandbox"] = sandbox.to_dict()
    report = EvalReport(env)
    embedder = Embedder(bundle.backbone, bundle.vocab)

    for k, s in enumerate(samples):
        rec = SampleRecord(s.id, s.task.value, s.output_text)
        report.records.append(rec)
        if sequence_length(bundle.vocab, s, bundle.n_prefix) > bundle.max_context:
            rec.excluded = True
            rec.error = f"longer than the {bundle.max_context}-token context"
            continue
        try:
            rec.translation = translate(bundle, s.input_text, s.task, temperature, seed + k)
            if "edit_sim" in metrics:
                rec.edit_sim = edit_similarity(rec.translation, s.output_text, unit, bundle.vocab,
                                               output_role(s.task))
            if "sem_sim" in metrics:
                if bundle.vocab.encode(rec.translation, output_role(s.task)).ids:
                    rec.sem_sim = semantic_similarity(rec.translation, s.output_text, embedder, output_role(s.task))
                else:
                    rec.sem_sim = 0.0
            if "ppl" in metrics:
                rec.nll, rec.n_tokens = conditional_nll(bundle, s)
        except Exception as exc:  # one bad sample must not sink the corpus
            rec.error = f"{type(exc).__name__}: {exc}"

    if "reexec" in metrics:
        jobs_list = [(r, s) for r, s in zip(report.records, samples)
                     if not r.excluded and r.translation is not None and s.task is Task.ASM2SRC]

        def run(item) -> ExecResult:
            rec, s = item
            expected = None
            if match_reference_exit:
                ref = reexecutability(s.output_text, sandbox)
                if not ref.score:
                    return ExecResult(0, "reference", None, f"reference failed at {ref.stage}")
                expected = ref.exit_code
            return reexecutability(rec.translation, sandbox, expected)

        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            results = list(pool.map(run, jobs_list))
        for (rec, _), res in zip(jobs_list, results):
            rec.reexec, rec.reexec_stage, rec.reexec_detail = res.score, res.stage, res.detail or None
    return report


@dataclass(frozen=True)
class PerplexityComparison:
    ppl_base: float
    ppl_adapted: float
    n_samples: int
    n_tokens: int
    n_excluded: int

    @property
    def delta(self) -> float:
        return self.ppl_adapted - self.ppl_base

    def to_dict(self) -> dict:
        return {**self.__dict__, "delta": self.delta}


def compare_perplexity(base: ModelBundle, adapted: ModelBundle, samples: Sequence[Sample]) -> PerplexityComparison:
    """Perplexity of the reference outputs under both bundles, on identical token sequences.

    Both are scored with the adapted bundle's layout (task prefix included for
    Seq2Seq), over the output segment only. A negative delta means the
    adapted model fits the data better.
    """
    if not samples:
        raise ValueError("cannot compare perplexity on an empty corpus")
    if base.vocab != adapted.vocab:
        raise ValueError("base and adapted models use different tokenizers; perplexities are not comparable")
    limit = min(base.max_context, adapted.max_context)
    kept = [s for s in samples if sequence_length(adapted.vocab, s, adapted.n_prefix) <= limit]
    if not kept:
        raise ValueError("every sample is longer than the context window")
    totals = {}
    for name, bundle in (("base", base), ("adapted", adapted)):
        nll, count = 0.0, 0
        for s in kept:
            v, n = conditional_nll(bundle, s, use_prefix=adapted.uses_prefix)
            nll += v
            count += n
        totals[name] = (nll, count)
    count = totals["base"][1]
    return PerplexityComparison(
        ppl_base=math.exp(totals["base"][0] / count),
        ppl_adapted=math.exp(totals["adapted"][0] / count),
        n_samples=len(kept),
        n_tokens=count,
        n_excluded=len(samples) - len(kept),
    )
