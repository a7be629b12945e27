"""Command-line interface: ``asmxlate <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error (bad or missing input,
inconsistent checkpoints, over-length input), 3 environment unavailable
(no compiler for re-executability).

Training commands read an optional JSON or TOML config file. Training keys sit
at the top level or under ``[train]``; model shape under ``[model]`` and
adaptation ranks under ``[adaptation]``. Explicit flags override the file,
which overrides the built-in defaults.

Every command that writes an artifact also writes ``<artifact>.manifest.json``
recording the command, the resolved configuration, SHA-256 digests of inputs
and outputs, the tool version, the seed and start/finish timestamps.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import tomli
import torch

from . import __version__
from .adaptation import AdaptationState, Strategy
from .bundle import ModelBundle, TranslationRefused, translate
from .checkpoint import CheckpointError
from .corpus import (
    CorpusError,
    NormalizationConfig,
    Sample,
    Task,
    gen_mini_corpus,
    ingest_jsonl,
    normalize_asm,
    programs_to_samples,
    write_jsonl,
)
from .eval import METRICS, SandboxConfig, SandboxUnavailable, compare_perplexity, evaluate_corpus
from .model import Backbone, ContextOverflow, ModelConfig, sequence_nll
from .tokenizer import (
    DEFAULT_MAX_CONTEXT,
    Role,
    TokenizerError,
    Vocab,
    clm_ids,
    filter_by_length,
    input_role,
    output_role,
)
from .train import TrainConfig, TrainingDiverged, finetune, pretrain_clm, write_history_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ENV = 0, 1, 2, 3

log = logging.getLogger("asmxlate")

MODEL_KEYS = ("d_model", "n_layers", "n_heads", "d_ff", "max_context", "dropout", "tie_embeddings")
ADAPTATION_KEYS = ("r_adapter", "r_lora", "lora_alpha", "n_prefix")
TRAIN_FLAGS = {
    "batch_size": int,
    "grad_accum_steps": int,
    "learning_rate": float,
    "max_steps": int,
    "weight_decay": float,
    "seed": int,
    "warmup_steps": int,
    "max_grad_norm": float,
    "checkpoint_every": int,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


# -- manifests ------------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None

    def add_input(self, path: str | Path | None) -> None:
        if path is None or str(path) == "-":
            return
        if not Path(path).is_file():
            raise DataError(f"input file not found: {path}")
        self.inputs[str(path)] = sha256_file(path)

    def finish(self, primary: str | Path, *extra: str | Path) -> Path:
        """Digest the outputs and write the manifest next to ``primary``."""
        for p in (primary, *extra):
            self.outputs[str(p)] = sha256_file(p)
        self.finished_at = _now()
        path = Path(f"{primary}.manifest.json")
        path.write_text(json.dumps(asdict(self), sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return path


# -- config resolution ------------------------------------------------------------


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        if p.suffix == ".toml":
            data = tomli.loads(text)
        elif p.suffix == ".json":
            data = json.loads(text)
        else:
            raise UsageError(f"config file must end in .toml or .json: {p}")
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{p}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"{p}: top level must be a table")
    return data


def resolve_config(args: argparse.Namespace, file_cfg: dict, trainable: str) -> dict:
    """Merge defaults, the config file and explicit flags into train/model/adaptation sections."""
    train = dict(file_cfg.get("train", {}))
    train.update({k: v for k, v in file_cfg.items() if k not in ("train", "model", "adaptation")})
    for key in TRAIN_FLAGS:
        if getattr(args, key, None) is not None:
            train[key] = getattr(args, key)
    if getattr(args, "groups", None) is not None:
        train["groups"] = args.groups
    train["trainable"] = trainable
    try:
        train_cfg = TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid training configuration: {exc}") from exc
    model = dict(file_cfg.get("model", {}))
    adaptation = dict(file_cfg.get("adaptation", {}))
    for key in MODEL_KEYS:
        if getattr(args, key, None) is not None:
            model[key] = getattr(args, key)
    for key in ADAPTATION_KEYS:
        if getattr(args, key, None) is not None:
            adaptation[key] = getattr(args, key)
    for name, section, allowed in (("model", model, MODEL_KEYS), ("adaptation", adaptation, ADAPTATION_KEYS)):
        unknown = set(section) - set(allowed)
        if unknown:
            raise DataError(f"unknown {name} config keys: {sorted(unknown)}")
    return {"train": train_cfg.to_dict(), "model": model, "adaptation": adaptation}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML file with training settings")
    for key, typ in TRAIN_FLAGS.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)
    p.add_argument("--loss-csv", help="loss history path (default: <out>.loss.csv)")


# -- commands -------------------------------------------------------------------


def _load_samples(path: str) -> list[Sample]:
    return ingest_jsonl(path)


def cmd_gen(args) -> int:
    manifest = RunManifest("gen", {"n": args.n, "max_vars": args.max_vars, "max_depth": args.max_depth},
                           seed=args.seed)
    programs = gen_mini_corpus(args.n, args.seed, max_vars=args.max_vars, max_depth=args.max_depth)
    write_jsonl(programs_to_samples(programs), args.out)
    manifest.finish(args.out)
    print(f"wrote {2 * len(programs)} samples to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    manifest = RunManifest("ingest", {})
    manifest.add_input(args.input)
    samples = _load_samples(args.input)
    write_jsonl(samples, args.out)
    manifest.finish(args.out)
    print(f"validated {len(samples)} samples into {args.out}")
    return EXIT_OK


def cmd_normalize(args) -> int:
    cfg = NormalizationConfig(canonicalize=args.canonicalize, rename_registers=args.rename_registers,
                              randomize_addresses=args.randomize_addresses, rng_seed=args.seed)
    manifest = RunManifest("normalize", asdict(cfg), seed=args.seed)
    manifest.add_input(args.input)
    out = [Sample.from_pair(s.src, normalize_asm(s.asm, cfg), s.task, s.id) for s in _load_samples(args.input)]
    write_jsonl(out, args.out)
    manifest.finish(args.out)
    print(f"normalized {len(out)} samples into {args.out}")
    return EXIT_OK


def cmd_tokenize(args) -> int:
    vocab = Vocab(max_context=args.max_context)
    manifest = RunManifest("tokenize", {"max_context": args.max_context, "n_prefix": args.n_prefix})
    vocab.save(args.vocab_out)
    outputs = []
    if args.data:
        manifest.add_input(args.data)
        samples = _load_samples(args.data)
        kept, excluded = filter_by_length(samples, vocab, n_prefix=args.n_prefix)
        dropped = {id(s) for s in excluded}
        lines = []
        for s in samples:
            lines.append(json.dumps({
                "id": s.id,
                "task": s.task.value,
                "input_ids": list(vocab.encode(s.input_text, input_role(s.task)).ids),
                "output_ids": list(vocab.encode(s.output_text, output_role(s.task)).ids),
                "excluded": id(s) in dropped,
            }, sort_keys=True))
        out = args.out or f"{args.vocab_out}.tokens.jsonl"
        Path(out).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        outputs.append(out)
        print(f"{len(kept)} samples fit, {len(excluded)} excluded as longer than {vocab.max_context} tokens")
    manifest.finish(args.vocab_out, *outputs)
    print(f"vocabulary of {vocab.size} tokens written to {args.vocab_out}")
    return EXIT_OK


def _pretraining_streams(samples: Sequence[Sample], vocab: Vocab) -> tuple[list[list[int]], int]:
    seen: dict[tuple[str, Role], None] = {}
    for s in samples:
        seen.setdefault((s.src, Role.SOURCE), None)
        seen.setdefault((s.asm, Role.ASSEMBLY), None)
    streams = [clm_ids(vocab, text, role) for text, role in seen]
    kept = [ids for ids in streams if len(ids) <= vocab.max_context]
    return kept, len(streams) - len(kept)


@torch.no_grad()
def corpus_loss(model: Backbone, streams: Sequence[Sequence[int]]) -> float:
    """Mean next-token NLL over every token of every stream."""
    total, count = 0.0, 0
    for ids in streams:
        t = torch.tensor(ids)
        nll, n = sequence_nll(model, t, torch.ones_like(t, dtype=torch.bool))
        total += float(nll)
        count += n
    return total / count


def cmd_pretrain(args) -> int:
    resolved = resolve_config(args, load_config_file(args.config), "full")
    cfg = TrainConfig.from_dict(resolved["train"])
    vocab = Vocab(max_context=resolved["model"].get("max_context", DEFAULT_MAX_CONTEXT))
    model_cfg = ModelConfig(vocab.size, **resolved["model"])
    resolved["model"] = {k: v for k, v in asdict(model_cfg).items() if k != "vocab_size"}
    manifest = RunManifest("pretrain", resolved, seed=cfg.seed)
    manifest.add_input(args.corpus)
    manifest.add_input(args.config)
    streams, excluded = _pretraining_streams(_load_samples(args.corpus), vocab)
    if excluded:
        log.warning("excluded %d sequences longer than %d tokens", excluded, vocab.max_context)
    if not streams:
        raise DataError("no pretraining sequence fits the context window")

    def save_periodic(step, model):
        model.save(f"{args.out}.step{step}", vocab, {"step": step})

    trained, history = pretrain_clm(Backbone(model_cfg, seed=cfg.seed), streams, cfg, save_periodic)
    final = corpus_loss(trained, streams)
    trained.save(args.out, vocab, {"train": resolved["train"], "final_loss": final, "n_sequences": len(streams)})
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    write_history_csv(history, loss_csv)
    manifest.config["final_loss"] = final
    manifest.config["excluded_sequences"] = excluded
    manifest.finish(args.out, loss_csv)
    print(f"trained {len(history)} steps on {len(streams)} sequences; final corpus loss {final:.6f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    resolved = resolve_config(args, load_config_file(args.config), "adaptation")
    cfg = TrainConfig.from_dict(resolved["train"])
    manifest = RunManifest("finetune", resolved, seed=cfg.seed)
    manifest.add_input(args.backbone)
    manifest.add_input(args.data)
    manifest.add_input(args.config)
    backbone, vocab = Backbone.load(args.backbone)
    backbone.freeze()
    tasks = [Task(t) for t in args.tasks] if args.tasks else list(Task)
    state = AdaptationState.create(backbone, args.strategy, tasks=tasks, seed=cfg.seed, **resolved["adaptation"])
    limit = min(vocab.max_context, backbone.cfg.max_context)
    kept, excluded = filter_by_length(_load_samples(args.data), vocab, limit, state.n_prefix)
    if excluded:
        log.warning("excluded %d samples longer than %d tokens", len(excluded), limit)
    if not kept:
        raise DataError("no fine-tuning sample fits the context window")

    def save_periodic(step, st):
        st.save(f"{args.out}.step{step}", {"step": step})

    trained, history = finetune(backbone, state, kept, vocab, cfg, save_periodic)
    trained.save(args.out, {"train": resolved["train"], "backbone_sha256": sha256_file(args.backbone)})
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    write_history_csv(history, loss_csv)
    manifest.config["strategy"] = state.strategy.value
    manifest.config["excluded_samples"] = len(excluded)
    manifest.finish(args.out, loss_csv)
    print(f"{state.strategy.value}: {len(state.adapters)} adapters, {len(state.prefixes)} prefixes, "
          f"{len(history)} steps on {len(kept)} samples")
    return EXIT_OK


def _bundle(args) -> ModelBundle:
    return ModelBundle.load(args.backbone, args.adaptation)


def cmd_translate(args) -> int:
    text = sys.stdin.read() if args.input == "-" else _read_text(args.input)
    bundle = _bundle(args)
    out = translate(bundle, text, Task(args.task), args.temperature, args.seed, args.max_new)
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
        manifest = RunManifest("translate", {"task": args.task, "temperature": args.temperature,
                                             "max_new": args.max_new}, seed=args.seed)
        for p in (args.input, args.backbone, args.adaptation):
            manifest.add_input(p)
        manifest.finish(args.out)
    else:
        sys.stdout.write(out)
        if not out.endswith("\n"):
            sys.stdout.write("\n")
    return EXIT_OK


def _read_text(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"input file not found: {p}")
    return p.read_text(encoding="utf-8")


def _metrics(text: str) -> tuple[str, ...]:
    names = tuple(m.strip() for m in text.split(",") if m.strip())
    unknown = [m for m in names if m not in METRICS]
    if unknown or not names:
        raise argparse.ArgumentTypeError(f"metrics must be a comma list drawn from {', '.join(METRICS)}")
    return names


def cmd_eval(args) -> int:
    sandbox = SandboxConfig(args.compile_command, args.time_limit, int(args.memory_limit_mb * 2**20))
    bundle = _bundle(args)
    samples = _load_samples(args.data)
    report = evaluate_corpus(bundle, samples, args.metrics, sandbox, args.seed, args.temperature, args.unit,
                             args.jobs, args.match_reference_exit)
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    report.write(args.out, csv_path)
    manifest = RunManifest("eval", {**report.environment, "jobs": args.jobs}, seed=args.seed)
    for p in (args.data, args.backbone, args.adaptation):
        manifest.add_input(p)
    manifest.finish(args.out, csv_path)
    print(json.dumps(report.aggregates["overall"], sort_keys=True))
    return EXIT_OK


def cmd_compare_ppl(args) -> int:
    adapted = _bundle(args)
    base = ModelBundle(adapted.backbone, adapted.vocab)
    result = compare_perplexity(base, adapted, _load_samples(args.data))
    text = json.dumps(result.to_dict(), sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        manifest = RunManifest("compare-ppl", {})
        for p in (args.data, args.backbone, args.adaptation):
            manifest.add_input(p)
        manifest.finish(args.out)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asmxlate", description="Assembly <-> C translation toolkit")
    parser.add_argument("--version", action="version", version=f"asmxlate {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic mini-language corpus")
    p.add_argument("--n", type=_positive_int, required=True, help="number of programs (two samples each)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-vars", type=_positive_int, default=3)
    p.add_argument("--max-depth", type=_positive_int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ingest", help="validate an external JSONL corpus and rewrite it canonically")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("normalize", help="normalize the assembly side of a corpus")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-canonicalize", dest="canonicalize", action="store_false")
    p.add_argument("--rename-registers", action="store_true")
    p.add_argument("--randomize-addresses", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("tokenize", help="write the vocabulary and, optionally, token ids for a corpus")
    p.add_argument("--vocab-out", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--max-context", type=_positive_int, default=1024)
    p.add_argument("--n-prefix", type=int, default=1)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("pretrain", help="causal-LM pretraining of a new backbone")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    for key, typ in (("d_model", int), ("n_layers", int), ("n_heads", int), ("d_ff", int), ("max_context", int),
                     ("dropout", float)):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train adaptation parameters on a frozen backbone")
    p.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", nargs="+", choices=[t.value for t in Task])
    p.add_argument("--groups", nargs="+", choices=["adapters", "lora", "prefixes"])
    _add_train_flags(p)
    p.add_argument("--r-adapter", dest="r_adapter", type=_positive_int)
    p.add_argument("--r-lora", dest="r_lora", type=int)
    p.add_argument("--lora-alpha", dest="lora_alpha", type=float)
    p.add_argument("--n-prefix", dest="n_prefix", type=_positive_int)
    p.set_defaults(func=cmd_finetune)

    def model_args(q):
        q.add_argument("--backbone", required=True)
        q.add_argument("--adaptation")

    p = sub.add_parser("translate", help="translate one input")
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--in", dest="input", required=True, help="input file, or - for stdin")
    p.add_argument("--out")
    model_args(p)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new", type=_positive_int)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="translate and score a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", help="CSV report path (default: JSON path with .csv)")
    model_args(p)
    p.add_argument("--metrics", type=_metrics, default=("edit_sim", "sem_sim", "reexec"))
    p.add_argument("--unit", choices=["char", "token"], default="char")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float)
    p.add_argument("--compile-command", default=SandboxConfig.compile_command)
    p.add_argument("--time-limit", type=float, default=SandboxConfig.time_limit)
    p.add_argument("--memory-limit-mb", type=float, default=SandboxConfig.memory_limit / 2**20)
    p.add_argument("--match-reference-exit", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-ppl", help="perplexity of base vs adapted model on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    model_args(p)
    p.set_defaults(func=cmd_compare_ppl)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"asmxlate: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SandboxUnavailable as exc:
        print(f"asmxlate: environment unavailable: {exc}", file=sys.stderr)
        return EXIT_ENV
    except TranslationRefused as exc:
        print(f"asmxlate: refused: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, CorpusError, CheckpointError, TokenizerError, ContextOverflow, TrainingDiverged,
            ValueError, OSError) as exc:
        print(f"asmxlate: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
