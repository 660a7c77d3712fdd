"""Command-line pipeline: synthesize, hack, ingest, vocab, train, evaluate, report.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 training
error. Every invocation writes a sidecar run manifest (inputs with
hashes, seeds, tool version) next to its outputs; no output embeds a
timestamp, so identical inputs and flags reproduce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

from . import __version__
from .codec import build_vocab_from_files, encode_session, load_vocab, read_corpus, save_vocab, write_corpus
from .curriculum import load_manifest, load_trace_csv, run_curriculum, save_trace_csv
from .dialog import read_sessions_jsonl, write_sessions_jsonl
from .errors import IngestError, TrainingError, ValidationError
from .fileio import sha256_file, write_json
from .grammar import resolve_grammar, sample_session
from .hacking import PseudoCorpusConfig, build_plain_corpus, build_pseudo_corpus, thread_to_sessions
from .ingest import SplitSpec, load_database, load_forum_dump, load_multiwoz, split_corpus
from .metrics import SamplerConfig, evaluate_records, generate_responses, save_record_details, save_report
from .model import load_checkpoint
from .report import emit_report

log = logging.getLogger(__name__)


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[str] = dataclass_field(default_factory=list)
    log: str = ""


def _sidecar(destination: Path, command: str, argv: list[str], seeds: dict, inputs: list[str]) -> Path:
    payload = {
        "tool": "curriclm",
        "version": __version__,
        "command": command,
        "argv": argv,
        "seeds": seeds,
        "inputs": {path: sha256_file(path) for path in sorted(set(inputs)) if Path(path).is_file()},
    }
    if destination.is_dir():
        target = destination / "run_manifest.json"
    else:
        target = destination.with_name(destination.name + ".run.json")
    return write_json(target, payload)


def _cmd_synth(args, argv) -> tuple[list[Path], str]:
    spec = resolve_grammar(args.grammar)
    sessions = [
        sample_session(
            spec,
            args.seed * 100_000 + i,
            turns=args.turns,
            vocab_size=args.vocab_size,
            utterance_len_range=(args.min_words, args.max_words),
        )
        for i in range(args.n)
    ]
    lines = [encode_session(s, spec) for s in sessions]
    artifacts = [write_corpus(lines, args.out)]
    if args.sessions_out:
        artifacts.append(write_sessions_jsonl(sessions, args.sessions_out))
    if args.db_out:
        from .ingest import save_database

        entities: dict[str, list[dict[str, str]]] = {}
        seen: set[tuple] = set()
        for session in sessions:
            if session.goal is None:
                continue
            for domain, domain_goal in session.goal.domains:
                key = (domain, domain_goal.informable)
                if key in seen:
                    continue
                seen.add(key)
                row = {"name": f"{domain} venue {len(entities.get(domain, []))}"}
                row.update(dict(domain_goal.informable))
                entities.setdefault(domain, []).append(row)
        artifacts.append(save_database(entities, args.db_out))
    artifacts.append(_sidecar(Path(args.out), "synth", argv, {"seed": args.seed}, []))
    return artifacts, f"synthesized {len(sessions)} sessions under {spec.name!r}"


def _cmd_hack(args, argv) -> tuple[list[Path], str]:
    dump = load_forum_dump(args.threads)
    sessions = []
    for thread in dump.threads:
        sessions.extend(thread_to_sessions(thread))
    config = PseudoCorpusConfig(rng_seed=args.seed, max_window_tokens=args.max_window)
    build = build_plain_corpus(sessions, config) if args.plain else build_pseudo_corpus(sessions, config)
    artifacts = [write_corpus(build.lines, args.out)]
    artifacts.append(_sidecar(Path(args.out), "hack", argv, {"seed": args.seed}, [args.threads]))
    message = (
        f"{len(dump.threads)} threads -> {len(sessions)} sessions -> {len(build.lines)} lines"
        + (f"; {len(dump.diagnostics)} dump lines skipped" if dump.diagnostics else "")
        + (f"; {len(build.diagnostics)} oversized sessions windowed" if build.diagnostics else "")
    )
    return artifacts, message


def _cmd_ingest(args, argv) -> tuple[list[Path], str]:
    records = load_multiwoz(args.multiwoz)
    sessions = [r.to_session() for r in records]
    spec = resolve_grammar(args.grammar)
    train, val, test = split_corpus(
        sessions, SplitSpec(ratios=tuple(args.split), rng_seed=args.seed)
    )
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    artifacts = [
        write_corpus([encode_session(s, spec) for s in train], outdir / "corpus_train.txt"),
        write_corpus([encode_session(s, spec) for s in val], outdir / "corpus_val.txt"),
        write_corpus([encode_session(s, spec) for s in test], outdir / "corpus_test.txt"),
        write_sessions_jsonl(test, outdir / "sessions_test.jsonl"),
    ]
    artifacts.append(_sidecar(outdir, "ingest", argv, {"seed": args.seed}, [str(args.multiwoz)]))
    return artifacts, f"ingested {len(records)} dialogs (train/val/test = {len(train)}/{len(val)}/{len(test)})"


def _cmd_vocab(args, argv) -> tuple[list[Path], str]:
    spec = resolve_grammar(args.grammar)
    vocab = build_vocab_from_files(args.corpus, args.max_size, spec)
    artifacts = [save_vocab(vocab, args.out)]
    artifacts.append(_sidecar(Path(args.out), "vocab", argv, {}, [str(c) for c in args.corpus]))
    return artifacts, f"vocabulary of {vocab.size} tokens ({len(vocab.special_tokens)} reserved)"


def _cmd_curriculum(args, argv) -> tuple[list[Path], str]:
    manifest = load_manifest(args.manifest)
    outdir = Path(args.outdir)
    final, traces = run_curriculum(manifest, outdir=outdir)
    artifacts = [outdir / "final.ckpt", outdir / "trace.csv"]
    artifacts += sorted(outdir.glob("stage*.ckpt"))
    inputs = [str(args.manifest), manifest.vocab_ref] + [s.corpus_ref for s in manifest.stages]
    artifacts.append(_sidecar(outdir, "curriculum", argv, {"seed": manifest.rng_seed}, inputs))
    evals = sum(len(t.points) for t in traces)
    return artifacts, (
        f"curriculum {manifest.name!r}: {len(traces)} stages, {evals} evaluations, "
        f"final stages {list(final.trained_stages)}"
    )


def _cmd_eval(args, argv) -> tuple[list[Path], str]:
    checkpoint = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    spec = resolve_grammar(args.grammar)
    sessions = read_sessions_jsonl(args.sessions)
    db = load_database(args.db)
    sampler = SamplerConfig(temperature=args.temperature, max_new_tokens=args.max_new_tokens)
    records = generate_responses(checkpoint, sessions, vocab, spec, sampler, seed=args.seed)
    goals = {s.session_id: s.goal for s in sessions}
    report = evaluate_records(records, goals, db)
    artifacts = [save_report(report, args.out)]
    if args.details:
        artifacts.append(save_record_details(records, args.details))
    inputs = [str(p) for p in (args.checkpoint, args.vocab, args.sessions, args.db)]
    artifacts.append(_sidecar(Path(args.out), "eval", argv, {"seed": args.seed}, inputs))
    return artifacts, (
        f"bleu {report.bleu:.2f} inform {report.inform:.1f} success {report.success:.1f} "
        f"combined {report.combined:.1f} over {report.counts} dialogs"
    )


def _parse_labeled(values: list[str], arity: int, flag: str) -> list[tuple]:
    out = []
    for value in values:
        parts = value.split("=", arity)
        if len(parts) != arity + 1:
            raise ValidationError(
                f"{flag} expects {'='.join(['label'] * arity + ['path'])}, got {value!r}"
            )
        out.append(tuple(parts))
    return out


def _cmd_report(args, argv) -> tuple[list[Path], str]:
    traces = {}
    for name, path in _parse_labeled(args.trace, 1, "--trace"):
        traces[name] = load_trace_csv(path)
    reports = {}
    for name, size, path in _parse_labeled(args.metrics or [], 2, "--metrics"):
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        from .metrics import EvalReport

        reports[(name, size)] = EvalReport(
            bleu=payload["bleu"],
            inform=payload["inform"],
            success=payload["success"],
            counts=payload["counts"],
            truncated_generations=payload.get("truncated_generations", 0),
        )
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    formats = ("csv", "svg") if args.format == "both" else (args.format,)
    artifacts = list(emit_report(traces, reports or None, outdir, formats))
    inputs = [p for _, p in _parse_labeled(args.trace, 1, "--trace")]
    inputs += [p for _, _, p in _parse_labeled(args.metrics or [], 2, "--metrics")]
    artifacts.append(_sidecar(outdir, "report", argv, {}, inputs))
    return artifacts, f"wrote {len(artifacts) - 1} report files"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curriclm",
        description="Staged-curriculum training of small dialog language models.",
    )
    parser.add_argument("--version", action="version", version=f"curriclm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a grammar-conformant synthetic corpus")
    p.add_argument("--grammar", required=True)
    p.add_argument("--n", type=int, required=True, help="number of sessions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--turns", type=int, default=2)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--min-words", type=int, default=3)
    p.add_argument("--max-words", type=int, default=8)
    p.add_argument("--sessions-out", help="also write structured sessions JSONL")
    p.add_argument("--db-out", help="also write a venue database matching the session goals")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("hack", help="fabricate a pseudo-supervised corpus from a forum dump")
    p.add_argument("--threads", required=True, help="forum dump JSONL path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-window", type=int, default=256)
    p.add_argument("--plain", action="store_true", help="emit unencoded text (no marker tokens)")
    p.set_defaults(func=_cmd_hack)

    p = sub.add_parser("ingest", help="load annotated dialogs and write split corpora")
    p.add_argument("--multiwoz", required=True, help="dialog JSON file or directory")
    p.add_argument("--outdir", required=True)
    p.add_argument("--grammar", default="target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                   metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("vocab", help="build a frozen word vocabulary over corpora")
    p.add_argument("--corpus", action="append", required=True)
    p.add_argument("--max-size", type=int, default=4096)
    p.add_argument("--grammar", default="target")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_vocab)

    p = sub.add_parser("curriculum", help="run a staged training curriculum")
    p.add_argument("--manifest", required=True)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=_cmd_curriculum)

    p = sub.add_parser("eval", help="generate oracle-conditioned responses and score them")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sessions", required=True, help="structured sessions JSONL")
    p.add_argument("--vocab", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--grammar", default="target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--details", help="also write per-record JSONL details")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="combine traces and metrics into CSV/SVG reports")
    p.add_argument("--trace", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--metrics", action="append", metavar="NAME=SIZE=PATH")
    p.add_argument("--format", choices=("csv", "svg", "both"), default="both")
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def run(argv: list[str]) -> CommandResult:
    logging.basicConfig(
        level=os.environ.get("CURRICLM_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = 0 if exc.code in (0, None) else 1
        return CommandResult(exit_code=code, log="")
    try:
        artifacts, message = args.func(args, argv)
    except (OSError,) as exc:
        return CommandResult(exit_code=2, log=f"I/O error: {exc}")
    except TrainingError as exc:
        return CommandResult(exit_code=3, log=f"training error: {exc}")
    except (ValidationError, IngestError) as exc:
        return CommandResult(exit_code=1, log=f"validation error: {exc}")
    return CommandResult(exit_code=0, artifacts=[str(a) for a in artifacts], log=message)


def main() -> None:
    result = run(sys.argv[1:])
    stream = sys.stdout if result.exit_code == 0 else sys.stderr
    if result.log:
        print(result.log, file=stream)
    sys.exit(result.exit_code)
