"""Ordered multi-stage training with early stopping and checkpoint hand-off.

A manifest lists stages in increasing grammar complexity. Each stage
trains from the previous stage's best checkpoint, evaluates every
``eval_every`` optimizer steps, stops once the best validation loss is
``plateau`` evaluations old, and hands the best-validation parameters
(not the last ones) to the next stage. Optimizer state resets at stage
boundaries; the learning rate is not re-warmed.
"""

from __future__ import annotations

import csv
import io
import logging
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from .codec import (
    DEFAULT_WINDOW_LIMIT,
    TokenWindow,
    Vocabulary,
    load_vocab,
    read_corpus,
    tokenize,
    windows_from_lines,
)
from .errors import TrainingError, ValidationError
from .fileio import atomic_write_text, read_json, write_json
from .grammar import ComplexityScore, GrammarSpec, complexity, resolve_grammar, validate_curriculum_order
from .ingest import SplitSpec, split_corpus
from .model import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_LEARNING_RATE,
    Checkpoint,
    ModelConfig,
    build_model,
    init_model,
    loss,
    make_optimizer,
    parameter_digest,
    save_checkpoint,
    snapshot_parameters,
    stamp_vocab,
    train_step,
    validate,
)

log = logging.getLogger(__name__)

# Fraction of a stage corpus held out for validation-loss monitoring.
STAGE_VAL_RATIO = 0.1
# A corpus whose unknown-token rate exceeds this was almost certainly
# produced for a different vocabulary.
MAX_OOV_RATE = 0.25


@dataclass(frozen=True)
class Stage:
    name: str
    corpus_ref: str
    grammar_ref: str | None = None
    complexity: ComplexityScore | None = None
    max_epochs: int = 10
    plateau: int = 5
    eval_every: int = 50

    def __post_init__(self):
        if self.plateau < 1:
            raise ValidationError(f"stage {self.name!r}: plateau must be at least 1")
        if self.max_epochs < 0:
            raise ValidationError(f"stage {self.name!r}: max_epochs must be non-negative")
        if self.eval_every < 1:
            raise ValidationError(f"stage {self.name!r}: eval_every must be at least 1")


@dataclass(frozen=True)
class CurriculumManifest:
    name: str
    stages: tuple[Stage, ...]
    model: ModelConfig
    vocab_ref: str
    rng_seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ValidationError("a curriculum needs at least one stage")


@dataclass(frozen=True)
class TracePoint:
    step: int
    train_loss: float
    val_loss: float


@dataclass
class LossTrace:
    stage: str
    points: list[TracePoint]

    def val_losses(self) -> list[float]:
        return [p.val_loss for p in self.points]

    def best_val(self) -> float:
        return min(self.val_losses())

    def initial_val(self) -> float:
        return self.points[0].val_loss


@dataclass(frozen=True)
class ManifestReport:
    ok: bool
    violations: tuple[str, ...] = ()


def should_stop(val_losses: Sequence[float], plateau: int) -> bool:
    """True once the best value is at least ``plateau`` evaluations old.

    Ties resolve to the earliest occurrence of the minimum.
    """
    if plateau < 1:
        raise ValidationError("plateau must be at least 1")
    if not val_losses:
        return False
    best_index = min(range(len(val_losses)), key=lambda i: (val_losses[i], i))
    return (len(val_losses) - 1 - best_index) >= plateau


def _resolve_stage_grammar(stage: Stage) -> GrammarSpec | None:
    if stage.grammar_ref is None:
        return None
    return resolve_grammar(stage.grammar_ref)


def _oov_rate(lines: Sequence[str], vocab: Vocabulary) -> float:
    total = 0
    unknown = 0
    for line in lines:
        ids = tokenize(line, vocab)
        total += len(ids)
        unknown += sum(1 for i in ids if i == vocab.unk_id)
    return unknown / total if total else 1.0


def validate_manifest(manifest: CurriculumManifest) -> ManifestReport:
    """Check grammar ordering, vocabulary coverage, and config consistency."""
    violations: list[str] = []

    grammars: list[tuple[int, GrammarSpec]] = []
    for i, stage in enumerate(manifest.stages):
        try:
            spec = _resolve_stage_grammar(stage)
        except ValidationError as exc:
            violations.append(f"stage {i} ({stage.name}): {exc}")
            continue
        if spec is not None:
            grammars.append((i, spec))
    if grammars:
        report = validate_curriculum_order([spec for _, spec in grammars])
        indices = [i for i, _ in grammars]
        for violation in report.violations:
            violations.append(f"grammar order over stages {indices}: {violation}")

    vocab: Vocabulary | None = None
    try:
        vocab = load_vocab(manifest.vocab_ref)
    except (OSError, ValidationError) as exc:
        violations.append(f"vocabulary {manifest.vocab_ref!r}: {exc}")

    if vocab is not None and manifest.model.vocab_size not in (0, vocab.size):
        violations.append(
            f"model vocab_size {manifest.model.vocab_size} != vocabulary size {vocab.size}"
        )
    if manifest.model.context_len < 1:
        violations.append("model context_len must be positive")

    for i, stage in enumerate(manifest.stages):
        try:
            lines = read_corpus(stage.corpus_ref)
        except OSError as exc:
            violations.append(f"stage {i} ({stage.name}): corpus unreadable: {exc}")
            continue
        if not lines:
            violations.append(f"stage {i} ({stage.name}): corpus is empty")
            continue
        if vocab is not None:
            rate = _oov_rate(lines, vocab)
            if rate > MAX_OOV_RATE:
                violations.append(
                    f"stage {i} ({stage.name}): vocabulary coverage violation "
                    f"({rate:.0%} unknown tokens; corpus tokenized for a different vocabulary?)"
                )
    return ManifestReport(ok=not violations, violations=tuple(violations))


@dataclass
class StageData:
    train_windows: list[TokenWindow]
    val_windows: list[TokenWindow]
    vocab: Vocabulary


def prepare_stage_data(
    stage: Stage,
    vocab: Vocabulary,
    seed: int,
    window_limit: int = DEFAULT_WINDOW_LIMIT,
) -> StageData:
    """Load a stage corpus and split it into train/validation windows."""
    lines = read_corpus(stage.corpus_ref)
    if len(lines) < 2:
        raise ValidationError(
            f"stage {stage.name!r}: corpus needs at least 2 lines for a validation split"
        )
    train_lines, val_lines, _ = split_corpus(
        lines, SplitSpec(ratios=(1.0 - STAGE_VAL_RATIO, STAGE_VAL_RATIO, 0.0), rng_seed=seed)
    )
    if not val_lines:
        # Floor allocation can starve tiny corpora; keep one line held out.
        val_lines = [train_lines.pop()]
    return StageData(
        train_windows=windows_from_lines(train_lines, vocab, window_limit),
        val_windows=windows_from_lines(val_lines, vocab, window_limit),
        vocab=vocab,
    )


def run_stage(
    checkpoint: Checkpoint,
    stage: Stage,
    data: StageData,
    *,
    seed: int = 0,
    step_offset: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    on_eval: Callable[[int, float, str], None] | None = None,
) -> tuple[Checkpoint, LossTrace]:
    """Train one stage; return the best-validation checkpoint and its trace.

    ``on_eval`` receives (step, val_loss, parameter_digest) after every
    evaluation, which makes best-checkpoint restoration externally
    checkable.
    """
    vocab = data.vocab
    if checkpoint.vocab_hash and checkpoint.vocab_hash != vocab.digest():
        raise ValidationError(
            f"stage {stage.name!r}: checkpoint vocabulary digest does not match the stage vocabulary"
        )
    if checkpoint.config.vocab_size != vocab.size:
        raise ValidationError(
            f"stage {stage.name!r}: model vocab_size {checkpoint.config.vocab_size} "
            f"!= vocabulary size {vocab.size}"
        )
    trace = LossTrace(stage=stage.name, points=[])
    if stage.max_epochs == 0:
        return checkpoint, trace
    if not data.train_windows or not data.val_windows:
        raise ValidationError(f"stage {stage.name!r}: empty train or validation windows")

    model = build_model(checkpoint)
    optimizer = make_optimizer(model, lr=learning_rate)
    rng = random.Random(seed)
    pad = vocab.pad_id

    step = step_offset
    val_history: list[float] = []
    best_val = float("inf")
    best_params = snapshot_parameters(model)
    train_accum: list[float] = []

    def evaluate(initial: bool = False) -> bool:
        nonlocal best_val, best_params
        val_loss = validate(model, data.val_windows, pad_id=pad, batch_size=batch_size)
        if initial:
            train_loss = loss(model, data.train_windows[:batch_size], pad_id=pad)
        else:
            train_loss = sum(train_accum) / len(train_accum)
        train_accum.clear()
        trace.points.append(TracePoint(step=step, train_loss=train_loss, val_loss=val_loss))
        val_history.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = snapshot_parameters(model)
        if on_eval is not None:
            on_eval(step, val_loss, parameter_digest(best_params))
        log.debug("stage %s step %d val %.4f", stage.name, step, val_loss)
        return should_stop(val_history, stage.plateau)

    try:
        stopped = evaluate(initial=True)
        for _ in range(stage.max_epochs):
            if stopped:
                break
            order = list(range(len(data.train_windows)))
            rng.shuffle(order)
            for start in range(0, len(order), batch_size):
                batch = [data.train_windows[i] for i in order[start : start + batch_size]]
                train_accum.append(train_step(model, batch, optimizer, pad_id=pad))
                step += 1
                if step % stage.eval_every == 0:
                    stopped = evaluate()
                    if stopped:
                        break
        if train_accum:
            # Epochs ran out between scheduled evaluations; score the final
            # parameters so they can compete for best-checkpoint selection.
            evaluate()
    except TrainingError as exc:
        raise TrainingError(f"stage {stage.name!r} diverged: {exc}", trace=trace) from exc

    best = Checkpoint(
        config=checkpoint.config,
        vocab_hash=vocab.digest(),
        parameters=best_params,
        trained_stages=checkpoint.trained_stages + (stage.name,),
        rng_state={"stage_seed": seed, "final_step": step},
    )
    return best, trace


def run_curriculum(
    manifest: CurriculumManifest,
    outdir: str | Path | None = None,
    *,
    initial_checkpoint: Checkpoint | None = None,
    on_eval: Callable[[int, float, str], None] | None = None,
) -> tuple[Checkpoint, list[LossTrace]]:
    """Execute every stage in order, handing the best checkpoint forward.

    With ``outdir`` set, per-stage checkpoints, the final checkpoint, and
    the loss trace CSV are written atomically as each stage completes.
    """
    report = validate_manifest(manifest)
    if not report.ok:
        raise ValidationError(
            "manifest is invalid:\n" + "\n".join(f"- {v}" for v in report.violations)
        )
    vocab = load_vocab(manifest.vocab_ref)
    window_limit = min(DEFAULT_WINDOW_LIMIT, manifest.model.context_len)
    config = manifest.model
    if config.vocab_size == 0:
        config = replace(config, vocab_size=vocab.size)

    if initial_checkpoint is None:
        checkpoint = init_model(config, manifest.rng_seed, vocab_hash=vocab.digest())
    else:
        checkpoint = stamp_vocab(initial_checkpoint, vocab.digest())

    outdir_path = Path(outdir) if outdir is not None else None
    if outdir_path is not None:
        outdir_path.mkdir(parents=True, exist_ok=True)

    traces: list[LossTrace] = []
    step_offset = 0
    for index, stage in enumerate(manifest.stages):
        stage_seed = manifest.rng_seed + 1_000_003 * (index + 1)
        data = prepare_stage_data(stage, vocab, seed=manifest.rng_seed, window_limit=window_limit)
        try:
            checkpoint, trace = run_stage(
                checkpoint,
                stage,
                data,
                seed=stage_seed,
                step_offset=step_offset,
                on_eval=on_eval,
            )
        except TrainingError as exc:
            if outdir_path is not None and exc.trace is not None:
                traces.append(exc.trace)
                save_trace_csv(traces, outdir_path / "trace.csv")
            raise
        traces.append(trace)
        if trace.points:
            step_offset = trace.points[-1].step
        if outdir_path is not None:
            save_checkpoint(checkpoint, outdir_path / f"stage{index:02d}_{stage.name}.ckpt")
            save_trace_csv(traces, outdir_path / "trace.csv")
    if outdir_path is not None:
        save_checkpoint(checkpoint, outdir_path / "final.ckpt")
    return checkpoint, traces


def save_trace_csv(traces: Sequence[LossTrace], path: str | Path) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["stage", "step", "train_loss", "val_loss"])
    for trace in traces:
        for point in trace.points:
            writer.writerow([trace.stage, point.step, repr(point.train_loss), repr(point.val_loss)])
    return atomic_write_text(path, buffer.getvalue())


def load_trace_csv(path: str | Path) -> list[LossTrace]:
    traces: dict[str, LossTrace] = {}
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            trace = traces.setdefault(row["stage"], LossTrace(stage=row["stage"], points=[]))
            trace.points.append(
                TracePoint(
                    step=int(row["step"]),
                    train_loss=float(row["train_loss"]),
                    val_loss=float(row["val_loss"]),
                )
            )
    return list(traces.values())


def manifest_to_dict(manifest: CurriculumManifest) -> dict:
    payload: dict = {
        "name": manifest.name,
        "seed": manifest.rng_seed,
        "model": {"preset": manifest.model.preset, "context_len": manifest.model.context_len},
        "vocab": manifest.vocab_ref,
        "stages": [
            {
                "name": s.name,
                "corpus": s.corpus_ref,
                "grammar": s.grammar_ref,
                "max_epochs": s.max_epochs,
                "plateau": s.plateau,
                "eval_every": s.eval_every,
            }
            for s in manifest.stages
        ],
    }
    if manifest.model.preset == "custom":
        payload["model"] = {
            "layers": manifest.model.layers,
            "heads": manifest.model.heads,
            "model_dim": manifest.model.model_dim,
            "ff_dim": manifest.model.ff_dim,
            "context_len": manifest.model.context_len,
        }
    return payload


def _resolve_ref(ref: str | None, base: Path) -> str | None:
    if ref is None:
        return None
    if ref in ("target", "pseudo"):
        return ref
    path = Path(ref)
    return str(path if path.is_absolute() else base / path)


def manifest_from_dict(payload: dict, base_dir: str | Path = ".") -> CurriculumManifest:
    base = Path(base_dir)
    try:
        model_payload = payload.get("model", {})
        if "preset" in model_payload:
            config = ModelConfig.from_preset(
                model_payload["preset"],
                vocab_size=0,
                context_len=int(model_payload.get("context_len", 256)),
            )
        else:
            config = ModelConfig(vocab_size=0, **model_payload)
        stages = []
        for entry in payload["stages"]:
            grammar_ref = _resolve_ref(entry.get("grammar"), base)
            score = None
            if grammar_ref is not None:
                score = complexity(resolve_grammar(grammar_ref))
            stages.append(
                Stage(
                    name=str(entry["name"]),
                    corpus_ref=str(_resolve_ref(entry["corpus"], base)),
                    grammar_ref=grammar_ref,
                    complexity=score,
                    max_epochs=int(entry.get("max_epochs", 10)),
                    plateau=int(entry.get("plateau", 5)),
                    eval_every=int(entry.get("eval_every", 50)),
                )
            )
        return CurriculumManifest(
            name=str(payload["name"]),
            stages=tuple(stages),
            model=config,
            vocab_ref=str(_resolve_ref(payload["vocab"], base)),
            rng_seed=int(payload.get("seed", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed curriculum manifest: {exc}") from exc


def load_manifest(path: str | Path) -> CurriculumManifest:
    path = Path(path)
    return manifest_from_dict(read_json(path), base_dir=path.parent)


def save_manifest(manifest: CurriculumManifest, path: str | Path) -> Path:
    return write_json(path, manifest_to_dict(manifest))
