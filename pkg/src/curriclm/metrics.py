"""Task-oriented dialog metrics over oracle-conditioned generations.

Responses are generated with the ground-truth belief and action injected
into the prefix, so only response quality is measured. BLEU is the
corpus-level geometric mean of clipped n-gram precisions (n up to 4)
times a brevity penalty, with zero-count precisions floored at 1e-9.
A dialog counts as informed when every goal domain got an entity offer
consistent with a database query under the goal constraints, and as
successful when it is informed and every requested slot shows up as a
delexicalized placeholder. COMBINED = (INFORM + SUCCESS) * 0.5 + BLEU,
rounded half-up to one decimal.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

from .codec import Vocabulary, detokenize, encode_session, render_actions, render_belief, tokenize
from .dialog import DialogSession, Goal
from .errors import ValidationError
from .fileio import atomic_write_text
from .grammar import GrammarSpec
from .ingest import VenueDatabase
from .model import Checkpoint, SamplerConfig, build_model, sample

BLEU_EPSILON = 1e-9
NAME_PLACEHOLDER = "[value_name]"


@dataclass(frozen=True)
class GenerationRecord:
    dialog_id: str
    turn_index: int
    oracle_belief: tuple[tuple[str, str, str], ...]
    oracle_action: tuple[tuple[str, tuple[str, ...]], ...]
    reference_response: str
    generated_response: str
    truncated: bool = False

    def to_dict(self) -> dict:
        return {
            "dialog_id": self.dialog_id,
            "turn_index": self.turn_index,
            "oracle_belief": [list(b) for b in self.oracle_belief],
            "oracle_action": [[a, list(s)] for a, s in self.oracle_action],
            "reference_response": self.reference_response,
            "generated_response": self.generated_response,
            "truncated": self.truncated,
        }


def _derive_seed(seed: int, dialog_id: str, turn_index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{dialog_id}:{turn_index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**31)


def oracle_prefix(history: Sequence[str], turn, spec: GrammarSpec) -> str:
    """The decoding prefix: all previous cycles, then the current utterance
    and oracle belief/action, ending at the open response marker."""
    markers = {m.field_id: m for m, _ in spec.fields}
    parts = list(history) + [
        markers["u"].start_token, turn.utterance, markers["u"].end_token,
        markers["b"].start_token, render_belief(turn.belief), markers["b"].end_token,
        markers["a"].start_token, render_actions(turn.actions), markers["a"].end_token,
        markers["r"].start_token,
    ]
    return " ".join(part for part in parts if part)


def generate_responses(
    checkpoint: Checkpoint,
    sessions: Sequence[DialogSession],
    vocab: Vocabulary,
    spec: GrammarSpec,
    sampler: SamplerConfig,
    seed: int,
) -> list[GenerationRecord]:
    """Decode a response per turn from an oracle-built prefix.

    The prefix is the full encoding of all previous turns plus the
    current utterance, oracle belief, and oracle action, ending at the
    open response marker. Decoding runs until the response end marker;
    records that exhaust the token budget first are flagged truncated.
    """
    if checkpoint.vocab_hash and checkpoint.vocab_hash != vocab.digest():
        raise ValidationError("checkpoint was trained against a different vocabulary")
    model = build_model(checkpoint)
    marker_ids = {vocab.id_of(tok) for tok in spec.marker_tokens}
    stop_id = vocab.id_of(spec.field("r")[0].end_token)
    sampler = SamplerConfig(
        temperature=sampler.temperature,
        stop_token=stop_id,
        max_new_tokens=sampler.max_new_tokens,
    )
    records: list[GenerationRecord] = []
    for session in sessions:
        history: list[str] = []
        for index, turn in enumerate(session.turns):
            prefix_ids = tokenize(oracle_prefix(history, turn, spec), vocab)
            limit = model.config.context_len - 1
            if len(prefix_ids) > limit:
                prefix_ids = prefix_ids[-limit:]
            generated = sample(model, prefix_ids, sampler, _derive_seed(seed, session.session_id, index))
            truncated = stop_id not in generated
            kept: list[int] = []
            for token_id in generated:
                if token_id in marker_ids:
                    break
                kept.append(token_id)
            records.append(
                GenerationRecord(
                    dialog_id=session.session_id,
                    turn_index=index,
                    oracle_belief=turn.belief,
                    oracle_action=turn.actions,
                    reference_response=turn.response,
                    generated_response=detokenize(kept, vocab),
                    truncated=truncated,
                )
            )
            history_turn = encode_session(
                DialogSession(session_id=session.session_id, turns=(turn,)), spec
            )
            history.append(history_turn)
    return records


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[str], references: Sequence[str]) -> float:
    """Corpus BLEU on a 0-100 scale with single references.

    Orders with no candidate n-grams at all are left out of the
    geometric mean (so matching corpora of very short strings still
    score 100); orders with n-grams but zero clipped matches contribute
    the 1e-9 floor.
    """
    if len(candidates) != len(references):
        raise ValidationError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise ValidationError("BLEU needs at least one candidate/reference pair")
    clipped = [0] * 4
    totals = [0] * 4
    candidate_length = 0
    reference_length = 0
    for candidate, reference in zip(candidates, references):
        cand_tokens = candidate.split()
        ref_tokens = reference.split()
        candidate_length += len(cand_tokens)
        reference_length += len(ref_tokens)
        for n in range(1, 5):
            counts = _ngram_counts(cand_tokens, n)
            ref_counts = _ngram_counts(ref_tokens, n)
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    if candidate_length == 0:
        return 0.0
    log_sum = 0.0
    orders = 0
    for n in range(4):
        if totals[n] == 0:
            continue
        precision = clipped[n] / totals[n] if clipped[n] > 0 else BLEU_EPSILON
        log_sum += math.log(precision)
        orders += 1
    if orders == 0:
        return 0.0
    brevity = 1.0 if candidate_length > reference_length else math.exp(
        1.0 - reference_length / candidate_length
    )
    return 100.0 * brevity * math.exp(log_sum / orders)


@dataclass
class InformSuccessResult:
    inform: float
    success: float
    evaluated: int
    excluded: int


def _domain_offered(responses: Sequence[str], domain: str, matches: Sequence[str]) -> bool:
    placeholders = {NAME_PLACEHOLDER, f"[{domain}_name]"}
    lowered = [r.lower() for r in responses]
    for response in lowered:
        tokens = set(response.split())
        if tokens & placeholders:
            if matches:
                return True
        for name in matches:
            if name.lower() in response:
                return True
    return False


def inform_success(
    records: Sequence[GenerationRecord],
    goals: Mapping[str, Goal | None],
    db: VenueDatabase,
) -> InformSuccessResult:
    """Dialog-level INFORM and SUCCESS percentages over evaluable dialogs."""
    by_dialog: dict[str, list[GenerationRecord]] = {}
    for record in records:
        by_dialog.setdefault(record.dialog_id, []).append(record)
    informed = 0
    successful = 0
    evaluated = 0
    excluded = 0
    for dialog_id, dialog_records in by_dialog.items():
        goal = goals.get(dialog_id)
        if goal is None or not goal.domains:
            excluded += 1
            continue
        evaluated += 1
        responses = [r.generated_response for r in dialog_records]
        offered_everywhere = True
        for domain, domain_goal in goal.domains:
            matches = db.names(domain, domain_goal.informable_dict())
            if not _domain_offered(responses, domain, matches):
                offered_everywhere = False
                break
        if not offered_everywhere:
            continue
        informed += 1
        requested = {slot for _, dg in goal.domains for slot in dg.requested}
        mentioned = set()
        for response in responses:
            for token in response.split():
                if token.startswith("[value_") and token.endswith("]"):
                    mentioned.add(token[len("[value_") : -1])
        if requested <= mentioned:
            successful += 1
    if evaluated == 0:
        raise ValidationError("no evaluable dialogs (every dialog lacked a goal)")
    return InformSuccessResult(
        inform=100.0 * informed / evaluated,
        success=100.0 * successful / evaluated,
        evaluated=evaluated,
        excluded=excluded,
    )


def combined(bleu_score: float, inform: float, success: float) -> float:
    """(INFORM + SUCCESS) * 0.5 + BLEU, rounded half-up to one decimal.

    Decimal arithmetic on the shortest decimal representation of each
    input keeps half-way cases (x.x5) rounding up instead of drifting
    on binary floating point.
    """
    total = (Decimal(str(inform)) + Decimal(str(success))) * Decimal("0.5") + Decimal(str(bleu_score))
    return float(total.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    bleu: float
    inform: float
    success: float
    counts: int
    truncated_generations: int = 0
    combined: float = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.bleu <= 100.0:
            raise ValidationError("bleu must be in [0, 100]")
        for name, value in (("inform", self.inform), ("success", self.success)):
            if not 0.0 <= value <= 100.0:
                raise ValidationError(f"{name} must be a percentage")
        self.combined = combined(self.bleu, self.inform, self.success)

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "inform": self.inform,
            "success": self.success,
            "combined": self.combined,
            "counts": self.counts,
            "truncated_generations": self.truncated_generations,
        }


def evaluate_records(
    records: Sequence[GenerationRecord],
    goals: Mapping[str, Goal | None],
    db: VenueDatabase,
) -> EvalReport:
    if not records:
        raise ValidationError("no generation records to evaluate")
    score = bleu(
        [r.generated_response for r in records],
        [r.reference_response for r in records],
    )
    rates = inform_success(records, goals, db)
    return EvalReport(
        bleu=score,
        inform=rates.inform,
        success=rates.success,
        counts=rates.evaluated,
        truncated_generations=sum(1 for r in records if r.truncated),
    )


def save_report(report: EvalReport, path: str | Path) -> Path:
    return atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def save_record_details(records: Sequence[GenerationRecord], path: str | Path) -> Path:
    body = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)
    return atomic_write_text(path, body)
