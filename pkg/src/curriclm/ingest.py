"""Loaders for annotated dialog data, forum dumps, and venue databases.

Annotated dialogs arrive as a JSON list (or a directory of JSON files)
of records shaped like::

    {"dialog_id": "...",
     "goal": {"restaurant": {"informable": {"pricerange": "cheap"},
                             "requested": ["phone"]}},
     "turns": [{"user_utterance": "...",
                "belief_annotation": {"restaurant": {"pricerange": "cheap"}},
                "dialog_acts": [{"act": "inform", "slots": ["choice"]}],
                "delexicalized_response": "..."}]}

Forum dumps are JSONL with fields {source_id, topic, creator_message,
replies[]}; the venue database is JSONL with one entity per line,
{"domain": ..., "name": ..., <slot>: <value>, ...}.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence, TypeVar

from .dialog import DialogSession, Goal, Turn
from .errors import IngestError, ValidationError
from .grammar import DEFAULT_SCHEMA, AnnotationSchema
from .hacking import ForumThread, normalize_text

T = TypeVar("T")


@dataclass(frozen=True)
class RawTurn:
    user_utterance: str
    belief_annotation: tuple[tuple[str, str, str], ...]
    dialog_acts: tuple[tuple[str, tuple[str, ...]], ...]
    delexicalized_response: str


@dataclass(frozen=True)
class RawDialogRecord:
    dialog_id: str
    turns: tuple[RawTurn, ...]
    goal: Goal | None

    def to_session(self) -> DialogSession:
        return DialogSession(
            session_id=self.dialog_id,
            turns=tuple(
                Turn(
                    utterance=normalize_text(t.user_utterance),
                    belief=t.belief_annotation,
                    actions=t.dialog_acts,
                    response=normalize_text(t.delexicalized_response),
                )
                for t in self.turns
            ),
            goal=self.goal,
        )


def _parse_record(payload: Mapping, where: str) -> RawDialogRecord:
    dialog_id = payload.get("dialog_id")
    if not dialog_id:
        raise IngestError(f"{where}: record has no dialog_id")
    turns_payload = payload.get("turns")
    if not turns_payload:
        raise IngestError(f"{where}: dialog {dialog_id!r} has no turns")
    turns = []
    for i, t in enumerate(turns_payload):
        missing = [
            key
            for key in ("user_utterance", "delexicalized_response")
            if key not in t
        ]
        if missing:
            raise IngestError(
                f"{where}: dialog {dialog_id!r} turn {i} missing {missing[0]!r}"
            )
        belief = []
        annotation = t.get("belief_annotation", {})
        if not isinstance(annotation, Mapping):
            raise IngestError(
                f"{where}: dialog {dialog_id!r} turn {i} belief_annotation must be a mapping"
            )
        for domain, slots in annotation.items():
            for key, value in slots.items():
                belief.append((str(domain), str(key), normalize_text(str(value))))
        acts = []
        for act in t.get("dialog_acts", []):
            acts.append((str(act["act"]), tuple(str(s) for s in act.get("slots", ()))))
        turns.append(
            RawTurn(
                user_utterance=str(t["user_utterance"]),
                belief_annotation=tuple(belief),
                dialog_acts=tuple(acts),
                delexicalized_response=str(t["delexicalized_response"]),
            )
        )
    goal_payload = payload.get("goal")
    goal = Goal.from_mapping(goal_payload) if goal_payload else None
    return RawDialogRecord(dialog_id=str(dialog_id), turns=tuple(turns), goal=goal)


def load_multiwoz(path: str | Path) -> list[RawDialogRecord]:
    """Load annotated dialog records from a JSON file or directory of them."""
    path = Path(path)
    if not path.exists():
        raise OSError(f"no such file or directory: {path}")
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    if not files:
        raise IngestError(f"{path}: no dialog files found")
    records: list[RawDialogRecord] = []
    for file in files:
        with open(file, encoding="utf-8") as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{file}: not valid JSON: {exc}") from exc
        if not isinstance(payload, list):
            raise IngestError(f"{file}: expected a JSON list of dialog records")
        for entry in payload:
            records.append(_parse_record(entry, str(file)))
    return records


@dataclass
class ForumDump:
    threads: list[ForumThread]
    diagnostics: list[str]


def load_forum_dump(path: str | Path) -> ForumDump:
    """Parse a JSONL forum dump; malformed lines are skipped and counted."""
    path = Path(path)
    if not path.exists():
        raise OSError(f"no such file: {path}")
    threads: list[ForumThread] = []
    diagnostics: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                thread = ForumThread(
                    topic=str(payload["topic"]),
                    creator_message=str(payload["creator_message"]),
                    replies=tuple(str(r) for r in payload.get("replies", ())),
                    source_id=str(payload.get("source_id", f"line{n}")),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
                diagnostics.append(f"line {n}: skipped ({exc})")
                continue
            threads.append(thread)
    return ForumDump(threads=threads, diagnostics=diagnostics)


class VenueDatabase:
    """Per-domain entity tables with unique names, queryable by constraints."""

    def __init__(self, entities: Mapping[str, Sequence[Mapping[str, str]]]):
        self._domains: dict[str, list[dict[str, str]]] = {}
        for domain, rows in entities.items():
            seen: set[str] = set()
            table = []
            for row in rows:
                name = str(row.get("name", ""))
                if not name:
                    raise IngestError(f"domain {domain!r}: entity without a name")
                if name in seen:
                    raise IngestError(f"domain {domain!r}: duplicate entity name {name!r}")
                seen.add(name)
                table.append({str(k): str(v) for k, v in row.items()})
            self._domains[str(domain)] = table

    @property
    def domains(self) -> tuple[str, ...]:
        return tuple(sorted(self._domains))

    def size(self, domain: str) -> int:
        return len(self._domains.get(domain, ()))

    def query(
        self, domain: str, constraints: Mapping[str, str] | Sequence[tuple[str, str]]
    ) -> list[dict[str, str]]:
        """Entities matching every constraint; 'dontcare' and empty values
        are treated as unconstrained."""
        if not isinstance(constraints, Mapping):
            constraints = dict(constraints)
        active = {
            k: v for k, v in constraints.items() if v not in ("", "dontcare")
        }
        out = []
        for entity in self._domains.get(domain, ()):
            if all(entity.get(k) == v for k, v in active.items()):
                out.append(entity)
        return out

    def names(self, domain: str, constraints) -> list[str]:
        return [e["name"] for e in self.query(domain, constraints)]


def load_database(path: str | Path) -> VenueDatabase:
    path = Path(path)
    if not path.exists():
        raise OSError(f"no such file: {path}")
    by_domain: dict[str, list[dict[str, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                domain = str(payload.pop("domain"))
            except (json.JSONDecodeError, KeyError) as exc:
                raise IngestError(f"{path}:{n}: bad entity record ({exc})") from exc
            by_domain.setdefault(domain, []).append(payload)
    return VenueDatabase(by_domain)


def save_database(entities: Mapping[str, Sequence[Mapping[str, str]]], path: str | Path) -> Path:
    from .fileio import atomic_write_text

    lines = []
    for domain in sorted(entities):
        for row in entities[domain]:
            record = {"domain": domain, **row}
            lines.append(json.dumps(record, sort_keys=True))
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    rng_seed: int = 0

    def __post_init__(self):
        if any(r < 0 for r in self.ratios):
            raise ValidationError("split ratios must be non-negative")
        if not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ValidationError(f"split ratios must sum to 1.0, got {sum(self.ratios)}")


def split_corpus(items: Sequence[T], spec: SplitSpec) -> tuple[list[T], list[T], list[T]]:
    """Seeded permutation, then a contiguous train/val/test partition.

    Validation and test sizes are floored; the remainder goes to train.
    """
    order = list(range(len(items)))
    random.Random(spec.rng_seed).shuffle(order)
    n = len(items)
    n_val = int(spec.ratios[1] * n)
    n_test = int(spec.ratios[2] * n)
    n_train = n - n_val - n_test
    shuffled = [items[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


def schema_from_records(
    records: Sequence[RawDialogRecord], topics: Sequence[str] | None = None
) -> AnnotationSchema:
    """Derive keyed-field vocabularies from a dataset's annotations."""
    domains: list[str] = []
    belief_keys, belief_values, act_keys, act_slots = set(), set(), set(), set()
    for record in records:
        for turn in record.turns:
            for domain, key, value in turn.belief_annotation:
                if domain not in domains:
                    domains.append(domain)
                belief_keys.add(key)
                belief_values.add(normalize_text(value))
            for act, slots in turn.dialog_acts:
                act_keys.add(act)
                act_slots.update(slots)
    if not belief_keys:
        raise ValidationError("records carry no belief annotations; cannot derive a schema")
    return AnnotationSchema(
        domains=tuple(domains),
        belief_keys=frozenset(belief_keys),
        belief_values=frozenset(belief_values),
        act_keys=frozenset(act_keys) or DEFAULT_SCHEMA.act_keys,
        act_slots=frozenset(act_slots) or DEFAULT_SCHEMA.act_slots,
        topics=frozenset(topics) if topics else DEFAULT_SCHEMA.topics,
    )
