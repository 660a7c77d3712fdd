"""Delimited-field cyclic regular grammars for dialog sequences.

A grammar is four marked fields per cycle (utterance, belief, action,
response), each with a content class. Two grammars ship built in:

* ``target`` - the full task grammar: keyed belief (slot keys/values)
  and keyed action (act keys/slots).
* ``pseudo`` - the simplified stage: belief is a single topic label and
  the action field is empty.

The module also provides the complexity ordering and structural
similarity relation used to validate training curricula, and a seeded
synthetic-session sampler for fixture-free experiments.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .dialog import DialogSession, DomainGoal, Goal, Turn
from .errors import ValidationError
from .fileio import read_json, write_json

FIELD_IDS = ("u", "b", "a", "r")

FREE_TEXT = "free_text"
KEYED = "keyed"
EMPTY = "empty"


@dataclass(frozen=True)
class FieldMarker:
    field_id: str
    start_token: str
    end_token: str


@dataclass(frozen=True)
class ContentClass:
    kind: str
    key_vocab: frozenset[str] | None = None
    value_vocab: frozenset[str] | None = None
    corpus_ref: str | None = None

    def __post_init__(self):
        if self.kind not in (FREE_TEXT, KEYED, EMPTY):
            raise ValidationError(f"unknown content kind {self.kind!r}")
        if self.kind == KEYED and not self.key_vocab:
            raise ValidationError("keyed content requires a non-empty key vocabulary")
        if self.kind == EMPTY and (self.key_vocab or self.value_vocab):
            raise ValidationError("empty content must carry no vocabularies")
        if self.key_vocab is not None:
            object.__setattr__(self, "key_vocab", frozenset(self.key_vocab))
        if self.value_vocab is not None:
            object.__setattr__(self, "value_vocab", frozenset(self.value_vocab))


@dataclass(frozen=True)
class GrammarSpec:
    name: str
    fields: tuple[tuple[FieldMarker, ContentClass], ...]
    cyclic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple((m, c) for m, c in self.fields))
        seen: set[str] = set()
        for marker, _ in self.fields:
            if marker.field_id not in FIELD_IDS:
                raise ValidationError(f"unknown field id {marker.field_id!r}")
            for token in (marker.start_token, marker.end_token):
                if not (token.startswith("<") and token.endswith(">") and len(token) > 2):
                    raise ValidationError(f"marker token {token!r} must look like <...>")
                if any(ch.isspace() for ch in token):
                    raise ValidationError(f"marker token {token!r} contains whitespace")
                if token in seen:
                    raise ValidationError(f"marker token {token!r} is not unique")
                seen.add(token)
        ids = [m.field_id for m, _ in self.fields]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate field ids in grammar")

    @property
    def marker_tokens(self) -> tuple[str, ...]:
        """All start/end tokens in field order (start, end, start, end, ...)."""
        out: list[str] = []
        for marker, _ in self.fields:
            out.extend((marker.start_token, marker.end_token))
        return tuple(out)

    def field(self, field_id: str) -> tuple[FieldMarker, ContentClass]:
        for marker, content in self.fields:
            if marker.field_id == field_id:
                return marker, content
        raise ValidationError(f"grammar {self.name!r} has no field {field_id!r}")


@dataclass(frozen=True)
class ComplexityScore:
    active_fields: int
    subtask_count: int

    def __post_init__(self):
        if self.active_fields < 0 or self.subtask_count < 0:
            raise ValidationError("complexity components must be non-negative")

    @property
    def total(self) -> int:
        return self.active_fields + self.subtask_count


@dataclass(frozen=True)
class AnnotationSchema:
    """Vocabularies the keyed fields draw from.

    The defaults let the built-in grammars work standalone; loaders can
    derive a schema from an annotated dataset and pass it here instead.
    """

    domains: tuple[str, ...]
    belief_keys: frozenset[str]
    belief_values: frozenset[str]
    act_keys: frozenset[str]
    act_slots: frozenset[str]
    topics: frozenset[str]


DEFAULT_SCHEMA = AnnotationSchema(
    domains=("restaurant", "hotel", "attraction", "train"),
    belief_keys=frozenset(
        {
            "pricerange",
            "area",
            "food",
            "type",
            "stars",
            "day",
            "people",
            "stay",
            "destination",
            "departure",
        }
    ),
    belief_values=frozenset(
        {
            "cheap",
            "moderate",
            "expensive",
            "centre",
            "north",
            "south",
            "east",
            "west",
            "italian",
            "chinese",
            "indian",
            "british",
            "guesthouse",
            "monday",
            "tuesday",
            "friday",
            "cambridge",
            "norwich",
            "2",
            "3",
            "4",
            "5",
        }
    ),
    act_keys=frozenset(
        {"inform", "request", "offer", "recommend", "select", "book", "nooffer"}
    ),
    act_slots=frozenset(
        {
            "choice",
            "name",
            "phone",
            "address",
            "postcode",
            "reference",
            "pricerange",
            "area",
            "food",
        }
    ),
    topics=frozenset(
        {
            "paris",
            "rome",
            "istanbul",
            "barcelona",
            "madrid",
            "amsterdam",
            "lisbon",
            "london",
        }
    ),
)

REQUESTED_SLOTS = ("phone", "address", "postcode")


def _markers() -> dict[str, FieldMarker]:
    return {fid: FieldMarker(fid, f"<sos_{fid}>", f"<eos_{fid}>") for fid in FIELD_IDS}


def builtin_grammar(name: str, schema: AnnotationSchema | None = None) -> GrammarSpec:
    """Return a built-in grammar (``target`` or ``pseudo``).

    ``schema`` overrides the keyed vocabularies, e.g. with one derived
    from an ingested dataset's annotations.
    """
    schema = schema or DEFAULT_SCHEMA
    m = _markers()
    if name == "target":
        fields = (
            (m["u"], ContentClass(FREE_TEXT, corpus_ref="utterances")),
            (m["b"], ContentClass(KEYED, schema.belief_keys, schema.belief_values)),
            (m["a"], ContentClass(KEYED, schema.act_keys, schema.act_slots)),
            (m["r"], ContentClass(FREE_TEXT, corpus_ref="responses")),
        )
    elif name == "pseudo":
        fields = (
            (m["u"], ContentClass(FREE_TEXT, corpus_ref="utterances")),
            (m["b"], ContentClass(KEYED, schema.topics)),
            (m["a"], ContentClass(EMPTY)),
            (m["r"], ContentClass(FREE_TEXT, corpus_ref="responses")),
        )
    else:
        raise ValidationError(f"unknown built-in grammar {name!r}")
    return GrammarSpec(name=name, fields=fields, cyclic=True)


def complexity(spec: GrammarSpec) -> ComplexityScore:
    """Count active fields plus keyed vocabulary sets.

    Deterministic, computable from the grammar alone, and orders the
    built-ins pseudo < target.
    """
    active = sum(1 for _, content in spec.fields if content.kind != EMPTY)
    subtasks = 0
    for _, content in spec.fields:
        if content.kind == KEYED:
            subtasks += 1 if content.key_vocab else 0
            subtasks += 1 if content.value_vocab else 0
    return ComplexityScore(active_fields=active, subtask_count=subtasks)


def similar(a: GrammarSpec, b: GrammarSpec) -> bool:
    """Structural similarity: same field sequence, same marker surfaces,
    both cyclic. This is the property checkpoint hand-off relies on."""
    ids_a = tuple(m.field_id for m, _ in a.fields)
    ids_b = tuple(m.field_id for m, _ in b.fields)
    return ids_a == ids_b and a.marker_tokens == b.marker_tokens and a.cyclic and b.cyclic


@dataclass(frozen=True)
class OrderReport:
    ok: bool
    violations: tuple[str, ...] = ()


def validate_curriculum_order(specs: Sequence[GrammarSpec]) -> OrderReport:
    """Check that complexity strictly increases and every pair is similar."""
    if not specs:
        raise ValidationError("curriculum order check requires at least one grammar")
    violations: list[str] = []
    for i in range(len(specs) - 1):
        a, b = specs[i], specs[i + 1]
        if not complexity(a).total < complexity(b).total:
            violations.append(
                f"complexity not increasing at ({i},{i + 1}): "
                f"{complexity(a).total} -> {complexity(b).total}"
            )
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            if not similar(specs[i], specs[j]):
                violations.append(f"grammars at ({i},{j}) are not similar")
    return OrderReport(ok=not violations, violations=tuple(violations))


def surface_words(vocab_size: int) -> list[str]:
    """The shared synthetic surface vocabulary used by all sampled corpora."""
    return [f"w{i}" for i in range(vocab_size)]


def _pick_word(rng: random.Random, words: list[str]) -> str:
    # Quadratic skew keeps a few words frequent, like natural text.
    return words[int(len(words) * rng.random() ** 2)]


def _pick_text(rng: random.Random, words: list[str], lo: int, hi: int) -> str:
    return " ".join(_pick_word(rng, words) for _ in range(rng.randint(lo, hi)))


def sample_session(
    spec: GrammarSpec,
    rng_seed: int,
    *,
    turns: int,
    vocab_size: int,
    utterance_len_range: tuple[int, int] = (3, 8),
    schema: AnnotationSchema | None = None,
) -> DialogSession:
    """Draw a synthetic session that encodes and strict-parses under ``spec``.

    Deterministic for a fixed seed. Sessions sampled from grammars whose
    belief field carries slot values also get a goal (constraints from
    the first turn, a few requested slots) so they are usable as
    evaluation fixtures end to end.
    """
    if turns <= 0:
        raise ValidationError("turns must be positive")
    if vocab_size <= 0:
        raise ValidationError("vocab_size must be positive")
    lo, hi = utterance_len_range
    if lo <= 0 or hi < lo:
        raise ValidationError("utterance_len_range must be a positive (min, max)")

    schema = schema or DEFAULT_SCHEMA
    rng = random.Random(rng_seed)
    words = surface_words(vocab_size)
    _, belief_cls = spec.field("b")
    _, action_cls = spec.field("a")

    tods_style = belief_cls.kind == KEYED and belief_cls.value_vocab is not None
    goal: Goal | None = None
    goal_domain = ""
    requested: tuple[str, ...] = ()
    informing_turn = 0
    if tods_style:
        goal_domain = rng.choice(schema.domains)
        requested = tuple(
            rng.sample(REQUESTED_SLOTS, k=rng.randint(0, len(REQUESTED_SLOTS) - 1))
        )
        informing_turn = rng.randrange(turns)

    out_turns: list[Turn] = []
    first_belief: tuple = ()
    for t in range(turns):
        utterance = _pick_text(rng, words, lo, hi)
        response = _pick_text(rng, words, lo, hi)

        belief: list[tuple[str, str, str]] = []
        if belief_cls.kind == KEYED and belief_cls.value_vocab is None:
            belief.append(("", rng.choice(sorted(belief_cls.key_vocab)), ""))
        elif tods_style:
            keys = rng.sample(
                sorted(belief_cls.key_vocab), k=rng.randint(1, min(3, len(belief_cls.key_vocab)))
            )
            for key in keys:
                belief.append(
                    (goal_domain, key, rng.choice(sorted(belief_cls.value_vocab)))
                )
        if t == 0:
            first_belief = tuple(belief)

        actions: list[tuple[str, tuple[str, ...]]] = []
        if action_cls.kind == KEYED:
            for _ in range(rng.randint(1, 2)):
                act = rng.choice(sorted(action_cls.key_vocab))
                slot_pool = sorted(action_cls.value_vocab or frozenset())
                slots = tuple(
                    rng.sample(slot_pool, k=rng.randint(0, min(2, len(slot_pool))))
                )
                actions.append((act, slots))

        if tods_style and t == informing_turn:
            response = " ".join(
                [response, "[value_name]"] + [f"[value_{s}]" for s in requested]
            )

        out_turns.append(
            Turn(utterance=utterance, belief=tuple(belief), actions=tuple(actions), response=response)
        )

    if tods_style and first_belief:
        informable = tuple(sorted((k, v) for _, k, v in first_belief))
        goal = Goal(((goal_domain, DomainGoal(informable, frozenset(requested))),))

    return DialogSession(
        session_id=f"{spec.name}-{rng_seed}", turns=tuple(out_turns), goal=goal
    )


def grammar_to_dict(spec: GrammarSpec) -> dict:
    return {
        "name": spec.name,
        "cyclic": spec.cyclic,
        "fields": [
            {
                "field_id": marker.field_id,
                "start_token": marker.start_token,
                "end_token": marker.end_token,
                "content": {
                    "kind": content.kind,
                    "key_vocab": sorted(content.key_vocab) if content.key_vocab else None,
                    "value_vocab": sorted(content.value_vocab) if content.value_vocab else None,
                    "corpus_ref": content.corpus_ref,
                },
            }
            for marker, content in spec.fields
        ],
    }


def grammar_from_dict(payload: dict) -> GrammarSpec:
    try:
        fields = tuple(
            (
                FieldMarker(
                    entry["field_id"], entry["start_token"], entry["end_token"]
                ),
                ContentClass(
                    kind=entry["content"]["kind"],
                    key_vocab=frozenset(entry["content"]["key_vocab"])
                    if entry["content"].get("key_vocab")
                    else None,
                    value_vocab=frozenset(entry["content"]["value_vocab"])
                    if entry["content"].get("value_vocab")
                    else None,
                    corpus_ref=entry["content"].get("corpus_ref"),
                ),
            )
            for entry in payload["fields"]
        )
        return GrammarSpec(
            name=str(payload["name"]), fields=fields, cyclic=bool(payload.get("cyclic", True))
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed grammar config: {exc}") from exc


def save_grammar(spec: GrammarSpec, path: str | Path) -> Path:
    return write_json(path, grammar_to_dict(spec))


def load_grammar(path: str | Path) -> GrammarSpec:
    return grammar_from_dict(read_json(path))


def resolve_grammar(ref: str | Path) -> GrammarSpec:
    """Resolve a builtin name or a grammar config file path."""
    if isinstance(ref, str) and ref in ("target", "pseudo"):
        return builtin_grammar(ref)
    path = Path(ref)
    if not path.exists():
        raise ValidationError(f"grammar reference {ref!r} is neither built in nor a file")
    return load_grammar(path)
