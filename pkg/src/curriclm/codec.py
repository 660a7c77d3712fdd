"""Flat-text serialization of dialog sessions and word-level tokenization.

Each turn is emitted as one marked cycle::

    <sos_u> U <eos_u> <sos_b> B <eos_b> <sos_a> A <eos_a> <sos_r> R <eos_r>

Belief groups render as ``[domain] key value ...`` (single-label belief
fields render the bare label) and actions as ``[act] slot ...``.

Parsing runs in two modes: ``strict`` requires complete, properly nested
cycles and raises on the first violation; ``lenient`` never fails and
recovers as much structure as possible from model-generated text,
reporting diagnostics instead.
"""

from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .dialog import DialogSession, Turn
from .errors import ParseError, ValidationError
from .fileio import atomic_write_text
from .grammar import EMPTY, KEYED, ContentClass, GrammarSpec

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
DEFAULT_WINDOW_LIMIT = 256

_TOKEN_RE = re.compile(r"\S+")
_GROUP_RE = re.compile(r"^\[[^\[\]\s]+\]$")

FIELD_NAMES = {"u": "utterance", "b": "belief", "a": "action", "r": "response"}


def _is_group_token(token: str) -> bool:
    return bool(_GROUP_RE.match(token))


def render_belief(belief: Sequence[tuple[str, str, str]]) -> str:
    parts: list[str] = []
    prev_domain: str | None = None
    for domain, key, value in belief:
        if domain and domain != prev_domain:
            parts.append(f"[{domain}]")
            prev_domain = domain
        if key:
            parts.append(key)
        if value:
            parts.append(value)
    return " ".join(parts)


def render_actions(actions: Sequence[tuple[str, tuple[str, ...]]]) -> str:
    parts: list[str] = []
    for act, slots in actions:
        if act:
            parts.append(f"[{act}]")
        parts.extend(slots)
    return " ".join(parts)


def _field_text(turn: Turn, field_id: str) -> str:
    if field_id == "u":
        return turn.utterance
    if field_id == "b":
        return render_belief(turn.belief)
    if field_id == "a":
        return render_actions(turn.actions)
    if field_id == "r":
        return turn.response
    raise ValidationError(f"unknown field id {field_id!r}")


def encode_session(session: DialogSession, spec: GrammarSpec) -> str:
    """Serialize a session to one delimited line of tokens."""
    if not session.turns:
        warnings.warn("encoding a session with no turns yields an empty string")
        return ""
    markers = set(spec.marker_tokens)
    parts: list[str] = []
    for turn in session.turns:
        for marker, _ in spec.fields:
            text = _field_text(turn, marker.field_id)
            if "\n" in text:
                raise ValidationError(
                    f"field {marker.field_id!r} contains a newline; normalize first"
                )
            bad = [tok for tok in text.split() if tok in markers]
            if bad:
                raise ValidationError(
                    f"marker token {bad[0]!r} embedded in {marker.field_id!r} field text"
                )
            parts.append(marker.start_token)
            if text:
                parts.append(text)
            parts.append(marker.end_token)
    return " ".join(parts)


def parse_belief(tokens: Sequence[str], content: ContentClass) -> tuple[tuple[str, str, str], ...]:
    """Recover (domain, key, value) entries from a rendered belief field."""
    if not tokens:
        return ()
    if content.kind == KEYED and content.value_vocab is None:
        # Single-label classification field: the whole field is one label.
        return (("", " ".join(tokens), ""),)
    entries: list[tuple[str, str, str]] = []
    domain = ""
    key: str | None = None
    value_words: list[str] = []

    def flush():
        nonlocal key, value_words
        if key is not None:
            entries.append((domain, key, " ".join(value_words)))
        key = None
        value_words = []

    keys = content.key_vocab or frozenset()
    for token in tokens:
        if _is_group_token(token):
            flush()
            domain = token[1:-1]
        elif key is None:
            key = token
        elif token in keys:
            flush()
            key = token
        else:
            value_words.append(token)
    flush()
    return tuple(entries)


def parse_actions(tokens: Sequence[str]) -> tuple[tuple[str, tuple[str, ...]], ...]:
    entries: list[tuple[str, tuple[str, ...]]] = []
    act: str | None = None
    slots: list[str] = []

    def flush():
        nonlocal act, slots
        if act is not None or slots:
            entries.append((act or "", tuple(slots)))
        act = None
        slots = []

    for token in tokens:
        if _is_group_token(token):
            flush()
            act = token[1:-1]
        else:
            slots.append(token)
    flush()
    return tuple(entries)


@dataclass
class ParseResult:
    session: DialogSession
    diagnostics: list[str]

    @property
    def ok(self) -> bool:
        return not self.diagnostics


def _turn_from_fields(fields: dict[str, list[str]], spec: GrammarSpec) -> Turn:
    def tokens_of(field_id: str) -> list[str]:
        _, cls = spec.field(field_id)
        return [] if cls.kind == EMPTY else fields.get(field_id, [])

    _, belief_cls = spec.field("b")
    return Turn(
        utterance=" ".join(tokens_of("u")),
        belief=parse_belief(tokens_of("b"), belief_cls),
        actions=parse_actions(tokens_of("a")),
        response=" ".join(tokens_of("r")),
    )


def parse_sequence(text: str, spec: GrammarSpec, mode: str = "strict") -> ParseResult:
    """Parse delimited text back into a session.

    Strict mode raises :class:`ParseError` (with byte offset and the
    accepted-token set) on any deviation from complete cycles. Lenient
    mode always returns: partially recovered turns plus diagnostics.
    """
    if mode not in ("strict", "lenient"):
        raise ValidationError(f"unknown parse mode {mode!r}")
    strict = mode == "strict"
    tokens = [(m.group(0), m.start()) for m in _TOKEN_RE.finditer(text)]
    markers = set(spec.marker_tokens)
    n_fields = len(spec.fields)

    def fail(offset: int, expected: Iterable[str], found: str) -> None:
        expected = frozenset(expected)
        raise ParseError(
            f"expected {' or '.join(sorted(expected))}, found {found!r} at byte {offset}",
            offset=offset,
            expected=expected,
        )

    turns: list[Turn] = []
    diagnostics: list[str] = []
    pos = 0
    field_idx = 0
    fields: dict[str, list[str]] = {}
    open_field: str | None = None  # field id whose end token is pending
    content: list[str] = []

    def close_turn():
        nonlocal fields
        if fields:
            turns.append(_turn_from_fields(fields, spec))
        fields = {}

    while pos < len(tokens):
        marker, field_cls = spec.fields[field_idx]
        token, offset = tokens[pos]

        if open_field is None:
            # Expecting this field's start token.
            if token == marker.start_token:
                open_field = marker.field_id
                content = []
                pos += 1
                continue
            if strict:
                fail(offset, {marker.start_token}, token)
            # Lenient recovery: resync on whatever marker shows up next.
            if token in markers:
                for j, (other, _) in enumerate(spec.fields):
                    if token == other.start_token:
                        if j == 0 and field_idx != 0:
                            diagnostics.append(
                                f"missing fields before {token} at byte {offset}; turn closed early"
                            )
                            close_turn()
                        else:
                            diagnostics.append(
                                f"out-of-order marker {token} at byte {offset} "
                                f"(expected {marker.start_token})"
                            )
                        field_idx = j
                        break
                else:
                    diagnostics.append(
                        f"stray end marker {token} at byte {offset}; skipped"
                    )
                    pos += 1
                continue
            diagnostics.append(
                f"unexpected text {token!r} at byte {offset} "
                f"(expected {marker.start_token}); skipped"
            )
            pos += 1
            continue

        # A field is open: collect until its end token.
        if token == marker.end_token:
            if field_cls.kind == EMPTY and content:
                diagnostics.append(
                    f"content in empty {FIELD_NAMES[open_field]} field; dropped"
                )
                content = []
            fields[open_field] = content
            open_field = None
            pos += 1
            field_idx += 1
            if field_idx == n_fields:
                close_turn()
                field_idx = 0
                if not spec.cyclic and pos < len(tokens):
                    if strict:
                        fail(tokens[pos][1], {"<end of input>"}, tokens[pos][0])
                    diagnostics.append("trailing content after non-cyclic grammar; kept parsing")
            continue
        if token in markers:
            if strict:
                fail(offset, {marker.end_token}, token)
            diagnostics.append(
                f"unterminated {FIELD_NAMES[open_field]} field "
                f"(missing {marker.end_token}) at byte {offset}"
            )
            fields[open_field] = content
            open_field = None
            field_idx += 1
            if field_idx == n_fields:
                close_turn()
                field_idx = 0
            continue
        if strict and field_cls.kind == EMPTY:
            fail(offset, {marker.end_token}, token)
        content.append(token)
        pos += 1

    # End of input.
    if open_field is not None:
        marker, _ = spec.fields[field_idx]
        if strict:
            fail(len(text), {marker.end_token}, "<end of input>")
        diagnostics.append(f"unterminated {FIELD_NAMES[open_field]} field (input ended)")
        fields[open_field] = content
        close_turn()
    elif field_idx != 0:
        marker, _ = spec.fields[field_idx]
        if strict:
            fail(len(text), {marker.start_token}, "<end of input>")
        diagnostics.append(
            f"incomplete cycle: input ended before {marker.start_token}"
        )
        close_turn()

    session = DialogSession(session_id="", turns=tuple(turns), goal=None)
    return ParseResult(session=session, diagnostics=diagnostics)


@dataclass(frozen=True)
class Vocabulary:
    """Frozen word-level vocabulary with reserved special tokens.

    Specials (pad, unknown, then the grammar's markers) occupy the lowest
    ids so windows and checkpoints stay valid across curriculum stages.
    """

    id_to_token: tuple[str, ...]
    special_tokens: frozenset[str]

    def __post_init__(self):
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValidationError("vocabulary tokens must be unique")
        object.__setattr__(
            self, "_token_to_id", {tok: i for i, tok in enumerate(self.id_to_token)}
        )

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, self.unk_id)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def digest(self) -> str:
        body = "".join(tok + "\n" for tok in self.id_to_token)
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


def build_vocab(corpora: Iterable[str], max_size: int, spec: GrammarSpec) -> Vocabulary:
    """Frequency-ranked word vocabulary over the union of corpus texts.

    Ties break lexicographically; marker tokens and pad/unknown are
    reserved first regardless of corpus frequency.
    """
    specials = [PAD_TOKEN, UNK_TOKEN, *spec.marker_tokens]
    if max_size <= len(specials):
        raise ValidationError(
            f"max_size must exceed the {len(specials)} reserved special tokens"
        )
    counts: dict[str, int] = {}
    seen_any = False
    for corpus in corpora:
        for token in corpus.split():
            seen_any = True
            if token in specials:
                continue
            counts[token] = counts.get(token, 0) + 1
    if not seen_any:
        raise ValidationError("corpus union is empty; cannot build a vocabulary")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [tok for tok, _ in ranked[: max_size - len(specials)]]
    return Vocabulary(
        id_to_token=tuple(specials + words), special_tokens=frozenset(specials)
    )


def build_vocab_from_files(
    paths: Sequence[str | Path], max_size: int, spec: GrammarSpec
) -> Vocabulary:
    texts = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            texts.append(fh.read())
    return build_vocab(texts, max_size, spec)


def save_vocab(vocab: Vocabulary, path: str | Path) -> Path:
    return atomic_write_text(path, "".join(tok + "\n" for tok in vocab.id_to_token))


def load_vocab(path: str | Path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
        raise ValidationError(f"{path}: vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}")
    specials = [PAD_TOKEN, UNK_TOKEN]
    for token in tokens[2:]:
        if token.startswith("<") and token.endswith(">"):
            specials.append(token)
        else:
            break
    return Vocabulary(id_to_token=tuple(tokens), special_tokens=frozenset(specials))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id_of(token) for token in text.split()]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        if not 0 <= i < vocab.size:
            raise ValidationError(f"token id {i} outside vocabulary of size {vocab.size}")
        out.append(vocab.id_to_token[i])
    return " ".join(out)


@dataclass(frozen=True)
class TokenWindow:
    ids: tuple[int, ...]
    source_session: str = ""
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self) -> int:
        return len(self.ids)


def split_windows(
    ids: Sequence[int], limit: int = DEFAULT_WINDOW_LIMIT, source: str = ""
) -> list[TokenWindow]:
    """Greedy left-to-right segmentation into windows of at most ``limit``."""
    if limit < 1:
        raise ValidationError("window limit must be at least 1")
    return [
        TokenWindow(ids=tuple(ids[start : start + limit]), source_session=source, index=k)
        for k, start in enumerate(range(0, len(ids), limit))
    ]


def windows_from_lines(
    lines: Sequence[str], vocab: Vocabulary, limit: int = DEFAULT_WINDOW_LIMIT
) -> list[TokenWindow]:
    windows: list[TokenWindow] = []
    for n, line in enumerate(lines):
        ids = tokenize(line, vocab)
        if ids:
            windows.extend(split_windows(ids, limit, source=f"line{n}"))
    return windows


def read_corpus(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def write_corpus(lines: Sequence[str], path: str | Path) -> Path:
    return atomic_write_text(path, "".join(line + "\n" for line in lines))
