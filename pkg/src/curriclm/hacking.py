"""Turn scraped forum threads into pseudo-supervised dialog corpora.

Each reply to a thread becomes one single-turn session: the thread
opener is the utterance, the thread topic is the belief label, the
action field stays empty, and the reply is the response. Sessions are
then shuffled with a seeded permutation and packed into multi-turn
encoded lines up to a token budget, so the model sees the cyclic
pattern across mixed topics.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass

from .codec import encode_session, split_windows
from .dialog import DialogSession, Turn
from .errors import ValidationError
from .grammar import GrammarSpec, builtin_grammar

log = logging.getLogger(__name__)

_WS_RE = re.compile(r"\s+")
_PUNCT_RE = re.compile(r"([.,!?;:])")


@dataclass(frozen=True)
class ForumThread:
    topic: str
    creator_message: str
    replies: tuple[str, ...]
    source_id: str = ""

    def __post_init__(self):
        if not self.creator_message.strip():
            raise ValidationError(f"thread {self.source_id!r} has an empty creator message")
        object.__setattr__(self, "replies", tuple(self.replies))


@dataclass(frozen=True)
class PseudoCorpusConfig:
    rng_seed: int = 0
    max_window_tokens: int = 256
    shuffle: bool = True

    def __post_init__(self):
        if self.max_window_tokens < 1:
            raise ValidationError("max_window_tokens must be at least 1")


def normalize_text(raw: str) -> str:
    """Lowercase, space out sentence punctuation, collapse whitespace.

    Angle brackets are dropped so free text can never smuggle a marker
    token into an encoded line. Idempotent by construction.
    """
    text = raw.lower()
    text = text.replace("<", " ").replace(">", " ")
    text = _PUNCT_RE.sub(r" \1 ", text)
    return _WS_RE.sub(" ", text).strip()


def thread_to_sessions(thread: ForumThread) -> list[DialogSession]:
    """One single-turn session per reply, in reply order."""
    utterance = normalize_text(thread.creator_message)
    topic = normalize_text(thread.topic)
    sessions = []
    for k, reply in enumerate(thread.replies):
        sessions.append(
            DialogSession(
                session_id=f"{thread.source_id}#{k}",
                turns=(
                    Turn(
                        utterance=utterance,
                        belief=(("", topic, ""),),
                        actions=(),
                        response=normalize_text(reply),
                    ),
                ),
            )
        )
    return sessions


@dataclass
class CorpusBuild:
    lines: list[str]
    diagnostics: list[str]

    @property
    def turn_count(self) -> int:
        # Every turn contributes exactly one utterance start marker.
        return sum(line.split().count("<sos_u>") for line in self.lines)


def _packed_lines(
    units: list[list[str]], max_tokens: int
) -> tuple[list[str], list[str]]:
    """Greedily join token units into lines of at most ``max_tokens``.

    Oversized single units are emitted as raw windows with a diagnostic;
    such lines are partial cycles and are excluded from the grammar
    conformance guarantee.
    """
    lines: list[str] = []
    diagnostics: list[str] = []
    current: list[str] = []
    used = 0
    for unit in units:
        if len(unit) > max_tokens:
            if current:
                lines.append(" ".join(current))
                current, used = [], 0
            # split_windows is generic over token sequences; here the
            # tokens are surface strings rather than ids.
            windows = split_windows(unit, max_tokens)
            diagnostics.append(
                f"unit of {len(unit)} tokens exceeds {max_tokens}; "
                f"split into {len(windows)} windows"
            )
            lines.extend(" ".join(w.ids) for w in windows)
            continue
        if used + len(unit) > max_tokens and current:
            lines.append(" ".join(current))
            current, used = [], 0
        current.extend(unit)
        used += len(unit)
    if current:
        lines.append(" ".join(current))
    return lines, diagnostics


def build_pseudo_corpus(
    sessions: list[DialogSession],
    config: PseudoCorpusConfig,
    spec: GrammarSpec | None = None,
) -> CorpusBuild:
    """Shuffle sessions with a seeded permutation and pack encoded turns
    into lines bounded by ``max_window_tokens``. Deterministic per seed;
    the turn count is conserved."""
    if not sessions:
        raise ValidationError("cannot build a corpus from zero sessions")
    spec = spec or builtin_grammar("pseudo")
    order = list(range(len(sessions)))
    if config.shuffle:
        random.Random(config.rng_seed).shuffle(order)
    units = [encode_session(sessions[i], spec).split() for i in order]
    units = [u for u in units if u]
    lines, diagnostics = _packed_lines(units, config.max_window_tokens)
    for message in diagnostics:
        log.warning("%s", message)
    return CorpusBuild(lines=lines, diagnostics=diagnostics)


def build_plain_corpus(
    sessions: list[DialogSession], config: PseudoCorpusConfig
) -> CorpusBuild:
    """The marker-free variant: the same utterance/response texts in a
    seeded random order, packed into lines of at most ``max_window_tokens``.
    Used by the curriculum that pre-trains on unencoded conversation text."""
    if not sessions:
        raise ValidationError("cannot build a corpus from zero sessions")
    texts: list[str] = []
    for session in sessions:
        for turn in session.turns:
            if turn.utterance:
                texts.append(turn.utterance)
            if turn.response:
                texts.append(turn.response)
    order = list(range(len(texts)))
    if config.shuffle:
        random.Random(config.rng_seed).shuffle(order)
    units = [texts[i].split() for i in order]
    units = [u for u in units if u]
    lines, diagnostics = _packed_lines(units, config.max_window_tokens)
    return CorpusBuild(lines=lines, diagnostics=diagnostics)
