"""Structured dialog data: turns, sessions, and user goals.

A session is an ordered list of turns; each turn carries the four
channels that the delimited-field encoding serializes (utterance,
belief, actions, response). Values are immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .fileio import atomic_write_text

BeliefEntry = tuple[str, str, str]  # (domain, slot_key, slot_value)
ActionEntry = tuple[str, tuple[str, ...]]  # (act_key, slots)


@dataclass(frozen=True)
class DomainGoal:
    """What the user wants within one domain: constraints plus requested slots."""

    informable: tuple[tuple[str, str], ...] = ()
    requested: frozenset[str] = frozenset()

    def informable_dict(self) -> dict[str, str]:
        return dict(self.informable)


@dataclass(frozen=True)
class Goal:
    domains: tuple[tuple[str, DomainGoal], ...] = ()

    def as_dict(self) -> dict[str, DomainGoal]:
        return dict(self.domains)

    @staticmethod
    def from_mapping(mapping: Mapping[str, Mapping]) -> "Goal":
        domains = []
        for domain, payload in mapping.items():
            informable = tuple(sorted((str(k), str(v)) for k, v in payload.get("informable", {}).items()))
            requested = frozenset(str(s) for s in payload.get("requested", ()))
            domains.append((str(domain), DomainGoal(informable, requested)))
        return Goal(tuple(domains))

    def to_mapping(self) -> dict:
        return {
            domain: {
                "informable": dict(goal.informable),
                "requested": sorted(goal.requested),
            }
            for domain, goal in self.domains
        }


@dataclass(frozen=True)
class Turn:
    utterance: str
    belief: tuple[BeliefEntry, ...] = ()
    actions: tuple[ActionEntry, ...] = ()
    response: str = ""

    def __post_init__(self):
        object.__setattr__(
            self, "belief", tuple((str(d), str(k), str(v)) for d, k, v in self.belief)
        )
        object.__setattr__(
            self,
            "actions",
            tuple((str(a), tuple(str(s) for s in slots)) for a, slots in self.actions),
        )


@dataclass(frozen=True)
class DialogSession:
    """A dialog plus optional goal.

    Equality compares the turns only: ``session_id`` and ``goal`` are
    side-channel metadata that the flat text encoding does not carry, so
    excluding them keeps encode/parse round trips exact.
    """

    session_id: str = field(compare=False, default="")
    turns: tuple[Turn, ...] = ()
    goal: Goal | None = field(compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))

    @property
    def turn_count(self) -> int:
        return len(self.turns)


def session_to_dict(session: DialogSession) -> dict:
    return {
        "session_id": session.session_id,
        "goal": session.goal.to_mapping() if session.goal is not None else None,
        "turns": [
            {
                "utterance": t.utterance,
                "belief": [list(entry) for entry in t.belief],
                "actions": [[act, list(slots)] for act, slots in t.actions],
                "response": t.response,
            }
            for t in session.turns
        ],
    }


def session_from_dict(payload: Mapping) -> DialogSession:
    goal = payload.get("goal")
    return DialogSession(
        session_id=str(payload.get("session_id", "")),
        turns=tuple(
            Turn(
                utterance=str(t.get("utterance", "")),
                belief=tuple(tuple(entry) for entry in t.get("belief", ())),
                actions=tuple((a, tuple(slots)) for a, slots in t.get("actions", ())),
                response=str(t.get("response", "")),
            )
            for t in payload.get("turns", ())
        ),
        goal=Goal.from_mapping(goal) if goal else None,
    )


def write_sessions_jsonl(sessions: Iterable[DialogSession], path: str | Path) -> Path:
    body = "".join(
        json.dumps(session_to_dict(s), sort_keys=True) + "\n" for s in sessions
    )
    return atomic_write_text(path, body)


def read_sessions_jsonl(path: str | Path) -> list[DialogSession]:
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                sessions.append(session_from_dict(json.loads(line)))
    return sessions


def sessions_equal(a: Sequence[DialogSession], b: Sequence[DialogSession]) -> bool:
    return len(a) == len(b) and all(x == y for x, y in zip(a, b))
