"""Acceptance suite: one test per release criterion, each printing a
pass/fail line (run with ``pytest tests/test_acceptance.py -s`` to see
them stream). Tolerances are pinned here, not configurable.
"""

from __future__ import annotations

import json
import math
import random
import statistics

import pytest
import torch
from scipy.stats import chi2

from curriclm.codec import build_vocab, encode_session, parse_sequence, save_vocab, split_windows, write_corpus
from curriclm.curriculum import CurriculumManifest, Stage, prepare_stage_data, run_curriculum, run_stage, should_stop
from curriclm.grammar import builtin_grammar, sample_session
from curriclm.hacking import ForumThread, PseudoCorpusConfig, build_plain_corpus, build_pseudo_corpus, thread_to_sessions
from curriclm.ingest import VenueDatabase, load_forum_dump
from curriclm.metrics import GenerationRecord, bleu, combined, inform_success
from curriclm.model import ModelConfig, build_model, init_model, parameter_digest, sample_token

from gradcheck_util import max_relative_gradient_error, micro_checkpoint, parameter_count

PSEUDO = builtin_grammar("pseudo")
TARGET = builtin_grammar("target")


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


# --- 1. COMBINED arithmetic on the nine reported metric rows (exact) ----

REPORTED_ROWS = [
    ((31.3, 93.4, 90.4), 123.2),
    ((31.3, 93.3, 90.4), 123.2),
    ((31.3, 93.6, 90.4), 123.3),
    ((31.7, 93.2, 90.3), 123.5),
    ((31.8, 93.3, 90.2), 123.6),
    ((31.7, 93.5, 90.5), 123.7),
    ((31.5, 93.3, 89.6), 123.0),
    ((31.0, 93.0, 89.3), 122.2),
    ((31.6, 93.3, 89.9), 123.2),
]


def test_criterion_1_combined_arithmetic():
    mismatches = [
        (inputs, expected, combined(*inputs))
        for inputs, expected in REPORTED_ROWS
        if combined(*inputs) != expected
    ]
    _report(1, not mismatches, f"9/9 reported COMBINED rows exact (mismatches: {mismatches})")


# --- 2. Grammar round-trip over 1000 seeded sessions per built-in ------


def test_criterion_2_grammar_round_trip():
    failures = 0
    for spec in (TARGET, PSEUDO):
        for seed in range(1000):
            session = sample_session(spec, seed, turns=1 + seed % 3, vocab_size=50)
            result = parse_sequence(encode_session(session, spec), spec, mode="strict")
            if result.session != session or result.diagnostics:
                failures += 1
    _report(2, failures == 0, f"2000 encode->strict-parse round trips, {failures} failures")


# --- 3. Data-hacking conformance on a >=50-thread fixture dump ---------


def _fixture_dump(tmp_path):
    rng = random.Random(99)
    topics = ["paris", "rome", "istanbul", "barcelona", "madrid", "amsterdam", "lisbon", "london"]
    lines = []
    for i in range(60):
        topic = topics[i % len(topics)]
        replies = [
            f"Reply {k} about {topic}: try the spot near landmark {rng.randrange(50)}."
            for k in range(rng.randrange(0, 7))
        ]
        lines.append(
            json.dumps(
                {
                    "source_id": f"thread-{i}",
                    "topic": topic,
                    "creator_message": f"Visiting {topic} soon, message {i}; what should I see?",
                    "replies": replies,
                }
            )
        )
    path = tmp_path / "dump.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_criterion_3_data_hacking_conformance(tmp_path):
    dump_path = _fixture_dump(tmp_path)
    dump = load_forum_dump(dump_path)
    expected_sessions = sum(len(t.replies) for t in dump.threads)
    sessions = [s for t in dump.threads for s in thread_to_sessions(t)]
    config = PseudoCorpusConfig(rng_seed=11, max_window_tokens=256)
    build_a = build_pseudo_corpus(sessions, config)
    build_b = build_pseudo_corpus(sessions, config)
    parse_ok = all(
        parse_sequence(line, PSEUDO, mode="strict").diagnostics == [] for line in build_a.lines
    )
    ok = (
        len(dump.threads) >= 50
        and len(sessions) == expected_sessions
        and build_a.turn_count == expected_sessions
        and parse_ok
        and "\n".join(build_a.lines) == "\n".join(build_b.lines)
    )
    _report(
        3,
        ok,
        f"{len(dump.threads)} threads -> {len(sessions)} sessions; "
        f"strict-parse 100%: {parse_ok}; rerun byte-identical",
    )


# --- 4. BLEU oracle values ----------------------------------------------


def test_criterion_4_bleu_oracle():
    hand_derived = 100.0 * math.exp(1.0 - 5.0 / 4.0)  # all precisions 1, BP = e^-0.25
    value = bleu(["a b c d"], ["a b c d e"])
    exact_100 = bleu(["a b c d", "e f g h i"], ["a b c d", "e f g h i"])
    ok = abs(value - hand_derived) <= 0.01 and abs(value - 77.88) <= 0.01 and exact_100 == 100.0
    _report(4, ok, f"bleu={value:.4f} vs hand-derived {hand_derived:.4f}; identical pairs -> {exact_100}")


# --- 5. Gradient check on a micro model ---------------------------------


def test_criterion_5_gradient_check():
    model = build_model(micro_checkpoint(seed=0))
    count = parameter_count(model)
    worst, swept = max_relative_gradient_error(seed=0)
    ok = count <= 2000 and swept == count and worst < 1e-4
    _report(5, ok, f"{swept} parameters swept (<=2000), max relative error {worst:.2e} < 1e-4")


# --- 6. Desk-scale qualitative reproduction of the loss comparison ------

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def curriculum_outcomes(tmp_path_factory):
    work = tmp_path_factory.mktemp("deskscale")
    pseudo_sessions = [
        sample_session(PSEUDO, 7_000_000 + i, turns=1, vocab_size=120, utterance_len_range=(3, 7))
        for i in range(20_000)
    ]
    target_sessions = [
        sample_session(TARGET, 8_000_000 + i, turns=4, vocab_size=120, utterance_len_range=(3, 7))
        for i in range(500)
    ]
    pack = PseudoCorpusConfig(rng_seed=13, max_window_tokens=256)
    pseudo_lines = build_pseudo_corpus(pseudo_sessions, pack).lines
    plain_lines = build_plain_corpus(pseudo_sessions, pack).lines
    target_lines = [encode_session(s, TARGET) for s in target_sessions]
    write_corpus(pseudo_lines, work / "pseudo.txt")
    write_corpus(plain_lines, work / "plain.txt")
    write_corpus(target_lines, work / "target.txt")
    vocab = build_vocab(pseudo_lines + plain_lines + target_lines, 1024, PSEUDO)
    save_vocab(vocab, work / "vocab.txt")

    model = ModelConfig.from_preset("small", vocab_size=0)

    def target_stage() -> Stage:
        return Stage(
            name="target", corpus_ref=str(work / "target.txt"), grammar_ref="target",
            max_epochs=6, plateau=5, eval_every=15,
        )

    def manifest(name: str, seed: int) -> CurriculumManifest:
        pretrains = {
            "none": (),
            "noencode": (
                Stage(name="plain", corpus_ref=str(work / "plain.txt"), grammar_ref=None,
                      max_epochs=1, plateau=5, eval_every=100),
            ),
            "ctl": (
                Stage(name="pseudo", corpus_ref=str(work / "pseudo.txt"), grammar_ref="pseudo",
                      max_epochs=1, plateau=5, eval_every=100),
            ),
        }
        return CurriculumManifest(
            name=name, stages=pretrains[name] + (target_stage(),),
            model=model, vocab_ref=str(work / "vocab.txt"), rng_seed=seed,
        )

    outcomes: dict[str, dict[str, list[float]]] = {}
    for name in ("none", "noencode", "ctl"):
        initials, bests = [], []
        for seed in SEEDS:
            _, traces = run_curriculum(manifest(name, seed))
            target_trace = next(t for t in traces if t.stage == "target")
            initials.append(target_trace.initial_val())
            bests.append(target_trace.best_val())
        outcomes[name] = {"initial": initials, "best": bests}
    return outcomes


def test_criterion_6_desk_scale_loss_comparison(curriculum_outcomes):
    ctl_initial = statistics.median(curriculum_outcomes["ctl"]["initial"])
    noencode_initial = statistics.median(curriculum_outcomes["noencode"]["initial"])
    ctl_best = statistics.median(curriculum_outcomes["ctl"]["best"])
    noencode_best = statistics.median(curriculum_outcomes["noencode"]["best"])
    ok = ctl_initial < noencode_initial and ctl_best <= noencode_best
    _report(
        6,
        ok,
        "median over 3 seeds: initial target val loss ctl "
        f"{ctl_initial:.4f} < noencode {noencode_initial:.4f}; "
        f"best ctl {ctl_best:.4f} <= noencode {noencode_best:.4f} "
        f"(none initial {statistics.median(curriculum_outcomes['none']['initial']):.4f}, "
        f"best {statistics.median(curriculum_outcomes['none']['best']):.4f})",
    )


# --- 7. Early stopping: exact stop points and best-checkpoint restore ---


def _stop_index(values, plateau):
    for k in range(len(values)):
        if should_stop(values[: k + 1], plateau):
            return k
    return None


def test_criterion_7_early_stopping(tmp_path):
    # Fixture A: the worked plateau-5 sequence stops exactly at the 7th value.
    fixture_a = [3.0, 2.9, 2.91, 2.92, 2.93, 2.95, 2.97, 2.99]
    stop_a = _stop_index(fixture_a, 5)
    # Fixture B: strictly decreasing never stops.
    fixture_b = [5.0 - 0.05 * k for k in range(40)]
    stop_b = _stop_index(fixture_b, 5)
    # Fixture C: ties resolve to the earliest minimum; plateau 3 stops at the 4th.
    fixture_c = [2.9, 2.9, 2.9, 2.9, 2.9]
    stop_c = _stop_index(fixture_c, 3)
    rules_ok = stop_a == 6 and stop_b is None and stop_c == 3

    # Best-checkpoint restoration during a real (tiny) stage run.
    spec = PSEUDO
    lines = [encode_session(sample_session(spec, i, turns=2, vocab_size=30), spec) for i in range(40)]
    write_corpus(lines, tmp_path / "tiny.txt")
    vocab = build_vocab(lines, 256, spec)
    config = ModelConfig(layers=1, heads=2, model_dim=16, ff_dim=32, context_len=64, vocab_size=vocab.size)
    checkpoint = init_model(config, 0, vocab_hash=vocab.digest())
    stage = Stage(name="tiny", corpus_ref=str(tmp_path / "tiny.txt"), max_epochs=6, plateau=2, eval_every=2)
    data = prepare_stage_data(stage, vocab, seed=0, window_limit=64)
    evals: list[tuple[int, float, str]] = []
    best, _ = run_stage(
        checkpoint, stage, data, seed=3, learning_rate=2e-2,
        on_eval=lambda step, val, digest: evals.append((step, val, digest)),
    )
    values = [v for _, v, _ in evals]
    best_eval = min(range(len(values)), key=lambda i: (values[i], i))
    restore_ok = parameter_digest(best) == evals[best_eval][2]
    stop_ok = len(values) - 1 - best_eval <= stage.plateau
    _report(
        7,
        rules_ok and restore_ok and stop_ok,
        f"stops at evals (A={stop_a}, B={stop_b}, C={stop_c}); "
        f"restored digest equals best eval digest: {restore_ok}",
    )


# --- 8. Sampling statistics ---------------------------------------------


def test_criterion_8_sampling_statistics():
    bins = 50
    draws = 10_000
    generator = torch.Generator().manual_seed(1234)
    uniform_logits = torch.zeros(bins)
    counts = [0] * bins
    for _ in range(draws):
        counts[sample_token(uniform_logits, 0.7, generator)] += 1
    expected = draws / bins
    statistic = sum((c - expected) ** 2 / expected for c in counts)
    critical = float(chi2.ppf(0.99, bins - 1))
    uniform_ok = statistic < critical

    peaked = torch.zeros(bins)
    peaked[17] = 1.0
    generator = torch.Generator().manual_seed(5678)
    hits = sum(1 for _ in range(draws) if sample_token(peaked, 0.01, generator) == 17)
    argmax_ok = hits / draws >= 0.999
    _report(
        8,
        uniform_ok and argmax_ok,
        f"chi-square {statistic:.1f} < {critical:.1f} at 99% ({bins} bins, {draws} draws); "
        f"argmax rate {hits / draws:.4f} >= 0.999 at temperature 0.01",
    )


# --- 9. Windowing over randomized streams --------------------------------


def test_criterion_9_windowing():
    rng = random.Random(42)
    failures = 0
    for _ in range(1000):
        stream = [rng.randrange(1000) for _ in range(rng.randrange(0, 1000))]
        windows = split_windows(stream, 256)
        rebuilt = [i for w in windows for i in w.ids]
        if rebuilt != stream or any(len(w) > 256 for w in windows):
            failures += 1
        if [w.index for w in windows] != list(range(len(windows))):
            failures += 1
    _report(9, failures == 0, f"1000 randomized streams: every window <= 256, exact reassembly")


# --- 10. Inform/success definitional fixtures ----------------------------


def _record(dialog_id, turn_index, text, truncated=False):
    return GenerationRecord(
        dialog_id=dialog_id, turn_index=turn_index,
        oracle_belief=(), oracle_action=(),
        reference_response="ref", generated_response=text, truncated=truncated,
    )


def test_criterion_10_inform_success_fixtures():
    from curriclm.dialog import DomainGoal, Goal

    db = VenueDatabase(
        {
            "restaurant": [
                {"name": "alpha house", "pricerange": "cheap"},
                {"name": "beta house", "pricerange": "expensive"},
            ],
            "hotel": [{"name": "gamma lodge", "area": "north"}],
        }
    )

    def goal(**domains):
        return Goal(
            tuple(
                (d, DomainGoal(tuple(sorted(info.items())), frozenset(req)))
                for d, (info, req) in domains.items()
            )
        )

    records = [
        _record("informed_successful", 0, "take [value_name] , phone [value_phone]"),
        _record("informed_only", 0, "take [value_name]"),
        _record("uninformed", 0, "we found nothing sorry"),
        _record("multi_domain", 0, "book [value_name] now"),
        _record("multi_domain", 1, "gamma lodge works , address [value_address]"),
        _record("no_goal", 0, "anything"),
        _record("truncated_case", 0, "still searching for", truncated=True),
    ]
    goals = {
        "informed_successful": goal(restaurant=({"pricerange": "cheap"}, {"phone"})),
        "informed_only": goal(restaurant=({"pricerange": "cheap"}, {"phone"})),
        "uninformed": goal(restaurant=({"pricerange": "cheap"}, set())),
        "multi_domain": goal(
            restaurant=({"pricerange": "cheap"}, set()),
            hotel=({"area": "north"}, {"address"}),
        ),
        "no_goal": None,
        "truncated_case": goal(restaurant=({"pricerange": "cheap"}, set())),
    }
    result = inform_success(records, goals, db)
    # Forced by the definitions: 5 evaluable dialogs, 3 informed, 2 successful.
    ok = (
        result.evaluated == 5
        and result.excluded == 1
        and result.inform == 100.0 * 3 / 5
        and result.success == 100.0 * 2 / 5
    )
    _report(
        10,
        ok,
        f"evaluated={result.evaluated} excluded={result.excluded} "
        f"inform={result.inform:.1f} success={result.success:.1f} (expected 60.0 / 40.0)",
    )
