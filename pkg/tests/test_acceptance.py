"""Acceptance suite: one test per acceptance criterion, at stated tolerances.

Each test prints one PASS line on success (run with ``-s`` or ``-rP`` to see
them); a failing criterion fails its test. Runtime bounds are asserted with
a wall clock.
"""

from __future__ import annotations

import json
import math
import random
import time
from fractions import Fraction
from pathlib import Path

from conftest import (
    ScriptedProvider,
    RepeatingProvider,
    build_rolling_max_world,
)
from test_sanitize import CASES as SANITIZE_CASES, remaining_statement_lines
from hindsight import cli
from hindsight.evalharness import TaskResult, format_percent, pass_at_1, sanitize_code
from hindsight.memory import MemoryStore, MemoryTuple, cosine_similarity, retrieve_most_similar
from hindsight.provider import EmbeddingVector, FixtureStore, GenerationParams, RecordingProvider
from hindsight.refine import (
    RefinementBudget,
    Trajectory,
    extract_code_blocks,
    run_refinement,
)
from hindsight.sandbox import InProcessSession

CORPUS_PATH = Path(__file__).parent / "data" / "extraction_corpus.json"


def announce(name: str) -> None:
    print(f"ACCEPTANCE PASS: {name}")


def timed(limit_s: float):
    start = time.monotonic()

    def check():
        elapsed = time.monotonic() - start
        assert elapsed < limit_s, f"runtime {elapsed:.2f}s exceeds the {limit_s:.0f}s budget"

    return check


def _make_store(rng: random.Random, size: int, dim: int) -> MemoryStore:
    trajectory = Trajectory(instruction_rendered="shared", trials=[], stop_reason="no_code_emitted")
    store = MemoryStore()
    for i in range(size):
        store.append(
            MemoryTuple(
                id=f"t:{i}",
                instruction=f"instruction {i}",
                trajectory=trajectory,
                embedding=EmbeddingVector(
                    values=tuple(rng.gauss(0.0, 1.0) for _ in range(dim)), model_id="m"
                ),
                created_at="2000-01-01T00:00:00+00:00",
            )
        )
    return store


def _brute_force(store: MemoryStore, query: EmbeddingVector):
    best = None
    best_score = -math.inf
    for t in store:
        score = cosine_similarity(query, t.embedding)
        if score > best_score:
            best, best_score = t, score
    return best, best_score


def test_retrieval_oracle_equivalence():
    done = timed(10.0)
    rng = random.Random(20240)
    dim = 64
    for trial in range(200):
        size = rng.randint(1, 500)
        store = _make_store(rng, size, dim)
        query = EmbeddingVector(values=tuple(rng.gauss(0.0, 1.0) for _ in range(dim)), model_id="m")
        winner, score = retrieve_most_similar(store, query)
        oracle_winner, oracle_score = _brute_force(store, query)
        assert winner.id == oracle_winner.id, f"trial {trial}: winner mismatch"
        assert abs(score - oracle_score) <= 1e-12, f"trial {trial}: score mismatch"
    done()
    announce("retrieval oracle equivalence (200 randomized stores)")


def test_cosine_properties():
    done = timed(1.0)
    rng = random.Random(7)
    for _ in range(100):
        dim = rng.randint(2, 32)
        raw = [rng.gauss(0.0, 1.0) for _ in range(dim)]
        if all(abs(x) < 1e-12 for x in raw):
            continue
        a = EmbeddingVector(values=tuple(raw), model_id="m")
        b = EmbeddingVector(values=tuple(rng.gauss(0.0, 1.0) for _ in range(dim)), model_id="m")
        assert abs(cosine_similarity(a, a) - 1.0) <= 1e-12
        assert cosine_similarity(a, b) == cosine_similarity(b, a)

    # Positive scaling never changes the retrieval winner.
    dim = 16
    for case in range(100):
        case_rng = random.Random(1000 + case)
        vectors = [[case_rng.gauss(0.0, 1.0) for _ in range(dim)] for _ in range(15)]
        query = EmbeddingVector(values=tuple(case_rng.gauss(0.0, 1.0) for _ in range(dim)), model_id="m")
        trajectory = Trajectory(instruction_rendered="x", trials=[], stop_reason="no_code_emitted")

        def store_with(scales):
            store = MemoryStore()
            for i, v in enumerate(vectors):
                store.append(
                    MemoryTuple(
                        id=f"s:{i}",
                        instruction=f"i{i}",
                        trajectory=trajectory,
                        embedding=EmbeddingVector(
                            values=tuple(x * scales[i] for x in v), model_id="m"
                        ),
                        created_at="2000-01-01T00:00:00+00:00",
                    )
                )
            return store

        baseline, _ = retrieve_most_similar(store_with([1.0] * 15), query)
        scales = [case_rng.uniform(1e-3, 1e3) for _ in range(15)]
        scaled, _ = retrieve_most_similar(store_with(scales), query)
        assert scaled.id == baseline.id
    done()
    announce("cosine properties (self-similarity, symmetry, scale invariance)")


def test_table_arithmetic():
    done = timed(1.0)

    def synth(passed, total):
        return [
            TaskResult(
                task_id=f"t/{i}",
                passed=i < passed,
                pass_provenance="direct" if i < passed else "none",
                trajectory=None,
            )
            for i in range(total)
        ]

    for passed, total, expected in ((151, 164, "92.07"), (149, 164, "90.85"), (138, 164, "84.15")):
        fraction = pass_at_1(synth(passed, total))
        assert fraction == Fraction(passed, total)
        assert format_percent(fraction) == expected
    done()
    announce("pass@1 arithmetic renders 92.07 / 90.85 / 84.15 exactly")


def test_extraction_corpus():
    done = timed(1.0)
    corpus = json.loads(CORPUS_PATH.read_text(encoding="utf-8"))
    assert len(corpus) == 30
    for case in corpus:
        text = case["text"]
        blocks = extract_code_blocks(text)
        got = [{"language_tag": b.language_tag, "source": b.source} for b in blocks]
        assert got == case["expected"], case["name"]
        previous_end = 0
        for block in blocks:
            start, end = block.char_span
            assert text[start:end] == block.source, case["name"]
            assert start >= previous_end
            previous_end = end
    done()
    announce("extraction corpus (30 cases + reconstruction invariant)")


def test_sanitizer_corpus():
    done = timed(5.0)
    assert len(SANITIZE_CASES) == 20
    for name, source, expected in SANITIZE_CASES:
        out = sanitize_code(source)
        assert out == expected, name
        assert sanitize_code(out) == out, f"{name}: not idempotent"
        assert remaining_statement_lines(out) == [], name
        result = InProcessSession().execute(out, 10_000)
        assert result.status == "ok", f"{name}: {result.error_summary}"
    done()
    announce("sanitizer corpus (20 cases: idempotent, clean, executable)")


def test_end_to_end_replay(tmp_path):
    done = timed(10.0)
    world = build_rolling_max_world(tmp_path / "world")

    for run_id, workers in (("w1", "1"), ("w4", "4")):
        rc = cli.main([
            "eval", "--config", str(world.config_path),
            "--run-id", run_id, "--workers", workers,
        ])
        assert rc == 0

    report_1 = (world.out_dir / "runs" / "w1" / "report.json").read_bytes()
    report_4 = (world.out_dir / "runs" / "w4" / "report.json").read_bytes()
    assert report_1 == report_4, "reports must be identical across workers=1 and workers=4"

    report = json.loads(report_1)
    [result] = report["results"]
    assert result["passed"] is True
    assert result["trials_used"] >= 2

    transcript = json.loads(
        (world.out_dir / "runs" / "w1" / "demo_rolling-max.json").read_text(encoding="utf-8")
    )
    errors = [
        r["error_summary"]
        for trial in transcript["trajectory"]["trials"]
        for r in trial["results"]
        if r is not None and r["status"] == "runtime_error"
    ]
    assert any("IndexError" in e for e in errors), "expected a recorded IndexError runtime_error"
    done()
    announce("end-to-end replay (guided rolling_max passes; deterministic across workers)")


def test_budget_enforcement():
    done = timed(5.0)
    params = GenerationParams(model_id="test-model")
    for budget in (6, 12):
        provider = RepeatingProvider("```python\nprint('still trying')\n```")
        trajectory = run_refinement(
            "never stops", provider, InProcessSession(),
            RefinementBudget(max_trials=budget), params=params,
        )
        assert len(trajectory.trials) == budget
        assert trajectory.stop_reason == "budget_exhausted"
    done()
    announce("budget enforcement (exactly 6 and 12 trials, budget_exhausted)")


EPISODES = 20
RESUME_AT = 11


def _mbpp_file(path: Path) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for i in range(EPISODES):
            fh.write(json.dumps({"text": f"Write a function f{i} that returns {i}."}) + "\n")


def _explore_replies() -> list[str]:
    replies = []
    for i in range(EPISODES):
        replies.append(f"```python\ndef f{i}():\n    return {i}\n\nprint(f{i}())\n```")
        replies.append("verified.")
    return replies


def _strip_timing(value):
    """Null out wall-clock fields (timestamps, durations) recursively."""
    if isinstance(value, dict):
        return {
            key: 0 if key == "duration_ms" else "" if key == "created_at" else _strip_timing(inner)
            for key, inner in value.items()
        }
    if isinstance(value, list):
        return [_strip_timing(inner) for inner in value]
    return value


def _normalized_memory(path: Path) -> str:
    lines = []
    for line in path.read_text(encoding="utf-8").splitlines():
        record = _strip_timing(json.loads(line))
        lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines)


def test_explore_resume(tmp_path):
    done = timed(10.0)
    root = tmp_path / "explore"
    root.mkdir()
    mbpp = root / "mbpp.jsonl"
    _mbpp_file(mbpp)
    fixtures = root / "fixtures"

    import yaml

    config_path = root / "config.yaml"
    config_path.write_text(
        yaml.safe_dump({
            "mode": "replay",
            "executor": "inprocess",
            "mbpp_path": str(mbpp),
            "fixtures_dir": str(fixtures),
            "out_dir": str(root / "out"),
            "first_n": EPISODES,
            "workers": 1,
        }),
        encoding="utf-8",
    )

    # Record the fixture set once, against the scripted provider.
    record_config = cli.load_config(str(config_path), {"memory_path": str(root / "recording.jsonl")})
    recording = RecordingProvider(ScriptedProvider(replies=_explore_replies()), FixtureStore(fixtures))
    assert cli.cmd_explore(record_config, provider=recording) == 0

    # Uninterrupted replay run.
    full = root / "memory_full.jsonl"
    rc = cli.main(["explore", "--config", str(config_path), "--memory-path", str(full)])
    assert rc == 0

    # Interrupted run: the process dies after RESUME_AT episodes were
    # persisted (partial progress lands after every episode), then resumes.
    resumed = root / "memory_resumed.jsonl"
    rc = cli.main([
        "explore", "--config", str(config_path),
        "--memory-path", str(resumed), "--first-n", str(RESUME_AT),
    ])
    assert rc == 0
    assert len(_normalized_memory(resumed).splitlines()) == RESUME_AT
    rc = cli.main(["explore", "--config", str(config_path), "--memory-path", str(resumed)])
    assert rc == 0

    assert _normalized_memory(resumed) == _normalized_memory(full)
    done()
    announce("explore kill-and-resume equals the uninterrupted run byte-for-byte")
