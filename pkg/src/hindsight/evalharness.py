"""Benchmark evaluation: dataset ingestion, exploration, verification, pass@1.

The exploring stage runs the refinement engine over instruction datasets and
persists every episode into the memory store. Evaluation runs each benchmark
task (optionally guided by a retrospection), verifies the produced code
against the task's hidden tests in a clean session, and falls back to
re-assessing every code block of a failed trajectory.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_EVEN
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .memory import MemoryStore, MemoryTuple, retrieve_most_similar, save as save_memory
from .provider import GenerationParams, Provider
from .refine import (
    DEFAULT_RUNNABLE_TAGS,
    DEFAULT_SYSTEM_PROMPT,
    CodeBlock,
    RefinementBudget,
    Trajectory,
    is_runnable,
    run_refinement,
)
from .retrospection import (
    DEFAULT_RETROSPECTION_TEMPLATE,
    DEFAULT_TRAJECTORY_BUDGET_CHARS,
    Retrospection,
    compose_guided_instruction,
    generate_retrospection,
)
from .sandbox import STATUS_OK, Session, SpawnError

log = logging.getLogger(__name__)

PASS_DIRECT = "direct"
PASS_SANITIZED = "sanitized"
PASS_REASSESSED = "reassessed"
PASS_NONE = "none"

VERIFY_FOOTER = "Ensure the solution is verified by printing the expected output."

REPORT_SCHEMA_VERSION = 1

SandboxFactory = Callable[[], Session]


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed or is missing required fields."""


# --- domain types ----------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    """One benchmark item: skeleton, entry point, and hidden test code."""

    task_id: str
    prompt: str
    entry_point: str
    test_code: str
    canonical_solution: str | None = None

    def __post_init__(self) -> None:
        if not self.test_code:
            raise ValueError("test_code must not be empty")
        if self.entry_point not in self.prompt:
            raise ValueError(f"entry point {self.entry_point!r} does not occur in the prompt")


@dataclass(frozen=True)
class ExploreInstruction:
    instruction: str
    reference_tests: str | None = None

    def __post_init__(self) -> None:
        if not self.instruction:
            raise ValueError("instruction must not be empty")


@dataclass
class TaskResult:
    task_id: str
    passed: bool
    pass_provenance: str
    trajectory: Trajectory | None
    retrospection: Retrospection | None = None
    trials_used: int = 0
    winning_block: tuple[int, int] | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.passed != (self.pass_provenance != PASS_NONE):
            raise ValueError("passed must agree with pass_provenance")


@dataclass
class EvalReport:
    results: list[TaskResult]
    config_digest: str = ""

    @property
    def pass_at_1(self) -> Fraction:
        return pass_at_1(self.results)


# --- dataset loaders -------------------------------------------------------


def _read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            yield lineno, record


def load_humaneval(path: str | Path) -> list[TaskSpec]:
    """Load a HumanEval-format JSONL file, one task per line, order preserved."""
    tasks: list[TaskSpec] = []
    for lineno, record in _read_jsonl(path):
        index = len(tasks)
        for required in ("task_id", "prompt", "entry_point", "test"):
            if required not in record:
                raise DatasetFormatError(
                    f"{path}: line {lineno} (task index {index}): missing field {required!r}"
                )
        try:
            tasks.append(
                TaskSpec(
                    task_id=record["task_id"],
                    prompt=record["prompt"],
                    entry_point=record["entry_point"],
                    test_code=record["test"],
                    canonical_solution=record.get("canonical_solution"),
                )
            )
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno} (task index {index}): {exc}") from exc
    return tasks


def load_mbpp(path: str | Path, first_n: int) -> list[ExploreInstruction]:
    """Load the first ``first_n`` records of an MBPP-format JSONL file."""
    if first_n < 1:
        raise ValueError("first_n must be >= 1")
    records: list[ExploreInstruction] = []
    for lineno, record in _read_jsonl(path):
        if "text" not in record:
            raise DatasetFormatError(f"{path}: line {lineno}: missing field 'text'")
        tests = record.get("test_list")
        reference = "\n".join(tests) if tests else None
        records.append(ExploreInstruction(instruction=record["text"], reference_tests=reference))
    if first_n > len(records):
        raise DatasetFormatError(
            f"{path}: requested the first {first_n} records but only {len(records)} are available"
        )
    return records[:first_n]


# --- instruction rendering -------------------------------------------------


def render_explore_instruction(item: ExploreInstruction) -> str:
    return f"{item.instruction}\n\n{VERIFY_FOOTER}"


def render_task_instruction(task: TaskSpec) -> str:
    prompt = task.prompt if task.prompt.endswith("\n") else task.prompt + "\n"
    return (
        "Write a Python script to solve the following problem:\n\n"
        f"```\n{prompt}```\n\n{VERIFY_FOOTER}"
    )


# --- exploring stage -------------------------------------------------------


@dataclass
class ExploreStats:
    attempted: int = 0
    kept: int = 0
    skipped_existing: int = 0
    failed: list[str] = field(default_factory=list)


def explore(
    instructions: Sequence[ExploreInstruction],
    provider: Provider,
    sandbox_factory: SandboxFactory,
    budget: RefinementBudget,
    *,
    params: GenerationParams,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
    runnable_tags: frozenset[str] | None = DEFAULT_RUNNABLE_TAGS,
    store: MemoryStore | None = None,
    source_prefix: str = "mbpp",
    persist_path: str | Path | None = None,
    stats: ExploreStats | None = None,
) -> MemoryStore:
    """Run refinement over each instruction and append the episodes to memory.

    Episode ids are deterministic (``prefix:index``), so an interrupted run
    can resume: ids already present are skipped, and partial progress is
    persisted after every episode. A failing episode is logged and excluded
    from the store; the run continues.
    """
    if not instructions:
        raise ValueError("instructions must not be empty")
    store = store if store is not None else MemoryStore()
    stats = stats if stats is not None else ExploreStats()
    for index, item in enumerate(instructions):
        episode_id = f"{source_prefix}:{index:04d}"
        if episode_id in store:
            stats.skipped_existing += 1
            continue
        stats.attempted += 1
        session: Session | None = None
        try:
            session = sandbox_factory()
            rendered = render_explore_instruction(item)
            trajectory = run_refinement(
                rendered,
                provider,
                session,
                budget,
                params=params,
                system_prompt=system_prompt,
                runnable_tags=runnable_tags,
            )
            store.append(
                MemoryTuple(id=episode_id, instruction=rendered, trajectory=trajectory, source=episode_id)
            )
            stats.kept += 1
            if persist_path is not None:
                save_memory(store, persist_path)
        except Exception as exc:
            stats.failed.append(episode_id)
            log.warning("episode %s failed and was excluded from memory: %s", episode_id, exc)
        finally:
            if session is not None:
                session.close()
    return store


# --- sanitizer -------------------------------------------------------------

_SANITIZE_TARGET = re.compile(r"[ \t]*(?:print[ \t]*\(|assert\b)")
_PLACEHOLDER = "pass"


def _scan_lines(lines: list[str]) -> list[dict]:
    """Per physical line: statement-start flag and comment position.

    Tracks bracket depth, single/triple-quoted strings, escapes, comments,
    and backslash continuations so the line-based sanitizer never splits a
    multi-line statement or touches string contents.
    """
    info: list[dict] = []
    depth = 0
    in_string: tuple[str, bool] | None = None  # (quote char, is triple)
    prev_backslash = False
    for raw in lines:
        starts = depth == 0 and in_string is None and not prev_backslash
        comment_start: int | None = None
        i = 0
        n = len(raw)
        escaped = False
        while i < n:
            ch = raw[i]
            if in_string is not None:
                quote, triple = in_string
                if escaped:
                    escaped = False
                    i += 1
                    continue
                if ch == "\\":
                    escaped = True
                    i += 1
                    continue
                if triple and raw.startswith(quote * 3, i):
                    in_string = None
                    i += 3
                    continue
                if not triple and ch == quote:
                    in_string = None
                    i += 1
                    continue
                i += 1
                continue
            if ch == "#":
                comment_start = i
                break
            if ch in "\"'":
                if raw.startswith(ch * 3, i):
                    in_string = (ch, True)
                    i += 3
                else:
                    in_string = (ch, False)
                    i += 1
                continue
            if ch in "([{":
                depth += 1
            elif ch in ")]}":
                depth = max(0, depth - 1)
            i += 1
        if in_string is not None and not in_string[1]:
            in_string = None  # unterminated single-quoted string ends at EOL
        code_part = raw if comment_start is None else raw[:comment_start]
        stripped = code_part.rstrip("\r\n")
        prev_backslash = comment_start is None and in_string is None and stripped.endswith("\\")
        info.append({"starts": starts, "comment_start": comment_start})
    return info


def _logical_statements(scan: list[dict]) -> list[tuple[int, int]]:
    """Half-open physical-line ranges, one per logical statement."""
    starts = [i for i, entry in enumerate(scan) if entry["starts"]]
    ranges = []
    for k, begin in enumerate(starts):
        end = starts[k + 1] if k + 1 < len(starts) else len(scan)
        ranges.append((begin, end))
    return ranges


def _code_text(line: str, entry: dict) -> str:
    text = line if entry["comment_start"] is None else line[: entry["comment_start"]]
    return text.rstrip("\r\n").rstrip()


def _indent_of(line: str) -> str:
    return line[: len(line) - len(line.lstrip(" \t"))]


def sanitize_code(code: str) -> str:
    """Remove print/assert statement lines; repair blocks that would empty.

    Every statement whose first token begins a print call or an assert, at
    any indentation level, is removed. If a removal would leave an enclosing
    block empty, a no-op placeholder statement is substituted so the result
    stays executable. All other lines are byte-identical. Idempotent.
    """
    if not code:
        return code
    lines = code.splitlines(keepends=True)
    scan = _scan_lines(lines)
    statements = _logical_statements(scan)

    keep = [True] * len(lines)
    removed_any = False
    for begin, end in statements:
        if _SANITIZE_TARGET.match(lines[begin]):
            for i in range(begin, end):
                keep[i] = False
            removed_any = True
    if not removed_any:
        return code

    # Block repair: each kept header (statement ending with ':') must still be
    # followed by a body line deeper than the header.
    insertions: dict[int, str] = {}
    for begin, end in statements:
        if not keep[begin]:
            continue
        last = end - 1
        if not _code_text(lines[last], scan[last]).endswith(":"):
            continue
        header_indent = _indent_of(lines[begin])
        body_found = False
        first_removed: int | None = None
        j = end
        while j < len(lines):
            if not keep[j]:
                if first_removed is None:
                    first_removed = j
                j += 1
                continue
            code_text = _code_text(lines[j], scan[j])
            if not code_text.strip():
                j += 1
                continue
            body_found = len(_indent_of(lines[j])) > len(header_indent)
            break
        if not body_found and first_removed is not None:
            insertions[first_removed] = _indent_of(lines[first_removed]) + _PLACEHOLDER + "\n"

    out: list[str] = []
    for i, line in enumerate(lines):
        if i in insertions:
            out.append(insertions[i])
        if keep[i]:
            out.append(line)
    if len(lines) in insertions:
        out.append(insertions[len(lines)])

    # Module-level repair: removing everything must not produce an empty file.
    has_code = any(
        keep[i] and _code_text(lines[i], scan[i]).strip() for i in range(len(lines))
    )
    if not has_code and not insertions:
        out.append(_PLACEHOLDER + "\n")
    return "".join(out)


# --- verification ----------------------------------------------------------


def _entry_point_probe(task: TaskSpec) -> str:
    """Final check snippet: the entry point must exist, and the dataset's
    check() convention is invoked when the test code defines it."""
    lines = [
        f"assert {task.entry_point!r} in globals(), "
        f"\"entry point '{task.entry_point}' is not defined\""
    ]
    if re.search(r"\bdef\s+check\s*\(", task.test_code):
        lines.append(f"check({task.entry_point})")
    return "\n".join(lines) + "\n"


def check_solution(
    code: str,
    task: TaskSpec,
    sandbox_factory: SandboxFactory,
    *,
    timeout_ms: int = 30_000,
    sanitize: bool = True,
) -> bool:
    """Run candidate code, then the task's tests, in a clean session.

    True iff the sanitized candidate, the hidden test code, and the entry
    point probe all execute with status ok within the verification timeout.
    Session failures count as a failed check.
    """
    if not code or not code.strip():
        return False
    candidate = sanitize_code(code) if sanitize else code
    if not candidate.strip():
        return False
    session: Session | None = None
    try:
        session = sandbox_factory()
    except SpawnError as exc:
        log.warning("verification session could not start for %s: %s", task.task_id, exc)
        return False
    try:
        for snippet in (candidate, task.test_code, _entry_point_probe(task)):
            result = session.execute(snippet, timeout_ms)
            if result.status != STATUS_OK:
                return False
        return True
    finally:
        session.close()


def reassess(
    trajectory: Trajectory,
    task: TaskSpec,
    sandbox_factory: SandboxFactory,
    *,
    timeout_ms: int = 30_000,
    sanitize: bool = True,
    runnable_tags: frozenset[str] | None = DEFAULT_RUNNABLE_TAGS,
) -> tuple[bool, tuple[int, int] | None]:
    """Re-check every code block, newest first, until one passes.

    Returns (True, (trial_index, block_index)) for the winning block, or
    (False, None) when no block satisfies the task's tests.
    """
    candidates: list[tuple[int, int, CodeBlock]] = []
    for trial_index, trial in enumerate(trajectory.trials):
        for block_index, block in enumerate(trial.blocks):
            if is_runnable(block, runnable_tags):
                candidates.append((trial_index, block_index, block))
    for trial_index, block_index, block in reversed(candidates):
        if check_solution(block.source, task, sandbox_factory, timeout_ms=timeout_ms, sanitize=sanitize):
            return True, (trial_index, block_index)
    return False, None


def _final_candidate(trajectory: Trajectory, runnable_tags: frozenset[str] | None) -> CodeBlock | None:
    """The last runnable code block of the last trial."""
    if not trajectory.trials:
        return None
    for block in reversed(trajectory.trials[-1].blocks):
        if is_runnable(block, runnable_tags):
            return block
    return None


# --- per-task evaluation ---------------------------------------------------


@dataclass
class EvalSettings:
    budget: RefinementBudget
    params: GenerationParams
    embedding_model_id: str = "text-embedding-ada-002"
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    retrospection_template: str = DEFAULT_RETROSPECTION_TEMPLATE
    trajectory_budget_chars: int = DEFAULT_TRAJECTORY_BUDGET_CHARS
    verification_timeout_ms: int = 30_000
    use_pag: bool = True
    sanitize: bool = True
    reassess: bool = True
    runnable_tags: frozenset[str] | None = DEFAULT_RUNNABLE_TAGS
    # Retrieval is always top-1; when set, matches scoring below the floor
    # are ignored and the task runs unguided. Disabled by default.
    similarity_floor: float | None = None


def evaluate_task(
    task: TaskSpec,
    memory: MemoryStore | None,
    provider: Provider,
    sandbox_factory: SandboxFactory,
    settings: EvalSettings,
) -> TaskResult:
    """Evaluate one task: optional guidance, refinement, verification,
    re-assessment. Fatal errors yield a failed result with an error log,
    never an exception."""
    instruction = render_task_instruction(task)
    retrospection: Retrospection | None = None
    trajectory: Trajectory | None = None
    try:
        rendered = instruction
        if settings.use_pag:
            if memory is None or len(memory) == 0:
                raise ValueError("guided evaluation requires a non-empty memory store")
            query = provider.embed(instruction, settings.embedding_model_id)
            similar, score = retrieve_most_similar(memory, query)
            if settings.similarity_floor is not None and score < settings.similarity_floor:
                log.info(
                    "task %s: best match %s scored %.4f, below the floor; running unguided",
                    task.task_id, similar.id, score,
                )
            else:
                retrospection = generate_retrospection(
                    provider,
                    instruction,
                    similar,
                    score,
                    params=settings.params,
                    template=settings.retrospection_template,
                    trajectory_budget_chars=settings.trajectory_budget_chars,
                )
                rendered = compose_guided_instruction(retrospection, instruction).rendered

        session = sandbox_factory()
        try:
            trajectory = run_refinement(
                rendered,
                provider,
                session,
                settings.budget,
                params=settings.params,
                system_prompt=settings.system_prompt,
                runnable_tags=settings.runnable_tags,
            )
        finally:
            session.close()

        passed = False
        provenance = PASS_NONE
        winning: tuple[int, int] | None = None
        candidate = _final_candidate(trajectory, settings.runnable_tags)
        if candidate is not None:
            cleaned = sanitize_code(candidate.source) if settings.sanitize else candidate.source
            if check_solution(
                cleaned,
                task,
                sandbox_factory,
                timeout_ms=settings.verification_timeout_ms,
                sanitize=False,
            ):
                passed = True
                provenance = (
                    PASS_SANITIZED if settings.sanitize and cleaned != candidate.source else PASS_DIRECT
                )
        if not passed and settings.reassess:
            ok, winning = reassess(
                trajectory,
                task,
                sandbox_factory,
                timeout_ms=settings.verification_timeout_ms,
                sanitize=settings.sanitize,
                runnable_tags=settings.runnable_tags,
            )
            if ok:
                passed = True
                provenance = PASS_REASSESSED
        return TaskResult(
            task_id=task.task_id,
            passed=passed,
            pass_provenance=provenance,
            trajectory=trajectory,
            retrospection=retrospection,
            trials_used=len(trajectory.trials),
            winning_block=winning,
        )
    except Exception as exc:
        log.warning("task %s failed with a harness error: %s", task.task_id, exc)
        return TaskResult(
            task_id=task.task_id,
            passed=False,
            pass_provenance=PASS_NONE,
            trajectory=trajectory,
            retrospection=retrospection,
            trials_used=len(trajectory.trials) if trajectory else 0,
            error=f"{type(exc).__name__}: {exc}",
        )


def evaluate_tasks(
    tasks: Sequence[TaskSpec],
    memory: MemoryStore | None,
    provider: Provider,
    sandbox_factory: SandboxFactory,
    settings: EvalSettings,
    workers: int = 4,
) -> list[TaskResult]:
    """Evaluate all tasks; results come back in dataset order regardless of
    completion order, so reports are deterministic under parallelism."""

    def one(task: TaskSpec) -> TaskResult:
        return evaluate_task(task, memory, provider, sandbox_factory, settings)

    if workers <= 1:
        return [one(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, tasks))


# --- scoring and reports ---------------------------------------------------


def pass_at_1(results: Sequence[TaskResult]) -> Fraction:
    """Exact fraction of tasks passed; rounding happens only at render time."""
    if not results:
        raise ValueError("empty results")
    return Fraction(sum(1 for r in results if r.passed), len(results))


def format_percent(fraction: Fraction) -> str:
    """Render an exact fraction as a percentage with two decimals."""
    value = Decimal(fraction.numerator) * 100 / Decimal(fraction.denominator)
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def provenance_counts(results: Sequence[TaskResult]) -> dict[str, int]:
    counts = {PASS_DIRECT: 0, PASS_SANITIZED: 0, PASS_REASSESSED: 0, PASS_NONE: 0}
    for r in results:
        counts[r.pass_provenance] += 1
    return counts


def report_to_dict(report: EvalReport) -> dict:
    """The stable summary serialized to report.json (no timestamps, no
    durations, so identical runs produce identical bytes)."""
    fraction = report.pass_at_1
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_digest": report.config_digest,
        "pass_at_1": {
            "passed": sum(1 for r in report.results if r.passed),
            "total": len(report.results),
            "value": float(fraction),
            "fraction": f"{fraction.numerator}/{fraction.denominator}",
            "percent": format_percent(fraction),
        },
        "provenance_counts": provenance_counts(report.results),
        "results": [
            {
                "task_id": r.task_id,
                "passed": r.passed,
                "pass_provenance": r.pass_provenance,
                "trials_used": r.trials_used,
                "winning_block": list(r.winning_block) if r.winning_block else None,
                "error": r.error,
            }
            for r in report.results
        ],
    }


def render_report_markdown(report: EvalReport, method_label: str) -> str:
    counts = provenance_counts(report.results)
    fraction = report.pass_at_1
    lines = [
        "# Evaluation report",
        "",
        "| Method | % Pass@1 |",
        "| --- | --- |",
        f"| {method_label} | {format_percent(fraction)} |",
        "",
        f"Passed {sum(1 for r in report.results if r.passed)} of {len(report.results)} tasks.",
        "",
        "| Provenance | Count |",
        "| --- | --- |",
        f"| direct | {counts[PASS_DIRECT]} |",
        f"| sanitized | {counts[PASS_SANITIZED]} |",
        f"| reassessed | {counts[PASS_REASSESSED]} |",
        f"| failed | {counts[PASS_NONE]} |",
        "",
        f"Config digest: `{report.config_digest}`",
        "",
    ]
    return "\n".join(lines)


def _transcript_name(task_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", task_id) + ".json"


def task_result_to_dict(result: TaskResult) -> dict:
    return {
        "task_id": result.task_id,
        "passed": result.passed,
        "pass_provenance": result.pass_provenance,
        "trials_used": result.trials_used,
        "winning_block": list(result.winning_block) if result.winning_block else None,
        "error": result.error,
        "retrospection": result.retrospection.to_dict() if result.retrospection else None,
        "trajectory": result.trajectory.to_dict() if result.trajectory else None,
    }


def write_run_outputs(run_dir: str | Path, report: EvalReport, method_label: str) -> Path:
    """Write report.json, report.md, and one transcript file per task."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    report_path = run_dir / "report.json"
    with report_path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(report_to_dict(report), fh, indent=2, ensure_ascii=False, sort_keys=True)
        fh.write("\n")
    with (run_dir / "report.md").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_report_markdown(report, method_label))
    for result in report.results:
        with (run_dir / _transcript_name(result.task_id)).open("w", encoding="utf-8", newline="\n") as fh:
            json.dump(task_result_to_dict(result), fh, indent=2, ensure_ascii=False, sort_keys=True)
            fh.write("\n")
    return report_path
