"""Interactive, iterative code refinement driven by execution feedback.

The engine drives a chat loop: ask the model, extract fenced code blocks
from the reply, run them in a persistent session, feed the execution results
back as a new user message, repeat. The loop stops when the model emits no
runnable code, when the trial budget is exhausted, or when the execution
session dies and cannot be restarted.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .provider import ChatMessage, GenerationParams, Provider
from .sandbox import (
    STATUS_OK,
    STATUS_SESSION_DEAD,
    STATUS_TIMEOUT,
    ExecutionResult,
    Session,
    SpawnError,
)
from .textutil import truncate_middle

log = logging.getLogger(__name__)

STOP_NO_CODE = "no_code_emitted"
STOP_BUDGET = "budget_exhausted"
STOP_SESSION_FATAL = "session_fatal"

# Tags whose blocks get executed; None disables the filter entirely.
DEFAULT_RUNNABLE_TAGS = frozenset({"", "python", "py", "python3"})

DEFAULT_SYSTEM_PROMPT = """\
As an advanced language model, you can generate code as part of your responses.
To make the code more noticeable and easier to read, please encapsulate it within triple backticks.

For instance, if you're providing Python code, wrap it as follows:

```
print('hellow world')
```

Wrapped code block will automatically be executed and appended to the prompt.

```
hellow world
```

After presenting the results from the code, you will provide a useful explanation or interpretation of the output to further aid your understanding. Additionally, when generating plots or figures, You'll save them to a specified path, like ./tmp/plot.png so that they can be viewed. After saving the plot, I'll use the following markdown syntax to display the image at the end of the response:

```
![plot]('./tmp/plot.png')
```

You are using a Jupyter Notebook currently.
This approach allows me to visually present data and findings.
"""

_FENCE_RE = re.compile(r"```(.*?)```", re.DOTALL)
_TAG_RE = re.compile(r"[A-Za-z0-9_+\-.#]+")


@dataclass(frozen=True)
class CodeBlock:
    source: str
    language_tag: str | None
    char_span: tuple[int, int]

    def to_dict(self) -> dict:
        return {"source": self.source, "language_tag": self.language_tag, "char_span": list(self.char_span)}

    @classmethod
    def from_dict(cls, data: dict) -> "CodeBlock":
        return cls(
            source=data["source"],
            language_tag=data.get("language_tag"),
            char_span=tuple(data["char_span"]),
        )


@dataclass
class Trial:
    """One assistant turn plus the execution of its code blocks.

    ``results`` is parallel to ``blocks``; a None entry marks a block that
    was recorded but not executed (non-runnable tag or empty source).
    """

    assistant_text: str
    blocks: list[CodeBlock] = field(default_factory=list)
    results: list[ExecutionResult | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.results) != len(self.blocks):
            raise ValueError(
                f"results must parallel blocks: {len(self.results)} results, {len(self.blocks)} blocks"
            )

    def to_dict(self) -> dict:
        return {
            "assistant_text": self.assistant_text,
            "blocks": [b.to_dict() for b in self.blocks],
            "results": [r.to_dict() if r is not None else None for r in self.results],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Trial":
        return cls(
            assistant_text=data["assistant_text"],
            blocks=[CodeBlock.from_dict(b) for b in data.get("blocks", [])],
            results=[ExecutionResult.from_dict(r) if r is not None else None for r in data.get("results", [])],
        )


@dataclass
class Trajectory:
    instruction_rendered: str
    trials: list[Trial] = field(default_factory=list)
    stop_reason: str = STOP_NO_CODE

    def to_dict(self) -> dict:
        return {
            "instruction_rendered": self.instruction_rendered,
            "trials": [t.to_dict() for t in self.trials],
            "stop_reason": self.stop_reason,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        return cls(
            instruction_rendered=data["instruction_rendered"],
            trials=[Trial.from_dict(t) for t in data.get("trials", [])],
            stop_reason=data.get("stop_reason", STOP_NO_CODE),
        )


@dataclass(frozen=True)
class RefinementBudget:
    max_trials: int = 12
    block_timeout_ms: int = 10_000
    result_budget_chars: int = 4096

    def __post_init__(self) -> None:
        if self.max_trials < 1:
            raise ValueError("max_trials must be >= 1")


def extract_code_blocks(markdown: str) -> list[CodeBlock]:
    """Return every triple-backtick fenced block in document order.

    The source is exactly the text between the fences, excluding the fence
    line itself and its info tag. An unterminated fence yields no block.
    Re-inserting a block's source at its recorded span reconstructs the
    fenced region of the original message byte-exactly.
    """
    blocks: list[CodeBlock] = []
    for match in _FENCE_RE.finditer(markdown):
        content = match.group(1)
        start = match.start(1)
        newline = content.find("\n")
        if newline < 0:
            # Inline form: ```code``` on a single line, no info tag.
            blocks.append(CodeBlock(source=content, language_tag=None, char_span=(start, start + len(content))))
            continue
        info = content[:newline].strip()
        if info and not _TAG_RE.fullmatch(info):
            # First line is code, not an info string; keep everything.
            blocks.append(CodeBlock(source=content, language_tag=None, char_span=(start, start + len(content))))
            continue
        source = content[newline + 1:]
        body_start = start + newline + 1
        blocks.append(
            CodeBlock(source=source, language_tag=info or None, char_span=(body_start, body_start + len(source)))
        )
    return blocks


def is_runnable(block: CodeBlock, runnable_tags: frozenset[str] | None = DEFAULT_RUNNABLE_TAGS) -> bool:
    if not block.source.strip():
        return False
    if runnable_tags is None:
        return True
    return (block.language_tag or "") in runnable_tags


def render_result(result: ExecutionResult, budget_chars: int = 4096) -> str:
    """One execution result as a fenced block labeled RESULT."""
    parts = []
    if result.stdout:
        parts.append(result.stdout.rstrip("\n"))
    if result.stderr:
        parts.append(result.stderr.rstrip("\n"))
    if result.status != STATUS_OK and result.error_summary:
        parts.append(f"Error: {result.error_summary}")
    payload = "\n".join(p for p in parts if p) or "(no output)"
    payload = truncate_middle(payload, budget_chars)
    return f"```\nRESULT\n{payload}\n```"


def render_results_message(trial: Trial, budget_chars: int = 4096) -> str:
    """The user-role message carrying a trial's execution results."""
    rendered = [render_result(r, budget_chars) for r in trial.results if r is not None]
    if not rendered:
        return "```\nRESULT\n(no output)\n```"
    return "\n\n".join(rendered)


def run_refinement(
    rendered_instruction: str,
    provider: Provider,
    session: Session,
    budget: RefinementBudget,
    *,
    params: GenerationParams,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
    runnable_tags: frozenset[str] | None = DEFAULT_RUNNABLE_TAGS,
) -> Trajectory:
    """Drive the refinement loop until quiescence, budget, or session death.

    Every assistant turn that contains runnable code becomes one trial. A
    reply without runnable code terminates the loop; it is recorded as a
    zero-execution trial only when it is the first reply, so a trajectory is
    never empty. When an execution kills the session (timeout or crash) the
    engine restarts it and carries on; if the restart fails the run stops
    with stop_reason=session_fatal.
    """
    history: list[ChatMessage] = [
        ChatMessage(role="system", content=system_prompt),
        ChatMessage(role="user", content=rendered_instruction),
    ]
    trials: list[Trial] = []
    stop_reason = STOP_NO_CODE
    while True:
        reply = provider.chat(history, params)
        blocks = extract_code_blocks(reply.content)
        runnable = [(i, b) for i, b in enumerate(blocks) if is_runnable(b, runnable_tags)]
        if not runnable:
            if not trials:
                trials.append(Trial(assistant_text=reply.content, blocks=blocks, results=[None] * len(blocks)))
            stop_reason = STOP_NO_CODE
            break

        results: list[ExecutionResult | None] = [None] * len(blocks)
        fatal = False
        for index, block in runnable:
            result = session.execute(block.source, budget.block_timeout_ms)
            results[index] = result
            if result.status in (STATUS_TIMEOUT, STATUS_SESSION_DEAD):
                try:
                    session.reset()
                except SpawnError as exc:
                    log.error("session restart failed: %s", exc)
                    fatal = True
                    break
        trial = Trial(assistant_text=reply.content, blocks=blocks, results=results)
        trials.append(trial)
        if fatal:
            stop_reason = STOP_SESSION_FATAL
            break
        if len(trials) >= budget.max_trials:
            stop_reason = STOP_BUDGET
            break
        history = history + [
            reply,
            ChatMessage(role="user", content=render_results_message(trial, budget.result_budget_chars)),
        ]
    return Trajectory(instruction_rendered=rendered_instruction, trials=trials, stop_reason=stop_reason)
