"""Turning a retrieved past episode into guidance for a new instruction.

Given the most similar solved episode, we ask the model how that prior
experience applies to the new instruction; the reply (the retrospection) is
then prefixed to the instruction before refinement starts.
"""

from __future__ import annotations

from dataclasses import dataclass

from .memory import MemoryTuple
from .provider import ChatMessage, GenerationParams, Provider
from .refine import Trajectory, Trial, render_result
from .textutil import ELISION_MARKER, truncate_middle

DEFAULT_RETROSPECTION_TEMPLATE = """\
PAST INSTRUCTION:
{past_instruction}

PAST TRAJECTORY:
{past_trajectory}

NEW INSTRUCTION:
{new_instruction}

How can prior experience "PAST TRAJECTORY" be applied to solve "NEW INSTRUCTION"?"""

DEFAULT_TRAJECTORY_BUDGET_CHARS = 12_000

GUIDANCE_LABEL = "RETROSPECTION:"
GUIDANCE_SEPARATOR = "---"


@dataclass(frozen=True)
class Retrospection:
    text: str
    source_tuple_id: str
    similarity: float

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("retrospection text must not be empty")
        if not -1.0 <= self.similarity <= 1.0:
            raise ValueError(f"similarity out of range: {self.similarity}")

    def to_dict(self) -> dict:
        return {"text": self.text, "source_tuple_id": self.source_tuple_id, "similarity": self.similarity}


@dataclass(frozen=True)
class GuidedInstruction:
    retrospection: Retrospection
    instruction: str
    rendered: str


def _fill_template(template: str, fields: dict[str, str]) -> str:
    # Plain replacement instead of str.format: instructions and trajectories
    # routinely contain braces.
    out = template
    for key, value in fields.items():
        out = out.replace("{" + key + "}", value)
    return out


def render_trial(trial: Trial, result_budget_chars: int = 4096) -> str:
    """A trial as the assistant wrote it, with each execution result
    inserted right after the code block that produced it."""
    text = trial.assistant_text
    pieces: list[str] = []
    cursor = 0
    for block, result in zip(trial.blocks, trial.results):
        if result is None:
            continue
        insert_at = min(block.char_span[1] + 3, len(text))  # past the closing fence
        if insert_at < cursor:
            continue
        pieces.append(text[cursor:insert_at])
        pieces.append("\n" + render_result(result, result_budget_chars))
        cursor = insert_at
    pieces.append(text[cursor:])
    return "".join(pieces)


def render_trajectory(
    trajectory: Trajectory,
    budget_chars: int = DEFAULT_TRAJECTORY_BUDGET_CHARS,
    result_budget_chars: int = 4096,
) -> str:
    """Render all trials within a character budget.

    When over budget, intermediate trials are elided (first and last kept,
    with an explicit marker); if that still exceeds the budget the text is
    clamped middle-out. The rendering never silently drops content without
    a marker.
    """
    rendered = [render_trial(t, result_budget_chars) for t in trajectory.trials]
    text = "\n\n".join(rendered)
    if len(text) <= budget_chars:
        return text
    if len(rendered) > 2:
        elided = len(rendered) - 2
        text = f"{rendered[0]}\n\n…[{elided} intermediate trials elided]…\n\n{rendered[-1]}"
    if len(text) > budget_chars:
        text = truncate_middle(text, max(budget_chars - len(ELISION_MARKER), 0))
    return text


def build_retrospection_query(
    instruction: str,
    similar: MemoryTuple,
    template: str = DEFAULT_RETROSPECTION_TEMPLATE,
    trajectory_budget_chars: int = DEFAULT_TRAJECTORY_BUDGET_CHARS,
) -> str:
    """The question asking how the similar episode applies to the instruction."""
    if not similar.trajectory.trials:
        raise ValueError(f"episode {similar.id} has an empty trajectory")
    if not instruction:
        raise ValueError("instruction must not be empty")
    return _fill_template(
        template,
        {
            "past_instruction": similar.instruction,
            "past_trajectory": render_trajectory(similar.trajectory, trajectory_budget_chars),
            "new_instruction": instruction,
        },
    )


def generate_retrospection(
    provider: Provider,
    instruction: str,
    similar: MemoryTuple,
    similarity: float,
    *,
    params: GenerationParams,
    template: str = DEFAULT_RETROSPECTION_TEMPLATE,
    trajectory_budget_chars: int = DEFAULT_TRAJECTORY_BUDGET_CHARS,
) -> Retrospection:
    query = build_retrospection_query(instruction, similar, template, trajectory_budget_chars)
    reply = provider.chat([ChatMessage(role="user", content=query)], params)
    if not reply.content.strip():
        raise ValueError("empty retrospection")
    return Retrospection(text=reply.content, source_tuple_id=similar.id, similarity=similarity)


def compose_guided_instruction(retrospection: Retrospection, instruction: str) -> GuidedInstruction:
    """Prefix the guidance to the instruction; the instruction stays verbatim."""
    if not instruction:
        raise ValueError("instruction must not be empty")
    rendered = f"{GUIDANCE_LABEL}\n{retrospection.text}\n\n{GUIDANCE_SEPARATOR}\n\n{instruction}"
    return GuidedInstruction(retrospection=retrospection, instruction=instruction, rendered=rendered)
