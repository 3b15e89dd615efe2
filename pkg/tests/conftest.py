"""Shared test helpers: deterministic providers and a prebuilt replay world.

The replay world is produced by running the real pipeline once against a
scripted provider wrapped in the recording provider, which yields a fixture
set that replay-mode runs can consume offline. Tests therefore exercise the
exact record/replay path the CLI uses.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path

import pytest
import yaml

from hindsight import cli
from hindsight.memory import MemoryStore, MemoryTuple, save as save_memory
from hindsight.provider import (
    ChatMessage,
    EmbeddingVector,
    FixtureStore,
    GenerationParams,
    RecordingProvider,
    validate_history,
)
from hindsight.refine import Trajectory, Trial, extract_code_blocks
from hindsight.sandbox import ExecutionResult, SessionConfig, start_session


def deterministic_embedding(text: str, dim: int = 8) -> tuple[float, ...]:
    """A stable, content-derived vector; stands in for a real embedder."""
    values: list[float] = []
    material = hashlib.sha256(text.encode("utf-8")).digest()
    while len(values) < dim:
        for byte in material:
            values.append((byte - 127.5) / 128.0)
            if len(values) == dim:
                break
        material = hashlib.sha256(material).digest()
    return tuple(values)


class ScriptedProvider:
    """Chat replies come from a fixed script; embeddings are content-derived."""

    def __init__(self, replies=(), embed_dim: int = 8):
        self._replies = list(replies)
        self._lock = threading.Lock()
        self.chat_calls: list[list[ChatMessage]] = []
        self.embed_calls: list[tuple[str, str]] = []
        self.embed_dim = embed_dim

    def chat(self, history, params: GenerationParams) -> ChatMessage:
        validate_history(history)
        with self._lock:
            self.chat_calls.append(list(history))
            if not self._replies:
                raise AssertionError("scripted provider ran out of replies")
            reply = self._replies.pop(0)
        text = reply(history) if callable(reply) else reply
        return ChatMessage(role="assistant", content=text)

    def embed(self, text: str, model_id: str) -> EmbeddingVector:
        if not text:
            raise ValueError("text must not be empty")
        with self._lock:
            self.embed_calls.append((text, model_id))
        return EmbeddingVector(values=deterministic_embedding(text, self.embed_dim), model_id=model_id)


class RepeatingProvider(ScriptedProvider):
    """Always replies with the same text; never runs out."""

    def __init__(self, text: str, embed_dim: int = 8):
        super().__init__(replies=(), embed_dim=embed_dim)
        self._text = text

    def chat(self, history, params: GenerationParams) -> ChatMessage:
        validate_history(history)
        with self._lock:
            self.chat_calls.append(list(history))
        return ChatMessage(role="assistant", content=self._text)


@pytest.fixture
def inprocess_factory():
    config = SessionConfig(kind="inprocess")

    def factory():
        return start_session(config)

    return factory


# --- the rolling_max replay world -------------------------------------------

ROLLING_MAX_PROMPT = (
    "from typing import List\n"
    "\n"
    "\n"
    "def rolling_max(numbers: List[int]) -> List[int]:\n"
    "    \"\"\" From a given list of integers, generate a list of rolling maximum element found until given moment\n"
    "    in the sequence.\n"
    "    >>> rolling_max([1, 2, 3, 2, 3, 4, 2])\n"
    "    [1, 2, 3, 3, 3, 4, 4]\n"
    "    \"\"\"\n"
)

ROLLING_MAX_TEST = (
    "def check(candidate):\n"
    "    assert candidate([1, 2, 3, 2, 3, 4, 2]) == [1, 2, 3, 3, 3, 4, 4]\n"
    "    assert candidate([]) == []\n"
    "    assert candidate([1]) == [1]\n"
    "    assert candidate([9, 8, 7]) == [9, 9, 9]\n"
)

UNGUARDED_ROLLING_MAX = (
    "from typing import List\n"
    "\n"
    "def rolling_max(numbers: List[int]) -> List[int]:\n"
    "    max_so_far = numbers[0]\n"
    "    result = []\n"
    "    for num in numbers:\n"
    "        if num > max_so_far:\n"
    "            max_so_far = num\n"
    "        result.append(max_so_far)\n"
    "    return result\n"
    "\n"
    "print(rolling_max([1, 2, 3, 2, 3, 4, 2]))\n"
)

GUARDED_ROLLING_MAX = (
    "from typing import List\n"
    "\n"
    "def rolling_max(numbers: List[int]) -> List[int]:\n"
    "    if not numbers:\n"
    "        return []\n"
    "    max_so_far = numbers[0]\n"
    "    result = []\n"
    "    for num in numbers:\n"
    "        if num > max_so_far:\n"
    "            max_so_far = num\n"
    "        result.append(max_so_far)\n"
    "    return result\n"
    "\n"
    "# Re-verification with the adjusted implementation\n"
    "print(rolling_max([]))  # Empty list\n"
)

EDGE_CASE_TESTS = (
    "print(rolling_max([1]))  # Single element\n"
    "print(rolling_max([5, 5, 5, 5]))  # All elements are the same\n"
    "print(rolling_max([9, 8, 7, 6, 5, 4, 3, 2, 1]))  # Descending order\n"
    "print(rolling_max([]))  # Empty list\n"
)

REPLY_INITIAL = (
    "Here is the Python script that solves the problem:\n"
    "\n"
    "```python\n" + UNGUARDED_ROLLING_MAX + "```"
)

REPLY_EDGE_CASES = (
    "Additional Test Cases for Verification:\n"
    "\n"
    "```python\n" + EDGE_CASE_TESTS + "```"
)

REPLY_CORRECTED = (
    "Error Resolution and Final Implementation:\n"
    "\n"
    "The function fails when the input list is empty, as the code tries to access "
    "the first element without prior existence verification. A conditional return "
    "for empty lists has been added to address this.\n"
    "\n"
    "```python\n" + GUARDED_ROLLING_MAX + "```"
)

REPLY_CLOSING = (
    "The corrected implementation now successfully handles all edge cases, "
    "producing accurate results consistently."
)

RETRO_REPLY = (
    "From Previous Similar Questions:\n"
    "The largest_number function sorts a list of digits in descending order and "
    "joins them to form the largest possible number. However, this is not "
    "directly applicable to the rolling_max problem.\n"
    "\n"
    "Application to the Question:\n"
    "The rolling_max function requires maintaining a rolling maximum value as we "
    "traverse through the list. We need to keep track of the maximum value found "
    "so far and update it as we encounter larger numbers in the list."
)

LARGEST_NUMBER_INSTRUCTION = (
    "Write a function to find the largest number that can be formed with the "
    "given list of digits.\n\n"
    "Ensure the solution is verified by printing the expected output."
)

LARGEST_NUMBER_REPLY = (
    "Here is the Python script that solves the problem:\n"
    "\n"
    "```python\n"
    "def largest_number(digits):\n"
    "    digits = sorted(digits, reverse=True)\n"
    "    return int(''.join(str(d) for d in digits))\n"
    "\n"
    "print(largest_number([1, 3, 2]))\n"
    "```"
)


def make_largest_number_episode(embed_model: str) -> MemoryTuple:
    blocks = extract_code_blocks(LARGEST_NUMBER_REPLY)
    trial = Trial(
        assistant_text=LARGEST_NUMBER_REPLY,
        blocks=blocks,
        results=[ExecutionResult(status="ok", stdout="321\n", duration_ms=1)],
    )
    trajectory = Trajectory(
        instruction_rendered=LARGEST_NUMBER_INSTRUCTION,
        trials=[trial],
        stop_reason="no_code_emitted",
    )
    return MemoryTuple(
        id="mbpp:0000",
        instruction=LARGEST_NUMBER_INSTRUCTION,
        trajectory=trajectory,
        source="mbpp:0000",
        embedding=EmbeddingVector(
            values=deterministic_embedding(LARGEST_NUMBER_INSTRUCTION), model_id=embed_model
        ),
        created_at="2000-01-01T00:00:00+00:00",
    )


@dataclass
class ReplayWorld:
    root: Path
    config_path: Path
    dataset_path: Path
    memory_path: Path
    fixtures_dir: Path
    out_dir: Path


def build_rolling_max_world(root: Path) -> ReplayWorld:
    """Create dataset, memory, fixtures, and config for offline replay runs."""
    root.mkdir(parents=True, exist_ok=True)
    dataset_path = root / "humaneval.jsonl"
    memory_path = root / "memory.jsonl"
    fixtures_dir = root / "fixtures"
    out_dir = root / "out"
    config_path = root / "config.yaml"

    with dataset_path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            json.dumps(
                {
                    "task_id": "demo/rolling-max",
                    "prompt": ROLLING_MAX_PROMPT,
                    "entry_point": "rolling_max",
                    "test": ROLLING_MAX_TEST,
                }
            )
            + "\n"
        )

    config = {
        "mode": "replay",
        "executor": "inprocess",
        "use_pag": True,
        "workers": 1,
        "max_trials": 12,
        "humaneval_path": str(dataset_path),
        "memory_path": str(memory_path),
        "fixtures_dir": str(fixtures_dir),
        "out_dir": str(out_dir),
        "run_id": "replay",
    }
    config_path.write_text(yaml.safe_dump(config), encoding="utf-8")

    run_config = cli.load_config(str(config_path), {})
    store = MemoryStore([make_largest_number_episode(run_config.embedding_model)])
    save_memory(store, memory_path)

    scripted = ScriptedProvider(
        replies=[RETRO_REPLY, REPLY_INITIAL, REPLY_EDGE_CASES, REPLY_CORRECTED, REPLY_CLOSING]
    )
    recording = RecordingProvider(scripted, FixtureStore(fixtures_dir))
    record_config = cli.load_config(str(config_path), {"run_id": "recording"})
    exit_code = cli.cmd_eval(record_config, provider=recording)
    assert exit_code == 0, "recording run must succeed"
    assert not scripted._replies, "recording run must consume the full script"
    return ReplayWorld(
        root=root,
        config_path=config_path,
        dataset_path=dataset_path,
        memory_path=memory_path,
        fixtures_dir=fixtures_dir,
        out_dir=out_dir,
    )


@pytest.fixture(scope="session")
def rolling_max_world(tmp_path_factory) -> ReplayWorld:
    return build_rolling_max_world(tmp_path_factory.mktemp("replay_world"))
