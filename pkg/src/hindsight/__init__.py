"""Execution-feedback code refinement guided by an episodic memory of past
solved instructions, plus a benchmark evaluation harness with pass@1 scoring."""

__version__ = "0.1.0"

from .memory import MemoryStore, MemoryTuple, cosine_similarity, retrieve_most_similar
from .provider import ChatMessage, EmbeddingVector, GenerationParams
from .refine import (
    CodeBlock,
    RefinementBudget,
    Trajectory,
    Trial,
    extract_code_blocks,
    run_refinement,
)
from .retrospection import GuidedInstruction, Retrospection, compose_guided_instruction
from .sandbox import ExecutionResult, SessionConfig, start_session

__all__ = [
    "ChatMessage",
    "CodeBlock",
    "EmbeddingVector",
    "ExecutionResult",
    "GenerationParams",
    "GuidedInstruction",
    "MemoryStore",
    "MemoryTuple",
    "RefinementBudget",
    "Retrospection",
    "SessionConfig",
    "Trajectory",
    "Trial",
    "__version__",
    "compose_guided_instruction",
    "cosine_similarity",
    "extract_code_blocks",
    "retrieve_most_similar",
    "run_refinement",
    "start_session",
]
