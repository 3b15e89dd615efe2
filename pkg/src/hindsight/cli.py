"""Command-line entry point wiring config, datasets, providers, and stages.

One binary with subcommands:

    hindsight explore          build the episodic memory from an MBPP-format dataset
    hindsight eval             evaluate a HumanEval-format dataset, write reports
    hindsight report           summarize one or more finished runs
    hindsight record-fixtures  run explore/eval against the live backend while
                               recording fixtures for later offline replay

Every config key is settable by flag, environment variable (HINDSIGHT_<KEY>),
or YAML config file, with precedence flag > env > file. Exit codes: 0 on
success, 1 on harness errors, 2 on config errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import functools
import json
import logging
import os
import shlex
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import yaml

from . import evalharness, memory as memorymod
from .evalharness import (
    EvalReport,
    EvalSettings,
    ExploreStats,
    explore,
    format_percent,
    load_humaneval,
    load_mbpp,
    provenance_counts,
    write_run_outputs,
)
from .provider import (
    FixtureStore,
    GenerationParams,
    HttpProvider,
    Provider,
    RecordingProvider,
    ReplayProvider,
)
from .refine import DEFAULT_SYSTEM_PROMPT, RefinementBudget
from .retrospection import DEFAULT_RETROSPECTION_TEMPLATE
from .sandbox import DEFAULT_EXECUTOR_CMD, SessionConfig, start_session
from .textutil import sha256_text

log = logging.getLogger(__name__)

ENV_PREFIX = "HINDSIGHT_"

EXIT_OK = 0
EXIT_HARNESS_ERROR = 1
EXIT_CONFIG_ERROR = 2


class ConfigError(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    # provider
    mode: str = "replay"  # live | replay | record
    chat_model: str = "gpt-4"
    embedding_model: str = "text-embedding-ada-002"
    temperature: float = 0.0
    max_output_tokens: int = 4096
    seed: int | None = None
    base_url: str = "https://api.openai.com/v1"
    api_key: str | None = None  # prefer the environment; never commit keys to config files
    # budgets
    max_trials: int = 12
    block_timeout_ms: int = 10_000
    verification_timeout_ms: int = 30_000
    output_budget_chars: int = 4096
    trajectory_budget_chars: int = 12_000
    # paths
    mbpp_path: str | None = None
    humaneval_path: str | None = None
    memory_path: str = "memory.jsonl"
    fixtures_dir: str = "fixtures"
    out_dir: str = "out"
    run_id: str | None = None
    work_dir: str | None = None
    # flags
    use_pag: bool = True
    similarity_floor: float | None = None  # retrieval stays top-1; disabled by default
    sanitize: bool = True
    reassess: bool = True
    workers: int = 4
    first_n: int = 470
    embed_after_explore: bool = True
    executor: str = "subprocess"  # subprocess | inprocess
    executor_cmd: str = " ".join(DEFAULT_EXECUTOR_CMD)
    runnable_tags: str = ",python,py,python3"  # comma-separated; "*" disables the filter
    # prompt texts
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    retrospection_template: str = DEFAULT_RETROSPECTION_TEMPLATE

    def validate(self) -> None:
        if self.mode not in ("live", "replay", "record"):
            raise ConfigError("mode", f"must be live, replay, or record (got {self.mode!r})")
        if self.max_trials < 1:
            raise ConfigError("max_trials", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.first_n < 1:
            raise ConfigError("first_n", "must be >= 1")
        if self.executor not in ("subprocess", "inprocess"):
            raise ConfigError("executor", f"must be subprocess or inprocess (got {self.executor!r})")
        if self.mode in ("live", "record") and not self.resolved_api_key():
            raise ConfigError(
                "api_key",
                f"mode {self.mode!r} needs an API key; set {ENV_PREFIX}API_KEY or OPENAI_API_KEY",
            )

    def resolved_api_key(self) -> str | None:
        return self.api_key or os.environ.get(ENV_PREFIX + "API_KEY") or os.environ.get("OPENAI_API_KEY")

    def generation_params(self) -> GenerationParams:
        return GenerationParams(
            model_id=self.chat_model,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            seed=self.seed,
        )

    def refinement_budget(self) -> RefinementBudget:
        return RefinementBudget(
            max_trials=self.max_trials,
            block_timeout_ms=self.block_timeout_ms,
            result_budget_chars=self.output_budget_chars,
        )

    def runnable_tag_set(self) -> frozenset[str] | None:
        if self.runnable_tags.strip() == "*":
            return None
        return frozenset(tag.strip() for tag in self.runnable_tags.split(","))

    def method_label(self) -> str:
        label = f"{self.chat_model} (max {self.max_trials} tries)"
        if self.use_pag:
            label += " + guided"
        return label


# Fields that define what a run computes. Parallelism, file locations, and
# credentials are excluded so reruns of the same experiment compare equal.
_DIGEST_FIELDS = (
    "mode",
    "chat_model",
    "embedding_model",
    "temperature",
    "max_output_tokens",
    "seed",
    "max_trials",
    "block_timeout_ms",
    "verification_timeout_ms",
    "output_budget_chars",
    "trajectory_budget_chars",
    "use_pag",
    "similarity_floor",
    "sanitize",
    "reassess",
    "first_n",
    "runnable_tags",
    "system_prompt",
    "retrospection_template",
)


def config_digest(config: RunConfig) -> str:
    payload = {name: getattr(config, name) for name in _DIGEST_FIELDS}
    return sha256_text(json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False))


# --- config assembly -------------------------------------------------------


def _parse_value(field: dataclasses.Field, raw: str):
    base = field.type.replace(" ", "")
    if base in ("bool",):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if base in ("int", "int|None"):
        return int(raw)
    if base in ("float", "float|None"):
        return float(raw)
    return raw


def load_config(config_path: str | None, overrides: dict[str, str]) -> RunConfig:
    """Merge defaults <- config file <- environment <- flags."""
    values: dict = {}
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}

    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError("config", f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config", "config file must contain a mapping")
        for key, value in loaded.items():
            if key not in fields:
                raise ConfigError(key, "unknown config key")
            values[key] = value

    for name, field in fields.items():
        env_key = ENV_PREFIX + name.upper()
        if env_key in os.environ:
            try:
                values[name] = _parse_value(field, os.environ[env_key])
            except ValueError as exc:
                raise ConfigError(name, f"bad environment value: {exc}") from exc

    for name, raw in overrides.items():
        if raw is None:
            continue
        try:
            values[name] = _parse_value(fields[name], raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(name, f"bad flag value: {exc}") from exc

    try:
        config = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from exc
    config.validate()
    return config


def build_provider(config: RunConfig) -> Provider:
    if config.mode == "replay":
        fixtures = Path(config.fixtures_dir)
        if not fixtures.is_dir():
            raise ConfigError("fixtures_dir", f"fixture directory not found: {fixtures}")
        return ReplayProvider(FixtureStore(fixtures))
    live = HttpProvider(base_url=config.base_url, api_key=config.resolved_api_key() or "")
    if config.mode == "record":
        return RecordingProvider(live, FixtureStore(Path(config.fixtures_dir)))
    return live


def build_sandbox_factory(config: RunConfig):
    session_config = SessionConfig(
        kind=config.executor,
        executor_cmd=tuple(shlex.split(config.executor_cmd)),
        work_dir=Path(config.work_dir) if config.work_dir else None,
        capture_budget_chars=max(config.output_budget_chars * 4, 4096),
    )
    return functools.partial(start_session, session_config)


def build_settings(config: RunConfig) -> EvalSettings:
    return EvalSettings(
        budget=config.refinement_budget(),
        params=config.generation_params(),
        embedding_model_id=config.embedding_model,
        system_prompt=config.system_prompt,
        retrospection_template=config.retrospection_template,
        trajectory_budget_chars=config.trajectory_budget_chars,
        verification_timeout_ms=config.verification_timeout_ms,
        use_pag=config.use_pag,
        similarity_floor=config.similarity_floor,
        sanitize=config.sanitize,
        reassess=config.reassess,
        runnable_tags=config.runnable_tag_set(),
    )


# --- subcommands -----------------------------------------------------------


def cmd_explore(config: RunConfig, provider: Provider | None = None) -> int:
    if not config.mbpp_path:
        raise ConfigError("mbpp_path", "an MBPP-format dataset path is required for explore")
    if not Path(config.mbpp_path).is_file():
        raise ConfigError("mbpp_path", f"dataset file not found: {config.mbpp_path}")
    provider = provider or build_provider(config)
    instructions = load_mbpp(config.mbpp_path, config.first_n)
    memory_path = Path(config.memory_path)
    store = memorymod.load(memory_path) if memory_path.is_file() else memorymod.MemoryStore()
    stats = ExploreStats()
    explore(
        instructions,
        provider,
        build_sandbox_factory(config),
        config.refinement_budget(),
        params=config.generation_params(),
        system_prompt=config.system_prompt,
        runnable_tags=config.runnable_tag_set(),
        store=store,
        persist_path=memory_path,
        stats=stats,
    )
    if config.embed_after_explore:
        memorymod.ensure_embeddings(store, provider, config.embedding_model, persist_path=memory_path)
    else:
        memorymod.save(store, memory_path)
    print(
        f"explore: attempted={stats.attempted} kept={stats.kept} "
        f"skipped_existing={stats.skipped_existing} failed={len(stats.failed)} "
        f"memory_size={len(store)} -> {memory_path}"
    )
    return EXIT_OK


def cmd_eval(config: RunConfig, provider: Provider | None = None) -> int:
    if not config.humaneval_path:
        raise ConfigError("humaneval_path", "a HumanEval-format dataset path is required for eval")
    if not Path(config.humaneval_path).is_file():
        raise ConfigError("humaneval_path", f"dataset file not found: {config.humaneval_path}")
    store = None
    if config.use_pag:
        memory_path = Path(config.memory_path)
        if not memory_path.is_file():
            raise ConfigError("memory_path", f"guided evaluation needs a memory file: {memory_path}")
        store = memorymod.load(memory_path)
        if len(store) == 0:
            raise ConfigError("memory_path", "guided evaluation needs a non-empty memory store")
        if store.embedding_model_id and store.embedding_model_id != config.embedding_model:
            raise ConfigError(
                "embedding_model",
                f"memory was embedded with {store.embedding_model_id!r} but the run is "
                f"configured for {config.embedding_model!r}; re-embed or change the config",
            )
    provider = provider or build_provider(config)
    if store is not None and any(not t.embedding_is_current() for t in store):
        memorymod.ensure_embeddings(store, provider, config.embedding_model, persist_path=config.memory_path)

    tasks = load_humaneval(config.humaneval_path)
    results = evalharness.evaluate_tasks(
        tasks,
        store,
        provider,
        build_sandbox_factory(config),
        build_settings(config),
        workers=config.workers,
    )
    report = EvalReport(results=results, config_digest=config_digest(config))
    run_id = config.run_id or time.strftime("run-%Y%m%d-%H%M%S")
    run_dir = Path(config.out_dir) / "runs" / run_id
    report_path = write_run_outputs(run_dir, report, config.method_label())
    print(f"eval: pass@1 {format_percent(report.pass_at_1)} "
          f"({sum(1 for r in results if r.passed)}/{len(results)}) -> {report_path}")
    return EXIT_OK


def cmd_report(run_dirs: Sequence[str]) -> int:
    rows = []
    for run_dir in run_dirs:
        report_path = Path(run_dir) / "report.json"
        if not report_path.is_file():
            raise FileNotFoundError(f"no report.json under {run_dir}")
        data = json.loads(report_path.read_text(encoding="utf-8"))
        if not data.get("results"):
            raise ValueError(f"empty report: {report_path}")
        rows.append((run_dir, data))
    if len(rows) == 1:
        _, data = rows[0]
        score = data["pass_at_1"]
        print(f"pass@1: {score['percent']} ({score['passed']}/{score['total']})")
        for provenance, count in sorted(data["provenance_counts"].items()):
            print(f"  {provenance}: {count}")
        return EXIT_OK
    print(f"{'run':<40} {'% pass@1':>9} {'passed':>7} {'total':>6}")
    for run_dir, data in rows:
        score = data["pass_at_1"]
        print(f"{run_dir:<40} {score['percent']:>9} {score['passed']:>7} {score['total']:>6}")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

_FLAG_HELP = {
    "mode": "provider mode: live, replay, or record",
    "mbpp_path": "MBPP-format JSONL dataset (explore input)",
    "humaneval_path": "HumanEval-format JSONL dataset (eval input)",
    "memory_path": "episodic memory file (JSONL)",
    "fixtures_dir": "directory of record/replay fixtures",
    "out_dir": "output directory; reports land in <out_dir>/runs/<run_id>/",
    "run_id": "run identifier (default: timestamp)",
    "use_pag": "retrieve a similar past episode and prefix its retrospection",
    "sanitize": "strip print/assert statements before verification",
    "reassess": "re-check every code block of a failed trajectory",
    "max_trials": "refinement trial budget per task",
    "workers": "parallel task workers during eval",
    "first_n": "number of leading dataset records used by explore",
    "executor": "execution backend: subprocess or inprocess",
    "executor_cmd": "command line of the executor child process",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file")
    for field in dataclasses.fields(RunConfig):
        default = getattr(RunConfig, field.name, field.default)
        shown = repr(default)
        if isinstance(default, str) and len(default) > 48:
            shown = repr(default[:45] + "...")
        help_text = _FLAG_HELP.get(field.name, f"config key {field.name}")
        parser.add_argument(
            "--" + field.name.replace("_", "-"),
            dest=field.name,
            default=None,
            metavar="V",
            help=f"{help_text} (default: {shown})",
        )


def _overrides_from_args(args: argparse.Namespace) -> dict[str, str]:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    return {name: value for name, value in vars(args).items() if name in names and value is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hindsight",
        description="Execution-feedback code refinement with episodic-memory guidance.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_explore = sub.add_parser("explore", help="build episodic memory from an instruction dataset")
    _add_config_flags(p_explore)

    p_eval = sub.add_parser("eval", help="evaluate a benchmark dataset and write reports")
    _add_config_flags(p_eval)

    p_report = sub.add_parser("report", help="summarize finished runs")
    p_report.add_argument("run_dirs", nargs="+", help="run directories containing report.json")

    p_record = sub.add_parser(
        "record-fixtures", help="run explore/eval in recording mode to capture replay fixtures"
    )
    p_record.add_argument("stage", choices=("explore", "eval"), help="which stage to record")
    _add_config_flags(p_record)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(ENV_PREFIX + "LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dirs)
        overrides = _overrides_from_args(args)
        if args.command == "record-fixtures":
            overrides["mode"] = "record"
        config = load_config(args.config, overrides)
        if args.command == "explore":
            return cmd_explore(config)
        if args.command == "eval":
            return cmd_eval(config)
        if args.command == "record-fixtures":
            return cmd_explore(config) if args.stage == "explore" else cmd_eval(config)
        parser.error(f"unknown command {args.command!r}")
        return EXIT_CONFIG_ERROR
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except Exception as exc:  # harness errors must not masquerade as task failures
        log.exception("harness error")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HARNESS_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
