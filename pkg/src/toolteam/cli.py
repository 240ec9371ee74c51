"""Command-line front end: ``toolteam run | report | replay | matrix``.

Exit codes: 0 success, 1 configuration error, 2 trace/schema error or replay
divergence, 3 transport exhaustion (a remote policy could not be reached).
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from collections import defaultdict
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

from . import __version__
from .metrics import ReportTable, aggregate, compute, format_text, format_wide, to_csv, to_json
from .orchestrator import EpisodeConfig, ParadigmId, run_episodes
from .policy import Policy, make_policy
from .tasks import load_task
from .trace import EpisodeTrace, ReplayStatus, TraceError, read_trace, replay_verify, write_trace
from .world import TaskId

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_TRACE = 2
EXIT_TRANSPORT = 3

POLICIES = ("oracle", "random", "remote")
DEFAULTS: dict[str, Any] = {
    "task": None,
    "paradigm": None,
    "policy": "oracle",
    "seed": 0,
    "episodes": 5,
    "max_turns": 10,
    "replans": 5,
    "out": "traces",
    "jobs": 1,
    "log_transcripts": False,
}
CONFIG_KEYS = set(DEFAULTS) | {"replan_budget"}

log = logging.getLogger("toolteam")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # Usage errors are configuration errors, not trace errors.
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser, *, cell: bool) -> None:
    # Every default is None so that config-file values survive unless overridden.
    if cell:
        p.add_argument("--task", type=str.lower, choices=[t.value.lower() for t in TaskId])
        p.add_argument("--paradigm", choices=[m.config_name for m in ParadigmId])
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--max-turns", dest="max_turns", type=int)
    p.add_argument("--replans", type=int)
    p.add_argument("--out", help="directory for trace files and reports")
    p.add_argument("--jobs", type=int, help="cells run concurrently by matrix")
    p.add_argument("--log-transcripts", dest="log_transcripts", action="store_const", const=True)
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="toolteam", description="Symbolic multi-robot tool-calling benchmark harness.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="execute episodes for one task/paradigm cell")
    _add_run_flags(run, cell=True)

    matrix = sub.add_parser("matrix", help="run all 4 paradigms x 3 tasks")
    _add_run_flags(matrix, cell=False)

    report = sub.add_parser("report", help="compute metrics from trace files")
    report.add_argument("paths", nargs="+", type=Path, help="trace files or directories of *.jsonl")
    report.add_argument("--out", type=Path, help="write per-cell JSON reports and a combined CSV here")
    report.add_argument("--wide", action="store_true", help="one column block per task")

    replay = sub.add_parser("replay", help="re-simulate traces and compare snapshot hashes")
    replay.add_argument("paths", nargs="+", type=Path)
    return parser


def resolve_settings(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    settings = dict(DEFAULTS)
    if getattr(args, "config", None) is not None:
        try:
            data = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(data) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "replan_budget" in data:
            data["replans"] = data.pop("replan_budget")
        settings.update(data)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if settings["policy"] not in POLICIES:
        raise ConfigError(f"unknown policy {settings['policy']!r}")
    if int(settings["jobs"]) < 1:
        raise ConfigError("--jobs must be at least 1")
    return settings


def episode_config(settings: dict[str, Any], task: str, paradigm: str) -> EpisodeConfig:
    try:
        return EpisodeConfig(
            paradigm=ParadigmId.parse(paradigm),
            task_id=task,
            max_turns=int(settings["max_turns"]),
            replan_budget=int(settings["replans"]),
            episodes=int(settings["episodes"]),
            seed=int(settings["seed"]),
            log_transcripts=bool(settings["log_transcripts"]),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def trace_name(config: EpisodeConfig, policy: str, index: int) -> str:
    return f"{config.task_id.value.lower()}_{config.paradigm.config_name}_{policy}_ep{index}.jsonl"


def _factory(kind: str) -> Callable[[int], Policy]:
    if kind == "remote":
        try:
            shared = make_policy("remote")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return lambda seed: shared
    return lambda seed: make_policy(kind, seed=seed)


def run_cell(config: EpisodeConfig, policy: str, out: Path, factory: Callable[[int], Policy]) -> list[EpisodeTrace]:
    traces = run_episodes(config, load_task(config.task_id), factory)
    for i, trace in enumerate(traces):
        write_trace(trace, out / trace_name(config, policy, i))
    return traces


def _reports(traces: Sequence[EpisodeTrace]) -> ReportTable:
    cells: dict[tuple[str, str, str], list[EpisodeTrace]] = defaultdict(list)
    for t in traces:
        cells[t.cell].append(t)
    return aggregate(compute(group) for group in cells.values())


def _report_name(cell: tuple[str, str, str]) -> str:
    model, task, paradigm = cell
    model = re.sub(r"[^A-Za-z0-9.-]+", "-", model)
    return f"report_{model}_{task.lower()}_{ParadigmId(paradigm).config_name}.json"


def write_reports(table: ReportTable, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for row in table.rows:
        (out / _report_name(row.key)).write_text(to_json(ReportTable([row])) + "\n", encoding="utf-8")
    (out / "reports.csv").write_text(to_csv(table), encoding="utf-8")


def _transport_exhausted(traces: Sequence[EpisodeTrace]) -> bool:
    return any(t.result is not None and t.result.transport_failures for t in traces)


def cmd_run(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    if settings["task"] is None or settings["paradigm"] is None:
        raise ConfigError("run needs --task and --paradigm (flag or config)")
    config = episode_config(settings, settings["task"], settings["paradigm"])
    out = Path(settings["out"])
    traces = run_cell(config, settings["policy"], out, _factory(settings["policy"]))
    print(format_text(_reports(traces)))
    if _transport_exhausted(traces):
        log.error("remote policy unreachable; transport failures recorded in the traces")
        return EXIT_TRANSPORT
    return EXIT_OK


def cmd_matrix(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    out = Path(settings["out"])
    configs = [episode_config(settings, t.value, p.config_name) for p in ParadigmId for t in TaskId]
    factory = _factory(settings["policy"])
    with ThreadPoolExecutor(max_workers=int(settings["jobs"])) as pool:
        results = list(pool.map(lambda c: run_cell(c, settings["policy"], out, factory), configs))
    traces = [t for cell in results for t in cell]
    table = _reports(traces)
    write_reports(table, out)
    print(format_text(table))
    return EXIT_TRANSPORT if _transport_exhausted(traces) else EXIT_OK


def _expand(paths: Sequence[Path]) -> list[Path]:
    files: list[Path] = []
    for path in paths:
        if path.is_dir():
            files.extend(sorted(path.glob("*.jsonl")))
        elif path.exists():
            files.append(path)
        else:
            raise ConfigError(f"no such trace file or directory: {path}")
    return files


def cmd_report(args: argparse.Namespace) -> int:
    traces = [read_trace(p) for p in _expand(args.paths)]
    table = _reports(traces)
    print(format_wide(table) if args.wide else format_text(table))
    if args.out is not None:
        write_reports(table, args.out)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    code = EXIT_OK
    for path in _expand(args.paths):
        report = replay_verify(path)
        if report.status is ReplayStatus.DIVERGED:
            print(f"{path}: DIVERGED at turn {report.first_divergent_turn} ({report.detail})")
            code = EXIT_TRACE
        elif report.status is ReplayStatus.NOT_REPLAYABLE:
            print(f"{path}: NOT_REPLAYABLE ({report.detail})")
        else:
            print(f"{path}: VERIFIED")
    return code


COMMANDS = {"run": cmd_run, "matrix": cmd_matrix, "report": cmd_report, "replay": cmd_replay}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"toolteam: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceError as exc:
        print(f"toolteam: trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE


if __name__ == "__main__":
    sys.exit(main())
