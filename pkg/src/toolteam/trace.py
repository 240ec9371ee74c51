"""Episode traces: line-delimited JSON persistence and replay verification.

File layout, one JSON object per line:

    {"type": "header", ...}                  first line
    {"type": "step" | "pool" | "turn" | "transcript", ...}   grouped by turn
    {"type": "result", ...}                  last line (absent if incomplete)
"""

from __future__ import annotations

import json
import os
import tempfile
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from .metrics import StepRecord

SCHEMA_VERSION = 1


class TraceError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TraceSchemaError(TraceError):
    def __init__(self, found: Any, expected: int = SCHEMA_VERSION) -> None:
        self.found = found
        self.expected = expected
        super().__init__(f"trace schema version {found} is not supported (this harness reads version {expected})", 1)


@dataclass(frozen=True)
class PoolEvent:
    turn: int
    event: str
    subject: str
    actor: str | None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class TurnSnapshot:
    turn: int
    state_hash: str
    acting: tuple[str, ...]
    active_after: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"turn": self.turn, "state_hash": self.state_hash, "acting": list(self.acting),
                "active_after": list(self.active_after)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TurnSnapshot:
        return cls(d["turn"], d["state_hash"], tuple(d["acting"]), tuple(d["active_after"]))


@dataclass(frozen=True)
class EpisodeResult:
    win: int
    turns_used: int
    replans_used: int
    invocations: int = 0
    transport_failures: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class EpisodeTrace:
    header: dict[str, Any]
    steps: list[StepRecord] = field(default_factory=list)
    pool_events: list[PoolEvent] = field(default_factory=list)
    snapshots: list[TurnSnapshot] = field(default_factory=list)
    transcripts: list[dict[str, Any]] = field(default_factory=list)
    result: EpisodeResult | None = None

    @property
    def complete(self) -> bool:
        return self.result is not None

    @property
    def cell(self) -> tuple[str, str, str]:
        return (self.header["model"], self.header["task"], self.header["paradigm"])


def _line(obj: Mapping[str, Any]) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps_trace(trace: EpisodeTrace) -> str:
    lines = [_line({"type": "header", **trace.header})]
    turns = sorted(
        {s.turn for s in trace.steps}
        | {e.turn for e in trace.pool_events}
        | {s.turn for s in trace.snapshots}
        | {t["turn"] for t in trace.transcripts}
    )
    for turn in turns:
        lines += [_line({"type": "transcript", **t}) for t in trace.transcripts if t["turn"] == turn]
        lines += [_line({"type": "step", **s.to_dict()}) for s in trace.steps if s.turn == turn]
        lines += [_line({"type": "pool", **e.to_dict()}) for e in trace.pool_events if e.turn == turn]
        lines += [_line({"type": "turn", **s.to_dict()}) for s in trace.snapshots if s.turn == turn]
    if trace.result is not None:
        lines.append(_line({"type": "result", **trace.result.to_dict()}))
    return "\n".join(lines) + "\n"


def write_trace(trace: EpisodeTrace, path: str | os.PathLike[str]) -> Path:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(dumps_trace(trace))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def loads_trace(text: str) -> EpisodeTrace:
    trace: EpisodeTrace | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TraceError(f"malformed JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict) or "type" not in obj:
            raise TraceError("record lacks a type", lineno)
        kind = obj.pop("type")
        if trace is None:
            if kind != "header":
                raise TraceError("first record must be the header", lineno)
            if obj.get("schema_version") != SCHEMA_VERSION:
                raise TraceSchemaError(obj.get("schema_version"))
            trace = EpisodeTrace(header=obj)
            continue
        if trace.result is not None:
            raise TraceError("records after the result line", lineno)
        try:
            if kind == "step":
                trace.steps.append(StepRecord.from_dict(obj))
            elif kind == "pool":
                trace.pool_events.append(PoolEvent(**obj))
            elif kind == "turn":
                trace.snapshots.append(TurnSnapshot.from_dict(obj))
            elif kind == "transcript":
                trace.transcripts.append(obj)
            elif kind == "result":
                trace.result = EpisodeResult(**obj)
            else:
                raise TraceError(f"unknown record type {kind!r}", lineno)
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, TraceError):
                raise
            raise TraceError(f"bad {kind} record: {exc}", lineno) from None
    if trace is None:
        raise TraceError("empty trace file", 1)
    return trace


def read_trace(path: str | os.PathLike[str]) -> EpisodeTrace:
    return loads_trace(Path(path).read_text(encoding="utf-8"))


class ReplayStatus(str, Enum):
    VERIFIED = "VERIFIED"
    DIVERGED = "DIVERGED"
    NOT_REPLAYABLE = "NOT_REPLAYABLE"


@dataclass(frozen=True)
class ReplayReport:
    status: ReplayStatus
    first_divergent_turn: int | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.status is ReplayStatus.VERIFIED


def _first_divergence(recorded: EpisodeTrace, fresh: EpisodeTrace) -> tuple[int | None, str]:
    candidates: list[tuple[int, str]] = []
    for a, b in zip(recorded.snapshots, fresh.snapshots):
        if a != b:
            candidates.append((a.turn, "state snapshot differs"))
            break
    if len(recorded.snapshots) != len(fresh.snapshots):
        candidates.append((min(len(recorded.snapshots), len(fresh.snapshots)), "turn count differs"))
    for a, b in zip(recorded.steps, fresh.steps):
        if a != b:
            candidates.append((a.turn, f"step of {a.agent} differs"))
            break
    if len(recorded.steps) != len(fresh.steps):
        candidates.append((recorded.steps[-1].turn if recorded.steps else 0, "step count differs"))
    for a, b in zip(recorded.pool_events, fresh.pool_events):
        if a != b:
            candidates.append((a.turn, "pool history differs"))
            break
    if len(recorded.pool_events) != len(fresh.pool_events):
        candidates.append((recorded.pool_events[-1].turn if recorded.pool_events else 0, "pool history length differs"))
    if not candidates:
        if recorded.result != fresh.result:
            last = recorded.snapshots[-1].turn if recorded.snapshots else 0
            return last, "final result differs"
        return None, ""
    return min(candidates)


def replay_trace(recorded: EpisodeTrace) -> ReplayReport:
    from .orchestrator import EpisodeConfig, run_episode
    from .policy import policy_from_descriptor
    from .tasks import load_task

    descriptor = recorded.header.get("policy", {})
    policy = policy_from_descriptor(descriptor)
    if policy is None:
        return ReplayReport(ReplayStatus.NOT_REPLAYABLE, None, f"policy kind {descriptor.get('kind')!r} is not deterministic")
    config = EpisodeConfig.from_header(recorded.header)
    fresh = run_episode(config, load_task(config.task_id), policy)
    if fresh.header != recorded.header:
        return ReplayReport(ReplayStatus.DIVERGED, 0, "header differs")
    turn, detail = _first_divergence(recorded, fresh)
    if turn is None:
        return ReplayReport(ReplayStatus.VERIFIED)
    return ReplayReport(ReplayStatus.DIVERGED, turn, detail)


def replay_verify(path: str | os.PathLike[str]) -> ReplayReport:
    """Re-simulate a recorded trace and compare every snapshot hash and the result."""
    return replay_trace(read_trace(path))
