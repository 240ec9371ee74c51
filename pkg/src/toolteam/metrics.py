"""Metrics over episode traces: the validity funnel, reflection/modification
rates, Win, and the cooperative-tool (CT) and self-organization (SO) ratios.

All ratios are computed from integer counters so reports for the same
(model, task, paradigm) cell can be merged exactly.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, fields
from decimal import ROUND_HALF_EVEN, Decimal
from typing import TYPE_CHECKING, Any

from .tools import Stage, ToolKind
from .world import ExecStatus, Violation

if TYPE_CHECKING:
    from .trace import EpisodeTrace

EPSILON = 1e-9
ANY = "*"


@dataclass(frozen=True)
class StepRecord:
    """One response attempt by one agent in one turn."""

    turn: int
    agent: str
    stage: Stage
    exec_status: ExecStatus | None
    tool_name_selected: str
    tool_kind: ToolKind | None = None
    reward: int = 0
    was_replan: bool = False
    params: Any = None
    detail: str = ""
    violation: Violation | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage", Stage(self.stage))
        if self.exec_status is not None:
            object.__setattr__(self, "exec_status", ExecStatus(self.exec_status))
        if self.tool_kind is not None:
            object.__setattr__(self, "tool_kind", ToolKind(self.tool_kind))
        if self.violation is not None:
            object.__setattr__(self, "violation", Violation(self.violation))
        if (self.exec_status is not None) != (self.stage is Stage.VALID):
            raise ValueError("exec_status is present exactly when the stage is VALID")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for key in ("stage", "exec_status", "tool_kind", "violation"):
            if out[key] is not None:
                out[key] = out[key].value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> StepRecord:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


class MixedTracesError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    model: str
    task: str
    paradigm: str
    episodes: int = 0
    wins: int = 0
    n_tools: int = 0
    n_known: int = 0
    n_valid: int = 0
    n_exec_ok: int = 0
    n_reflect: int = 0
    n_modify: int = 0
    n_cooperative: int = 0
    n_activate: int = 0

    def _pct(self, count: int) -> float:
        return 100.0 * count / self.n_tools if self.n_tools else 0.0

    @property
    def tool_calling(self) -> float:
        return self._pct(self.n_known)

    @property
    def param_val(self) -> float:
        return self._pct(self.n_valid)

    @property
    def exec_val(self) -> float:
        return self._pct(self.n_exec_ok)

    @property
    def reflection_rate(self) -> float:
        return self._pct(self.n_reflect)

    @property
    def modification_rate(self) -> float:
        return self._pct(self.n_modify)

    @property
    def win(self) -> float:
        return self.wins / self.episodes if self.episodes else 0.0

    @property
    def ct(self) -> float:
        return self._pct(self.n_cooperative)

    @property
    def so(self) -> float:
        # Pinned to exactly 0 without cooperative calls; otherwise the epsilon
        # keeps all-activation cells a hair under 100 (displayed as 100.00).
        if self.n_cooperative == 0:
            return 0.0
        return 100.0 * self.n_activate / (self.n_cooperative + EPSILON)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.model, self.task, self.paradigm)

    def metrics(self) -> dict[str, float]:
        return {name: getattr(self, name) for name, _ in COLUMNS}

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), **self.metrics()}

    def merge(self, other: MetricsReport, *, strict: bool = True) -> MetricsReport:
        """Sum counters. Non-strict merges label differing cell fields as ``*``."""
        if strict and self.key != other.key:
            raise MixedTracesError(f"cannot merge {self.key} with {other.key}")
        labels = [a if a == b else ANY for a, b in zip(self.key, other.key)]
        counts = {f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)[3:]}
        return MetricsReport(*labels, **counts)


COLUMNS = [
    ("tool_calling", "Tool calling/%"),
    ("param_val", "Param Val/%"),
    ("exec_val", "Exec Val/%"),
    ("reflection_rate", "Reflec Rate/%"),
    ("modification_rate", "Modifi Rate/%"),
    ("win", "Win(0/1)"),
    ("ct", "CT/%"),
    ("so", "SO/%"),
]
FUNDAMENTAL = [c for c in COLUMNS if c[0] not in ("ct", "so")]
COOPERATIVE = [c for c in COLUMNS if c[0] in ("ct", "so")]

PARADIGM_ORDER = ["CENTRALIZED", "CENTRALIZED_SELF_ORG", "DECENTRALIZED", "SELF_ORGANIZATION"]
TASK_ORDER = ["CABINET", "PACK", "SORT"]


def _count_steps(steps: Sequence[StepRecord]) -> dict[str, int]:
    counts = dict.fromkeys(
        ("n_tools", "n_known", "n_valid", "n_exec_ok", "n_reflect", "n_modify", "n_cooperative", "n_activate"), 0
    )
    last_tool: dict[str, str] = {}
    last_reward: dict[str, int] = {}
    for step in steps:
        counts["n_tools"] += 1
        if step.stage is not Stage.UNKNOWN_TOOL:
            counts["n_known"] += 1
        if step.stage is Stage.VALID:
            counts["n_valid"] += 1
        if step.exec_status is ExecStatus.OK:
            counts["n_exec_ok"] += 1
        if step.tool_kind is not None and step.tool_kind.cooperative:
            counts["n_cooperative"] += 1
            if step.tool_kind is ToolKind.COOPERATIVE_ACTIVATE:
                counts["n_activate"] += 1
        # An agent's first step has no predecessor and scores 0 on both.
        if step.agent in last_tool:
            counts["n_reflect"] += step.tool_name_selected != last_tool[step.agent]
            counts["n_modify"] += step.reward > last_reward[step.agent]
        last_tool[step.agent] = step.tool_name_selected
        last_reward[step.agent] = step.reward
    return counts


def compute(traces: Sequence[EpisodeTrace]) -> MetricsReport:
    """Metrics for a set of episodes of one (model, task, paradigm) cell."""
    if not traces:
        raise ValueError("compute needs at least one trace")
    keys = {t.cell for t in traces}
    if len(keys) != 1:
        raise MixedTracesError(f"traces span several cells: {sorted(keys)}")
    model, task, paradigm = keys.pop()
    totals: dict[str, int] = defaultdict(int)
    wins = 0
    for trace in traces:
        for name, value in _count_steps(trace.steps).items():
            totals[name] += value
        if trace.result is not None and trace.result.win:
            wins += 1
    return MetricsReport(model, task, paradigm, episodes=len(traces), wins=wins, **totals)


@dataclass
class ReportTable:
    rows: list[MetricsReport]

    def __len__(self) -> int:
        return len(self.rows)


def _order(report: MetricsReport) -> tuple:
    def rank(seq: list[str], value: str) -> tuple[int, str]:
        return (seq.index(value), "") if value in seq else (len(seq), value)

    return (rank(PARADIGM_ORDER, report.paradigm), report.model, rank(TASK_ORDER, report.task))


def aggregate(
    reports: Iterable[MetricsReport], keys: Sequence[str] = ("model", "task", "paradigm")
) -> ReportTable:
    """Group reports by ``keys`` and merge each group's counters."""
    groups: dict[tuple, MetricsReport] = {}
    for report in reports:
        k = tuple(getattr(report, name) for name in keys)
        groups[k] = groups[k].merge(report, strict=False) if k in groups else report
    return ReportTable(sorted(groups.values(), key=_order))


def display(value: float) -> str:
    """Round half-even to two decimals for human output."""
    return str(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def _align(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.rjust(w) if i >= 3 else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in body)
    return "\n".join(lines)


def format_text(table: ReportTable) -> str:
    """One row per cell, columns in the benchmark's reporting order."""
    header = ["Paradigm", "Model", "Task"] + [label for _, label in COLUMNS]
    body = [
        [r.paradigm, r.model, r.task] + [display(getattr(r, name)) for name, _ in COLUMNS] for r in table.rows
    ]
    return _align(header, body)


def format_wide(table: ReportTable, columns: Sequence[tuple[str, str]] = FUNDAMENTAL) -> str:
    """Paradigm/model rows with one column block per task, like the published tables."""
    tasks = sorted({r.task for r in table.rows}, key=lambda t: TASK_ORDER.index(t) if t in TASK_ORDER else 99)
    cells = {(r.paradigm, r.model, r.task): r for r in table.rows}
    row_keys = list(dict.fromkeys((r.paradigm, r.model) for r in table.rows))
    header = ["Paradigm", "Model", ""] + [f"{t}:{label}" for t in tasks for _, label in columns]
    body = []
    for paradigm, model in row_keys:
        row = [paradigm, model, ""]
        for t in tasks:
            r = cells.get((paradigm, model, t))
            row += [display(getattr(r, name)) if r else "-" for name, _ in columns]
        body.append(row)
    return _align(header, body)


def to_json(table: ReportTable) -> str:
    return json.dumps([r.to_dict() for r in table.rows], indent=2, sort_keys=True)


def to_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(MetricsReport)] + [name for name, _ in COLUMNS]
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for r in table.rows:
        writer.writerow({k: v for k, v in r.to_dict().items() if k in names})
    return buf.getvalue()
