"""Tool schemas, per-agent candidate tool sets and the staged validation pipeline.

A raw policy reply goes through three stages, in order:

1. name lookup (exact, case-sensitive) -> ``UNKNOWN_TOOL`` on a miss,
2. parameter typing against the tool's declared params -> ``BAD_PARAMS``,
3. ``VALID``, carrying a typed :class:`ValidToolCall` ready for execution.

Execution legality is decided later by the world engine or the agent pool.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .orchestrator import ParadigmId
    from .tasks import TaskDefinition


class ParamType(str, Enum):
    STRING = "STRING"
    STRING_LIST = "STRING_LIST"
    AGENT_NAME = "AGENT_NAME"
    AGENT_NAME_LIST = "AGENT_NAME_LIST"


class ToolKind(str, Enum):
    COMMON = "COMMON"
    COOPERATIVE_ACTIVATE = "COOPERATIVE_ACTIVATE"
    COOPERATIVE_DISCONNECT = "COOPERATIVE_DISCONNECT"

    @property
    def cooperative(self) -> bool:
        return self is not ToolKind.COMMON


class Stage(str, Enum):
    UNKNOWN_TOOL = "UNKNOWN_TOOL"
    BAD_PARAMS = "BAD_PARAMS"
    VALID = "VALID"


ACTIVATE = "ACTIVATE"
DISCONNECT = "DISCONNECT"

# Diagnostic details for replies that never reached name lookup.
UNPARSEABLE = "unparseable"
TRANSPORT = "transport"
MISSING = "missing"

_TYPE_LABELS = {
    ParamType.STRING: "string",
    ParamType.STRING_LIST: "list[string]",
    ParamType.AGENT_NAME: "agent",
    ParamType.AGENT_NAME_LIST: "list[agent]",
}


@dataclass(frozen=True)
class Param:
    name: str
    type: ParamType
    # Agent-typed params are only well-typed when the value is in this set.
    domain: tuple[str, ...] | None = None

    def render(self) -> str:
        label = _TYPE_LABELS[self.type]
        if self.domain is not None:
            label += " in {" + ", ".join(self.domain) + "}"
        return f"{self.name}: {label}"


@dataclass(frozen=True)
class ToolSpec:
    name: str
    kind: ToolKind
    params: tuple[Param, ...] = ()

    def signature(self) -> str:
        return f"{self.name}(" + ", ".join(p.render() for p in self.params) + ")"

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "params": [
                {"name": p.name, "type": p.type.value, "domain": list(p.domain) if p.domain is not None else None}
                for p in self.params
            ],
        }


@dataclass(frozen=True)
class RawResponse:
    """One unvalidated tool selection as emitted by a policy.

    Deliberately admits garbage: ``tool_name`` and ``raw_params`` are whatever
    the policy produced. ``failure`` is set when no selection could be
    extracted at all (unparseable reply, transport error, missing entry).
    """

    reasoning: Any = ""
    tool_name: Any = ""
    raw_params: Any = field(default_factory=dict)
    failure: str | None = None

    @classmethod
    def failed(cls, detail: str, reasoning: str = "") -> RawResponse:
        return cls(reasoning=reasoning, tool_name="", raw_params={}, failure=detail)

    def to_wire(self) -> dict[str, Any]:
        return {"reasoning": self.reasoning, "tool": self.tool_name, "params": self.raw_params}


@dataclass(frozen=True)
class ValidToolCall:
    name: str
    kind: ToolKind = ToolKind.COMMON
    args: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def make(cls, name: str, kind: ToolKind = ToolKind.COMMON, **args: Any) -> ValidToolCall:
        return cls(name, kind, tuple((k, _freeze(v)) for k, v in args.items()))

    def arg(self, name: str) -> Any:
        for key, value in self.args:
            if key == name:
                return value
        raise KeyError(name)

    def params_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.args}


@dataclass(frozen=True)
class ValidationOutcome:
    stage: Stage
    call: ValidToolCall | None
    detail: str

    def __post_init__(self) -> None:
        if (self.stage is Stage.VALID) != (self.call is not None):
            raise ValueError("a call is present exactly when the stage is VALID")


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(value)
    return value


def tool_from_fixture(entry: Mapping[str, Any]) -> ToolSpec:
    params = tuple(Param(name, ParamType(ptype)) for name, ptype in entry["params"])
    return ToolSpec(entry["name"], ToolKind.COMMON, params)


def cooperative_tools(agent: str, roster: Sequence[str]) -> tuple[ToolSpec, ToolSpec]:
    others = tuple(r for r in roster if r != agent)
    return (
        ToolSpec(ACTIVATE, ToolKind.COOPERATIVE_ACTIVATE, (Param("agent", ParamType.AGENT_NAME, others),)),
        ToolSpec(
            DISCONNECT,
            ToolKind.COOPERATIVE_DISCONNECT,
            (Param("agents", ParamType.AGENT_NAME_LIST, tuple(roster)),),
        ),
    )


def registry_for(agent: str, paradigm: ParadigmId, task: TaskDefinition) -> tuple[ToolSpec, ...]:
    """Candidate tool set offered to ``agent``.

    Common tools come first; ACTIVATE and DISCONNECT are appended only in the
    agent-as-tool paradigms.
    """
    roster = task.robot_names
    if agent not in roster:
        raise ValueError(f"{agent!r} is not a robot of {task.task_id.value}")
    tools = tuple(task.common_tools)
    if paradigm.agent_as_tool:
        tools += cooperative_tools(agent, roster)
    return tools


def _is_str(value: Any) -> bool:
    return isinstance(value, str)


def _check_param(param: Param, value: Any) -> str | None:
    """Return a diagnostic when ``value`` is ill-typed for ``param``."""
    if param.type is ParamType.STRING:
        return None if _is_str(value) else f"{param.name}: expected string, got {type(value).__name__}"
    if param.type is ParamType.AGENT_NAME:
        if not _is_str(value):
            return f"{param.name}: expected agent name, got {type(value).__name__}"
        if param.domain is not None and value not in param.domain:
            return f"{param.name}: {value!r} is not one of {list(param.domain)}"
        return None
    if not isinstance(value, (list, tuple)):
        return f"{param.name}: expected list, got {type(value).__name__}"
    if not all(_is_str(v) for v in value):
        return f"{param.name}: list items must be strings"
    if param.type is ParamType.AGENT_NAME_LIST:
        if not value:
            return f"{param.name}: agent list is empty"
        if len(set(value)) != len(value):
            return f"{param.name}: duplicate agents"
        if param.domain is not None:
            stray = [v for v in value if v not in param.domain]
            if stray:
                return f"{param.name}: {stray} not in {list(param.domain)}"
    return None


def validate(raw: RawResponse, registry: Sequence[ToolSpec]) -> ValidationOutcome:
    if raw.failure is not None:
        return ValidationOutcome(Stage.UNKNOWN_TOOL, None, raw.failure)
    name = raw.tool_name
    spec = None
    if isinstance(name, str):
        spec = next((t for t in registry if t.name == name), None)
    if spec is None:
        return ValidationOutcome(Stage.UNKNOWN_TOOL, None, f"unknown tool {name!r}")

    params = raw.raw_params
    if not isinstance(params, Mapping):
        return ValidationOutcome(Stage.BAD_PARAMS, None, f"params must be an object, got {type(params).__name__}")
    declared = [p.name for p in spec.params]
    missing = [p for p in declared if p not in params]
    if missing:
        return ValidationOutcome(Stage.BAD_PARAMS, None, f"missing params {missing}")
    extra = sorted(str(k) for k in params if k not in declared)
    if extra:
        return ValidationOutcome(Stage.BAD_PARAMS, None, f"unexpected params {extra}")
    for p in spec.params:
        problem = _check_param(p, params[p.name])
        if problem:
            return ValidationOutcome(Stage.BAD_PARAMS, None, problem)

    call = ValidToolCall(spec.name, spec.kind, tuple((p.name, _freeze(params[p.name])) for p in spec.params))
    return ValidationOutcome(Stage.VALID, call, "ok")


def _first_json_object(text: str) -> Any:
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
            return obj
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
    raise ValueError("no JSON object found")


def _raw_from_obj(obj: Any) -> RawResponse:
    if not isinstance(obj, dict) or "tool" not in obj:
        return RawResponse.failed(UNPARSEABLE)
    return RawResponse(
        reasoning=obj.get("reasoning", ""),
        tool_name=obj["tool"],
        raw_params=obj.get("params", {}),
    )


def parse_response(text: str) -> RawResponse:
    """Parse one local reply: ``{"reasoning": str, "tool": str, "params": object}``.

    Surrounding prose or code fences are tolerated; a reply with no JSON
    object carrying a ``tool`` key is scored as unparseable.
    """
    try:
        obj = _first_json_object(text)
    except ValueError:
        return RawResponse.failed(UNPARSEABLE, reasoning=text)
    return _raw_from_obj(obj)


def parse_central_response(text: str, agents: Sequence[str]) -> dict[str, RawResponse]:
    """Parse a central reply: an object keyed by robot name, one local reply each."""
    try:
        obj = _first_json_object(text)
    except ValueError:
        obj = None
    if not isinstance(obj, dict):
        return {a: RawResponse.failed(UNPARSEABLE) for a in agents}
    out = {}
    for agent in agents:
        if agent not in obj:
            out[agent] = RawResponse.failed(MISSING)
        else:
            out[agent] = _raw_from_obj(obj[agent])
    return out
