"""Symbolic world state and the deterministic transition engine.

Every operation here is a pure function: states are frozen, transitions
return new states, and no input is ever modified. Task-specific rules
(reach maps, door guards, adjacency, goals) come from :mod:`toolteam.tasks`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from types import MappingProxyType
from typing import TYPE_CHECKING, Any

from .tools import ToolKind, ValidToolCall

if TYPE_CHECKING:
    from .tasks import TaskDefinition


class TaskId(str, Enum):
    CABINET = "CABINET"
    PACK = "PACK"
    SORT = "SORT"


class ExecStatus(str, Enum):
    OK = "OK"
    EXEC_INVALID = "EXEC_INVALID"


class Violation(str, Enum):
    OUT_OF_REACH = "OUT_OF_REACH"
    PRECONDITION_FAILED = "PRECONDITION_FAILED"
    CONFLICT = "CONFLICT"
    FIXTURE_BLOCKED = "FIXTURE_BLOCKED"


GRIPPER = "gripper:"
DOOR_OPEN = "OPEN"
DOOR_CLOSED = "CLOSED"


def gripper_of(robot: str) -> str:
    return GRIPPER + robot


@dataclass(frozen=True)
class RobotState:
    name: str
    reach: tuple[str, ...]
    holding: str | None = None
    holding_fixture: str | None = None

    def __post_init__(self) -> None:
        if self.holding is not None and self.holding_fixture is not None:
            raise ValueError(f"{self.name} has one gripper: cannot hold an object and a fixture")
        object.__setattr__(self, "reach", tuple(self.reach))

    @property
    def busy(self) -> bool:
        return self.holding is not None or self.holding_fixture is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "reach": list(self.reach),
            "holding": self.holding,
            "holding_fixture": self.holding_fixture,
        }


@dataclass(frozen=True)
class WorldState:
    task_id: TaskId
    objects: Mapping[str, str]
    robots: Mapping[str, RobotState]
    fixtures: Mapping[str, str]
    turn: int = 0
    goal_satisfied: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        # Defensive copies behind read-only views keep every transition pure.
        object.__setattr__(self, "task_id", TaskId(self.task_id))
        object.__setattr__(self, "objects", MappingProxyType(dict(self.objects)))
        object.__setattr__(self, "robots", MappingProxyType(dict(self.robots)))
        object.__setattr__(self, "fixtures", MappingProxyType(dict(self.fixtures)))
        object.__setattr__(self, "goal_satisfied", tuple(self.goal_satisfied))
        if self.turn < 0:
            raise ValueError("turn must be nonnegative")
        held = [r.holding for r in self.robots.values() if r.holding is not None]
        for name in held:
            if self.objects.get(name) != gripper_of(_holder(self.robots, name)):
                raise ValueError(f"gripper and object map disagree about {name}")

    def replace(self, **changes: Any) -> WorldState:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id.value,
            "objects": dict(self.objects),
            "robots": {n: r.to_dict() for n, r in self.robots.items()},
            "fixtures": dict(self.fixtures),
            "turn": self.turn,
            "goal_satisfied": list(self.goal_satisfied),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> WorldState:
        robots = {
            n: RobotState(r["name"], tuple(r["reach"]), r.get("holding"), r.get("holding_fixture"))
            for n, r in data["robots"].items()
        }
        return cls(
            TaskId(data["task_id"]),
            dict(data["objects"]),
            robots,
            dict(data["fixtures"]),
            int(data["turn"]),
            tuple(data["goal_satisfied"]),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def satisfied_count(self) -> int:
        return sum(self.goal_satisfied)


def _holder(robots: Mapping[str, RobotState], obj: str) -> str:
    return next(n for n, r in robots.items() if r.holding == obj)


@dataclass(frozen=True)
class ExecResult:
    status: ExecStatus
    reward: int = 0
    message: str = ""
    violation: Violation | None = None

    def __post_init__(self) -> None:
        if self.status is ExecStatus.OK and self.violation is not None:
            raise ValueError("a successful execution carries no violation")
        if self.status is ExecStatus.EXEC_INVALID and self.reward != 0:
            raise ValueError("an invalid execution earns no reward")
        if self.reward < 0:
            raise ValueError("reward is nonnegative")

    @property
    def ok(self) -> bool:
        return self.status is ExecStatus.OK

    @classmethod
    def invalid(cls, violation: Violation, message: str) -> ExecResult:
        return cls(ExecStatus.EXEC_INVALID, 0, message, violation)


FEEDBACK_RESOURCE = "feedback.json"


@lru_cache(maxsize=None)
def _feedback_fixture() -> dict[str, Any]:
    text = resources.files("toolteam").joinpath("fixtures", FEEDBACK_RESOURCE).read_text()
    return json.loads(text)


def feedback_version() -> int:
    return _feedback_fixture()["version"]


def feedback(key: str, **fields: Any) -> str:
    return _feedback_fixture()["templates"][key].format(**fields)


def _rules(task_id: TaskId) -> TaskDefinition:
    from .tasks import load_task

    return load_task(task_id)


class _Invalid(Exception):
    def __init__(self, violation: Violation, key: str, **fields: Any) -> None:
        super().__init__(key)
        self.result = ExecResult.invalid(violation, feedback(key, **fields))


def _require(cond: bool, violation: Violation, key: str, **fields: Any) -> None:
    if not cond:
        raise _Invalid(violation, key, **fields)


def _where(task: TaskDefinition, location: str) -> str:
    if location.startswith(GRIPPER):
        return "held by " + location[len(GRIPPER):]
    return task.phrase(location)


class _Step:
    """Working copy for a single transition; committed into a fresh WorldState."""

    def __init__(self, state: WorldState, task: TaskDefinition, robot: str) -> None:
        self.task = task
        self.state = state
        self.robot = state.robots[robot]
        self.objects = dict(state.objects)
        self.robots = dict(state.robots)
        self.fixtures = dict(state.fixtures)

    def need_object(self, obj: str) -> str:
        _require(obj in self.objects, Violation.PRECONDITION_FAILED, "unknown_object", object=obj)
        return self.objects[obj]

    def need_location(self, loc: str) -> None:
        _require(loc in self.task.location_names, Violation.PRECONDITION_FAILED, "unknown_location", location=loc)

    def need_reach(self, target: str) -> None:
        _require(target in self.robot.reach, Violation.OUT_OF_REACH, "out_of_reach", robot=self.robot.name, target=target)

    def need_free_gripper(self) -> None:
        _require(not self.robot.busy, Violation.PRECONDITION_FAILED, "gripper_busy", robot=self.robot.name)

    def need_door_passable(self, loc: str) -> None:
        door = self.task.door
        if door is None or loc not in door.guards:
            return
        fixture = door.fixture
        _require(self.fixtures[fixture] == DOOR_OPEN, Violation.PRECONDITION_FAILED, "door_closed", fixture=fixture)
        held = any(r.holding_fixture == fixture for r in self.robots.values())
        _require(held, Violation.FIXTURE_BLOCKED, "door_unheld", fixture=fixture)

    def need_room(self, loc: str, tool: str) -> None:
        _require(self.task.placeable(loc), Violation.PRECONDITION_FAILED, "not_placeable", location=loc, tool=tool)
        capacity = self.task.capacity(loc)
        if capacity is not None:
            count = sum(1 for where in self.objects.values() if where == loc)
            _require(count < capacity, Violation.PRECONDITION_FAILED, "occupied", location=loc)

    def set_robot(self, **changes: Any) -> None:
        self.robot = dataclasses.replace(self.robot, **changes)
        self.robots[self.robot.name] = self.robot

    def commit(self) -> WorldState:
        goals = self.task.goal_values(self.objects)
        return self.state.replace(
            objects=self.objects, robots=self.robots, fixtures=self.fixtures, goal_satisfied=goals
        )


def _wait(s: _Step, call: ValidToolCall) -> str:
    return feedback("wait", robot=s.robot.name)


def _pick(s: _Step, call: ValidToolCall) -> str:
    obj, loc = call.arg("object"), call.arg("location")
    current = s.need_object(obj)
    s.need_location(loc)
    s.need_reach(loc)
    s.need_free_gripper()
    _require(current == loc, Violation.PRECONDITION_FAILED, "not_at", object=obj, location=loc)
    s.need_door_passable(loc)
    s.objects[obj] = gripper_of(s.robot.name)
    s.set_robot(holding=obj)
    return feedback("pick", robot=s.robot.name, object=obj, location=loc)


def _place(s: _Step, call: ValidToolCall) -> str:
    obj, loc = call.arg("object"), call.arg("location")
    s.need_object(obj)
    _require(s.robot.holding == obj, Violation.PRECONDITION_FAILED, "not_holding", robot=s.robot.name, object=obj)
    s.need_location(loc)
    s.need_reach(loc)
    s.need_room(loc, call.name)
    s.need_door_passable(loc)
    s.objects[obj] = loc
    s.set_robot(holding=None)
    return feedback("place", robot=s.robot.name, object=obj, phrase=s.task.phrase(loc))


def _place_in_bin(s: _Step, call: ValidToolCall) -> str:
    obj = call.arg("object")
    bin_name = s.task.bin
    _require(bin_name is not None, Violation.PRECONDITION_FAILED, "no_bin")
    s.need_object(obj)
    _require(s.robot.holding == obj, Violation.PRECONDITION_FAILED, "not_holding", robot=s.robot.name, object=obj)
    s.need_reach(bin_name)
    s.objects[obj] = bin_name
    s.set_robot(holding=None)
    return feedback("place_in_bin", robot=s.robot.name, object=obj)


def _move(s: _Step, call: ValidToolCall) -> str:
    obj, loc = call.arg("object"), call.arg("location")
    source = s.need_object(obj)
    s.need_location(loc)
    s.need_free_gripper()
    s.need_reach(source)
    s.need_reach(loc)
    _require(s.task.adjacent(source, loc), Violation.PRECONDITION_FAILED, "not_adjacent", location=loc, source=source)
    s.need_room(loc, call.name)
    s.objects[obj] = loc
    return feedback("move", robot=s.robot.name, object=obj, source=source, location=loc)


def _inspect(s: _Step, call: ValidToolCall) -> str:
    obj = call.arg("object")
    where = s.need_object(obj)
    if where != gripper_of(s.robot.name):
        s.need_reach(where)
    return feedback("inspect", robot=s.robot.name, object=obj, phrase=_where(s.task, where))


def _locate(s: _Step, call: ValidToolCall) -> str:
    obj = call.arg("object")
    where = s.need_object(obj)
    return feedback("locate", robot=s.robot.name, object=obj, phrase=_where(s.task, where))


def _need_door(s: _Step) -> str:
    _require(s.task.door is not None, Violation.PRECONDITION_FAILED, "no_door")
    fixture = s.task.door.fixture
    s.need_reach(fixture)
    return fixture


def _open_door(s: _Step, call: ValidToolCall) -> str:
    fixture = _need_door(s)
    s.need_free_gripper()
    _require(s.fixtures[fixture] == DOOR_CLOSED, Violation.PRECONDITION_FAILED, "door_already_open", fixture=fixture)
    s.fixtures[fixture] = DOOR_OPEN
    return feedback("open_door", robot=s.robot.name, fixture=fixture)


def _hold_door(s: _Step, call: ValidToolCall) -> str:
    fixture = _need_door(s)
    s.need_free_gripper()
    _require(s.fixtures[fixture] == DOOR_OPEN, Violation.PRECONDITION_FAILED, "door_closed", fixture=fixture)
    s.set_robot(holding_fixture=fixture)
    return feedback("hold_door", robot=s.robot.name, fixture=fixture)


def _release_door(s: _Step, call: ValidToolCall) -> str:
    fixture = _need_door(s)
    _require(
        s.robot.holding_fixture == fixture,
        Violation.PRECONDITION_FAILED,
        "not_holding_door",
        robot=s.robot.name,
        fixture=fixture,
    )
    s.set_robot(holding_fixture=None)
    return feedback("release_door", robot=s.robot.name, fixture=fixture)


_HANDLERS = {
    "WAIT": _wait,
    "PICK": _pick,
    "PLACE": _place,
    "PLACE_IN_BIN": _place_in_bin,
    "MOVE": _move,
    "INSPECT": _inspect,
    "LOCATE": _locate,
    "OPEN_DOOR": _open_door,
    "HOLD_DOOR": _hold_door,
    "RELEASE_DOOR": _release_door,
}

# Tools that change nothing and therefore never compete for a target.
_READ_ONLY = {"WAIT", "INSPECT", "LOCATE"}


def claim_key(state: WorldState, call: ValidToolCall) -> str | None:
    """The object or fixture a call acts on, for same-turn conflict detection."""
    if call.name in _READ_ONLY:
        return None
    for key, value in call.args:
        if key == "object":
            return value
    task = _rules(state.task_id)
    if call.name.endswith("_DOOR") and task.door is not None:
        return task.door.fixture
    return None


def apply_tool(state: WorldState, robot: str, call: ValidToolCall) -> tuple[WorldState, ExecResult]:
    """Execute one validated common-tool call for ``robot``.

    Returns a new state and the execution outcome; a failed precondition
    yields ``EXEC_INVALID`` and the unchanged input state.
    """
    if call.kind is not ToolKind.COMMON:
        raise ValueError(f"{call.name} is cooperative; route it to the agent pool")
    if robot not in state.robots:
        raise KeyError(f"unknown robot {robot!r}")
    task = _rules(state.task_id)
    handler = _HANDLERS.get(call.name)
    if handler is None:
        return state, ExecResult.invalid(Violation.PRECONDITION_FAILED, feedback("unsupported", tool=call.name))
    step = _Step(state, task, robot)
    try:
        message = handler(step, call)
    except _Invalid as exc:
        return state, exc.result
    after = step.commit()
    reward = max(0, after.satisfied_count() - state.satisfied_count())
    return after, ExecResult(ExecStatus.OK, reward, message)


def apply_batch(
    state: WorldState,
    calls: Sequence[tuple[str, ValidToolCall]],
    claimed: frozenset[str] = frozenset(),
) -> tuple[WorldState, list[ExecResult], frozenset[str]]:
    """Apply calls in alphabetical robot order with first-claim-wins conflicts.

    ``claimed`` carries targets already taken earlier in the same turn.
    Results are returned in the order of ``calls``; the grown claim set is
    returned alongside so later retries in the turn see earlier claims.
    """
    order = sorted(range(len(calls)), key=lambda i: calls[i][0])
    results: list[ExecResult | None] = [None] * len(calls)
    for i in order:
        robot, call = calls[i]
        key = claim_key(state, call)
        if key is not None and key in claimed:
            results[i] = ExecResult.invalid(Violation.CONFLICT, feedback("conflict", robot=robot, target=key))
            continue
        state, result = apply_tool(state, robot, call)
        if result.ok and key is not None:
            claimed = claimed | {key}
        results[i] = result
    return state, results, claimed  # type: ignore[return-value]


def advance_turn(state: WorldState) -> WorldState:
    return state.replace(turn=state.turn + 1)


def resolve_turn(
    state: WorldState, calls: Sequence[tuple[str, ValidToolCall]]
) -> tuple[WorldState, list[ExecResult]]:
    robots = [r for r, _ in calls]
    if len(set(robots)) != len(robots):
        raise ValueError("at most one call per robot per turn")
    after, results, _ = apply_batch(state, calls)
    return advance_turn(after), results


def observe(
    state: WorldState,
    robot: str,
    *,
    active: Sequence[str] | None = None,
    feedback: Sequence[str] = (),
) -> str:
    """Render ``robot``'s local observation as deterministic text."""
    if robot not in state.robots:
        raise KeyError(f"unknown robot {robot!r} for task {state.task_id.value}")
    task = _rules(state.task_id)
    me = state.robots[robot]
    roster = sorted(active) if active is not None else sorted(state.robots)
    lines = [
        f"Turn {state.turn}. You are {robot} in the {state.task_id.value} task.",
        "Active agents: " + ", ".join(roster) + ".",
    ]
    if task.panel_header:
        lines.append("Panels (left to right): " + ", ".join(task.location_names) + ".")
    if me.holding is not None:
        grip = f"holding the {me.holding.upper()}"
    elif me.holding_fixture is not None:
        grip = f"holding the {me.holding_fixture} open"
    else:
        grip = "empty"
    lines.append(f"Your gripper: {grip}.")
    lines.append("You can reach: " + ", ".join(me.reach) + ".")
    lines.append("You see:")
    for loc in task.view_of(robot):
        if loc in state.fixtures:
            lines.append(f"- the {loc} is {state.fixtures[loc]}")
            continue
        here = sorted(o for o, where in state.objects.items() if where == loc)
        if not here:
            lines.append(f"- {loc} is empty")
        for obj in here:
            lines.append(f"- the {obj.upper()} is {task.phrase(loc)}")
    lines.append("Feedback from last turn:")
    lines.extend(f"- {m}" for m in feedback)
    if not feedback:
        lines.append("- none")
    return "\n".join(lines)
