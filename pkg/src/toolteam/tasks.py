"""The three task instances: CABINET, PACK and SORT.

Definitions are loaded from JSON fixtures under ``toolteam/fixtures/tasks``
and validated against the structural invariants of each task before use.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Any

from .tools import ToolSpec, tool_from_fixture
from .world import DOOR_CLOSED, DOOR_OPEN, RobotState, TaskId, WorldState

TASK_SCHEMA_VERSION = 1

ROBOT_COUNTS = {TaskId.CABINET: 3, TaskId.PACK: 2, TaskId.SORT: 3}
COOPERATIVE_TOOL_COUNT = 2
TOOLSET_SIZES = (8, 9)


class TaskFixtureError(ValueError):
    pass


@dataclass(frozen=True)
class GoalPredicate:
    name: str
    object: str
    location: str

    def holds(self, objects: Mapping[str, str]) -> bool:
        return objects.get(self.object) == self.location

    def __call__(self, state: WorldState) -> bool:
        return self.holds(state.objects)


@dataclass(frozen=True)
class Location:
    name: str
    phrase: str
    placeable: bool
    capacity: int | None = None


@dataclass(frozen=True)
class DoorRule:
    fixture: str
    guards: frozenset[str]


@dataclass(frozen=True)
class TaskDefinition:
    task_id: TaskId
    description: str
    robots: tuple[tuple[str, tuple[str, ...]], ...]
    initial_state: WorldState
    goal_predicates: tuple[GoalPredicate, ...]
    common_tools: tuple[ToolSpec, ...]
    locations: tuple[Location, ...]
    views: tuple[tuple[str, tuple[str, ...]], ...]
    adjacency: frozenset[frozenset[str]]
    door: DoorRule | None = None
    bin: str | None = None
    panel_header: bool = False

    @property
    def robot_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.robots)

    @property
    def location_names(self) -> tuple[str, ...]:
        return tuple(loc.name for loc in self.locations)

    @property
    def object_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.initial_state.objects))

    def reach_of(self, robot: str) -> tuple[str, ...]:
        return dict(self.robots)[robot]

    def view_of(self, robot: str) -> tuple[str, ...]:
        return dict(self.views)[robot]

    def _location(self, name: str) -> Location | None:
        return next((loc for loc in self.locations if loc.name == name), None)

    def phrase(self, name: str) -> str:
        loc = self._location(name)
        return loc.phrase if loc is not None else f"at {name}"

    def placeable(self, name: str) -> bool:
        loc = self._location(name)
        return loc is not None and loc.placeable

    def capacity(self, name: str) -> int | None:
        loc = self._location(name)
        return loc.capacity if loc is not None else None

    def adjacent(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.adjacency

    def goal_values(self, objects: Mapping[str, str]) -> tuple[bool, ...]:
        return tuple(g.holds(objects) for g in self.goal_predicates)


def _read_fixture(task_id: TaskId) -> dict[str, Any]:
    path = resources.files("toolteam").joinpath("fixtures", "tasks", f"{task_id.value.lower()}.json")
    return json.loads(path.read_text())


def _build(data: Mapping[str, Any]) -> TaskDefinition:
    if data.get("schema_version") != TASK_SCHEMA_VERSION:
        raise TaskFixtureError(
            f"task fixture schema {data.get('schema_version')} != supported {TASK_SCHEMA_VERSION}"
        )
    task_id = TaskId(data["task_id"])
    locations = tuple(
        Location(loc["name"], loc["phrase"], loc["placeable"], loc.get("capacity")) for loc in data["locations"]
    )
    robots = tuple((r["name"], tuple(r["reach"])) for r in data["robots"])
    views = tuple((r["name"], tuple(r.get("view", r["reach"]))) for r in data["robots"])
    door = None
    if data.get("door"):
        door = DoorRule(data["door"]["fixture"], frozenset(data["door"]["guards"]))
    goals = tuple(GoalPredicate(g["name"], g["object"], g["location"]) for g in data["goals"])
    tools = tuple(tool_from_fixture(t) for t in data["common_tools"])
    objects = dict(data["objects"])
    state = WorldState(
        task_id,
        objects,
        {name: RobotState(name, reach) for name, reach in robots},
        dict(data["fixtures"]),
        0,
        tuple(g.holds(objects) for g in goals),
    )
    task = TaskDefinition(
        task_id=task_id,
        description=data["description"],
        robots=robots,
        initial_state=state,
        goal_predicates=goals,
        common_tools=tools,
        locations=locations,
        views=views,
        adjacency=frozenset(frozenset(pair) for pair in data["adjacency"]),
        door=door,
        bin=data.get("bin"),
        panel_header=bool(data.get("panel_header", False)),
    )
    check_invariants(task)
    return task


def check_invariants(task: TaskDefinition) -> None:
    """Raise :class:`TaskFixtureError` if the definition breaks a task invariant."""

    def fail(msg: str) -> None:
        raise TaskFixtureError(f"{task.task_id.value}: {msg}")

    if len(task.robots) != ROBOT_COUNTS[task.task_id]:
        fail(f"expected {ROBOT_COUNTS[task.task_id]} robots, found {len(task.robots)}")
    if len(set(task.robot_names)) != len(task.robot_names):
        fail("duplicate robot names")
    places = set(task.location_names) | set(task.initial_state.fixtures)
    for name, reach in task.robots:
        if not set(reach) <= places:
            fail(f"{name} reaches unknown places {sorted(set(reach) - places)}")
        if not set(task.view_of(name)) <= places:
            fail(f"{name} views unknown places")
    for obj, where in task.initial_state.objects.items():
        if where not in task.location_names:
            fail(f"{obj} starts at unknown location {where}")
    for pair in task.adjacency:
        if not pair <= set(task.location_names):
            fail(f"adjacency names unknown locations {sorted(pair)}")
    for goal in task.goal_predicates:
        if goal.object not in task.initial_state.objects or goal.location not in task.location_names:
            fail(f"goal {goal.name} references unknown entities")
    names = [t.name for t in task.common_tools]
    if len(set(names)) != len(names):
        fail("duplicate common tool names")
    if len(names) + COOPERATIVE_TOOL_COUNT not in TOOLSET_SIZES:
        fail(f"{len(names)} common tools give a toolset outside {TOOLSET_SIZES}")
    if task.door is not None:
        if task.initial_state.fixtures.get(task.door.fixture) not in (DOOR_OPEN, DOOR_CLOSED):
            fail("door fixture lacks an OPEN/CLOSED state")
    if task.bin is not None and task.bin not in task.location_names:
        fail("bin is not a location")
    if task.task_id is TaskId.SORT:
        panels = [n for n in task.location_names if n.startswith("panel")]
        if panels != [f"panel{i}" for i in range(1, 8)]:
            fail("SORT needs panel1..panel7 in order")
        chain = {frozenset((f"panel{i}", f"panel{i + 1}")) for i in range(1, 7)}
        if task.adjacency != chain:
            fail("SORT panels must form the chain panel1-...-panel7")
        if len(task.initial_state.objects) != 3:
            fail("SORT has exactly three cubes")
    if all(task.initial_state.goal_satisfied):
        fail("initial state already solves the task")


@lru_cache(maxsize=None)
def _load(task_id: TaskId) -> TaskDefinition:
    return _build(_read_fixture(task_id))


def load_task(task_id: TaskId | str) -> TaskDefinition:
    return _load(TaskId(task_id.upper() if isinstance(task_id, str) else task_id))


def is_success(state: WorldState) -> bool:
    task = load_task(state.task_id)
    return all(g(state) for g in task.goal_predicates)
