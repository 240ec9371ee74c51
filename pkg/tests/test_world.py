from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolteam.tasks import load_task
from toolteam.tools import ToolKind, ValidToolCall
from toolteam.world import (
    DOOR_OPEN,
    ExecResult,
    ExecStatus,
    RobotState,
    TaskId,
    Violation,
    WorldState,
    apply_batch,
    apply_tool,
    claim_key,
    observe,
    resolve_turn,
)

call = ValidToolCall.make


def initial(task: str) -> WorldState:
    return load_task(task).initial_state


def run(state, *steps):
    """Apply (robot, call) pairs one at a time; fail loudly on any invalid step."""
    for robot, c in steps:
        state, result = apply_tool(state, robot, c)
        assert result.ok, result.message
    return state


def test_pick_out_of_reach_in_sort():
    _, result = apply_tool(initial("SORT"), "Alice", call("PICK", object="cube_red", location="panel7"))
    assert result.status is ExecStatus.EXEC_INVALID
    assert result.violation is Violation.OUT_OF_REACH
    assert result.reward == 0


@pytest.mark.parametrize("task", list(TaskId))
def test_wait_is_identity(task):
    state = initial(task)
    robot = load_task(task).robot_names[0]
    after, result = apply_tool(state, robot, call("WAIT"))
    assert after == state and after.digest() == state.digest()
    assert result.status is ExecStatus.OK and result.reward == 0


def test_cabinet_door_gates_the_cup():
    state = initial("CABINET")
    pick = call("PICK", object="cup", location="cabinet")
    _, closed = apply_tool(state, "Bob", pick)
    assert closed.violation is Violation.PRECONDITION_FAILED

    opened = run(state, ("Alice", call("OPEN_DOOR")))
    assert opened.fixtures["cabinet_door"] == DOOR_OPEN
    _, unheld = apply_tool(opened, "Bob", pick)
    assert unheld.violation is Violation.FIXTURE_BLOCKED

    held = run(opened, ("Alice", call("HOLD_DOOR")))
    after, ok = apply_tool(held, "Bob", pick)
    assert ok.status is ExecStatus.OK and ok.reward >= 0
    assert after.robots["Bob"].holding == "cup"


def test_reward_counts_newly_satisfied_goals():
    state = initial("CABINET")
    state = run(state, ("Chad", call("PICK", object="mug", location="table")))
    after, result = apply_tool(state, "Chad", call("PLACE", object="mug", location="coaster_mug"))
    assert result.reward == 1
    assert after.satisfied_count() == 1


def test_gripper_busy_and_not_holding():
    state = run(initial("PACK"), ("Alice", call("PICK", object="apple", location="table_left")))
    _, busy = apply_tool(state, "Alice", call("PICK", object="banana", location="table_left"))
    assert busy.violation is Violation.PRECONDITION_FAILED
    _, empty = apply_tool(state, "Bob", call("PLACE", object="apple", location="table_center"))
    assert empty.status is ExecStatus.EXEC_INVALID


def test_pack_bin_only_through_place_in_bin():
    state = run(initial("PACK"), ("Alice", call("PICK", object="apple", location="table_left")))
    _, placed = apply_tool(state, "Alice", call("PLACE", object="apple", location="bin"))
    assert placed.violation is Violation.PRECONDITION_FAILED
    after, binned = apply_tool(state, "Alice", call("PLACE_IN_BIN", object="apple"))
    assert binned.ok and after.objects["apple"] == "bin" and binned.reward == 1


def test_sort_move_only_to_adjacent_panels():
    state = initial("SORT")
    after, step = apply_tool(state, "Alice", call("MOVE", object="cube_red", location="panel1"))
    assert step.ok and after.objects["cube_red"] == "panel1"
    _, skip = apply_tool(state, "Chad", call("MOVE", object="cube_blue", location="panel5"))
    assert skip.violation is Violation.PRECONDITION_FAILED
    _, far = apply_tool(state, "Bob", call("MOVE", object="cube_green", location="panel2"))
    assert far.violation is Violation.OUT_OF_REACH


def test_unknown_object_and_location():
    state = initial("SORT")
    _, r1 = apply_tool(state, "Alice", call("PICK", object="cube_pink", location="panel2"))
    _, r2 = apply_tool(state, "Alice", call("PICK", object="cube_red", location="panel9"))
    assert r1.violation is Violation.PRECONDITION_FAILED
    assert r2.violation is Violation.PRECONDITION_FAILED


def test_apply_tool_rejects_cooperative_and_unknown_robot():
    state = initial("PACK")
    with pytest.raises(ValueError):
        apply_tool(state, "Alice", call("ACTIVATE", ToolKind.COOPERATIVE_ACTIVATE, agent="Bob"))
    with pytest.raises(KeyError):
        apply_tool(state, "Zed", call("WAIT"))


def test_unsupported_tool_is_precondition_failure():
    _, result = apply_tool(initial("PACK"), "Alice", call("TELEPORT"))
    assert result.violation is Violation.PRECONDITION_FAILED


def test_exec_result_invariants():
    with pytest.raises(ValueError):
        ExecResult(ExecStatus.EXEC_INVALID, 1, "x", Violation.CONFLICT)
    with pytest.raises(ValueError):
        ExecResult(ExecStatus.OK, -1, "x")
    with pytest.raises(ValueError):
        RobotState("A", ("x",), holding="cup", holding_fixture="door")


def test_conflict_first_claim_wins_in_either_order():
    state = initial("CABINET")
    pick = call("PICK", object="mug", location="table")
    # Give Alice reach over the table so both robots could legally pick.
    state = state.replace(robots={**state.robots, "Alice": RobotState("Alice", ("table", "cabinet_door"))})
    for order in itertools.permutations([("Alice", pick), ("Chad", pick)]):
        _, results = resolve_turn(state, list(order))
        by_robot = dict(zip([r for r, _ in order], results))
        assert by_robot["Alice"].ok
        assert by_robot["Chad"].violation is Violation.CONFLICT
        assert sum(r.ok for r in results) == 1


def test_empty_turn_only_advances_counter():
    state = initial("SORT")
    after, results = resolve_turn(state, [])
    assert results == []
    assert after == state.replace(turn=state.turn + 1)


def test_disjoint_calls_match_single_application():
    state = initial("PACK")
    a = ("Alice", call("PICK", object="apple", location="table_left"))
    b = ("Bob", call("PICK", object="milk", location="table_right"))
    batch, results, _ = apply_batch(state, [b, a])
    alone_a, ra = apply_tool(state, *a)
    alone_b, rb = apply_tool(state, *b)
    assert results == [rb, ra]
    assert batch.objects == {**state.objects, "apple": alone_a.objects["apple"], "milk": alone_b.objects["milk"]}


def test_failed_call_claims_nothing():
    state = initial("PACK")
    bad = ("Alice", call("PICK", object="milk", location="table_right"))
    good = ("Bob", call("PICK", object="milk", location="table_right"))
    _, results, claimed = apply_batch(state, [bad, good])
    assert not results[0].ok and results[1].ok
    assert claimed == {"milk"}


def test_claim_keys():
    state = initial("CABINET")
    assert claim_key(state, call("WAIT")) is None
    assert claim_key(state, call("HOLD_DOOR")) == "cabinet_door"
    assert claim_key(state, call("PICK", object="cup", location="cabinet")) == "cup"


def test_resolve_turn_rejects_two_calls_for_one_robot():
    with pytest.raises(ValueError):
        resolve_turn(initial("PACK"), [("Alice", call("WAIT")), ("Alice", call("WAIT"))])


def test_observation_text():
    text = observe(initial("CABINET"), "Bob")
    assert "the CUP is in the cabinet" in text
    assert observe(initial("CABINET"), "Bob") == text
    sort = observe(initial("SORT"), "Alice")
    assert "Panels (left to right): panel1, panel2, panel3, panel4, panel5, panel6, panel7." in sort
    seen = sort.split("You see:")[1]
    assert "panel2" in seen and "panel5" not in seen and "CUBE_BLUE" not in seen
    with pytest.raises(KeyError):
        observe(initial("SORT"), "Zed")


def test_observation_includes_feedback():
    text = observe(initial("PACK"), "Alice", feedback=["Bob waited."])
    assert text.endswith("- Bob waited.")


def test_state_round_trip_and_hash_stability():
    state = initial("CABINET")
    again = WorldState.from_dict(state.to_dict())
    assert again == state and again.digest() == state.digest()
    assert state.canonical_json() == again.canonical_json()


_PACK_CALLS = [
    call(name, **params)
    for name, params in [
        ("WAIT", {}),
        *[("PICK", {"object": o, "location": loc}) for o in ("apple", "milk") for loc in ("table_left", "table_right", "table_center")],
        *[("PLACE", {"object": o, "location": loc}) for o in ("apple", "milk") for loc in ("table_center", "bin")],
        *[("PLACE_IN_BIN", {"object": o}) for o in ("apple", "milk")],
        *[("MOVE", {"object": o, "location": "table_center"}) for o in ("apple", "milk")],
    ]
]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["Alice", "Bob"]), st.sampled_from(_PACK_CALLS)), max_size=12))
def test_purity_and_reproducibility(steps):
    state = initial("PACK")
    snapshot = state.canonical_json()
    results = []
    cur = state
    for robot, c in steps:
        before = cur.canonical_json()
        cur, r = apply_tool(cur, robot, c)
        results.append(r)
        if not r.ok:
            assert cur.canonical_json() == before
    assert state.canonical_json() == snapshot
    replay = state
    for (robot, c), r in zip(steps, results):
        replay, again = apply_tool(replay, robot, c)
        assert again == r
    assert replay.digest() == cur.digest()
    assert all(r.reward >= 0 for r in results)
