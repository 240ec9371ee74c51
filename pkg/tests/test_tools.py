from __future__ import annotations

from hypothesis import given
from hypothesis import strategies as st

from toolteam.orchestrator import ParadigmId
from toolteam.tasks import load_task
from toolteam.tools import (
    ACTIVATE,
    DISCONNECT,
    MISSING,
    UNPARSEABLE,
    RawResponse,
    Stage,
    ToolKind,
    parse_central_response,
    parse_response,
    registry_for,
    validate,
)

CABINET = load_task("CABINET")


def reg(agent="Alice", paradigm=ParadigmId.SELF_ORGANIZATION, task=CABINET):
    return registry_for(agent, paradigm, task)


def test_registry_contents():
    plain = [t.name for t in reg(paradigm=ParadigmId.DECENTRALIZED)]
    assert ACTIVATE not in plain and DISCONNECT not in plain
    full = [t.name for t in reg()]
    assert full[-2:] == [ACTIVATE, DISCONNECT] and len(full) == 8
    assert reg() == reg()


def test_activate_domain_excludes_caller():
    activate = next(t for t in reg("Bob") if t.name == ACTIVATE)
    assert activate.params[0].domain == ("Alice", "Chad")
    disconnect = next(t for t in reg("Bob") if t.name == DISCONNECT)
    assert disconnect.params[0].domain == ("Alice", "Bob", "Chad")


def test_named_failure_modes():
    r = reg()
    assert validate(RawResponse("", "PCIK", {"object": "cup", "location": "cabinet"}), r).stage is Stage.UNKNOWN_TOOL
    assert validate(RawResponse("", "PICK", {"object": 3.5, "location": "cabinet"}), r).stage is Stage.BAD_PARAMS
    assert validate(RawResponse("", "WAIT", {}), r).stage is Stage.VALID


def test_bad_params_variants():
    r = reg()
    cases = [
        ("PICK", {"object": "cup"}),
        ("PICK", {"object": "cup", "location": "cabinet", "speed": 2}),
        ("PICK", ["cup", "cabinet"]),
        ("PICK", {"object": True, "location": "cabinet"}),
        (ACTIVATE, {"agent": "Alice"}),
        (ACTIVATE, {"agent": "Dave"}),
        (DISCONNECT, {"agents": []}),
        (DISCONNECT, {"agents": ["Bob", "Bob"]}),
        (DISCONNECT, {"agents": "Bob"}),
        (DISCONNECT, {"agents": ["Bob", 1]}),
    ]
    for name, params in cases:
        assert validate(RawResponse("", name, params), r).stage is Stage.BAD_PARAMS, (name, params)


def test_valid_cooperative_call_carries_kind():
    out = validate(RawResponse("", DISCONNECT, {"agents": ["Bob", "Chad"]}), reg())
    assert out.stage is Stage.VALID
    assert out.call.kind is ToolKind.COOPERATIVE_DISCONNECT
    assert out.call.arg("agents") == ("Bob", "Chad")
    assert out.call.params_dict() == {"agents": ["Bob", "Chad"]}


def test_names_are_case_sensitive_and_must_be_strings():
    r = reg()
    assert validate(RawResponse("", "wait", {}), r).stage is Stage.UNKNOWN_TOOL
    assert validate(RawResponse("", None, {}), r).stage is Stage.UNKNOWN_TOOL
    assert validate(RawResponse("", ["WAIT"], {}), r).stage is Stage.UNKNOWN_TOOL


def test_failed_response_is_unknown_tool_with_detail():
    out = validate(RawResponse.failed("transport"), reg())
    assert out.stage is Stage.UNKNOWN_TOOL and out.detail == "transport"


def test_parse_response():
    raw = parse_response('Sure! ```json\n{"reasoning": "r", "tool": "WAIT", "params": {}}\n```')
    assert raw.tool_name == "WAIT" and raw.failure is None
    assert parse_response("I will wait.").failure == UNPARSEABLE
    assert parse_response('{"reasoning": "no tool"}').failure == UNPARSEABLE
    assert parse_response('{broken {"tool": "WAIT"}').tool_name == "WAIT"


def test_parse_central_response():
    text = '{"Alice": {"tool": "WAIT", "params": {}}, "Bob": {"tool": "OPEN_DOOR"}}'
    parsed = parse_central_response(text, ["Alice", "Bob", "Chad"])
    assert parsed["Alice"].tool_name == "WAIT"
    assert parsed["Bob"].raw_params == {}
    assert parsed["Chad"].failure == MISSING
    assert all(r.failure == UNPARSEABLE for r in parse_central_response("nope", ["Alice"]).values())


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=8), inner, max_size=3),
    max_leaves=8,
)


@given(name=st.one_of(st.text(max_size=12), st.sampled_from([t.name for t in reg()])), params=json_values)
def test_validate_is_total_and_staged(name, params):
    out = validate(RawResponse("", name, params), reg())
    assert (out.call is not None) == (out.stage is Stage.VALID)
    if out.stage is not Stage.UNKNOWN_TOOL:
        assert name in {t.name for t in reg()}


@given(st.text(max_size=80))
def test_parse_never_raises(text):
    parse_response(text)
    parse_central_response(text, ["Alice", "Bob"])
