from __future__ import annotations

import json

import pytest

from toolteam.orchestrator import EpisodeConfig, ParadigmId, run_episode
from toolteam.policy import OraclePolicy, RandomPolicy
from toolteam.tasks import load_task
from toolteam.trace import (
    SCHEMA_VERSION,
    ReplayStatus,
    TraceError,
    TraceSchemaError,
    dumps_trace,
    loads_trace,
    read_trace,
    replay_verify,
    write_trace,
)
from toolteam.world import TaskId


def oracle_trace(paradigm=ParadigmId.SELF_ORGANIZATION, task=TaskId.CABINET, seed=0):
    return run_episode(EpisodeConfig(paradigm, task, seed=seed), load_task(task), OraclePolicy())


@pytest.mark.parametrize("paradigm", list(ParadigmId))
def test_round_trip(tmp_path, paradigm):
    trace = oracle_trace(paradigm)
    back = read_trace(write_trace(trace, tmp_path / "t.jsonl"))
    assert back.header == trace.header
    assert back.steps == trace.steps
    assert back.pool_events == trace.pool_events
    assert back.snapshots == trace.snapshots
    assert back.result == trace.result
    assert dumps_trace(back) == dumps_trace(trace)


def test_layout():
    lines = dumps_trace(oracle_trace()).splitlines()
    kinds = [json.loads(line)["type"] for line in lines]
    assert kinds[0] == "header" and kinds[-1] == "result"
    assert set(kinds[1:-1]) <= {"step", "pool", "turn", "transcript"}


def test_truncated_file_reports_line(tmp_path):
    text = dumps_trace(oracle_trace())
    lines = text.splitlines()
    cut = "\n".join(lines[:5]) + "\n" + lines[5][: len(lines[5]) // 2]
    with pytest.raises(TraceError) as err:
        loads_trace(cut)
    assert err.value.line == 6 and "line 6" in str(err.value)


def test_header_only_is_incomplete():
    header = dumps_trace(oracle_trace()).splitlines()[0]
    trace = loads_trace(header + "\n")
    assert trace.steps == [] and trace.result is None and not trace.complete


def test_schema_mismatch_names_both_versions():
    with pytest.raises(TraceSchemaError) as err:
        loads_trace(json.dumps({"type": "header", "schema_version": 99}))
    assert "99" in str(err.value) and str(SCHEMA_VERSION) in str(err.value)


def test_structural_errors():
    with pytest.raises(TraceError):
        loads_trace("")
    with pytest.raises(TraceError):
        loads_trace('{"type": "step"}')
    text = dumps_trace(oracle_trace())
    with pytest.raises(TraceError):
        loads_trace(text + '{"type": "step", "turn": 9}\n')
    with pytest.raises(TraceError) as err:
        loads_trace(text.replace('"type":"turn"', '"type":"bogus"', 1))
    assert "bogus" in str(err.value)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_trace(oracle_trace(), tmp_path / "a" / "t.jsonl")
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["t.jsonl"]


def test_replay_verified_for_oracle_and_random(tmp_path):
    for i, policy in enumerate([OraclePolicy(), RandomPolicy(3, noise=0.3)]):
        cfg = EpisodeConfig(ParadigmId.SELF_ORGANIZATION, TaskId.SORT, seed=3)
        path = write_trace(run_episode(cfg, load_task("SORT"), policy), tmp_path / f"{i}.jsonl")
        report = replay_verify(path)
        assert report.status is ReplayStatus.VERIFIED and bool(report)


def test_flipped_hash_reports_first_divergent_turn(tmp_path):
    trace = oracle_trace(ParadigmId.DECENTRALIZED, TaskId.PACK)
    lines = dumps_trace(trace).splitlines()
    target = [i for i, line in enumerate(lines) if '"type":"turn"' in line][2]
    record = json.loads(lines[target])
    record["state_hash"] = "0" * 64
    lines[target] = json.dumps(record, sort_keys=True, separators=(",", ":"))
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    report = replay_verify(path)
    assert report.status is ReplayStatus.DIVERGED and not report
    assert report.first_divergent_turn == 2


def test_remote_trace_is_not_replayable(tmp_path):
    trace = oracle_trace()
    trace.header["policy"] = {"kind": "remote", "model": "m", "api_base": "http://x"}
    report = replay_verify(write_trace(trace, tmp_path / "r.jsonl"))
    assert report.status is ReplayStatus.NOT_REPLAYABLE
    assert report.status is not ReplayStatus.DIVERGED


def test_budget_invariants_hold():
    for seed in range(20):
        cfg = EpisodeConfig(ParadigmId.DECENTRALIZED, TaskId.CABINET, seed=seed, replan_budget=3)
        trace = run_episode(cfg, load_task("CABINET"), RandomPolicy(seed))
        assert trace.result.turns_used <= cfg.max_turns
        assert trace.result.replans_used <= cfg.replan_budget
