from __future__ import annotations

import json

import httpx
import pytest

from toolteam import cli
from toolteam.cli import EXIT_CONFIG, EXIT_OK, EXIT_TRACE, EXIT_TRANSPORT, main
from toolteam.policy import RemotePolicy


def test_run_writes_named_traces(tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["run", "--task", "pack", "--paradigm", "self-org", "--episodes", "2", "--out", str(out)])
    assert code == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == [
        "pack_self-org_oracle_ep0.jsonl",
        "pack_self-org_oracle_ep1.jsonl",
    ]
    assert "SELF_ORGANIZATION" in capsys.readouterr().out


def test_config_file_and_flag_override(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"task": "sort", "paradigm": "centralized", "episodes": 3, "max_turns": 2,
                                  "replan_budget": 0, "policy": "random", "seed": 9, "out": str(tmp_path / "a")}))
    assert main(["run", "--config", str(config), "--episodes", "1"]) == EXIT_OK
    files = list((tmp_path / "a").iterdir())
    assert [p.name for p in files] == ["sort_centralized_random_ep0.jsonl"]
    header = json.loads(files[0].read_text().splitlines()[0])
    assert (header["max_turns"], header["replan_budget"], header["seed"]) == (2, 0, 9)


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--task", "pack"],
        ["run", "--task", "kitchen", "--paradigm", "self-org"],
        ["run", "--task", "pack", "--paradigm", "self-org", "--episodes", "0"],
        ["matrix", "--jobs", "0"],
        ["report", "/nonexistent/trace.jsonl"],
        ["bogus"],
    ],
)
def test_config_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as err:
        raise SystemExit(main(argv))
    assert err.value.code == EXIT_CONFIG


def test_bad_config_file(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text('{"task": "pack", "colour": "blue"}')
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text("not json")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG


def test_report_writes_json_and_csv(tmp_path, capsys):
    traces = tmp_path / "t"
    main(["run", "--task", "cabinet", "--paradigm", "decentralized", "--out", str(traces)])
    main(["run", "--task", "sort", "--paradigm", "decentralized", "--out", str(traces)])
    capsys.readouterr()
    out = tmp_path / "r"
    assert main(["report", str(traces), "--out", str(out)]) == EXIT_OK
    assert "Tool calling/%" in capsys.readouterr().out
    names = sorted(p.name for p in out.iterdir())
    assert names == ["report_oracle_cabinet_decentralized.json", "report_oracle_sort_decentralized.json", "reports.csv"]
    assert json.loads((out / names[0]).read_text())[0]["win"] == 1.0
    assert main(["report", "--wide", str(traces)]) == EXIT_OK
    assert "CABINET:Win(0/1)" in capsys.readouterr().out


def test_trace_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"type": "header", "schema_version": 7}\n')
    assert main(["report", str(bad)]) == EXIT_TRACE
    assert main(["replay", str(bad)]) == EXIT_TRACE


def test_replay_divergence_exit_2(tmp_path, capsys):
    main(["run", "--task", "pack", "--paradigm", "centralized", "--episodes", "1", "--out", str(tmp_path)])
    path = tmp_path / "pack_centralized_oracle_ep0.jsonl"
    assert main(["replay", str(path)]) == EXIT_OK
    text = path.read_text()
    digest = json.loads([line for line in text.splitlines() if '"type":"turn"' in line][0])["state_hash"]
    path.write_text(text.replace(digest, "f" * 64))
    capsys.readouterr()
    assert main(["replay", str(path)]) == EXIT_TRACE
    assert "DIVERGED" in capsys.readouterr().out


def test_remote_transport_exhaustion_exit_3(tmp_path, monkeypatch):
    def unreachable(*args, **kwargs):
        return RemotePolicy("http://llm.test", "m", transport=httpx.MockTransport(lambda r: httpx.Response(502)))

    monkeypatch.setattr(cli, "make_policy", lambda kind, seed=0, **kw: unreachable())
    argv = ["run", "--task", "pack", "--paradigm", "decentralized", "--policy", "remote", "--episodes", "1",
            "--max-turns", "1", "--replans", "0", "--out", str(tmp_path)]
    assert main(argv) == EXIT_TRANSPORT
    assert main(["replay", str(tmp_path)]) == EXIT_OK


def test_remote_without_environment_is_config_error(tmp_path, monkeypatch):
    for var in ("TOOLTEAM_API_BASE", "TOOLTEAM_MODEL"):
        monkeypatch.delenv(var, raising=False)
    argv = ["run", "--task", "pack", "--paradigm", "decentralized", "--policy", "remote", "--out", str(tmp_path)]
    assert main(argv) == EXIT_CONFIG


def test_matrix_writes_grid_and_reports(tmp_path):
    out = tmp_path / "m"
    assert main(["matrix", "--episodes", "1", "--jobs", "3", "--out", str(out)]) == EXIT_OK
    traces = sorted(out.glob("*.jsonl"))
    assert len(traces) == 12
    assert len(list(out.glob("report_*.json"))) == 12
    assert (out / "reports.csv").read_text().count("\n") == 13
