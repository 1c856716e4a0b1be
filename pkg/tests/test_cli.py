import json

import pytest

from newsrl import cli
from newsrl.pipeline import fixture_path


@pytest.fixture(autouse=True)
def _isolated_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)  # default output paths (runs/, selftest-out/) stay out of the repo


def run(*argv):
    return cli.dispatch([str(a) for a in argv])


def test_no_subcommand_is_usage_error(capsys):
    assert run() == cli.EXIT_USAGE
    assert "subcommand is required" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert run("frobnicate") == cli.EXIT_USAGE
    assert run("tune", "--algo", "ddqn") == cli.EXIT_USAGE  # --net missing
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", sorted(cli.COMMANDS))
def test_every_subcommand_has_help(cmd, capsys):
    assert run(cmd, "--help") == 0
    assert cmd in capsys.readouterr().out


def test_missing_config_is_data_error(tmp_path, capsys):
    missing = tmp_path / "absent.toml"
    assert run("tune", "--algo", "ddqn", "--net", "mlp", "--config", missing) == cli.EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_is_data_error(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text("[env]\nwhatever = 1\n")
    assert run("report", "--config", p) == cli.EXIT_DATA
    assert "env.whatever" in capsys.readouterr().err


def test_bad_bars_is_data_error(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("ts,open,high,low,close,volume\n0,1,0.5,2,1,1\n")
    assert run("ingest-bars", "--input", p, "--output", tmp_path / "o.csv") == cli.EXIT_DATA


def test_live_scoring_without_key_is_runtime_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("NEWSRL_LLM_API_KEY", raising=False)
    news = tmp_path / "n.jsonl"
    news.write_text('{"ts": 1, "title": "hello"}\n')
    assert run("score-news", "--news", news, "--cache", tmp_path / "s.jsonl") == cli.EXIT_RUNTIME
    assert "NEWSRL_LLM_API_KEY" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path, capsys):
    d = tmp_path
    runs = d / "runs"
    assert run("ingest-bars", "--input", fixture_path("bars.csv"), "--output", d / "bars.csv") == 0
    assert run("ingest-news", "--input", fixture_path("news.jsonl"), "--output", d / "news.jsonl") == 0
    score = ["score-news", "--news", d / "news.jsonl", "--cache", d / "scores.jsonl", "--offline"]
    assert run(*score) == 0
    capsys.readouterr()
    assert run(*score) == 0
    assert json.loads(capsys.readouterr().out)["newly_scored"] == 0
    assert run("align", "--bars", d / "bars.csv", "--news", d / "news.jsonl", "--cache", d / "scores.jsonl",
               "--output", d / "frames.csv") == 0
    common = ["--frames", d / "frames.csv", "--runs-dir", runs, "--desk-scale"]
    assert run("tune", "--algo", "ddqn", "--net", "mlp", "--trials", 2, *common) == 0
    assert len((runs / "trials_ddqn_mlp.jsonl").read_text().splitlines()) == 2
    capsys.readouterr()
    assert run("evaluate", "--algo", "ddqn", "--net", "mlp", *common) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["top_k"] == 1 and (runs / "eval_ddqn_mlp_top1_test.json").exists()
    assert run("backtest", "--algo", "ddqn", "--net", "mlp", "--output", d / "bt" / "curve.csv",
               "--trace", d / "bt" / "trace.csv", *common) == 0
    assert (d / "bt" / "trace.csv").exists()
    assert run("train", "--algo", "grpo", "--net", "mlp", "--params", '{"mlp_h1": 32}', "--output",
               d / "agent.json", *common) == 0
    assert run("evaluate", "--checkpoint", d / "agent.json", "--count", 32, *common) == 0
    assert run("report", "--runs", "ddqn:mlp", *common) == 0
    report = runs / "report"
    assert (report / "table1.csv").read_text().startswith("networks,ddqn_top1,ddqn_top10,grpo_top1,grpo_top10\n")
    assert (report / "backtest.svg").exists() and (runs / "events.jsonl").exists()
    assert run("evaluate", "--algo", "ddqn", "--net", "mlp", "--top-k", 10, *common) == cli.EXIT_RUNTIME


def test_selftest_refuses_foreign_directory(tmp_path):
    (tmp_path / "precious.txt").write_text("keep me")
    assert run("selftest", "--out", tmp_path) == cli.EXIT_RUNTIME
    assert (tmp_path / "precious.txt").read_text() == "keep me"
