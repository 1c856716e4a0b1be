import json
import math

import pytest

from newsrl.config import ConfigError, RunConfig, from_dict, load_config
from newsrl.pipeline import RunSpec, budget_from_config, eval_budget, with_overrides


def test_defaults_follow_full_protocol():
    cfg = load_config(None)
    assert cfg.env.sltp == 0.001 and cfg.env.episode_length == 3000
    assert (cfg.eval.count, cfg.eval.length) == (256, 3000)
    assert cfg.tuner.patience == 5 and cfg.llm.api_key_env == "NEWSRL_LLM_API_KEY"


def test_toml_round_trip(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('[env]\nsltp = "inf"\nfee_bps = 2\n[tuner]\nalgo = "grpo"\nnet = "lstm"\ntrials = 7\n')
    cfg = load_config(p)
    assert math.isinf(cfg.env.sltp) and cfg.env.fee_bps == 2.0
    assert (cfg.tuner.algo, cfg.tuner.net, cfg.tuner.trials) == ("grpo", "lstm", 7)
    resolved = json.loads(cfg.write_resolved(tmp_path).read_text())
    assert resolved["tuner"]["trials"] == 7


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.toml"):
        load_config(tmp_path / "nope.toml")


@pytest.mark.parametrize("doc,match", [
    ({"bogus": {}}, "section"),
    ({"env": {"slippage": 1}}, "env.slippage"),
    ({"tuner": {"trials": "five"}}, "tuner.trials"),
    ({"tuner": {"trials": True}}, "tuner.trials"),
    ({"tuner": {"algo": "ppo"}}, "algo"),
    ({"features": {"mode": "log"}}, "mode"),
    ({"env": {"sltp": 0}}, "sltp"),
    ({"eval": {"count": 0}}, "eval.count"),
])
def test_invalid_configs_rejected(doc, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(doc)


def test_bad_toml_is_config_error(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[env\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_desk_scale_budget():
    cfg = with_overrides(RunConfig(), tuner={"desk_scale": True})
    b = budget_from_config(cfg)
    assert (b.episodes, b.episode_length, b.eval_interval, b.n_eval, b.eval_length) == (10, 150, 1500, 16, 150)
    assert eval_budget(cfg) == (16, 150)
    assert eval_budget(RunConfig()) == (256, 3000)


def test_run_spec_parsing():
    assert RunSpec.parse("ddqn:lstm:nollm") == RunSpec("ddqn", "lstm", True)
    assert RunSpec("grpo", "transformer", True).name == "grpo_transformer_nollm"
    assert RunSpec("ddqn", "lstm", True).row == "LSTM (Without LLM signal)"
    for bad in ("ddqn", "ppo:mlp", "ddqn:mlp:extra", "ddqn:cnn"):
        with pytest.raises(ValueError):
            RunSpec.parse(bad)
