from pathlib import Path

import pytest

from negplan import config
from negplan.config import ConfigError, RunConfig


def test_default_round_trip():
    text = config.dumps(RunConfig())
    assert config.loads(text) == RunConfig()
    assert config.dumps(config.loads(text)) == text


def test_custom_round_trip():
    cfg = config.loads("seed: 7\nscenes: {templates: [crossing], train_count: 3}\ngrpo: {epochs: 2, anchors: false}\n")
    assert cfg.seed == 7 and cfg.sft.seed == 7 and cfg.grpo.seed == 7
    assert cfg.scenes.templates == ("crossing",) and cfg.grpo.anchors is False
    text = config.dumps(cfg)
    assert config.dumps(config.loads(text)) == text
    assert config.loads(text) == cfg


def test_explicit_trainer_seed_kept():
    cfg = config.loads("seed: 3\nsft: {seed: 11}\n")
    assert cfg.sft.seed == 11 and cfg.grpo.seed == 3


def test_empty_document():
    assert config.loads("") == RunConfig()


@pytest.mark.parametrize("text", [
    "colour: red\n",
    "sft: {learning_rate: 0.1}\n",
    "paths: {scratch: /tmp}\n",
    "seed: three\n",
    "seed: true\n",
    "grpo: {anchors: 1}\n",
    "grpo: {delta: 1.5}\n",
    "scenes: {templates: [roundabout]}\n",
    "scenes: {templates: crossing}\n",
    "csp: {workers: 0}\n",
    "sft: [1, 2]\n",
    "seed: [\n",
])
def test_rejected(text):
    with pytest.raises(ConfigError):
        config.loads(text)


def test_int_accepted_for_float():
    assert config.loads("grpo: {sigma: 1}\n").grpo.sigma == 1.0


def test_exponent_floats():
    assert config.loads("sft: {lr_action: 1e-3}\n").sft.lr_action == 1e-3
    assert config.env_overrides({"NEGPLAN_GRPO__SIGMA": "2E-1"}) == {"grpo": {"sigma": 0.2}}


def test_env_overrides():
    env = {"NEGPLAN_SFT__LR_ACTION": "0.05", "NEGPLAN_GRPO__ANCHORS": "false", "NEGPLAN_SEED": "4", "HOME": "/x"}
    assert config.env_overrides(env) == {"sft": {"lr_action": 0.05}, "grpo": {"anchors": False}, "seed": 4}
    cfg = config.resolve(environ=env)
    assert cfg.sft.lr_action == 0.05 and cfg.grpo.anchors is False and cfg.seed == 4


def test_precedence(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 1\nsft: {epochs_stage1: 3, lr_meta: 0.5}\n")
    cfg = config.resolve(path, environ={"NEGPLAN_SFT__EPOCHS_STAGE1": "4", "NEGPLAN_SEED": "2"}, seed=9)
    assert cfg.sft.epochs_stage1 == 4 and cfg.sft.lr_meta == 0.5
    assert cfg.seed == 9 and cfg.sft.seed == 9 and cfg.grpo.seed == 9


def test_bad_env_variable():
    with pytest.raises(ConfigError):
        config.env_overrides({"NEGPLAN_SFT__": "1"})
    with pytest.raises(ConfigError):
        config.resolve(environ={"NEGPLAN_GRPO__N": "many"})


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        config.resolve(tmp_path / "absent.yaml", environ={})


def test_paths_resolve(tmp_path):
    paths = config.loads("paths: {reports: /abs/reports}\n").paths
    assert paths.resolve("reports", tmp_path) == Path("/abs/reports")
    assert paths.resolve("csp_train", tmp_path) == tmp_path / "csp/train.jsonl"
