import pathlib

import pytest

from emorag.config import AblationFlags, RunConfig, dump_config, load_config
from emorag.errors import ConfigError


def test_defaults_validate():
    config = load_config()
    assert config.synth.num_labels == 6
    assert config.retrieval.k_cog == 8
    assert config.train.value_eps == config.train.clip_eps


def test_yaml_round_trip(tmp_path):
    config = RunConfig.from_dict({"seed": 4, "synth": {"dim": 8}, "fusion": {"top_k": 1}})
    path = tmp_path / "run.yaml"
    dump_config(config, path)
    loaded = load_config(path)
    assert loaded.to_dict() == config.to_dict()


def test_bundled_default_config_loads():
    path = pathlib.Path(__file__).resolve().parent.parent / "emorag.yaml"
    assert load_config(path).config_hash() == RunConfig().config_hash()


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"train": {"learning_rate": 0.1}})
    assert info.value.details["keys"] == ["learning_rate"]
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"synth": 3})


@pytest.mark.parametrize("data", [
    {"seed": -1},
    {"fusion": {"top_k": 5, "num_experts": 4}},
    {"synth": {"dim": 6}, "fusion": {"pool_size": 4}},
    {"retrieval": {"k_cog": 0}},
    {"agents": {"planner_sigma": 0.0}},
    {"sft": {"generator_teacher": "crowd"}},
    {"ablation": {"drop_modality": "x"}},
])
def test_invalid_values_are_rejected(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_missing_or_broken_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    (tmp_path / "broken.yaml").write_text("synth: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.yaml")


def test_hash_ignores_the_output_directory():
    a = RunConfig(output_dir="/tmp/a")
    b = RunConfig(output_dir="/tmp/b")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != RunConfig(seed=1).config_hash()


def test_ablation_helpers():
    config = RunConfig().with_ablation(no_planner=True, drop_modality="a")
    assert config.ablation.active() == {"no_planner": True, "drop_modality": "a"}
    assert AblationFlags().active() == {}
