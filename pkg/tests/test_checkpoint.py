import numpy as np
import pytest

from emorag.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from emorag.errors import CheckpointError
from emorag.pipeline.agents import init_bundle
from emorag.pipeline.unified_pipeline import EmotionPipeline, PipelineOptions
from emorag.training.optim import MomentumSGD


def perturb(bundle, rng):
    for _, array in bundle.trainable().items():
        array += rng.standard_normal(array.shape)


def test_train_checkpoint_round_trip(bundle, config, tmp_path):
    rng = np.random.default_rng(0)
    perturb(bundle, rng)
    optimizer = MomentumSGD(bundle.trainable(), 0.1)
    optimizer.step({k: rng.standard_normal(v.shape) for k, v in bundle.trainable().items()})

    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, bundle, config, optimizer=optimizer, extra={"iteration": 3})
    loaded, loaded_config, header, optim = load_checkpoint(path)

    assert loaded_config.config_hash() == config.config_hash()
    assert header["extra"] == {"iteration": 3}
    assert optim["steps"] == 1
    for name, value in bundle.trainable().items():
        assert np.array_equal(loaded.trainable()[name], value)
    for (_, a), (_, b) in zip(bundle.sft.named_parameters(), loaded.sft.named_parameters()):
        assert np.array_equal(a, b)

    fresh = MomentumSGD(loaded.trainable(), 0.1)
    fresh.load_state_dict(optim)
    for name, v in optimizer.velocity.items():
        assert np.array_equal(fresh.velocity[name], v)


def test_eval_checkpoint_drops_training_sections(bundle, config, tmp_path):
    path = tmp_path / "policy.bin"
    save_checkpoint(path, bundle, config, mode="eval")
    header, sections = read_checkpoint(path)
    assert list(sections) == ["trunk", "heads", "raaf", "moe"]

    loaded, _, _, optim = load_checkpoint(path)
    assert optim is None
    for (_, a), (_, b) in zip(loaded.actor.named_parameters(), loaded.sft.named_parameters()):
        assert np.array_equal(a, b)


def test_same_bundle_writes_identical_bytes(bundle, config, tmp_path):
    save_checkpoint(tmp_path / "a.bin", bundle, config)
    save_checkpoint(tmp_path / "b.bin", bundle, config)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_shape_mismatch_names_the_section(bundle, config, tmp_path):
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, bundle, config)
    wider = config.__class__.from_dict(config.to_dict())
    wider.agents.critic_hidden += 1
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(path, wider)
    assert info.value.details["section"] == "critic"


def test_corrupt_files_are_rejected(bundle, config, tmp_path):
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, bundle, config)
    data = path.read_bytes()

    (tmp_path / "magic.bin").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "magic.bin")

    (tmp_path / "short.bin").write_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.bin")

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")


def test_save_leaves_no_temporary_files(bundle, config, tmp_path):
    save_checkpoint(tmp_path / "checkpoint.bin", bundle, config)
    assert [p.name for p in tmp_path.iterdir()] == ["checkpoint.bin"]


def test_loaded_bundle_acts_like_the_saved_one(bundle, config, dataset, index, tmp_path):
    perturb(bundle, np.random.default_rng(1))
    save_checkpoint(tmp_path / "policy.bin", bundle, config, mode="eval")
    loaded = load_checkpoint(tmp_path / "policy.bin", config)[0]
    options = PipelineOptions.from_config(config)
    for sample in dataset[1][:10]:
        a = EmotionPipeline(bundle, index, options).run(sample, "greedy")
        b = EmotionPipeline(loaded, index, options).run(sample, "greedy")
        assert a.prediction == b.prediction
        assert np.array_equal(a.fused.x_v, b.fused.x_v)


def test_init_bundle_is_seeded(config):
    a, b = init_bundle(config), init_bundle(config)
    for name, value in a.trainable().items():
        assert np.array_equal(value, b.trainable()[name])
    c = init_bundle(config, seed=config.seed + 1)
    assert not np.array_equal(a.actor.trunk.weights[0], c.actor.trunk.weights[0])
