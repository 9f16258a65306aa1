import numpy as np
import pytest

from emorag.config import (
    AgentConfig,
    FusionConfig,
    RetrievalConfig,
    RunConfig,
    SFTConfig,
    SynthSpec,
    TrainConfig,
)
from emorag.envsynth import generate_dataset
from emorag.manager import ExperimentManager
from emorag.pipeline import numerics as nx
from emorag.pipeline.agents import init_bundle
from emorag.pipeline.retrieval import build_index
from emorag.pipeline.unified_pipeline import EmotionPipeline, PipelineOptions


def tiny_config(**overrides) -> RunConfig:
    config = RunConfig(
        synth=SynthSpec(
            num_labels=4,
            dim=6,
            train_per_label=10,
            test_per_label=5,
            corpus_size=80,
            confusion_pairs=[[0, 1]],
        ),
        retrieval=RetrievalConfig(k_cog=3, k_perc=3),
        fusion=FusionConfig(num_experts=3, top_k=2, expert_hidden=4),
        agents=AgentConfig(hidden=12, trunk_layers=1, critic_hidden=8),
        sft=SFTConfig(epochs=2, batch_size=16),
        train=TrainConfig(batch_size=6, ppo_epochs=2, iterations=2),
        seed=7,
    )
    for key, value in overrides.items():
        setattr(config, key, value)
    return config.validate()


def gradient_error(loss_fn, named, h=1e-5, atol=1e-4):
    """Max relative error between tape gradients and central differences over the named arrays."""
    theta = nx.flatten(named)
    return nx.finite_diff_check(nx.flat_objective(named, loss_fn), theta, h=h, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def dataset(config):
    return generate_dataset(config.synth, seed=config.seed)


@pytest.fixture
def index(dataset, config):
    return build_index(dataset[2], config.synth.num_labels)


@pytest.fixture
def bundle(config):
    return init_bundle(config)


@pytest.fixture
def pipeline(config, bundle, index):
    return EmotionPipeline(bundle, index, PipelineOptions.from_config(config))


@pytest.fixture
def manager(config, tmp_path):
    config.output_dir = str(tmp_path / "run")
    return ExperimentManager(config, show_progress=False)
