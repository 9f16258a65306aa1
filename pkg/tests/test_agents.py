import numpy as np
import pytest

from conftest import gradient_error, tiny_config
from emorag.config import AgentConfig, SFTConfig, SynthSpec
from emorag.envsynth import generate_dataset
from emorag.errors import DimensionError
from emorag.pipeline import numerics as nx
from emorag.pipeline.agents import (
    Observation,
    Role,
    act,
    build_observation,
    filter_observation,
    generator_observation,
    head_output,
    init_bundle,
    input_dim_for,
    logprob_of,
    planner_observation,
    policy_logprob,
)
from emorag.pipeline.fusion import FusedState
from emorag.pipeline.numerics import GradTape
from emorag.pipeline.retrieval import build_index
from emorag.pipeline.unified_pipeline import EmotionPipeline, PipelineOptions
from emorag.training.sft import generator_accuracy, sft_warm_start


def fused_state(rng, dim):
    return FusedState(rng.standard_normal(dim), rng.standard_normal(dim), np.array([1.0]), [0], 1, 0.0)


def random_observations(rng, bundle, candidates=5):
    d, C = bundle.dim, bundle.num_labels
    return {
        Role.PLANNER: Observation(Role.PLANNER, rng.standard_normal(3 * d + C)),
        Role.FILTER: Observation(
            Role.FILTER, rng.standard_normal(2 * d), items=rng.standard_normal((candidates, 2 * d + 1 + C)),
            candidate_ids=tuple(range(candidates)),
        ),
        Role.GENERATOR: Observation(Role.GENERATOR, rng.standard_normal(2 * d + C), fused=fused_state(rng, d)),
    }


def test_observations_are_deterministic_and_sized(dataset, config):
    train, _, corpus = dataset
    d, C = config.synth.dim, config.synth.num_labels
    sample = train[0]
    assert planner_observation(sample, C).features.size == 3 * d + C
    assert np.array_equal(planner_observation(sample, C).features, planner_observation(sample, C).features)

    obs = filter_observation(sample, corpus[:4], C)
    assert obs.items.shape == (4, 2 * d + 1 + C)
    assert obs.candidate_ids == (0, 1, 2, 3)
    assert obs.same_as(filter_observation(sample, corpus[:4], C))

    fused = fused_state(np.random.default_rng(0), d)
    generator = generator_observation(sample, corpus[:3], fused, C)
    assert generator.features.size + 2 * d == 4 * d + C


def test_empty_evidence_gives_zero_summaries(dataset, config):
    sample = dataset[0][0]
    C = config.synth.num_labels
    obs = build_observation(Role.GENERATOR, sample, C, evidence=[], fused=fused_state(np.random.default_rng(1), config.synth.dim))
    assert not np.any(obs.features[config.synth.dim:])
    assert filter_observation(sample, [], C).items.shape[0] == 0


def test_input_dim_fits_every_role(bundle, config):
    assert bundle.input_dim == input_dim_for(config.synth.dim, config.synth.num_labels)


def test_confident_generator_picks_its_label(bundle):
    rng = np.random.default_rng(2)
    head = bundle.actor.generator
    head.weights[0][...] = 0.0
    head.biases[0][...] = [10.0] + [-10.0] * (bundle.num_labels - 1)
    obs = random_observations(rng, bundle)[Role.GENERATOR]

    label, logprob = act(bundle, obs, "greedy")
    assert label == 0
    assert logprob == pytest.approx(0.0, abs=1e-7)

    draws = [act(bundle, obs, "sample", rng)[0] for _ in range(200)]
    assert draws.count(0) >= 199


def test_indifferent_filter_and_uniform_generator(bundle):
    rng = np.random.default_rng(3)
    bundle.actor.filter.weights[0][...] = 0.0
    bundle.actor.filter.biases[0][...] = 0.0
    bundle.actor.generator.weights[0][...] = 0.0
    bundle.actor.generator.biases[0][...] = 0.0
    obs = random_observations(rng, bundle, candidates=8)

    keep, logprob = act(bundle, obs[Role.FILTER], "sample", rng)
    assert keep.shape == (8,)
    assert logprob == pytest.approx(8 * np.log(0.5), abs=1e-12)

    label, logprob = act(bundle, obs[Role.GENERATOR], "sample", rng)
    assert logprob == pytest.approx(np.log(1.0 / bundle.num_labels), abs=1e-12)


def test_planner_at_its_mean(bundle):
    obs = random_observations(np.random.default_rng(4), bundle)[Role.PLANNER]
    mean, logprob = act(bundle, obs, "greedy")
    sigma = bundle.planner_sigma
    assert mean.shape == (3 * bundle.dim,)
    assert logprob == pytest.approx(mean.size * np.log(1.0 / (sigma * np.sqrt(2 * np.pi))), abs=1e-9)


def test_sampled_labels_follow_the_softmax(bundle):
    rng = np.random.default_rng(5)
    head = bundle.actor.generator
    head.weights[0][...] = 0.0
    head.biases[0][...] = np.linspace(-1.0, 1.0, bundle.num_labels)
    obs = random_observations(rng, bundle)[Role.GENERATOR]
    p = nx.softmax(head.biases[0])

    n = 20000
    counts = np.bincount([act(bundle, obs, "sample", rng)[0] for _ in range(n)], minlength=bundle.num_labels)
    sd = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 4 * sd)


def test_logprob_of_reproduces_act_exactly(bundle):
    rng = np.random.default_rng(6)
    for _ in range(20):
        for role, obs in random_observations(rng, bundle).items():
            action, logprob = act(bundle, obs, "sample", rng)
            assert logprob_of(bundle, obs, action) == logprob


def test_malformed_actions_are_rejected(bundle):
    obs = random_observations(np.random.default_rng(7), bundle, candidates=3)
    with pytest.raises(DimensionError):
        logprob_of(bundle, obs[Role.PLANNER], np.zeros(2))
    with pytest.raises(DimensionError):
        logprob_of(bundle, obs[Role.FILTER], np.ones(4, dtype=bool))
    with pytest.raises(DimensionError):
        logprob_of(bundle, obs[Role.GENERATOR], bundle.num_labels)


def test_trunk_is_shared_by_every_head(bundle):
    obs = random_observations(np.random.default_rng(8), bundle)
    before = {role: head_output(bundle, o, GradTape(enabled=False)).value.copy() for role, o in obs.items()}
    bundle.actor.trunk.weights[0] += 0.5
    for role, o in obs.items():
        assert not np.allclose(head_output(bundle, o, GradTape(enabled=False)).value, before[role])


def test_sft_copy_is_independent_of_the_actor(bundle):
    obs = random_observations(np.random.default_rng(9), bundle)[Role.GENERATOR]
    assert logprob_of(bundle, obs, 1) == logprob_of(bundle, obs, 1, actor=bundle.sft)
    bundle.actor.generator.biases[0] += 1.0 + np.arange(bundle.num_labels)
    assert logprob_of(bundle, obs, 1) != logprob_of(bundle, obs, 1, actor=bundle.sft)


def test_policy_logprob_gradients():
    config = tiny_config()
    config.synth = SynthSpec(num_labels=2, dim=2, train_per_label=2, test_per_label=2, corpus_size=4, confusion_pairs=[])
    config.agents = AgentConfig(hidden=4, trunk_layers=1, critic_hidden=4)
    config.fusion.expert_hidden = 0
    config.validate()
    rng = np.random.default_rng(10)

    for _ in range(100):
        bundle = init_bundle(config, seed=int(rng.integers(1 << 30)))
        named = dict(bundle.actor.named_parameters())
        observations = random_observations(rng, bundle, candidates=3)
        actions = {role: act(bundle, obs, "sample", rng)[0] for role, obs in observations.items()}

        def loss(tape):
            return nx.add_n(tape, [policy_logprob(bundle, obs, actions[role], tape) for role, obs in observations.items()])

        assert gradient_error(loss, named) <= 1e-5


def test_sft_with_no_epochs_only_freezes_the_reference(pipeline, dataset):
    before = {k: v.copy() for k, v in pipeline.bundle.actor.named_parameters()}
    sft_warm_start(pipeline, dataset[0], SFTConfig(epochs=0), np.random.default_rng(0))
    for name, value in pipeline.bundle.actor.named_parameters():
        assert np.array_equal(value, before[name])
    for (_, actor), (_, ref) in zip(pipeline.bundle.actor.named_parameters(), pipeline.bundle.sft.named_parameters()):
        assert np.array_equal(actor, ref)


def test_sft_moves_only_the_actor(pipeline, dataset):
    bundle = pipeline.bundle
    critic = [w.copy() for _, w in bundle.critic.named_parameters()]
    moe = [w.copy() for _, w in bundle.moe.named_parameters()]
    trunk = bundle.actor.trunk.weights[0].copy()
    sft_warm_start(pipeline, dataset[0][:8], SFTConfig(epochs=1, batch_size=4), np.random.default_rng(1))
    assert all(np.array_equal(a, b) for a, (_, b) in zip(critic, bundle.critic.named_parameters()))
    assert all(np.array_equal(a, b) for a, (_, b) in zip(moe, bundle.moe.named_parameters()))
    assert not np.array_equal(trunk, bundle.actor.trunk.weights[0])
    assert np.array_equal(bundle.sft.trunk.weights[0], bundle.actor.trunk.weights[0])


def test_sft_fits_an_oracle_generator_on_noise_free_data():
    config = tiny_config()
    config.synth.noise_t = config.synth.noise_v = config.synth.noise_a = 0.0
    config.sft = SFTConfig(epochs=100, lr=0.05, batch_size=8, generator_teacher="oracle")
    train, _, corpus = generate_dataset(config.synth, seed=config.seed)
    pipeline = EmotionPipeline(init_bundle(config), build_index(corpus, config.synth.num_labels), PipelineOptions.from_config(config))

    sft_warm_start(pipeline, train, config.sft, np.random.default_rng(2))
    assert generator_accuracy(pipeline, train, np.random.default_rng(3)) >= 0.99
