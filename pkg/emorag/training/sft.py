import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from emorag.config import SFTConfig
from emorag.pipeline import numerics as nx
from emorag.pipeline.agents import (
    Observation,
    PolicyBundle,
    Role,
    act,
    filter_observation,
    generator_observation,
    planner_observation,
    policy_logprob,
)
from emorag.pipeline.numerics import GradTape
from emorag.pipeline.retrieval import QuerySet, merge_candidates, retrieve_cognitive
from emorag.pipeline.teachers import filter_teacher, generator_teacher, planner_teacher
from emorag.training.optim import MomentumSGD

logger = logging.getLogger(__name__)


@dataclass
class Demonstration:
    obs: Observation
    action: object
    # Per-entry normalisation of the log-likelihood (action size for the planner, candidate count for the filter)
    weight: float


def demonstrations(pipeline, sample, rng, generator_mode="vote") -> List[Demonstration]:
    """Teacher actions for all three roles on one sample, fusion held fixed."""
    bundle, C = pipeline.bundle, pipeline.num_labels
    perceptual = pipeline.perceive(sample)

    planner_obs = planner_observation(sample, C)
    query_action = planner_teacher(sample, pipeline.index, perceptual, rng)
    cognitive = retrieve_cognitive(
        pipeline.index, QuerySet.from_flat(query_action, bundle.dim), pipeline.options.k_cog, pipeline.options.cognitive_space
    )
    candidates = merge_candidates(cognitive, pipeline.options.kinds)

    filter_obs = filter_observation(sample, candidates, C)
    keep = filter_teacher(candidates, perceptual, C)
    kept = [item for item, k in zip(candidates, keep) if k]

    fused = pipeline.fuse(sample, perceptual, GradTape(enabled=False))
    generator_obs = generator_observation(sample, kept, fused, C)
    label = generator_teacher(kept, perceptual, C, gold=sample.label, mode=generator_mode)

    return [
        Demonstration(planner_obs, query_action, 1.0 / query_action.size),
        Demonstration(filter_obs, keep, 1.0 / max(len(candidates), 1)),
        Demonstration(generator_obs, label, 1.0),
    ]


def imitation_loss(bundle, demos: List[Demonstration], tape: GradTape):
    terms = [nx.scale(tape, policy_logprob(bundle, d.obs, d.action, tape), -d.weight) for d in demos]
    return nx.add_n(tape, terms)


def sft_warm_start(pipeline, samples, cfg: SFTConfig, rng, progress=None) -> PolicyBundle:
    """Maximum-likelihood fit of the actor heads to the teacher actions.

    Only actor parameters move; the critic and the fusion weights stay as they
    are. The trained actor is then frozen as the reference copy.
    """
    bundle = pipeline.bundle
    if cfg.epochs > 0 and samples:
        per_sample = [demonstrations(pipeline, s, rng, cfg.generator_teacher) for s in samples]
        params = dict(bundle.actor.named_parameters())
        optimizer = MomentumSGD(params, cfg.lr, cfg.momentum, cfg.max_grad_norm)

        epochs = range(cfg.epochs)
        for epoch in progress(epochs) if progress else epochs:
            order = rng.permutation(len(per_sample))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start:start + cfg.batch_size]
                tape = GradTape()
                loss = nx.scale(tape, nx.add_n(tape, [imitation_loss(bundle, per_sample[i], tape) for i in chunk]), 1.0 / len(chunk))
                nx.check_finite("imitation loss", loss.value)
                optimizer.step(tape.backward(loss))
                total += float(loss.value[0]) * len(chunk)
            logger.info(f"SFT epoch {epoch + 1}/{cfg.epochs}: imitation loss {total / len(order):.4f}")

    bundle.freeze_reference()
    return bundle


def generator_accuracy(pipeline, samples, rng, generator_mode="oracle"):
    """Greedy generator accuracy against the gold label on teacher-built observations."""
    correct = 0
    for sample in samples:
        demo = demonstrations(pipeline, sample, rng, generator_mode)[Role.GENERATOR]
        label, _ = act(pipeline.bundle, demo.obs, "greedy")
        correct += int(label == sample.label)
    return correct / max(len(samples), 1)
