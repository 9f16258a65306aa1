# One pass of the planner -> retriever -> filter -> RAAF/MB-MoE -> generator
# dataflow, plus the two counterfactual variants used for the local rewards and
# for the planner/filter ablations.

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from emorag.config import AblationFlags, RunConfig
from emorag.envsynth import apply_missing
from emorag.errors import DatasetError
from emorag.pipeline.agents import (
    Observation,
    PolicyBundle,
    Role,
    act,
    filter_observation,
    generator_observation,
    planner_observation,
)
from emorag.pipeline.fusion import FUSED_MODALITIES, FusedState, fuse_pipeline
from emorag.pipeline.numerics import GradTape
from emorag.pipeline.retrieval import (
    QUERY_KINDS,
    EvidenceIndex,
    QuerySet,
    merge_candidates,
    retrieve_cognitive,
    retrieve_perceptual,
)

logger = logging.getLogger(__name__)

FULL, LABEL, RANK = "full", "label", "rank"


@dataclass
class AgentStep:
    obs: Observation
    action: object
    logprob: float


@dataclass
class EpisodeRecord:
    sample: object
    variant: str
    prediction: int
    steps: Dict[Role, AgentStep] = field(default_factory=dict)
    perceptual: Dict[str, list] = field(default_factory=dict)
    fused: Optional[FusedState] = None
    candidates: List = field(default_factory=list)
    kept: List = field(default_factory=list)
    queries: Optional[QuerySet] = None
    degenerate_label: Optional[int] = None


@dataclass
class PipelineOptions:
    k_cog: int = 8
    k_perc: int = 4
    cognitive_space: str = "t"
    perceptual_mode: str = "raaf"
    substitution: bool = True
    flags: AblationFlags = field(default_factory=AblationFlags)

    @classmethod
    def from_config(cls, config: RunConfig, flags: Optional[AblationFlags] = None):
        flags = flags or config.ablation
        return cls(
            k_cog=config.retrieval.k_cog,
            k_perc=config.retrieval.k_perc,
            cognitive_space=config.retrieval.cognitive_space,
            perceptual_mode="direct" if flags.direct_perceptual else config.fusion.perceptual_mode,
            substitution=not flags.no_substitution,
            flags=flags,
        )

    @property
    def kinds(self):
        dropped = set()
        if self.flags.no_confuse_evidence:
            dropped.add("conf")
        if self.flags.no_counter_evidence:
            dropped.add("count")
        return tuple(k for k in QUERY_KINDS if k not in dropped)

    @property
    def bypass_top(self):
        return math.ceil(self.k_cog / 3)


class EmotionPipeline(object):
    def __init__(self, bundle: PolicyBundle, index: EvidenceIndex, options: PipelineOptions):
        if index.num_labels != bundle.num_labels:
            raise DatasetError(
                f"evidence index covers {index.num_labels} labels but the policy predicts {bundle.num_labels}; "
                "build the index with the run's num_labels"
            )
        self.bundle = bundle
        self.index = index
        self.options = options

    @property
    def num_labels(self):
        return self.bundle.num_labels

    def perceive(self, sample):
        if self.options.flags.no_retrieval:
            return {}
        return retrieve_perceptual(self.index, sample, self.options.k_perc)

    def fuse(self, sample, perceptual, tape: GradTape) -> FusedState:
        vectors = {m: [item.vector(m) for item, _ in perceptual.get(m, [])] for m in FUSED_MODALITIES}
        return fuse_pipeline(
            self.bundle.raaf,
            self.bundle.moe,
            sample,
            vectors,
            tape,
            mode=self.options.perceptual_mode,
            substitution=self.options.substitution,
        )

    def degenerate_queries(self, label) -> QuerySet:
        return QuerySet.repeat(self.index.label_centroids(self.options.cognitive_space)[label])

    def _decide(self, obs, mode, rng, reference: Optional[EpisodeRecord], role):
        if reference is not None:
            previous = reference.steps.get(role)
            if previous is not None and obs.same_as(previous.obs):
                return AgentStep(obs, previous.action, previous.logprob)
            action, logprob = act(self.bundle, obs, "greedy")
            return AgentStep(obs, action, logprob)
        action, logprob = act(self.bundle, obs, mode, rng)
        return AgentStep(obs, action, logprob)

    def run(self, sample, mode="sample", rng=None, variant=FULL, reference: Optional[EpisodeRecord] = None) -> EpisodeRecord:
        """Execute one episode.

        `variant` selects the full pipeline, the label counterfactual (planner
        replaced by a degenerate query set) or the rank counterfactual (filter
        bypassed with the top entries of every cognitive list). With a
        `reference` episode, roles whose observation is unchanged reuse its
        action and the others act greedily.
        """
        flags = self.options.flags
        if reference is None and flags.drop_modality != "none":
            sample = apply_missing(sample, flags.drop_modality)

        record = EpisodeRecord(sample=sample, variant=variant, prediction=-1)
        if reference is not None:
            record.perceptual = reference.perceptual
            record.fused = reference.fused
        else:
            record.perceptual = self.perceive(sample)
            record.fused = self.fuse(sample, record.perceptual, GradTape(enabled=False))

        if flags.naive_rag or (flags.no_planner and flags.no_filter):
            # without planner and filter the pipeline reduces to naive retrieval
            record.kept = self._perceptual_items(record.perceptual)
        elif not flags.no_retrieval:
            self._plan(record, mode, rng, variant, reference)
            cognitive = retrieve_cognitive(self.index, record.queries, self.options.k_cog, self.options.cognitive_space)
            kinds = self.options.kinds
            record.candidates = merge_candidates(cognitive, kinds)

            if variant == RANK or flags.no_filter:
                record.kept = merge_candidates(cognitive, kinds, top=self.options.bypass_top)
            else:
                obs = filter_observation(sample, record.candidates, self.num_labels)
                step = self._decide(obs, mode, rng, reference, Role.FILTER)
                record.steps[Role.FILTER] = step
                record.kept = [item for item, keep in zip(record.candidates, step.action) if keep]

        obs = generator_observation(sample, record.kept, record.fused, self.num_labels)
        step = self._decide(obs, mode, rng, reference, Role.GENERATOR)
        record.steps[Role.GENERATOR] = step
        record.prediction = int(step.action)
        return record

    def _plan(self, record, mode, rng, variant, reference):
        if variant == LABEL or self.options.flags.no_planner:
            if rng is None:
                raise ValueError("the degenerate planner needs an rng to draw its label")
            record.degenerate_label = int(rng.integers(self.num_labels))
            record.queries = self.degenerate_queries(record.degenerate_label)
            return
        obs = planner_observation(record.sample, self.num_labels)
        step = self._decide(obs, mode, rng, reference, Role.PLANNER)
        record.steps[Role.PLANNER] = step
        record.queries = QuerySet.from_flat(step.action, self.bundle.dim)

    @staticmethod
    def _perceptual_items(perceptual):
        seen, items = set(), []
        for m in ("t", "v", "a"):
            for item, _ in perceptual.get(m, []):
                if item.id not in seen:
                    seen.add(item.id)
                    items.append(item)
        return items

    def counterfactuals(self, main: EpisodeRecord, rng):
        """The label and rank counterfactual episodes of a full episode."""
        label = self.run(main.sample, "greedy", rng, LABEL, reference=main)
        rank = self.run(main.sample, "greedy", rng, RANK, reference=main)
        return label, rank

    def refuse_generator(self, record: EpisodeRecord, tape: GradTape) -> Observation:
        """Generator observation with the fused slot recomputed on `tape` under the current fusion weights."""
        fused = self.fuse(record.sample, record.perceptual, tape)
        stored = record.steps[Role.GENERATOR].obs
        return Observation(Role.GENERATOR, stored.features, fused=fused)
