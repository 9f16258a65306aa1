# Planner, filter and generator policies as heads over one shared trunk,
# plus the critic that scores each role's observation.

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from emorag.config import AgentConfig, RunConfig
from emorag.errors import DimensionError
from emorag.pipeline import numerics as nx
from emorag.pipeline.fusion import FusedState, MoEParams, RAAFParams
from emorag.pipeline.numerics import GradTape, MLPParams, Node

logger = logging.getLogger(__name__)


class Role(IntEnum):
    PLANNER = 0
    FILTER = 1
    GENERATOR = 2


ROLES = (Role.PLANNER, Role.FILTER, Role.GENERATOR)


@dataclass
class Observation:
    role: Role
    features: np.ndarray
    # Filter only: one row per candidate evidence item
    items: Optional[np.ndarray] = None
    candidate_ids: Tuple[int, ...] = ()
    # Generator only: the fused video/audio representation
    fused: Optional[FusedState] = None

    def same_as(self, other):
        if other is None or self.role != other.role or not np.array_equal(self.features, other.features):
            return False
        if self.items is not None or other.items is not None:
            if self.items is None or other.items is None or not np.array_equal(self.items, other.items):
                return False
        if self.fused is not None:
            return (
                other.fused is not None
                and np.array_equal(self.fused.x_v, other.fused.x_v)
                and np.array_equal(self.fused.x_a, other.fused.x_a)
            )
        return True


def _onehot(index, size):
    v = np.zeros(size)
    v[index] = 1.0
    return v


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0


def planner_observation(sample, num_labels) -> Observation:
    features = np.concatenate([sample.x_t, sample.x_v, sample.x_a, np.ones(num_labels)])
    return Observation(Role.PLANNER, features)


def filter_observation(sample, candidates: Sequence, num_labels) -> Observation:
    features = np.concatenate([sample.x_v, sample.x_a])
    rows = [
        np.concatenate([sample.x_t, item.e_t, [_cosine(sample.x_t, item.e_t)], _onehot(item.label, num_labels)])
        for item in candidates
    ]
    dim = 2 * len(sample.x_t) + 1 + num_labels
    items = np.stack(rows) if rows else np.zeros((0, dim))
    return Observation(Role.FILTER, features, items=items, candidate_ids=tuple(item.id for item in candidates))


def generator_observation(sample, selected: Sequence, fused: FusedState, num_labels) -> Observation:
    if fused is None:
        raise ValueError("generator observation needs a fused representation")
    if selected:
        evidence_mean = np.mean([item.e_t for item in selected], axis=0)
        histogram = np.bincount([item.label for item in selected], minlength=num_labels) / len(selected)
    else:
        evidence_mean = np.zeros_like(sample.x_t)
        histogram = np.zeros(num_labels)
    features = np.concatenate([sample.x_t, evidence_mean, histogram])
    return Observation(Role.GENERATOR, features, fused=fused)


def build_observation(role, sample, num_labels, evidence=None, fused=None) -> Observation:
    role = Role(role)
    if role == Role.PLANNER:
        return planner_observation(sample, num_labels)
    if evidence is None:
        raise ValueError(f"{role.name.lower()} observation needs an evidence list")
    if role == Role.FILTER:
        return filter_observation(sample, evidence, num_labels)
    return generator_observation(sample, evidence, fused, num_labels)


@dataclass
class ActorParams:
    trunk: MLPParams
    planner: MLPParams
    filter: MLPParams
    generator: MLPParams

    @classmethod
    def init(cls, input_dim, dim, num_labels, cfg: AgentConfig, rng, prefix="actor"):
        trunk = MLPParams.init(f"{prefix}.trunk", [input_dim] + [cfg.hidden] * cfg.trunk_layers, rng, cfg.init_gain, activate_output=True)
        return cls(
            trunk,
            MLPParams.init(f"{prefix}.planner", [cfg.hidden, 3 * dim], rng, cfg.init_gain),
            MLPParams.init(f"{prefix}.filter", [cfg.hidden, 1], rng, cfg.init_gain),
            MLPParams.init(f"{prefix}.generator", [cfg.hidden, num_labels], rng, cfg.init_gain),
        )

    def head(self, role):
        return (self.planner, self.filter, self.generator)[Role(role)]

    @property
    def heads(self):
        return (self.planner, self.filter, self.generator)

    def named_parameters(self):
        yield from self.trunk.named_parameters()
        for head in self.heads:
            yield from head.named_parameters()

    def copy(self, prefix):
        def renamed(p):
            return p.copy(name=prefix + p.name[p.name.index("."):])

        return ActorParams(renamed(self.trunk), renamed(self.planner), renamed(self.filter), renamed(self.generator))


@dataclass
class PolicyBundle:
    actor: ActorParams
    critic: MLPParams
    raaf: RAAFParams
    moe: MoEParams
    sft: Optional[ActorParams]
    dim: int
    num_labels: int
    planner_sigma: float = 0.3

    @property
    def input_dim(self):
        return self.actor.trunk.in_dim

    def trainable(self):
        """Named arrays updated by MAPPO, in a fixed order."""
        named = {}
        for source in (self.actor, self.raaf, self.moe):
            named.update(source.named_parameters())
        named.update(self.critic.named_parameters())
        return named

    def freeze_reference(self):
        self.sft = self.actor.copy("sft")


def input_dim_for(dim, num_labels):
    # role one-hot + the widest role encoding (the filter's per-item input)
    return len(ROLES) + 4 * dim + 1 + num_labels


def init_bundle(config: RunConfig, seed=None) -> PolicyBundle:
    seed = config.seed if seed is None else seed
    d, C = config.synth.dim, config.synth.num_labels
    actor_rng, critic_rng, raaf_rng, moe_rng = [np.random.default_rng(s) for s in np.random.SeedSequence([seed, 1]).spawn(4)]

    in_dim = input_dim_for(d, C)
    gain = config.agents.init_gain
    bundle = PolicyBundle(
        actor=ActorParams.init(in_dim, d, C, config.agents, actor_rng),
        critic=MLPParams.init("critic", [in_dim, config.agents.critic_hidden, 1], critic_rng, gain),
        raaf=RAAFParams.init(d, raaf_rng, config.fusion.learned_projections, gain),
        moe=MoEParams.init(config.fusion, d, moe_rng, gain),
        sft=None,
        dim=d,
        num_labels=C,
        planner_sigma=config.agents.planner_sigma,
    )
    bundle.freeze_reference()
    return bundle


# Network inputs


def _pad(tape, parts, role, width):
    used = len(ROLES) + sum(p.value.shape[-1] for p in parts)
    if used > width:
        raise DimensionError(f"{role.name.lower()} input needs {used} entries but the trunk takes {width}")
    return nx.concat(tape, [tape.constant(_onehot(role, len(ROLES)))] + parts + [tape.constant(np.zeros(width - used))])


def actor_input(bundle, obs: Observation, tape: GradTape) -> Node:
    width = bundle.input_dim
    if obs.role == Role.FILTER:
        n = obs.items.shape[0]
        rows = np.concatenate([np.tile(obs.features, (n, 1)), obs.items], axis=1)
        prefix = np.tile(_onehot(Role.FILTER, len(ROLES)), (n, 1))
        pad = np.zeros((n, width - len(ROLES) - rows.shape[1]))
        return tape.constant(np.concatenate([prefix, rows, pad], axis=1))

    parts = [tape.constant(obs.features)]
    if obs.role == Role.GENERATOR:
        fused = obs.fused
        nodes = fused.nodes if fused.nodes else {}
        parts.append(nodes.get("v") or tape.constant(fused.x_v))
        parts.append(nodes.get("a") or tape.constant(fused.x_a))
    return _pad(tape, parts, obs.role, width)


def critic_input(bundle, obs: Observation) -> np.ndarray:
    parts = [obs.features]
    if obs.role == Role.FILTER:
        n = obs.items.shape[0]
        parts.append(obs.items.mean(axis=0) if n else np.zeros(obs.items.shape[1]))
    elif obs.role == Role.GENERATOR:
        parts += [obs.fused.x_v, obs.fused.x_a]
    flat = np.concatenate(parts)
    out = np.zeros(bundle.input_dim)
    out[Role(obs.role)] = 1.0
    out[len(ROLES):len(ROLES) + flat.size] = flat
    return out


def head_output(bundle, obs: Observation, tape: GradTape, actor: Optional[ActorParams] = None) -> Node:
    """Distribution parameters of a role: planner mean, filter logits or generator logits."""
    actor = actor or bundle.actor
    if obs.role == Role.FILTER and obs.items.shape[0] == 0:
        return tape.constant(np.zeros(0))
    hidden = nx.mlp_forward(actor.trunk, actor_input(bundle, obs, tape), tape)
    out = nx.mlp_forward(actor.head(obs.role), hidden, tape)
    if obs.role == Role.FILTER:
        out = nx.reshape(tape, out, (-1,))
    return out


def value_of(bundle, obs: Observation, tape: GradTape) -> Node:
    return nx.mlp_forward(bundle.critic, critic_input(bundle, obs), tape)


# Actions and their log-likelihoods


def _check_action(bundle, obs, action):
    if obs.role == Role.PLANNER:
        if np.shape(action) != (3 * bundle.dim,):
            raise DimensionError(f"planner action has shape {np.shape(action)}, expected ({3 * bundle.dim},)")
    elif obs.role == Role.FILTER:
        if np.shape(action) != (obs.items.shape[0],):
            raise DimensionError(f"{np.size(action)} filter decisions for {obs.items.shape[0]} candidates")
    elif not 0 <= int(action) < bundle.num_labels:
        raise DimensionError(f"generator label {action} outside [0, {bundle.num_labels})")


def logprob_from_output(bundle, obs, out: Node, action, tape: GradTape) -> Node:
    if obs.role == Role.PLANNER:
        return nx.gaussian_logprob(tape, out, action, bundle.planner_sigma)
    if obs.role == Role.FILTER:
        if out.value.size == 0:
            return tape.constant(np.zeros(1))
        return nx.bernoulli_logprob(tape, out, action)
    return nx.categorical_logprob(tape, out, int(action))


def policy_logprob(bundle, obs, action, tape: GradTape, actor: Optional[ActorParams] = None) -> Node:
    _check_action(bundle, obs, action)
    return logprob_from_output(bundle, obs, head_output(bundle, obs, tape, actor), action, tape)


def logprob_of(bundle, obs, action, actor: Optional[ActorParams] = None) -> float:
    return float(policy_logprob(bundle, obs, action, GradTape(enabled=False), actor).value[0])


def act(bundle, obs: Observation, mode: str = "sample", rng=None) -> Tuple[object, float]:
    """Draw (or take the mode of) an action and return it with its log-likelihood."""
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown action mode '{mode}'")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")

    tape = GradTape(enabled=False)
    out = head_output(bundle, obs, tape)
    params = out.value

    if obs.role == Role.PLANNER:
        action = params.copy() if mode == "greedy" else params + bundle.planner_sigma * rng.standard_normal(params.shape)
    elif obs.role == Role.FILTER:
        action = params >= 0 if mode == "greedy" else rng.random(params.shape) < special.expit(params)
    else:
        if mode == "greedy":
            action = int(np.argmax(params))
        else:
            cdf = np.cumsum(nx.softmax(params))
            action = int(min(np.searchsorted(cdf, rng.random(), side="right"), len(cdf) - 1))

    return action, float(logprob_from_output(bundle, obs, out, action, tape).value[0])
