# Multi-agent PPO over the planner, filter and generator.
#
# Every agent makes one decision per episode. Rewards are the shared episode
# score plus counterfactual bonuses for the planner and the filter; the only
# non-zero reward arrives at the last step and carries the KL penalty against
# the warm-start reference policy.

import logging, time
from concurrent import futures
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from emorag.config import TrainConfig
from emorag.envsynth import episode_score, score_f1
from emorag.errors import NonFiniteError
from emorag.pipeline import numerics as nx
from emorag.pipeline.agents import ROLES, Role, logprob_of, policy_logprob, value_of
from emorag.pipeline.numerics import GradTape
from emorag.pipeline.unified_pipeline import AgentStep, EmotionPipeline, EpisodeRecord
from emorag.training.optim import MomentumSGD

logger = logging.getLogger(__name__)


def compute_rewards(score_full, score_label, score_rank, lambda_p, lambda_f) -> Tuple[float, float, float]:
    """(R_P, R_F, R_G): the shared score plus each agent's counterfactual improvement."""
    shared = score_full
    return (
        shared + lambda_p * (score_full - score_label),
        shared + lambda_f * (score_full - score_rank),
        shared,
    )


def terminal_reward_with_kl(reward, old_logprob, sft_logprob, beta, steps=1, entries=1, clip=0.0) -> np.ndarray:
    """Zero rewards until the last step, which pays reward - beta * (log pi_old - log pi_sft).

    The log-ratio is divided by the number of action `entries` and, when
    `clip` > 0, clipped to [-clip, clip] before it is scaled by beta.
    """
    if steps < 1:
        raise ValueError(f"a trajectory needs at least one step, got {steps}")
    if entries < 1:
        raise ValueError(f"an action has at least one entry, got {entries}")
    log_ratio = (old_logprob - sft_logprob) / entries
    if clip > 0:
        log_ratio = min(max(log_ratio, -clip), clip)
    rewards = np.zeros(steps)
    rewards[-1] = reward - beta * log_ratio
    return rewards


def gae(rewards, values, bootstrap, gamma, lam) -> Tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and value targets (advantage + value)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError(f"{rewards.size} rewards for {values.size} values")

    advantages = np.zeros_like(rewards)
    next_value, running = bootstrap, 0.0
    for t in reversed(range(rewards.size)):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


@dataclass
class AgentRecord:
    role: Role
    step: AgentStep
    sft_logprob: float
    value: float
    reward: float = 0.0
    advantage: float = 0.0
    target: float = 0.0

    @property
    def kl(self):
        return self.step.logprob - self.sft_logprob

    @property
    def entries(self):
        return max(int(np.size(self.step.action)), 1)


@dataclass
class Trajectory:
    episode: EpisodeRecord
    label_prediction: int
    rank_prediction: int
    score_full: float
    score_label: float
    score_rank: float
    agents: List[AgentRecord] = field(default_factory=list)
    rewards: Dict[Role, float] = field(default_factory=dict)

    @property
    def gold(self):
        return self.episode.sample.label


@dataclass
class RolloutBatch:
    trajectories: List[Trajectory]
    iteration: int


def rollout_episode(pipeline: EmotionPipeline, sample, rng) -> Trajectory:
    """The sampled full episode, its two counterfactuals and the per-agent records."""
    bundle = pipeline.bundle
    main = pipeline.run(sample, "sample", rng)
    label, rank = pipeline.counterfactuals(main, rng)

    gold = main.sample.label
    traj = Trajectory(
        episode=main,
        label_prediction=label.prediction,
        rank_prediction=rank.prediction,
        score_full=episode_score(main.prediction, gold),
        score_label=episode_score(label.prediction, gold),
        score_rank=episode_score(rank.prediction, gold),
    )
    tape = GradTape(enabled=False)
    for role in ROLES:
        step = main.steps.get(role)
        if step is None:
            continue
        sft = logprob_of(bundle, step.obs, step.action, actor=bundle.sft)
        value = float(value_of(bundle, step.obs, tape).value[0])
        traj.agents.append(AgentRecord(role, step, sft, value))
    return traj


def assign_returns(traj: Trajectory, cfg: TrainConfig):
    r_p, r_f, r_g = compute_rewards(traj.score_full, traj.score_label, traj.score_rank, cfg.lambda_p, cfg.lambda_f)
    traj.rewards = {Role.PLANNER: r_p, Role.FILTER: r_f, Role.GENERATOR: r_g}
    for record in traj.agents:
        rewards = terminal_reward_with_kl(
            traj.rewards[record.role],
            record.step.logprob,
            record.sft_logprob,
            cfg.kl_beta,
            entries=record.entries if cfg.kl_per_entry else 1,
            clip=cfg.kl_clip,
        )
        advantages, targets = gae(rewards, [record.value], 0.0, cfg.gamma, cfg.gae_lambda)
        record.reward = float(rewards[-1])
        record.advantage = float(advantages[0])
        record.target = float(targets[0])


def normalize_advantages(trajectories: Sequence[Trajectory]):
    records = [r for t in trajectories for r in t.agents]
    if not records:
        return
    adv = np.array([r.advantage for r in records])
    std = adv.std()
    normed = (adv - adv.mean()) / std if std > 1e-12 else np.zeros_like(adv)
    for r, a in zip(records, normed):
        r.advantage = float(a)


def ppo_losses(pipeline: EmotionPipeline, trajectories: Sequence[Trajectory], cfg: TrainConfig, tape: GradTape):
    """(actor_loss, critic_loss, stats) nodes averaged over the episodes.

    The actor loss is minus the clipped surrogate summed over agents and
    episodes, divided by the episode count; the critic loss is scaled the same
    way. At the rollout policy every ratio is 1, so the actor loss equals
    -sum(advantages) / len(trajectories). The generator's log-likelihood is
    rebuilt through the current fusion weights.
    """
    bundle = pipeline.bundle
    actor_terms, critic_terms = [], []
    clipped = total = 0
    for traj in trajectories:
        for record in traj.agents:
            obs = record.step.obs
            if record.role == Role.GENERATOR:
                obs = pipeline.refuse_generator(traj.episode, tape)
            logprob = policy_logprob(bundle, obs, record.step.action, tape)
            ratio = float(np.exp(logprob.value[0] - record.step.logprob))
            clipped += int(abs(ratio - 1.0) > cfg.clip_eps)
            total += 1
            actor_terms.append(nx.clipped_surrogate(tape, logprob, record.step.logprob, record.advantage, cfg.clip_eps))

            value = value_of(bundle, record.step.obs, tape)
            critic_terms.append(nx.clipped_value_loss(tape, value, record.value, record.target, cfg.value_eps))

    n = max(len(trajectories), 1)
    actor = nx.scale(tape, nx.add_n(tape, actor_terms), -1.0 / n)
    critic = nx.scale(tape, nx.add_n(tape, critic_terms), 1.0 / n)
    return actor, critic, {"clip_fraction": clipped / max(total, 1)}


class MAPPOTrainer(object):
    def __init__(self, pipeline: EmotionPipeline, samples, cfg: TrainConfig, seed, optimizer: Optional[MomentumSGD] = None):
        self.pipeline = pipeline
        self.samples = list(samples)
        self.cfg = cfg
        self.seed = seed
        self.optimizer = optimizer or MomentumSGD(pipeline.bundle.trainable(), cfg.lr, cfg.momentum, cfg.max_grad_norm)

    def episode_rng(self, iteration, episode):
        return np.random.default_rng(np.random.SeedSequence([self.seed, iteration, episode]))

    def collect(self, iteration) -> RolloutBatch:
        picker = np.random.default_rng(np.random.SeedSequence([self.seed, iteration]))
        replace = self.cfg.batch_size > len(self.samples)
        picks = picker.choice(len(self.samples), size=self.cfg.batch_size, replace=replace)

        def one(episode):
            return rollout_episode(self.pipeline, self.samples[picks[episode]], self.episode_rng(iteration, episode))

        if self.cfg.workers > 1:
            with futures.ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                trajectories = list(pool.map(one, range(len(picks))))
        else:
            trajectories = [one(e) for e in range(len(picks))]

        for traj in trajectories:
            assign_returns(traj, self.cfg)
        if self.cfg.normalize_advantages:
            normalize_advantages(trajectories)
        return RolloutBatch(trajectories, iteration)

    def _loss(self, trajectories, iteration, epoch):
        tape = GradTape()
        actor, critic, stats = ppo_losses(self.pipeline, trajectories, self.cfg, tape)
        loss = nx.add(tape, actor, nx.scale(tape, critic, self.cfg.critic_coef))
        if not np.isfinite(loss.value[0]):
            raise NonFiniteError(
                f"non-finite loss at iteration {iteration}, epoch {epoch}",
                iteration=iteration,
                epoch=epoch,
                actor_loss=float(actor.value[0]),
                critic_loss=float(critic.value[0]),
            )
        return tape, loss, float(actor.value[0]), float(critic.value[0]), stats

    def update(self, batch: RolloutBatch):
        cfg = self.cfg
        shuffler = np.random.default_rng(np.random.SeedSequence([self.seed, batch.iteration, 1 << 20]))
        actor_losses, critic_losses, clip = [], [], []

        for epoch in range(cfg.ppo_epochs):
            order = shuffler.permutation(len(batch.trajectories))
            for chunk in np.array_split(order, cfg.num_minibatches):
                tape, loss, a, c, stats = self._loss([batch.trajectories[i] for i in chunk], batch.iteration, epoch)
                try:
                    self.optimizer.step(tape.backward(loss))
                except NonFiniteError as e:
                    e.details.update(iteration=batch.iteration, epoch=epoch)
                    raise
                actor_losses.append(a)
                critic_losses.append(c)
                clip.append(stats["clip_fraction"])

        if not actor_losses:
            _, _, a, c, stats = self._loss(batch.trajectories, batch.iteration, 0)
            actor_losses, critic_losses, clip = [a], [c], [stats["clip_fraction"]]
        return float(np.mean(actor_losses)), float(np.mean(critic_losses)), float(np.mean(clip))

    def iteration(self, iteration) -> Dict[str, float]:
        start = time.perf_counter()
        batch = self.collect(iteration)
        actor_loss, critic_loss, clip_fraction = self.update(batch)
        metrics = batch_metrics(batch)
        metrics.update(
            iter=iteration,
            actor_loss=actor_loss,
            critic_loss=critic_loss,
            clip_fraction=clip_fraction,
            wall_ms=(time.perf_counter() - start) * 1000.0,
        )
        return metrics


def mappo_iteration(trainer: MAPPOTrainer, iteration) -> Dict[str, float]:
    return trainer.iteration(iteration)


def batch_metrics(batch: RolloutBatch) -> Dict[str, float]:
    trajs = batch.trajectories
    full = np.array([t.score_full for t in trajs])
    label = np.array([t.score_label for t in trajs])
    rank = np.array([t.score_rank for t in trajs])
    kls = [r.kl for t in trajs for r in t.agents]
    return {
        "mean_score_full": float(full.mean()),
        "mean_score_label": float(label.mean()),
        "mean_score_rank": float(rank.mean()),
        "R_P_mean": float(np.mean([t.rewards[Role.PLANNER] for t in trajs])),
        "R_F_mean": float(np.mean([t.rewards[Role.FILTER] for t in trajs])),
        "kl_mean": float(np.mean(kls)) if kls else 0.0,
        "kl_per_entry_mean": float(np.mean([r.kl / r.entries for t in trajs for r in t.agents])) if kls else 0.0,
        "routing_entropy": float(np.mean([t.episode.fused.routing_entropy for t in trajs])),
        "gap_label": float((full - label).mean()),
        "gap_rank": float((full - rank).mean()),
        "batch_macro_f1": score_f1([t.episode.prediction for t in trajs], [t.gold for t in trajs], "macro"),
    }
