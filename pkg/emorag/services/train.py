import json, logging, time

import numpy as np

from emorag.checkpoint import load_checkpoint, save_checkpoint
from emorag.config import AblationFlags
from emorag.errors import CheckpointError, NonFiniteError
from emorag.pipeline.agents import init_bundle
from emorag.services.evaluate import EvaluationService
from emorag.training.mappo import MAPPOTrainer
from emorag.training.sft import sft_warm_start

logger = logging.getLogger(__name__)


class TrainService(object):
    def __init__(self, manager):
        self._manager = manager

    def _save(self, trainer, iteration):
        manager = self._manager
        save_checkpoint(
            manager.output_path("checkpoint.bin"),
            manager.bundle,
            manager.config,
            mode="train",
            optimizer=trainer.optimizer,
            extra={"iteration": iteration},
        )

    def _resume(self, path):
        """Bundle and optimizer state from a train checkpoint; returns (trainer, last iteration)."""
        manager = self._manager
        config = manager.config
        bundle, _, header, optim = load_checkpoint(path, config)
        if header["mode"] != "train" or optim is None:
            raise CheckpointError(f"{path} is an eval checkpoint and cannot resume training", section="optim")
        if header["config_hash"] != config.config_hash():
            logger.warning(f"Resuming from {path}, written with a different config ({header['config_hash'][:12]})")

        manager.bundle = bundle
        trainer = MAPPOTrainer(manager.pipeline(AblationFlags()), manager.train, config.train, config.seed)
        trainer.optimizer.load_state_dict(optim)
        completed = int(header["extra"].get("iteration", 0))
        logger.info(f"Resuming MAPPO after iteration {completed} from {path}")
        return trainer, completed

    def _warm_start(self):
        manager = self._manager
        config = manager.config
        manager.bundle = init_bundle(config)
        pipeline = manager.pipeline(AblationFlags())

        sft_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        logger.info(f"SFT warm start on {len(manager.train)} samples for {config.sft.epochs} epochs")
        sft_warm_start(pipeline, manager.train, config.sft, sft_rng, manager.progress(desc="sft"))

        trainer = MAPPOTrainer(pipeline, manager.train, config.train, config.seed)
        self._save(trainer, 0)
        return trainer, 0

    def train(self, iterations=None, evaluate=True, resume=None):
        """Warm start then MAPPO, or MAPPO continued from a train checkpoint. Returns the training report."""
        manager = self._manager
        config = manager.config
        iterations = config.train.iterations if iterations is None else iterations
        started = time.perf_counter()

        trainer, completed = self._resume(resume) if resume else self._warm_start()
        first = completed + 1

        with open(manager.output_path("metrics.jsonl"), "a" if resume else "w") as log:
            for iteration in manager.progress(desc="mappo")(range(first, iterations + 1)):
                try:
                    metrics = trainer.iteration(iteration)
                except NonFiniteError as e:
                    diagnostic = {"error": e.code, "message": str(e), "iteration": iteration, "details": e.details}
                    manager.write_json("diagnostic.json", diagnostic)
                    logger.error(f"Training aborted at iteration {iteration}; last good checkpoint kept")
                    raise

                log.write(json.dumps(metrics, sort_keys=True) + "\n")
                log.flush()
                completed = iteration
                logger.info(
                    f"iter {iteration}: score {metrics['mean_score_full']:.3f} "
                    f"(label {metrics['mean_score_label']:.3f}, rank {metrics['mean_score_rank']:.3f}) "
                    f"actor {metrics['actor_loss']:.4f} critic {metrics['critic_loss']:.4f} kl {metrics['kl_mean']:.4f}"
                )
                if iteration % config.train.checkpoint_every == 0 or iteration == iterations:
                    self._save(trainer, iteration)

        if completed < iterations:
            logger.warning(f"Training stopped after {completed} of {iterations} iterations")
            self._save(trainer, completed)

        save_checkpoint(manager.output_path("policy.bin"), manager.bundle, config, mode="eval", extra={"iteration": completed})

        report = {
            "iterations": completed,
            "requested_iterations": iterations,
            "seed": config.seed,
            "config_hash": config.config_hash(),
            "wall_s": time.perf_counter() - started,
        }
        if evaluate:
            final = EvaluationService(manager).evaluate(AblationFlags(), with_reference=False)
            report["final_eval"] = {k: final[k] for k in ("macro_f1", "weighted_f1", "n")}
        manager.write_json("train_report.json", report)
        return report
