import logging, os
from dataclasses import asdict, replace

import numpy as np

from emorag.checkpoint import load_checkpoint
from emorag.config import AblationFlags
from emorag.errors import ConfigError
from emorag.manager import ExperimentManager
from emorag.pipeline.agents import PolicyBundle, init_bundle
from emorag.services.evaluate import EvaluationService
from emorag.services.train import TrainService

logger = logging.getLogger(__name__)

# (row name, table group, policy used, ablation flags)
SUITE_ROWS = [
    ("zero_shot", "components", "initial", AblationFlags(no_retrieval=True)),
    ("sft_only", "components", "sft", AblationFlags(no_retrieval=True)),
    ("naive_rag", "components", "sft", AblationFlags(naive_rag=True)),
    ("full", "components", "trained", AblationFlags()),
    ("no_planner", "coordination", "trained", AblationFlags(no_planner=True)),
    ("no_filter", "coordination", "trained", AblationFlags(no_filter=True)),
    ("no_planner_no_filter", "coordination", "trained", AblationFlags(no_planner=True, no_filter=True)),
    ("no_confuse_counter", "coordination", "trained", AblationFlags(no_confuse_evidence=True, no_counter_evidence=True)),
    ("no_counter", "coordination", "trained", AblationFlags(no_counter_evidence=True)),
    ("full_agents", "coordination", "trained", AblationFlags()),
    ("drop_t", "modality", "trained", AblationFlags(drop_modality="t")),
    ("drop_v", "modality", "trained", AblationFlags(drop_modality="v")),
    ("drop_a", "modality", "trained", AblationFlags(drop_modality="a")),
    ("drop_t_no_substitution", "modality", "trained", AblationFlags(drop_modality="t", no_substitution=True)),
    ("drop_v_no_substitution", "modality", "trained", AblationFlags(drop_modality="v", no_substitution=True)),
    ("drop_a_no_substitution", "modality", "trained", AblationFlags(drop_modality="a", no_substitution=True)),
    ("direct_perceptual", "fusion", "trained", AblationFlags(direct_perceptual=True)),
]


def sft_policy(trained: PolicyBundle, initial: PolicyBundle) -> PolicyBundle:
    """The warm-start actor with the fusion weights it was trained against."""
    return PolicyBundle(
        actor=trained.sft.copy("actor"),
        critic=initial.critic,
        raaf=initial.raaf,
        moe=initial.moe,
        sft=trained.sft,
        dim=trained.dim,
        num_labels=trained.num_labels,
        planner_sigma=trained.planner_sigma,
    )


class SuiteService(object):
    def __init__(self, manager):
        self._manager = manager

    def _trained(self, seed_manager, checkpoint, auto_train):
        if checkpoint:
            bundle, _, header, _ = load_checkpoint(checkpoint, seed_manager.config)
            if header["mode"] != "train":
                logger.warning("Suite checkpoint has no reference section; sft rows use the trained actor")
            return bundle
        if not auto_train:
            raise ConfigError("suite needs --checkpoint or --auto-train")
        TrainService(seed_manager).train(evaluate=False)
        return seed_manager.bundle

    def run(self, seeds=None, checkpoint=None, auto_train=False):
        base = self._manager
        seeds = list(seeds or [base.config.seed])
        per_seed = {name: [] for name, _, _, _ in SUITE_ROWS}

        for seed in seeds:
            config = replace(base.config, seed=seed, output_dir=os.path.join(base.config.output_dir, f"seed_{seed}"))
            manager = ExperimentManager(config, base.data_dir, base.stop_event, base.show_progress)
            logger.info(f"Suite seed {seed}")

            trained = self._trained(manager, checkpoint, auto_train)
            initial = init_bundle(config)
            policies = {"initial": initial, "sft": sft_policy(trained, initial), "trained": trained}

            service = EvaluationService(manager)
            for name, _, policy, flags in SUITE_ROWS:
                report = service.evaluate(flags, bundle=policies[policy], with_reference=False)
                per_seed[name].append({"seed": seed, "macro_f1": report["macro_f1"], "weighted_f1": report["weighted_f1"]})

        rows = {}
        for name, group, policy, flags in SUITE_ROWS:
            runs = per_seed[name]
            rows[name] = {
                "group": group,
                "policy": policy,
                "flags": asdict(flags),
                "macro_f1": float(np.mean([r["macro_f1"] for r in runs])),
                "weighted_f1": float(np.mean([r["weighted_f1"] for r in runs])),
                "per_seed": runs,
            }
        full = rows["full"]
        for row in rows.values():
            row["delta_macro_f1"] = row["macro_f1"] - full["macro_f1"]
            row["delta_weighted_f1"] = row["weighted_f1"] - full["weighted_f1"]

        report = {
            "seeds": seeds,
            "config_hash": base.config.config_hash(),
            "order": [name for name, _, _, _ in SUITE_ROWS],
            "rows": rows,
        }
        base.write_json("suite_report.json", report)
        return report
