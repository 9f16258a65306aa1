import logging
from dataclasses import asdict

import numpy as np

from emorag.config import AblationFlags
from emorag.envsynth import score_f1
from emorag.pipeline.fusion import FUSED_MODALITIES
from emorag.pipeline.retrieval import perceptual_votes, top_votes

logger = logging.getLogger(__name__)

ROUTING_STATES = ("balanced", "video_led", "audio_led", "conflict")
RETRIEVAL_CONDITIONS = ("helpful", "conflicting", "ordinary")


def retrieval_condition(perceptual, gold, num_labels):
    """helpful when the perceptual majority is the gold label, conflicting when
    gold is absent from every hit, ordinary otherwise."""
    votes = perceptual_votes(perceptual, num_labels)
    if votes.sum() == 0:
        return "ordinary"
    if top_votes(votes, 1)[0] == gold:
        return "helpful"
    if votes[gold] == 0:
        return "conflicting"
    return "ordinary"


def routing_state(perceptual, gold, num_labels):
    def agrees(m):
        votes = perceptual_votes(perceptual, num_labels, modalities=(m,))
        return votes.sum() > 0 and top_votes(votes, 1)[0] == gold

    video, audio = agrees("v"), agrees("a")
    if video and audio:
        return "balanced"
    if video:
        return "video_led"
    if audio:
        return "audio_led"
    return "conflict"


class EvaluationService(object):
    def __init__(self, manager):
        self._manager = manager

    def _rng(self, sample):
        return np.random.default_rng(np.random.SeedSequence([self._manager.config.seed, 3, sample.id]))

    def predictions(self, flags: AblationFlags, bundle=None, sample=False, counterfactuals=False):
        """Episode records for every test sample under `flags`."""
        pipeline = self._manager.pipeline(flags, bundle)
        mode = "sample" if sample else "greedy"
        progress = self._manager.progress(desc="eval")

        records, label_preds, rank_preds = [], [], []
        for s in progress(self._manager.test):
            rng = self._rng(s)
            record = pipeline.run(s, mode, rng)
            records.append(record)
            if counterfactuals:
                label, rank = pipeline.counterfactuals(record, rng)
                label_preds.append(label.prediction)
                rank_preds.append(rank.prediction)
        return records, label_preds, rank_preds

    def evaluate(self, flags: AblationFlags = None, bundle=None, sample=False, with_reference=True):
        manager = self._manager
        flags = flags or AblationFlags()
        C = manager.config.synth.num_labels
        planned = not (flags.naive_rag or flags.no_retrieval or flags.no_planner or flags.no_filter)

        records, label_preds, rank_preds = self.predictions(flags, bundle, sample, counterfactuals=planned)
        gold = [r.sample.label for r in records]
        pred = [r.prediction for r in records]

        report = {
            "condition": flags.active(),
            "flags": asdict(flags),
            "n": len(records),
            "macro_f1": score_f1(pred, gold, "macro"),
            "weighted_f1": score_f1(pred, gold, "weighted"),
            "mode": "sample" if sample else "greedy",
            "seed": manager.config.seed,
            "config_hash": manager.config.config_hash(),
        }

        if planned:
            label_f1 = score_f1(label_preds, gold, "macro")
            rank_f1 = score_f1(rank_preds, gold, "macro")
            report["counterfactual"] = {
                "label_macro_f1": label_f1,
                "rank_macro_f1": rank_f1,
                "gap_label": report["macro_f1"] - label_f1,
                "gap_rank": report["macro_f1"] - rank_f1,
            }

        groups = {name: [] for name in RETRIEVAL_CONDITIONS}
        routing = {name: [] for name in ROUTING_STATES}
        for r in records:
            groups[retrieval_condition(r.perceptual, r.sample.label, C)].append(r)
            routing[routing_state(r.perceptual, r.sample.label, C)].append(r.fused.expert_weights())

        report["retrieval_conditions"] = {
            name: {
                "n": len(rs),
                "macro_f1": score_f1([r.prediction for r in rs], [r.sample.label for r in rs]) if rs else None,
            }
            for name, rs in groups.items()
        }
        report["no_evidence"] = {m: sum(m in r.fused.no_evidence for r in records) for m in FUSED_MODALITIES}
        report["routing_profile"] = {
            name: {"n": len(ws), "weights": np.mean(ws, axis=0).tolist() if ws else None}
            for name, ws in routing.items()
        }

        if with_reference:
            if flags == AblationFlags():
                reference = report
            else:
                reference = self.evaluate(AblationFlags(), bundle, sample, with_reference=False)
            report["full_macro_f1"] = reference["macro_f1"]
            report["full_weighted_f1"] = reference["weighted_f1"]
            report["delta_macro_f1"] = report["macro_f1"] - reference["macro_f1"]
            report["delta_weighted_f1"] = report["weighted_f1"] - reference["weighted_f1"]

        logger.info(f"Eval {report['condition'] or 'full'}: macro F1 {report['macro_f1']:.4f}, weighted F1 {report['weighted_f1']:.4f}")
        return report
