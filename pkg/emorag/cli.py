import argparse, json, logging, os, signal, sys, threading
from dataclasses import replace

from dotenv import load_dotenv

from emorag.checkpoint import load_checkpoint
from emorag.config import AblationFlags, RunConfig, load_config
from emorag.errors import ConfigError, EmoragError
from emorag.manager import ExperimentManager
from emorag.services.evaluate import EvaluationService
from emorag.services.suite import SuiteService
from emorag.services.synth import SynthService
from emorag.services.train import TrainService

logger = logging.getLogger("emorag")

USAGE_ERRORS = (ConfigError,)


def default_config():
    return os.environ.get("EMORAG_CONFIG", "emorag.yaml" if os.path.exists("emorag.yaml") else None)


def add_common(parser, config_default=True):
    parser.add_argument(
        "--config", "-c", type=str, default=default_config() if config_default else None, help="Path to a run config YAML file (eval defaults to the config stored in the checkpoint)"
    )
    parser.add_argument(
        "--seed", type=int, default=os.environ.get("EMORAG_SEED", None), help="Master seed, overrides the config"
    )
    parser.add_argument(
        "--out", "-o", type=str, default=os.environ.get("EMORAG_OUT", None), help="Output directory, overrides the config"
    )
    parser.add_argument(
        "--data", "-d", type=str, default=os.environ.get("EMORAG_DATA", None), help="Directory holding train/test/corpus.jsonl (generated in memory when absent)"
    )
    parser.add_argument(
        "--workers", type=int, default=os.environ.get("EMORAG_WORKERS", None), help="Parallel rollout workers"
    )
    parser.add_argument(
        "--verbose", "-v", action="store_true", help="Log at DEBUG level"
    )
    parser.add_argument(
        "--no-progress", action="store_true", help="Hide progress bars"
    )


def add_ablation(parser):
    parser.add_argument("--no-planner", action="store_true", help="Replace planner queries with a degenerate label query")
    parser.add_argument("--no-filter", action="store_true", help="Pass the top of every cognitive list to the generator")
    parser.add_argument("--no-confuse-evidence", action="store_true", help="Drop the confusing cognitive list")
    parser.add_argument("--no-counter-evidence", action="store_true", help="Drop the countering cognitive list")
    parser.add_argument("--drop-modality", choices=["none", "t", "v", "a"], default=None, help="Remove one modality from every test sample")
    parser.add_argument("--no-retrieval", action="store_true", help="Zero every evidence input")
    parser.add_argument("--naive-rag", action="store_true", help="Perceptual retrieval only, evidence passed raw")
    parser.add_argument("--no-substitution", action="store_true", help="Do not fill a missing modality from perceptual evidence")
    parser.add_argument("--direct-perceptual", action="store_true", help="Add the attention readout without the RAAF gate")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="emorag", formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Generate the synthetic dataset", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(synth)

    train = commands.add_parser("train", help="SFT warm start then MAPPO training", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(train)
    train.add_argument("--iterations", type=int, default=None, help="MAPPO iterations, overrides the config")
    train.add_argument("--resume", type=str, default=None, help="Continue MAPPO from a train checkpoint (checkpoint.bin) instead of warm starting")

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint on the test split", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(evaluate, config_default=False)
    evaluate.add_argument("--checkpoint", type=str, required=True, help="checkpoint.bin or policy.bin")
    evaluate.add_argument("--sample", action="store_true", help="Sample actions instead of greedy decoding")
    add_ablation(evaluate)

    suite = commands.add_parser("suite", help="Run the ablation matrix", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(suite)
    suite.add_argument("--checkpoint", type=str, default=None, help="Trained checkpoint to evaluate")
    suite.add_argument("--auto-train", action="store_true", help="Train one policy per seed first")
    suite.add_argument("--seeds", type=int, nargs="+", default=None, help="Seeds to average over")

    return parser


def resolve_config(args, base: RunConfig = None) -> RunConfig:
    config = base or load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=int(args.seed))
    if args.out is not None:
        config = replace(config, output_dir=args.out)
    if args.workers is not None:
        config = replace(config, train=replace(config.train, workers=int(args.workers)))
    if getattr(args, "iterations", None) is not None:
        config = replace(config, train=replace(config.train, iterations=args.iterations))
    return config.validate()


def ablation_from_args(args, base: AblationFlags) -> AblationFlags:
    overrides = {
        name: True
        for name in (
            "no_planner", "no_filter", "no_confuse_evidence", "no_counter_evidence",
            "no_retrieval", "naive_rag", "no_substitution", "direct_perceptual",
        )
        if getattr(args, name)
    }
    if args.drop_modality is not None:
        overrides["drop_modality"] = args.drop_modality
    flags = replace(base, **overrides)
    flags.validate()
    return flags


def run(args, stop_event, state):
    if args.command == "eval":
        stored = load_checkpoint(args.checkpoint)[1] if not args.config else None
        config = state["config"] = resolve_config(args, stored)
        bundle = load_checkpoint(args.checkpoint, config)[0]
        manager = ExperimentManager(config, args.data, stop_event, not args.no_progress)
        manager.bundle = bundle
        report = EvaluationService(manager).evaluate(ablation_from_args(args, config.ablation), sample=args.sample)
        manager.write_json("eval_report.json", report)
        return report

    config = state["config"] = resolve_config(args)
    manager = ExperimentManager(config, args.data, stop_event, not args.no_progress)
    if args.command == "synth":
        return SynthService(manager).synthesize()
    if args.command == "train":
        return TrainService(manager).train(resume=args.resume)
    return SuiteService(manager).run(args.seeds, args.checkpoint, args.auto_train)


def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)

    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(filename)s(%(process)d) - %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)

    stop_event = threading.Event()

    def stop_handler(*_):
        logger.warning("Interrupted, stopping after the current step...")
        stop_event.set()

    previous = signal.signal(signal.SIGINT, stop_handler)
    state = {}
    try:
        run(args, stop_event, state)
        return 0
    except (EmoragError, OSError) as e:
        config_hash = state["config"].config_hash() if "config" in state else None
        sys.stderr.write(json.dumps({
            "error": getattr(e, "code", "io"),
            "type": type(e).__name__,
            "message": str(e),
            "config_hash": config_hash,
        }, sort_keys=True) + "\n")
        return 2 if isinstance(e, USAGE_ERRORS) else 1
    finally:
        signal.signal(signal.SIGINT, previous)
        root.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
