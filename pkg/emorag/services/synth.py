import logging, os
from dataclasses import asdict

from emorag.envsynth import generate_dataset, write_jsonl
from emorag.errors import DatasetError

logger = logging.getLogger(__name__)


class SynthService(object):
    def __init__(self, manager):
        self._manager = manager

    def synthesize(self):
        config = self._manager.config
        seed = config.synth_seed
        train, test, corpus = generate_dataset(config.synth, seed=seed)

        try:
            for name, records in (("train", train), ("test", test), ("corpus", corpus)):
                write_jsonl(self._manager.output_path(f"{name}.jsonl"), records)
            manifest = {
                "seed": seed,
                "spec": asdict(config.synth),
                "num_labels": config.synth.num_labels,
                "label_names": config.synth.names(),
                "counts": {"train": len(train), "test": len(test), "corpus": len(corpus)},
                "config_hash": config.config_hash(),
            }
            path = self._manager.write_json("manifest.json", manifest)
        except OSError as e:
            raise DatasetError(f"cannot write dataset to {config.output_dir}: {e}") from e

        logger.info(f"Wrote {len(train)} train, {len(test)} test and {len(corpus)} corpus records to {os.path.dirname(path)}")
        return manifest
