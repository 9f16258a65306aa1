# Synthetic multimodal emotion environment.
#
# Each label owns one centroid per modality. Labels listed in a confusion pair
# share (almost) the same text centroid while keeping separate video and audio
# centroids, so text alone cannot tell them apart.

import json, logging, os
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np
from sklearn.metrics import f1_score

from emorag.config import MODALITIES, SynthSpec
from emorag.errors import ConfigError, DatasetError, MissingModalityError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "corpus")


@dataclass(frozen=True, eq=False)
class ModalSample:
    id: int
    label: int
    x_t: np.ndarray
    x_v: np.ndarray
    x_a: np.ndarray
    present: Tuple[bool, bool, bool] = (True, True, True)

    def vector(self, modality):
        return getattr(self, f"x_{modality}")

    def has(self, modality):
        return self.present[MODALITIES.index(modality)]

    @property
    def present_modalities(self):
        return [m for m in MODALITIES if self.has(m)]

    def to_json(self):
        return {
            "id": self.id,
            "label": self.label,
            "present": list(self.present),
            "x_t": self.x_t.tolist(),
            "x_v": self.x_v.tolist(),
            "x_a": self.x_a.tolist(),
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            id=int(data["id"]),
            label=int(data["label"]),
            x_t=np.asarray(data["x_t"], dtype=np.float64),
            x_v=np.asarray(data["x_v"], dtype=np.float64),
            x_a=np.asarray(data["x_a"], dtype=np.float64),
            present=tuple(bool(b) for b in data["present"]),
        )


@dataclass(frozen=True, eq=False)
class EvidenceItem:
    id: int
    label: int
    e_t: np.ndarray
    e_v: np.ndarray
    e_a: np.ndarray

    def vector(self, modality):
        return getattr(self, f"e_{modality}")

    def to_json(self):
        return {
            "id": self.id,
            "label": self.label,
            "x_t": self.e_t.tolist(),
            "x_v": self.e_v.tolist(),
            "x_a": self.e_a.tolist(),
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            id=int(data["id"]),
            label=int(data["label"]),
            e_t=np.asarray(data["x_t"], dtype=np.float64),
            e_v=np.asarray(data["x_v"], dtype=np.float64),
            e_a=np.asarray(data["x_a"], dtype=np.float64),
        )


def make_centroids(spec: SynthSpec, rng):
    C, d, s = spec.num_labels, spec.dim, spec.separation
    centroids = {m: s * rng.standard_normal((C, d)) / np.sqrt(d) for m in MODALITIES}
    for a, b in spec.confusion_pairs:
        jitter = spec.confusion_jitter * s * rng.standard_normal(d) / np.sqrt(d)
        centroids["t"][b] = centroids["t"][a] + jitter
    return centroids


def _draw(spec, centroids, labels, rng):
    n = len(labels)
    return {m: centroids[m][labels] + spec.noise(m) * rng.standard_normal((n, spec.dim)) for m in MODALITIES}


def generate_dataset(spec: SynthSpec, seed=None) -> Tuple[List[ModalSample], List[ModalSample], List[EvidenceItem]]:
    spec.validate()
    seed = spec.seed if spec.seed is not None else seed
    if seed is None:
        raise ConfigError("generate_dataset needs a seed (in the spec or as an argument)")

    rng = np.random.default_rng(seed)
    centroids = make_centroids(spec, rng)
    C = spec.num_labels

    def split(per_label, first_id):
        labels = rng.permutation(np.repeat(np.arange(C), per_label))
        xs = _draw(spec, centroids, labels, rng)
        return [
            ModalSample(first_id + i, int(y), xs["t"][i], xs["v"][i], xs["a"][i])
            for i, y in enumerate(labels)
        ]

    train = split(spec.train_per_label, 0)
    test = split(spec.test_per_label, len(train))

    corpus_labels = np.arange(spec.corpus_size) % C
    es = _draw(spec, centroids, corpus_labels, rng)
    corpus = [
        EvidenceItem(i, int(y), es["t"][i], es["v"][i], es["a"][i])
        for i, y in enumerate(corpus_labels)
    ]

    logger.debug(f"Generated {len(train)} train, {len(test)} test and {len(corpus)} corpus items with seed {seed}")
    return train, test, corpus


def apply_missing(sample: ModalSample, drop: str) -> ModalSample:
    if drop not in MODALITIES:
        raise ValueError(f"unknown modality '{drop}', expected one of {MODALITIES}")
    idx = MODALITIES.index(drop)
    if not sample.present[idx]:
        return sample
    if sum(sample.present) == 1:
        raise MissingModalityError(f"cannot drop '{drop}' from sample {sample.id}: it is the only present modality")

    present = tuple(p and i != idx for i, p in enumerate(sample.present))
    return replace(sample, present=present, **{f"x_{drop}": np.zeros_like(sample.vector(drop))})


def score_f1(pred: Sequence[int], gold: Sequence[int], mode: str = "macro") -> float:
    """F1 over the classes that occur in `gold`, averaged by `mode` (macro or weighted)."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions for {len(gold)} gold labels")
    if len(gold) == 0:
        raise ValueError("score_f1 needs at least one prediction")
    if mode not in ("macro", "weighted"):
        raise ValueError(f"unknown F1 mode '{mode}'")
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    return float(f1_score(gold, pred, labels=np.unique(gold), average=mode, zero_division=0))


def episode_score(pred: int, gold: int) -> float:
    # F1 of a single prediction is 1 when correct, 0 otherwise
    return 1.0 if int(pred) == int(gold) else 0.0


# JSON-lines persistence


def write_jsonl(path, records):
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record.to_json(), sort_keys=True))
            f.write("\n")


def read_jsonl(path, klass):
    records = []
    try:
        with open(path, "r") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(klass.from_json(json.loads(line)))
                except (KeyError, TypeError, ValueError) as e:
                    raise DatasetError(f"{path}:{lineno}: malformed record ({e})") from e
    except OSError as e:
        raise DatasetError(f"cannot read dataset file {path}: {e}") from e
    return records


def load_dataset(data_dir):
    train = read_jsonl(os.path.join(data_dir, "train.jsonl"), ModalSample)
    test = read_jsonl(os.path.join(data_dir, "test.jsonl"), ModalSample)
    corpus = read_jsonl(os.path.join(data_dir, "corpus.jsonl"), EvidenceItem)
    if not corpus:
        raise DatasetError(f"corpus in {data_dir} is empty")
    return train, test, corpus
