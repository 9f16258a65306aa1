import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from emorag.config import MODALITIES
from emorag.envsynth import EvidenceItem, ModalSample
from emorag.errors import DatasetError, DimensionError, EmptyInputError

logger = logging.getLogger(__name__)

QUERY_KINDS = ("sup", "conf", "count")

Ranked = List[Tuple[EvidenceItem, float]]


class EvidenceIndex(object):
    """Exact cosine index over a fixed evidence corpus, one table per modality.

    Row i of every table belongs to items[i]. Tables are L2-normalised at build
    time so a cosine similarity is a dot product.
    """

    def __init__(self, items: Sequence[EvidenceItem], num_labels: Optional[int] = None):
        if not items:
            raise EmptyInputError("cannot build an index over an empty corpus")
        self.items = list(items)
        self.ids = np.array([item.id for item in self.items], dtype=np.int64)
        self.labels = np.array([item.label for item in self.items], dtype=np.int64)
        seen = int(self.labels.max()) + 1
        if num_labels is not None and (seen > num_labels or self.labels.min() < 0):
            raise DatasetError(f"corpus labels span [{int(self.labels.min())}, {seen - 1}] but the run has {num_labels} labels")
        # labels absent from the corpus keep a zero centroid
        self.num_labels = seen if num_labels is None else num_labels

        self.raw: Dict[str, np.ndarray] = {}
        self.tables: Dict[str, np.ndarray] = {}
        for m in MODALITIES:
            raw = np.stack([item.vector(m) for item in self.items]).astype(np.float64)
            norms = np.linalg.norm(raw, axis=1)
            zero = np.flatnonzero(norms == 0)
            if zero.size:
                raise DatasetError(
                    f"evidence item {int(self.ids[zero[0]])} has a zero-norm '{m}' embedding",
                    item_id=int(self.ids[zero[0]]),
                )
            self.raw[m] = raw
            self.tables[m] = raw / norms[:, None]

        self._centroids = {}

    def __len__(self):
        return len(self.items)

    @property
    def dim(self):
        return self.tables["t"].shape[1]

    def label_centroids(self, modality="t") -> np.ndarray:
        """Mean raw embedding per label, shape (num_labels, dim)."""
        if modality not in self._centroids:
            raw = self.raw[modality]
            centroids = np.zeros((self.num_labels, raw.shape[1]))
            for label in range(self.num_labels):
                rows = raw[self.labels == label]
                if len(rows):
                    centroids[label] = rows.mean(axis=0)
            self._centroids[modality] = centroids
        return self._centroids[modality]


def build_index(corpus: Sequence[EvidenceItem], num_labels: Optional[int] = None) -> EvidenceIndex:
    index = EvidenceIndex(corpus, num_labels)
    logger.debug(f"Built evidence index over {len(index)} items")
    return index


def knn(index: EvidenceIndex, query, modality: str, k: int) -> Ranked:
    """The k most cosine-similar items, best first, ties broken by ascending id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    table = index.tables[modality]
    if query.shape != (table.shape[1],):
        raise DimensionError(f"query dim {query.shape} does not match '{modality}' embedding dim {table.shape[1]}")

    norm = np.linalg.norm(query)
    sims = table @ (query / norm) if norm > 0 else np.zeros(len(index))
    order = np.lexsort((index.ids, -sims))[:k]
    return [(index.items[i], float(sims[i])) for i in order]


@dataclass
class QuerySet:
    sup: np.ndarray
    conf: np.ndarray
    count: np.ndarray

    def get(self, kind):
        return getattr(self, kind)

    @classmethod
    def from_flat(cls, flat, dim):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (3 * dim,):
            raise DimensionError(f"planner action has shape {flat.shape}, expected ({3 * dim},)")
        return cls(flat[:dim], flat[dim:2 * dim], flat[2 * dim:])

    @classmethod
    def repeat(cls, query):
        query = np.asarray(query, dtype=np.float64)
        return cls(query, query.copy(), query.copy())


@dataclass
class RetrievalResult:
    cognitive: Dict[str, Ranked] = field(default_factory=dict)
    perceptual: Dict[str, Ranked] = field(default_factory=dict)

    def perceptual_vectors(self, modality) -> List[np.ndarray]:
        return [item.vector(modality) for item, _ in self.perceptual.get(modality, [])]


def retrieve_cognitive(index, queries: QuerySet, k_cog: int, space: str = "t") -> Dict[str, Ranked]:
    return {kind: knn(index, queries.get(kind), space, k_cog) for kind in QUERY_KINDS}


def retrieve_perceptual(index, sample: ModalSample, k_perc: int) -> Dict[str, Ranked]:
    present = sample.present_modalities
    if not present:
        raise EmptyInputError(f"sample {sample.id} has no present modality")

    perceptual = {m: knn(index, sample.vector(m), m, k_perc) for m in present}
    for m in MODALITIES:
        if m in perceptual:
            continue
        # Cross-modal proxy: the missing modality of each present modality's best hit
        proxy = np.mean([perceptual[p][0][0].vector(m) for p in present], axis=0)
        perceptual[m] = knn(index, proxy, m, k_perc)
    return {m: perceptual[m] for m in MODALITIES}


def retrieve_dual(index, sample: ModalSample, queries: QuerySet, k_cog: int, k_perc: int, space: str = "t") -> RetrievalResult:
    return RetrievalResult(
        cognitive=retrieve_cognitive(index, queries, k_cog, space),
        perceptual=retrieve_perceptual(index, sample, k_perc),
    )


def perceptual_votes(perceptual: Dict[str, Ranked], num_labels: int, modalities=MODALITIES) -> np.ndarray:
    votes = np.zeros(num_labels)
    for m in modalities:
        for item, _ in perceptual.get(m, []):
            votes[item.label] += 1
    return votes


def top_votes(votes: np.ndarray, n: int) -> List[int]:
    """The n most voted labels, ties broken by the lower label."""
    order = np.lexsort((np.arange(len(votes)), -votes))
    return [int(i) for i in order[:n]]


def merge_candidates(cognitive: Dict[str, Ranked], kinds=QUERY_KINDS, top=None) -> List[EvidenceItem]:
    """Union of the cognitive lists, deduplicated by id.

    Items are ordered by their best rank, then by query kind. `top` keeps only
    the first entries of every list.
    """
    best = {}
    for kind_order, kind in enumerate(QUERY_KINDS):
        if kind not in kinds:
            continue
        for rank, (item, _) in enumerate(cognitive.get(kind, [])[:top]):
            key = (rank, kind_order)
            if item.id not in best or key < best[item.id][0]:
                best[item.id] = (key, item)
    return [item for _, item in sorted(best.values(), key=lambda entry: (entry[0], entry[1].id))]
