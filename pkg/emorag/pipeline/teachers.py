# Heuristic policies that the warm start imitates.

import numpy as np

from emorag.pipeline.retrieval import EvidenceIndex, perceptual_votes, top_votes


def label_estimate(perceptual, num_labels):
    return top_votes(perceptual_votes(perceptual, num_labels), 1)[0]


def planner_teacher(sample, index: EvidenceIndex, perceptual, rng) -> np.ndarray:
    """Supportive, confusing and countering queries as one flat action.

    sup is the sample's own text (or the estimated label's text centroid when
    text is missing), conf the nearest text centroid of another label, count the
    text centroid of a random label that is neither.
    """
    C = index.num_labels
    centroids = index.label_centroids("t")
    estimate = label_estimate(perceptual, C)

    sup = sample.x_t if sample.has("t") else centroids[estimate]
    others = [c for c in range(C) if c != estimate]
    distances = [np.linalg.norm(centroids[c] - sup) for c in others]
    confusing = others[int(np.argmin(distances))]

    remaining = [c for c in others if c != confusing] or others
    countering = remaining[int(rng.integers(len(remaining)))]
    return np.concatenate([sup, centroids[confusing], centroids[countering]])


def filter_teacher(candidates, perceptual, num_labels) -> np.ndarray:
    keep = set(top_votes(perceptual_votes(perceptual, num_labels), 2))
    return np.array([item.label in keep for item in candidates], dtype=bool)


def generator_teacher(kept, perceptual, num_labels, gold=None, mode="vote") -> int:
    if mode == "oracle":
        return int(gold)
    if kept:
        return int(np.argmax(np.bincount([item.label for item in kept], minlength=num_labels)))
    return label_estimate(perceptual, num_labels)
