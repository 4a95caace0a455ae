"""Triplet generation, the relative-distance hinge loss and its output gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DatasetError, ParameterError, StateError

MARGIN = 1.0


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass
class TripletBatch:
    """Triplets over a list of distinct images.

    ``triplets`` is an int array ``[T, 3]`` of (anchor, positive, negative)
    positions into ``distinct_images``, which in turn indexes the dataset.
    """

    distinct_images: np.ndarray
    triplets: np.ndarray
    class_sample: np.ndarray

    def __len__(self):
        return len(self.triplets)

    def __iter__(self):
        return (Triplet(*map(int, t)) for t in self.triplets)

    def dataset_triplets(self):
        """Triplets expressed with dataset image indices."""
        return self.distinct_images[self.triplets]

    def validate(self, labels):
        labels = np.asarray(labels)
        t = self.dataset_triplets()
        a, p, n = labels[t[:, 0]], labels[t[:, 1]], labels[t[:, 2]]
        if np.any(t[:, 0] == t[:, 1]) or np.any(a != p) or np.any(a == n):
            raise DatasetError("batch contains a triplet violating the label constraints")
        used = np.zeros(len(self.distinct_images), dtype=bool)
        used[self.triplets.ravel()] = True
        if not used.all():
            raise DatasetError("batch lists a distinct image that no triplet references")


@dataclass
class ViolationReport:
    total_triplets: int
    margin_violations: int
    order_violations: int
    loss: float


def count_all_triplets(num_classes: int, per_class: int) -> int:
    """Number of ordered (anchor, positive, negative) triplets in a balanced set."""
    M, N = num_classes, per_class
    if M < 2 or N < 2:
        raise ParameterError(f"need at least 2 classes with 2 images each, got M={M}, N={N}")
    return N * (N - 1) * (M - 1) * N * M


def generate_batch(labels, num_classes_per_batch: int, triplets_per_batch: int, rng) -> TripletBatch:
    """Sample classes, then build triplets anchored on every image of those classes.

    Triplets are spread evenly over the (class, anchor) pairs in sorted order,
    the first ``triplets_per_batch % pairs`` pairs taking one extra.  Each slot
    draws its positive uniformly from the anchor's class and its negative
    uniformly from the other selected classes (duplicates allowed).
    """
    labels = np.asarray(labels)
    if num_classes_per_batch < 2:
        raise ParameterError("a batch needs at least 2 classes")
    if triplets_per_batch < 1:
        raise ParameterError("a batch needs at least 1 triplet")
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= 2]
    if len(eligible) < num_classes_per_batch:
        raise DatasetError(
            f"need {num_classes_per_batch} classes with >= 2 images, dataset has {len(eligible)}"
        )
    chosen = np.sort(rng.choice(eligible, size=num_classes_per_batch, replace=False))
    members = {c: np.flatnonzero(labels == c) for c in chosen}
    pairs = [(c, img) for c in chosen for img in members[c]]
    base, extra = divmod(triplets_per_batch, len(pairs))

    rows = []
    for slot, (c, anchor) in enumerate(pairs):
        count = base + (1 if slot < extra else 0)
        if count == 0:
            continue
        others = members[c][members[c] != anchor]
        negatives = np.concatenate([members[o] for o in chosen if o != c])
        pos = others[rng.integers(len(others), size=count)]
        neg = negatives[rng.integers(len(negatives), size=count)]
        rows.append(np.column_stack([np.full(count, anchor), pos, neg]))
    dataset_triplets = np.concatenate(rows).astype(np.int64)
    distinct, local = np.unique(dataset_triplets, return_inverse=True)
    return TripletBatch(
        distinct_images=distinct,
        triplets=local.reshape(dataset_triplets.shape).astype(np.int64),
        class_sample=chosen,
    )


def _check_embeddings(embeddings, batch):
    if embeddings is None or len(embeddings) != len(batch.distinct_images):
        have = 0 if embeddings is None else len(embeddings)
        raise StateError(f"need one embedding per distinct image ({len(batch.distinct_images)}), got {have}")
    return np.asarray(embeddings, dtype=np.float64)


def distance_gaps(embeddings, batch):
    """Per-triplet ``d2(anchor, negative) - d2(anchor, positive)``."""
    e = _check_embeddings(embeddings, batch)
    t = batch.triplets
    ei, ej, ek = e[t[:, 0]], e[t[:, 1]], e[t[:, 2]]
    return np.sum((ei - ek) ** 2, axis=1) - np.sum((ei - ej) ** 2, axis=1)


def triplet_loss(embeddings, batch):
    """Summed hinge ``max(0, 1 - gap)`` and the matching violation report."""
    gaps = distance_gaps(embeddings, batch)
    loss = float(np.sum(np.maximum(0.0, MARGIN - gaps)))
    report = ViolationReport(
        total_triplets=len(gaps),
        margin_violations=int(np.sum(gaps < MARGIN)),
        order_violations=int(np.sum(gaps <= 0)),
        loss=loss,
    )
    return loss, report


def output_gradients(embeddings, batch):
    """Gradient of the batch loss with respect to each distinct image's embedding.

    Every active triplet (gap < 1) contributes ``2(e_k - e_j)`` to its anchor,
    ``-2(e_i - e_j)`` to its positive and ``2(e_i - e_k)`` to its negative.
    """
    e = _check_embeddings(embeddings, batch)
    t = batch.triplets[distance_gaps(e, batch) < MARGIN]
    ei, ej, ek = e[t[:, 0]], e[t[:, 1]], e[t[:, 2]]
    grads = np.zeros_like(e)
    np.add.at(grads, t[:, 0], 2.0 * (ek - ej))
    np.add.at(grads, t[:, 1], -2.0 * (ei - ej))
    np.add.at(grads, t[:, 2], 2.0 * (ei - ek))
    return grads


def count_violations(embeddings, batch, mode: str = "order") -> int:
    gaps = distance_gaps(embeddings, batch)
    if mode == "order":
        return int(np.sum(gaps <= 0))
    if mode == "margin":
        return int(np.sum(gaps < MARGIN))
    raise ParameterError(f"unknown violation mode {mode!r}")


def write_batch(batch: TripletBatch, path, ids=None):
    """Dump ``anchor_id positive_id negative_id`` lines (dataset indices or ``ids``)."""
    with open(path, "w") as fh:
        for a, p, n in batch.dataset_triplets():
            if ids is not None:
                a, p, n = ids[a], ids[p], ids[n]
            fh.write(f"{a} {p} {n}\n")
