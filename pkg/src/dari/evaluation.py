"""Single-shot CMC evaluation under the learned distance."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import DatasetError, ParameterError, ProtocolError
from .model import forward
from .tensor import make_rng
from .trainer import prepare_images, train_loop


@dataclass
class GalleryProbeSplit:
    gallery: np.ndarray  # dataset indices, one per identity, ascending identity order
    probes: np.ndarray  # dataset indices

    def validate(self, labels):
        labels = np.asarray(labels)
        g_ids = labels[self.gallery]
        if len(np.unique(g_ids)) != len(g_ids):
            raise ProtocolError("gallery holds more than one image of an identity")
        if np.intersect1d(self.gallery, self.probes).size:
            raise ProtocolError("gallery and probe sets overlap")
        if not np.isin(labels[self.probes], g_ids).all():
            raise ProtocolError("a probe identity is missing from the gallery")


@dataclass
class CMCCurve:
    rates: np.ndarray  # rates[n - 1] is the rank-n rate

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=np.float64)

    def rank(self, n):
        return float(self.rates[min(n, len(self.rates)) - 1])

    def is_valid(self):
        r = self.rates
        return bool(np.all(np.diff(r) >= 0) and r[-1] == 1.0 and np.all((r >= 0) & (r <= 1)))


def split_gallery_probe(labels, views, rng, split_style="two-view") -> GalleryProbeSplit:
    """One random gallery image per identity.

    Two-view: probes are that identity's images from the other view(s).
    Single-pool: probes are all of the identity's remaining images.
    """
    labels = np.asarray(labels)
    views = np.asarray(views)
    gallery, probes = [], []
    for ident in np.unique(labels):
        members = np.flatnonzero(labels == ident)
        if split_style == "two-view":
            if len(np.unique(views[members])) < 2:
                raise DatasetError(f"identity {ident} does not have images in two views")
            g = members[rng.integers(len(members))]
            rest = members[views[members] != views[g]]
        elif split_style == "single-pool":
            if len(members) < 2:
                raise DatasetError(f"identity {ident} has fewer than 2 images")
            g = members[rng.integers(len(members))]
            rest = members[members != g]
        else:
            raise ParameterError(f"unknown split_style {split_style!r}")
        gallery.append(g)
        probes.extend(rest)
    return GalleryProbeSplit(np.array(gallery), np.sort(np.array(probes)))


def rank_of_match(probe_embedding, gallery_embeddings, gallery_labels, true_identity) -> int:
    """1-based rank of the true identity's gallery image; ties go to the lower gallery index."""
    gallery_labels = np.asarray(gallery_labels)
    hits = np.flatnonzero(gallery_labels == true_identity)
    if hits.size == 0:
        raise ProtocolError(f"identity {true_identity} is not in the gallery")
    true_pos = hits[0]
    d = np.sum((np.asarray(gallery_embeddings) - probe_embedding) ** 2, axis=1)
    closer = np.sum(d < d[true_pos])
    tied_before = np.sum(d[:true_pos] == d[true_pos])
    return int(closer + tied_before + 1)


def cmc_from_embeddings(embeddings, labels, split: GalleryProbeSplit) -> np.ndarray:
    """Fraction of probes matched within rank n, for n = 1..G."""
    labels = np.asarray(labels)
    g_emb = embeddings[split.gallery]
    g_lab = labels[split.gallery]
    counts = np.zeros(len(split.gallery))
    for p in split.probes:
        counts[rank_of_match(embeddings[p], g_emb, g_lab, labels[p]) - 1] += 1
    return np.cumsum(counts) / len(split.probes)


def embed_dataset(params, dataset, chunk_size=64):
    """Embeddings of every image under evaluation-mode (center) crops."""
    out = []
    for start in range(0, len(dataset), chunk_size):
        imgs = prepare_images(dataset.images[start : start + chunk_size], params.arch, training=False)
        out.append(forward(params, imgs)[0])
    return np.concatenate(out)


def cmc_curve(params, dataset, num_splits: int = 10, rng=None, embeddings=None) -> CMCCurve:
    """Average the CMC over ``num_splits`` random gallery/probe splits."""
    if num_splits < 1:
        raise ParameterError("num_splits must be >= 1")
    rng = rng if rng is not None else make_rng(0)
    if embeddings is None:
        embeddings = embed_dataset(params, dataset)
    rates = []
    for _ in range(num_splits):
        split = split_gallery_probe(dataset.labels, dataset.views, rng, dataset.split_style)
        rates.append(cmc_from_embeddings(embeddings, dataset.labels, split))
    return CMCCurve(np.mean(rates, axis=0))


def ablation_compare(train_set, eval_set, config, arch, num_splits=10, seed=0):
    """Train the joint model and a metric-free model with the same seed; return both CMCs.

    The metric-free model drops the final linear layer, so distances are
    squared Euclidean distances between normalized features.
    """
    joint_params, joint_state = train_loop(train_set, config, arch)
    feat_params, feat_state = train_loop(train_set, config, replace(arch, metric_dim=0))
    joint = cmc_curve(joint_params, eval_set, num_splits, make_rng(seed))
    feature_only = cmc_curve(feat_params, eval_set, num_splits, make_rng(seed))
    return joint, feature_only, (joint_state, feat_state)


def write_cmc_csv(curve: CMCCurve, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "rate"])
        for n, rate in enumerate(curve.rates, start=1):
            writer.writerow([n, repr(float(rate))])
