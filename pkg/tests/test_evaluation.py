import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dari.data import dataset_from_arrays
from dari.errors import DatasetError, ParameterError, ProtocolError
from dari.evaluation import (
    CMCCurve,
    GalleryProbeSplit,
    ablation_compare,
    cmc_curve,
    cmc_from_embeddings,
    rank_of_match,
    split_gallery_probe,
    write_cmc_csv,
)
from dari.model import ArchConfig
from dari.tensor import make_rng
from dari.trainer import TrainConfig, init_params


def two_view_labels(identities, per_view):
    labels = np.repeat(np.arange(identities), 2 * per_view)
    views = np.tile(np.repeat([0, 1], per_view), identities)
    return labels, views


def oracle_rank(probe, gallery, gallery_labels, true_identity):
    d = [float(np.sum((g - probe) ** 2)) for g in gallery]
    order = sorted(range(len(gallery)), key=lambda i: (d[i], i))
    for pos, i in enumerate(order, start=1):
        if gallery_labels[i] == true_identity:
            return pos


# -- splits ------------------------------------------------------------------


def test_split_counts_hundred_identities():
    labels, views = two_view_labels(100, 2)
    split = split_gallery_probe(labels, views, make_rng(0))
    assert len(split.gallery) == 100
    assert len(split.probes) == 200
    split.validate(labels)


def test_two_view_probes_come_from_other_view():
    labels, views = two_view_labels(10, 3)
    split = split_gallery_probe(labels, views, make_rng(1))
    for g in split.gallery:
        probes = split.probes[labels[split.probes] == labels[g]]
        assert len(probes) == 3
        assert np.all(views[probes] != views[g])


def test_single_pool_probes_are_remaining_images():
    labels = np.repeat(np.arange(6), 4)
    split = split_gallery_probe(labels, np.zeros_like(labels), make_rng(2), "single-pool")
    assert len(split.gallery) == 6 and len(split.probes) == 18
    split.validate(labels)


def test_split_is_deterministic_per_seed():
    labels, views = two_view_labels(12, 2)
    a = split_gallery_probe(labels, views, make_rng(5))
    b = split_gallery_probe(labels, views, make_rng(5))
    assert np.array_equal(a.gallery, b.gallery) and np.array_equal(a.probes, b.probes)


def test_gallery_choice_is_spread_over_images():
    labels, views = two_view_labels(1, 2)
    labels = np.concatenate([labels, labels + 1])
    views = np.concatenate([views, views])
    rng = make_rng(0)
    picks = {int(split_gallery_probe(labels, views, rng).gallery[0]) for _ in range(200)}
    assert picks == {0, 1, 2, 3}


@pytest.mark.parametrize("style", ["two-view", "single-pool"])
def test_identity_with_single_image_rejected(style):
    labels = np.array([0, 0, 1])
    views = np.array([0, 1, 0])
    with pytest.raises(DatasetError, match="1"):
        split_gallery_probe(labels, views, make_rng(0), style)


def test_unknown_split_style():
    with pytest.raises(ParameterError):
        split_gallery_probe([0, 0, 1, 1], [0, 1, 0, 1], make_rng(0), "multi-shot")


def test_split_validate_catches_overlap_and_duplicates():
    labels = np.array([0, 0, 1, 1])
    with pytest.raises(ProtocolError):
        GalleryProbeSplit(np.array([0, 2]), np.array([0, 1])).validate(labels)
    with pytest.raises(ProtocolError):
        GalleryProbeSplit(np.array([0, 1]), np.array([2])).validate(labels)


# -- ranks -------------------------------------------------------------------


def test_exact_match_is_rank_one():
    gallery = np.eye(4)
    assert rank_of_match(gallery[2], gallery, [0, 1, 2, 3], 2) == 1


@pytest.mark.parametrize("true_pos", range(5))
def test_equidistant_probe_ranks_by_gallery_index(true_pos):
    gallery = np.eye(5)
    probe = np.zeros(5)
    assert rank_of_match(probe, gallery, np.arange(5), true_pos) == true_pos + 1


def test_missing_identity_raises():
    with pytest.raises(ProtocolError):
        rank_of_match(np.zeros(2), np.eye(2), [0, 1], 7)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), g=st.integers(1, 20), dim=st.integers(1, 4), quantize=st.booleans())
def test_rank_matches_sort_oracle(seed, g, dim, quantize):
    rng = np.random.default_rng(seed)
    gallery = rng.normal(size=(g, dim))
    probe = rng.normal(size=dim)
    if quantize:  # coarse grid to force distance ties
        gallery, probe = np.round(gallery), np.round(probe)
    labels = rng.permutation(g)
    true = labels[rng.integers(g)]
    assert rank_of_match(probe, gallery, labels, true) == oracle_rank(probe, gallery, labels, true)


# -- curves ------------------------------------------------------------------


def test_identical_embeddings_give_n_over_g():
    labels, views = two_view_labels(5, 2)
    emb = np.ones((len(labels), 3))
    rng = make_rng(0)
    for _ in range(5):
        split = split_gallery_probe(labels, views, rng)
        rates = cmc_from_embeddings(emb, labels, split)
        oracle = np.zeros(5)
        for p in split.probes:
            r = oracle_rank(emb[p], emb[split.gallery], labels[split.gallery], labels[p])
            oracle[r - 1:] += 1
        oracle /= len(split.probes)
        assert np.array_equal(rates, oracle)
        assert np.allclose(rates, np.arange(1, 6) / 5)


def test_perfect_embeddings_rank_one():
    labels, views = two_view_labels(6, 2)
    emb = np.eye(6)[labels]
    split = split_gallery_probe(labels, views, make_rng(0))
    assert cmc_from_embeddings(emb, labels, split)[0] == 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_cmc_invariant_to_gallery_order(seed):
    rng = np.random.default_rng(seed)
    labels, views = two_view_labels(8, 2)
    emb = rng.normal(size=(len(labels), 5))
    split = split_gallery_probe(labels, views, make_rng(seed % 1000))
    perm = rng.permutation(len(split.gallery))
    shuffled = GalleryProbeSplit(split.gallery[perm], split.probes)
    assert np.array_equal(cmc_from_embeddings(emb, labels, split), cmc_from_embeddings(emb, labels, shuffled))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), ids=st.integers(2, 12))
def test_cmc_curves_are_valid(seed, ids):
    rng = np.random.default_rng(seed)
    labels, views = two_view_labels(ids, 2)
    emb = rng.normal(size=(len(labels), 3))
    curve = CMCCurve(cmc_from_embeddings(emb, labels, split_gallery_probe(labels, views, make_rng(seed % 97))))
    assert curve.is_valid()
    assert len(curve.rates) == ids


def test_rank_clamps_to_gallery_size():
    curve = CMCCurve([0.5, 1.0])
    assert curve.rank(1) == 0.5 and curve.rank(10) == 1.0


def small_dataset(ids=5, seed=0):
    rng = np.random.default_rng(seed)
    labels, views = two_view_labels(ids, 2)
    images = rng.uniform(size=(len(labels), 3, 18, 14))
    return dataset_from_arrays(images, [f"p{l}" for l in labels], ["ab"[v] for v in views])


def test_cmc_curve_is_deterministic_and_valid():
    arch = ArchConfig.tiny()
    params = init_params(arch, make_rng(0))
    ds = small_dataset()
    a = cmc_curve(params, ds, num_splits=3, rng=make_rng(1))
    b = cmc_curve(params, ds, num_splits=3, rng=make_rng(1))
    assert a.is_valid()
    assert np.array_equal(a.rates, b.rates)


def test_cmc_curve_rejects_zero_splits():
    with pytest.raises(ParameterError):
        cmc_curve(None, small_dataset(), num_splits=0)


def test_ablation_returns_two_valid_curves():
    ds = small_dataset()
    config = TrainConfig(classes_per_batch=3, triplets_per_batch=12, max_iterations=2, learning_rate=1e-4, stop_violation_threshold=0)
    joint, feature_only, (js, fs) = ablation_compare(ds, ds, config, ArchConfig.tiny(), num_splits=2)
    assert joint.is_valid() and feature_only.is_valid()
    assert js.iteration == fs.iteration == 2


def test_write_cmc_csv(tmp_path):
    path = tmp_path / "cmc.csv"
    write_cmc_csv(CMCCurve([0.25, 0.75, 1.0]), path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["rank", "rate"]
    assert [(int(r), float(v)) for r, v in rows[1:]] == [(1, 0.25), (2, 0.75), (3, 1.0)]
