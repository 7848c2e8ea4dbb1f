import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from larloss.errors import BadKError, DegenerateBatchError, EqualLabelsError, ZeroVectorError
from larloss.losses import (
    EmbeddingBatch,
    LossKind,
    TripletMargin,
    constellation_loss,
    constellation_negative_labels,
    dml_loss,
    finite_diff_gradient,
    label_distance,
    lar_loss,
    max_relative_error,
    mc_n_pair_loss,
    normalize,
    triplet_loss,
)
from oracles import naive_constellation, naive_lar, naive_mcnpair, naive_triplet, smart_batch


SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_losses_match_naive_oracles(seed):
    batch = smart_batch(seed, num_labels=6, dim=4 + seed % 5)
    assert triplet_loss(batch, 0.5).value == pytest.approx(naive_triplet(batch, 0.5), abs=1e-10)
    assert mc_n_pair_loss(batch).value == pytest.approx(naive_mcnpair(batch), abs=1e-10)
    assert constellation_loss(batch, 2).value == pytest.approx(naive_constellation(batch, 2), abs=1e-10)
    assert lar_loss(batch).value == pytest.approx(naive_lar(batch), abs=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["triplet", "mcnpair", "constellation", "lar"])
def test_analytic_gradients_match_finite_differences(seed, kind):
    batch = smart_batch(100 + seed, num_labels=4, dim=5)

    def fn(b):
        return dml_loss(kind, b, margin=1.0, constellation_k=2)

    err = max_relative_error(fn(batch).grads, finite_diff_gradient(fn, batch, h=1e-5))
    assert err < 1e-4


def test_normalize_examples():
    np.testing.assert_allclose(normalize(np.array([[3.0, 4.0]])), [[0.6, 0.8]])
    square = np.array([[1.0, 0.0], [0.0, -1.0]])
    np.testing.assert_array_equal(normalize(square), square)
    with pytest.raises(ZeroVectorError) as info:
        normalize(np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert info.value.row == 1


def test_label_distance_examples():
    assert label_distance(0, 5, 6) == 1
    assert label_distance(1, 4, 6) == 3
    assert label_distance(0, 2, 6) == 2
    with pytest.raises(EqualLabelsError):
        label_distance(2, 2, 6)


def test_label_distance_exhaustive():
    for num_labels in range(2, 65):
        for a in range(num_labels):
            for b in range(num_labels):
                if a == b:
                    continue
                d = label_distance(a, b, num_labels)
                assert d == label_distance(b, a, num_labels)
                assert 1 <= d <= num_labels // 2


def test_triplet_examples():
    labels = [0, 0, 1]
    same = EmbeddingBatch([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], labels, 2)
    assert triplet_loss(same, TripletMargin(1.0)).value == pytest.approx(1.0)
    apart = EmbeddingBatch([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], labels, 2)
    out = triplet_loss(apart, 1.0)
    assert out.value == 0.0
    np.testing.assert_array_equal(out.grads, 0.0)
    np.testing.assert_array_equal(finite_diff_gradient(lambda b: triplet_loss(b, 1.0), apart), 0.0)


def test_mcnpair_closed_forms():
    labels = np.repeat(np.arange(4), 2)
    same = EmbeddingBatch(np.ones((8, 3)), labels, 4)
    assert mc_n_pair_loss(same).value == pytest.approx(math.log(3 + 1), abs=1e-12)
    # anchor/positive along +x, every other label along -x: exponent -1 - 1
    vectors = np.array([[1.0, 0.0]] * 2 + [[-1.0, 0.0]] * 2)
    out = mc_n_pair_loss(EmbeddingBatch(vectors, [0, 0, 1, 1], 2))
    assert out.value == pytest.approx(math.log(1 + math.exp(-2.0)), abs=1e-12)


def test_constellation_with_all_negatives_equals_mcnpair():
    for seed in range(5):
        batch = smart_batch(seed)
        assert constellation_loss(batch, 5).value == pytest.approx(mc_n_pair_loss(batch).value, abs=1e-10)


def test_constellation_identical_and_bad_k():
    batch = EmbeddingBatch(np.ones((12, 2)), np.repeat(np.arange(6), 2), 6)
    assert constellation_loss(batch, 3).value == pytest.approx(math.log(4), abs=1e-12)
    for k in (0, 6):
        with pytest.raises(BadKError):
            constellation_loss(batch, k)


def test_constellation_negative_selection_ties_go_to_smaller_label():
    # labels 1 and 5 are both one step from 0 on a ring of 6
    assert constellation_negative_labels(0, [1, 2, 3, 4, 5], 6, 2) == [1, 5]
    assert constellation_negative_labels(0, [1, 2, 3, 4, 5], 6, 3) == [1, 5, 2]
    assert constellation_negative_labels(3, [0, 1, 2, 4, 5], 6, 1) == [2]


def test_lar_neighbour_term_ignores_angle():
    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(3, 3))
    batch = EmbeddingBatch(vectors, [0, 0, 1], 6)
    moved = vectors.copy()
    moved[2] = rng.normal(size=3)
    assert lar_loss(batch).value == pytest.approx(lar_loss(batch.with_vectors(moved)).value, abs=1e-14)


def test_lar_identical_embeddings():
    batch = EmbeddingBatch(np.ones((12, 4)), np.repeat(np.arange(6), 2), 6)
    expected = math.log(1 + sum(math.exp(math.log(d) - 1) for d in (1, 2, 3, 2, 1)))
    assert lar_loss(batch).value == pytest.approx(expected, abs=1e-12)


def test_lar_two_labels_closed_form():
    for seed in range(5):
        batch = smart_batch(seed, num_labels=2, dim=3)
        u = normalize(batch.vectors)
        terms = []
        for a in range(4):
            p = next(j for j in range(4) if j != a and batch.labels[j] == batch.labels[a])
            terms.append(math.log(1 + math.exp(-u[a] @ u[p])))
        assert lar_loss(batch).value == pytest.approx(np.mean(terms), abs=1e-10)


@pytest.mark.parametrize("kind", ["triplet", "mcnpair", "constellation", "lar"])
def test_rotation_and_permutation_invariance(kind):
    rng = np.random.default_rng(3)
    batch = smart_batch(7)
    base = dml_loss(kind, batch, constellation_k=3).value
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    rotated = batch.with_vectors(batch.vectors @ q)
    assert abs(dml_loss(kind, rotated, constellation_k=3).value - base) < 1e-8
    perm = _order_preserving_permutation(batch.labels, rng)
    shuffled = EmbeddingBatch(batch.vectors[perm], batch.labels[perm], 6)
    assert abs(dml_loss(kind, shuffled, constellation_k=3).value - base) < 1e-8


def _order_preserving_permutation(labels, rng):
    # shuffle positions but keep each label's first sample ahead of its second
    perm = rng.permutation(len(labels))
    for lab in np.unique(labels):
        slots = np.flatnonzero(labels[perm] == lab)
        perm[slots] = np.sort(perm[slots])
    return perm


def test_triplet_invariant_under_any_permutation():
    rng = np.random.default_rng(5)
    batch = smart_batch(11)
    perm = rng.permutation(12)
    shuffled = EmbeddingBatch(batch.vectors[perm], batch.labels[perm], 6)
    assert abs(triplet_loss(shuffled).value - triplet_loss(batch).value) < 1e-12


def test_swapping_a_labels_samples_changes_lse_pairing():
    # the positive-role sample of each label is its second occurrence
    batch = smart_batch(11)
    swapped = batch.vectors.copy()
    first, second = np.flatnonzero(batch.labels == 3)
    swapped[[first, second]] = swapped[[second, first]]
    assert abs(mc_n_pair_loss(batch.with_vectors(swapped)).value - mc_n_pair_loss(batch).value) > 1e-6


def test_degenerate_batches():
    with pytest.raises(DegenerateBatchError):
        lar_loss(EmbeddingBatch(np.ones((2, 2)), [1, 1], 3))
    with pytest.raises(DegenerateBatchError):
        mc_n_pair_loss(EmbeddingBatch(np.eye(3), [0, 1, 2], 3))
    with pytest.raises(DegenerateBatchError):
        triplet_loss(EmbeddingBatch(np.eye(3), [0, 0, 0], 3))


def test_finite_diff_constant_and_step_bounds():
    batch = smart_batch(0, num_labels=2, dim=2)

    def constant(b):
        return type(lar_loss(b))(1.5, np.zeros_like(b.vectors), LossKind.LAR)

    np.testing.assert_array_equal(finite_diff_gradient(constant, batch), 0.0)
    with pytest.raises(ValueError):
        finite_diff_gradient(lar_loss, batch, h=1e-2)


def test_lse_is_stable_for_large_offsets():
    batch = smart_batch(1)
    out = lar_loss(batch, multiplier_offset=1e6)
    assert np.isfinite(out.value) and np.all(np.isfinite(out.grads))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), num_labels=st.integers(2, 8), dim=st.integers(2, 6))
def test_losses_are_non_negative_and_finite(seed, num_labels, dim):
    batch = smart_batch(seed, num_labels, dim)
    for kind in ("triplet", "mcnpair", "constellation", "lar"):
        out = dml_loss(kind, batch, constellation_k=1)
        assert out.value >= 0.0
        assert out.grads.shape == batch.vectors.shape
        assert np.all(np.isfinite(out.grads))
