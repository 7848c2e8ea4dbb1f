"""Deep metric learning losses on unit-normalised embeddings.

Every loss accepts raw embedding rows, normalises them internally and
returns gradients with respect to the raw rows, so the normalisation
Jacobian is always part of the analytic gradient.

Role assignment inside a batch: a label that occurs twice forms an
anchor/positive pair, and each of the two samples serves once as the
anchor (the loss is the mean over both orderings).  A label that occurs
once can only act as a negative.  For the log-sum-exp losses the
negative for another label is that label's sample in the *positive*
role of the current ordering, one negative per label (the N-pair layout).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BadKError, DegenerateBatchError, EqualLabelsError, ZeroVectorError

DEFAULT_MARGIN = 1.0


class LossKind(str, enum.Enum):
    TRIPLET = "triplet"
    MCNPAIR = "mcnpair"
    CONSTELLATION = "constellation"
    LAR = "lar"
    MSE = "mse"
    COMBINED = "combined"


@dataclass(frozen=True)
class EmbeddingBatch:
    vectors: np.ndarray
    labels: np.ndarray
    num_labels: int

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vectors.shape}")
        if labels.shape != (vectors.shape[0],):
            raise ValueError(
                f"labels length {labels.shape} does not match {vectors.shape[0]} rows"
            )
        if self.num_labels < 2:
            raise ValueError(f"num_labels must be >= 2, got {self.num_labels}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_labels):
            raise ValueError(f"labels must lie in [0, {self.num_labels - 1}]")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingBatch":
        return EmbeddingBatch(vectors, self.labels, self.num_labels)


@dataclass
class LossOutput:
    value: float
    grads: np.ndarray
    kind: LossKind


@dataclass(frozen=True)
class TripletMargin:
    m: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"margin must be positive, got {self.m}")


def normalize(vectors: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    bad = np.flatnonzero(~(norms > 1e-12))
    if bad.size:
        raise ZeroVectorError(int(bad[0]))
    return vectors / norms[:, None]


def _normalize_with_norms(vectors):
    unit = normalize(vectors)
    return unit, np.linalg.norm(vectors, axis=1)


def _normalize_backward(unit, norms, grad_unit):
    # d(x/|x|)/dx = (I - u u^T) / |x|
    radial = np.sum(unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - unit * radial) / norms[:, None]


def label_distance(t_a: int, t_n: int, num_labels: int) -> int:
    """Circular distance between two labels on a ring of ``num_labels``."""
    if not (0 <= t_a < num_labels and 0 <= t_n < num_labels):
        raise ValueError(f"labels ({t_a}, {t_n}) outside [0, {num_labels - 1}]")
    if t_a == t_n:
        raise EqualLabelsError(int(t_a))
    d = abs(int(t_a) - int(t_n))
    return min(d, abs(num_labels - d))


@dataclass(frozen=True)
class _Roles:
    anchors: np.ndarray  # (T,) sample index of each anchor term
    positives: np.ndarray  # (T,)
    # (T, L_b - 1) one representative sample per other label, label ascending
    label_negatives: np.ndarray
    label_negative_labels: np.ndarray
    # (T, N - 2) every sample of every other label, index ascending
    all_negatives: np.ndarray


def _assign_roles(labels: np.ndarray) -> _Roles:
    occurrences: dict[int, list[int]] = {}
    for i, lab in enumerate(labels.tolist()):
        occurrences.setdefault(lab, []).append(i)
    for lab, idx in occurrences.items():
        if len(idx) > 2:
            raise DegenerateBatchError(
                f"label {lab} occurs {len(idx)} times; smart batches hold two per label"
            )
    if len(occurrences) < 2:
        raise DegenerateBatchError("batch needs at least two distinct labels")
    if not any(len(idx) == 2 for idx in occurrences.values()):
        raise DegenerateBatchError("no label has an anchor/positive pair")

    anchors, positives, label_negs, label_neg_labels, all_negs = [], [], [], [], []
    sorted_labels = sorted(occurrences)
    for i, lab in enumerate(labels.tolist()):
        idx = occurrences[lab]
        if len(idx) != 2:
            continue
        order = idx.index(i)
        anchors.append(i)
        positives.append(idx[1 - order])
        reps, rep_labels = [], []
        for other in sorted_labels:
            if other == lab:
                continue
            other_idx = occurrences[other]
            reps.append(other_idx[1 - order] if len(other_idx) == 2 else other_idx[0])
            rep_labels.append(other)
        # keep label order alongside the samples, then sort by sample index
        perm = np.argsort(reps, kind="stable")
        label_negs.append(np.asarray(reps)[perm])
        label_neg_labels.append(np.asarray(rep_labels)[perm])
        all_negs.append([j for j, other in enumerate(labels.tolist()) if other != lab])
    return _Roles(
        anchors=np.asarray(anchors, dtype=np.int64),
        positives=np.asarray(positives, dtype=np.int64),
        label_negatives=np.asarray(label_negs, dtype=np.int64),
        label_negative_labels=np.asarray(label_neg_labels, dtype=np.int64),
        all_negatives=np.asarray(all_negs, dtype=np.int64),
    )


def _log1p_sum_exp(unit, anchors, positives, negatives, weights):
    """Mean over terms of log(1 + sum_k exp(w_k <a, n_k> - <a, p>)).

    Returns the value and its gradient with respect to the unit vectors.
    """
    n_terms = anchors.shape[0]
    sims = unit @ unit.T
    ap = sims[anchors, positives]
    an = sims[anchors[:, None], negatives]
    x = weights * an - ap[:, None]
    shift = np.maximum(x.max(axis=1), 0.0)
    e = np.exp(x - shift[:, None])
    z = np.exp(-shift) + e.sum(axis=1)
    value = float(np.mean(shift + np.log(z)))

    soft = e / z[:, None] / n_terms
    coef = np.zeros_like(sims)
    np.add.at(coef, (np.broadcast_to(anchors[:, None], negatives.shape), negatives), weights * soft)
    np.add.at(coef, (anchors, positives), -soft.sum(axis=1))
    grad_unit = (coef + coef.T) @ unit
    return value, grad_unit


def triplet_loss(batch: EmbeddingBatch, margin: TripletMargin | float = DEFAULT_MARGIN) -> LossOutput:
    """Hinge on squared distances, averaged over every (anchor, positive, negative)."""
    m = margin.m if isinstance(margin, TripletMargin) else TripletMargin(float(margin)).m
    roles = _assign_roles(batch.labels)
    unit, norms = _normalize_with_norms(batch.vectors)
    a, p, negs = roles.anchors, roles.positives, roles.all_negatives

    d_pos = unit[a] - unit[p]
    d_neg = unit[a][:, None, :] - unit[negs]
    hinge = np.sum(d_pos**2, axis=1)[:, None] - np.sum(d_neg**2, axis=2) + m
    active = hinge > 0
    n_triples = hinge.size
    value = float(np.sum(np.where(active, hinge, 0.0)) / n_triples)

    g = active / n_triples
    g_rows = g.sum(axis=1)[:, None]
    grad_unit = np.zeros_like(unit)
    np.add.at(grad_unit, a, 2.0 * d_pos * g_rows - 2.0 * np.einsum("tk,tkd->td", g, d_neg))
    np.add.at(grad_unit, p, -2.0 * d_pos * g_rows)
    np.add.at(grad_unit, negs, 2.0 * g[..., None] * d_neg)
    grads = _normalize_backward(unit, norms, grad_unit)
    return LossOutput(value, grads, LossKind.TRIPLET)


def mc_n_pair_loss(batch: EmbeddingBatch) -> LossOutput:
    roles = _assign_roles(batch.labels)
    unit, norms = _normalize_with_norms(batch.vectors)
    negs = roles.label_negatives
    value, grad_unit = _log1p_sum_exp(
        unit, roles.anchors, roles.positives, negs, np.ones(negs.shape)
    )
    return LossOutput(value, _normalize_backward(unit, norms, grad_unit), LossKind.MCNPAIR)


def constellation_negative_labels(anchor_label: int, candidates, num_labels: int, k: int) -> list[int]:
    """The ``k`` candidate labels closest to the anchor on the label ring.

    Ties on circular distance go to the smaller label value.
    """
    candidates = sorted(int(c) for c in candidates)
    if not 1 <= k <= len(candidates):
        raise BadKError(f"K={k} outside [1, {len(candidates)}] available negative labels")
    ranked = sorted(candidates, key=lambda c: (label_distance(anchor_label, c, num_labels), c))
    return ranked[:k]


def constellation_loss(batch: EmbeddingBatch, k: int) -> LossOutput:
    roles = _assign_roles(batch.labels)
    unit, norms = _normalize_with_norms(batch.vectors)
    available = roles.label_negatives.shape[1]
    if not 1 <= k <= available:
        raise BadKError(f"K={k} outside [1, {available}] available negative labels")

    negs = np.empty((roles.anchors.size, k), dtype=np.int64)
    for t, anchor in enumerate(roles.anchors):
        anchor_label = int(batch.labels[anchor])
        neg_labels = roles.label_negative_labels[t]
        chosen = set(constellation_negative_labels(anchor_label, neg_labels, batch.num_labels, k))
        keep = np.array([lab in chosen for lab in neg_labels.tolist()])
        negs[t] = roles.label_negatives[t][keep]
    value, grad_unit = _log1p_sum_exp(unit, roles.anchors, roles.positives, negs, np.ones(negs.shape))
    return LossOutput(value, _normalize_backward(unit, norms, grad_unit), LossKind.CONSTELLATION)


def lar_weights(anchor_labels, negative_labels, num_labels: int, multiplier_offset: float = 0.0):
    """log(label distance + offset) for every anchor/negative label pair."""
    out = np.empty(np.shape(negative_labels), dtype=np.float64)
    for idx in np.ndindex(out.shape):
        dist = label_distance(int(anchor_labels[idx[0]]), int(negative_labels[idx]), num_labels)
        out[idx] = np.log(dist + multiplier_offset)
    return out


def lar_loss(batch: EmbeddingBatch, multiplier_offset: float = 0.0) -> LossOutput:
    """Label-aware ranked loss.

    Each negative term is scaled by log of the circular label distance,
    so neighbouring labels (distance 1) contribute a constant term and
    far labels are pushed towards the opposite side of the sphere.
    """
    roles = _assign_roles(batch.labels)
    unit, norms = _normalize_with_norms(batch.vectors)
    anchor_labels = batch.labels[roles.anchors]
    weights = lar_weights(anchor_labels, roles.label_negative_labels, batch.num_labels, multiplier_offset)
    value, grad_unit = _log1p_sum_exp(unit, roles.anchors, roles.positives, roles.label_negatives, weights)
    return LossOutput(value, _normalize_backward(unit, norms, grad_unit), LossKind.LAR)


LossFn = Callable[[EmbeddingBatch], LossOutput]


def finite_diff_gradient(loss_fn: LossFn, batch: EmbeddingBatch, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` in the raw coordinates."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    base = batch.vectors
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        f_plus = loss_fn(batch.with_vectors(plus)).value
        f_minus = loss_fn(batch.with_vectors(minus)).value
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise relative error; tiny elements are compared absolutely."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.where(scale >= floor, diff / np.where(scale >= floor, scale, 1.0), diff)
    return float(err.max()) if err.size else 0.0


def dml_loss(kind: LossKind | str, batch: EmbeddingBatch, *, margin: float = DEFAULT_MARGIN,
             constellation_k: int | None = None, multiplier_offset: float = 0.0) -> LossOutput:
    """Dispatch to one of the four metric losses by kind."""
    kind = LossKind(kind)
    if kind is LossKind.TRIPLET:
        return triplet_loss(batch, margin)
    if kind is LossKind.MCNPAIR:
        return mc_n_pair_loss(batch)
    if kind is LossKind.CONSTELLATION:
        if constellation_k is None:
            constellation_k = len(np.unique(batch.labels)) - 1
        return constellation_loss(batch, constellation_k)
    if kind is LossKind.LAR:
        return lar_loss(batch, multiplier_offset)
    raise ValueError(f"{kind.value} is not a metric loss")
