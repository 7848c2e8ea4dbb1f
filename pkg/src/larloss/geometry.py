"""Numerical checks of where the LAR class objective is minimised.

One point per label sits on the unit sphere and acts as its own anchor
and positive, so the anchor-positive similarity is fixed at 1.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadEpsilonError, DimensionError, NonFiniteError
from .losses import label_distance, normalize


@dataclass(frozen=True)
class ClassConfiguration:
    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 2:
            raise ValueError(f"points must be an L x D matrix with L >= 2, got {points.shape}")
        norms = np.linalg.norm(points, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("configuration rows must be unit vectors")
        object.__setattr__(self, "points", points)

    @property
    def num_labels(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class GeometryReport:
    angular_gaps: np.ndarray
    max_gap_deviation: float
    ranking_preserved: bool
    objective_value: float


@dataclass(frozen=True)
class PerturbationRow:
    l: int
    epsilon: float
    form: str  # "odd", "even_full" or "even_reduced"
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs < self.rhs


def multiplier_matrix(num_labels: int, multiplier_offset: float = 0.0) -> np.ndarray:
    """log(label distance) for every ordered label pair, zero on the diagonal."""
    w = np.zeros((num_labels, num_labels))
    for i in range(num_labels):
        for j in range(num_labels):
            if i != j:
                w[i, j] = math.log(label_distance(i, j, num_labels) + multiplier_offset)
    return w


def uniform_configuration(num_labels: int, dim: int = 2, reverse: bool = False) -> ClassConfiguration:
    """Labels in rank order at equal angles 2*pi/L on the first coordinate circle."""
    angles = 2.0 * np.pi * np.arange(num_labels) / num_labels
    if reverse:
        angles = -angles
    points = np.zeros((num_labels, dim))
    points[:, 0] = np.cos(angles)
    points[:, 1] = np.sin(angles)
    return ClassConfiguration(points)


def _objective_and_grad(points: np.ndarray, weights: np.ndarray):
    """Batched objective over a leading axis of configurations, shape (R, L, D)."""
    num_labels = points.shape[-2]
    sims = points @ np.swapaxes(points, -1, -2)
    x = weights * sims - 1.0
    off_diag = ~np.eye(num_labels, dtype=bool)
    x = np.where(off_diag, x, -np.inf)
    shift = np.maximum(x.max(axis=-1), 0.0)
    e = np.exp(x - shift[..., None])
    z = np.exp(-shift) + e.sum(axis=-1)
    values = np.mean(shift + np.log(z), axis=-1)
    soft = e / z[..., None]
    coef = weights * (soft + np.swapaxes(soft, -1, -2)) / num_labels
    return values, coef @ points


def class_objective(config: ClassConfiguration, multiplier_offset: float = 0.0) -> float:
    weights = multiplier_matrix(config.num_labels, multiplier_offset)
    values, _ = _objective_and_grad(config.points[None], weights)
    return float(values[0])


def optimize_configuration(num_labels: int, dim: int = 2, steps: int = 5000, lr: float = 0.1,
                           seed: int = 0, restarts: int = 10,
                           multiplier_offset: float = 0.0) -> ClassConfiguration:
    """Projected gradient descent on the class objective from random starts.

    All restarts run together; the lowest objective seen at any step wins.
    """
    if num_labels < 3:
        raise ValueError(f"need at least 3 labels, got {num_labels}")
    if steps < 1 or not lr > 0 or restarts < 1:
        raise ValueError("steps and restarts must be >= 1 and lr > 0")
    rng = np.random.default_rng(seed)
    weights = multiplier_matrix(num_labels, multiplier_offset)
    points = rng.normal(size=(restarts, num_labels, dim))
    points /= np.linalg.norm(points, axis=-1, keepdims=True)

    best_values = np.full(restarts, np.inf)
    best_points = points.copy()
    for step in range(steps + 1):
        values, grad = _objective_and_grad(points, weights)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"objective diverged at step {step}; lower the learning rate")
        improved = values < best_values
        best_values[improved] = values[improved]
        best_points[improved] = points[improved]
        if step == steps:
            break
        points = points - lr * grad
        points /= np.linalg.norm(points, axis=-1, keepdims=True)
    winner = int(np.argmin(best_values))
    return ClassConfiguration(normalize(best_points[winner]))


def _is_circular_sequence(order: list[int]) -> bool:
    n = len(order)
    start = order.index(0)
    rotated = order[start:] + order[:start]
    forward = list(range(n))
    backward = [0] + list(range(n - 1, 0, -1))
    return rotated == forward or rotated == backward


def measure_angles(config: ClassConfiguration) -> GeometryReport:
    """Adjacent angular gaps around the circle and whether labels stay in rank order."""
    if config.dim != 2:
        raise DimensionError(f"angle measurement needs D = 2, got D = {config.dim}")
    num_labels = config.num_labels
    angles = np.mod(np.arctan2(config.points[:, 1], config.points[:, 0]), 2.0 * np.pi)
    order = np.argsort(angles, kind="stable")
    sorted_angles = angles[order]
    gaps = np.diff(np.append(sorted_angles, sorted_angles[0] + 2.0 * np.pi))
    deviation = float(np.max(np.abs(gaps - 2.0 * np.pi / num_labels)))
    return GeometryReport(
        angular_gaps=gaps,
        max_gap_deviation=deviation,
        ranking_preserved=_is_circular_sequence(order.tolist()),
        objective_value=class_objective(config),
    )


def _inner_terms(l: int, upper: int) -> tuple[np.ndarray, np.ndarray]:
    j = np.arange(1, upper + 1)
    return 2.0 * np.log(j), j * 2.0 * np.pi / l


def perturbation_rows(l: int, epsilon: float) -> list[PerturbationRow]:
    """Both sides of the one-point-shift inequality for a single ring size ``l``.

    Odd ``l`` gives one row.  Even ``l`` gives the full inequality with the
    antipodal ``l/2 cos(pi)`` term and the reduced one without it.
    """
    if l < 3:
        raise ValueError(f"ring size must be >= 3, got {l}")
    if not 0.0 < epsilon < 2.0 * np.pi / l:
        raise BadEpsilonError(f"epsilon={epsilon} outside (0, 2*pi/{l})")
    if l % 2:
        w, a = _inner_terms(l, (l - 1) // 2)
        lhs = float(2.0 * np.sum(w * np.cos(a)))
        rhs = float(np.sum(w * np.cos(a - epsilon) + w * np.cos(a + epsilon)))
        return [PerturbationRow(l, epsilon, "odd", lhs, rhs)]
    w, a = _inner_terms(l, l // 2 - 1)
    lhs_reduced = float(2.0 * np.sum(w * np.cos(a)))
    rhs_reduced = float(np.sum(w * np.cos(a - epsilon) + w * np.cos(a + epsilon)))
    half = l / 2.0
    return [
        PerturbationRow(l, epsilon, "even_full",
                        lhs_reduced + half * math.cos(math.pi),
                        rhs_reduced + half * math.cos(math.pi - epsilon)),
        PerturbationRow(l, epsilon, "even_reduced", lhs_reduced, rhs_reduced),
    ]


def perturbation_inequality_check(l_max: int, epsilons=(), relative_epsilons=(),
                                  l_min: int = 3) -> list[PerturbationRow]:
    """Rows for every ring size in [l_min, l_max].

    ``relative_epsilons`` are fractions of 2*pi/l, resolved per ring size.
    """
    if l_max < 3 or l_min < 3 or l_min > l_max:
        raise ValueError(f"need 3 <= l_min <= l_max, got [{l_min}, {l_max}]")
    if not len(epsilons) and not len(relative_epsilons):
        raise ValueError("no epsilon values given")
    rows = []
    for l in range(l_min, l_max + 1):
        values = [float(e) for e in epsilons]
        values += [float(f) * 2.0 * np.pi / l for f in relative_epsilons]
        for eps in values:
            rows.extend(perturbation_rows(l, eps))
    return rows


def jensen_gap(angles) -> tuple[float, float]:
    """(mean of e^cos, e^mean cos); convexity of exp makes the first >= the second."""
    c = np.cos(np.asarray(angles, dtype=np.float64))
    if c.size == 0:
        raise ValueError("need at least one angle")
    return float(np.mean(np.exp(c))), float(np.exp(np.mean(c)))


def random_configurations(num_labels: int, dim: int, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(count, num_labels, dim))
    return points / np.linalg.norm(points, axis=-1, keepdims=True)


def batch_objective(points: np.ndarray, multiplier_offset: float = 0.0) -> np.ndarray:
    """Class objective for a stack of configurations of shape (R, L, D)."""
    weights = multiplier_matrix(points.shape[-2], multiplier_offset)
    values, _ = _objective_and_grad(points, weights)
    return values


def write_perturbation_csv(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["l", "epsilon", "lhs", "rhs", "holds", "form"])
        for r in rows:
            writer.writerow([r.l, repr(r.epsilon), repr(r.lhs), repr(r.rhs),
                             "true" if r.holds else "false", r.form])


def write_points_csv(config: ClassConfiguration, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "x", "y"])
        for label, row in enumerate(config.points):
            writer.writerow([label, repr(float(row[0])), repr(float(row[1]))])
