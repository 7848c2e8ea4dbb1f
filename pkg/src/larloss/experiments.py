"""Grid runs behind the CLI: the geometry suite and the loss ablation."""
from __future__ import annotations

import csv
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry
from .dataset import Dataset
from .errors import LarError
from .trainer import TABLE_ORDER, DmlKind, TrainConfig, evaluate_raw, raw_predictions, train

DEFAULT_EPSILONS = (0.01, 0.1, 0.5)
DEFAULT_RELATIVE_EPSILONS = (0.9,)
GAP_TOLERANCE = 0.05


@dataclass
class OptimizationResult:
    num_labels: int
    seed: int
    max_gap_deviation: float
    ranking_preserved: bool
    objective: float
    config: geometry.ClassConfiguration

    @property
    def ok(self) -> bool:
        return self.max_gap_deviation < GAP_TOLERANCE and self.ranking_preserved


@dataclass
class SamplingResult:
    num_labels: int
    uniform_objective: float
    min_random_objective: float
    n_samples: int
    n_beaten: int

    @property
    def ok(self) -> bool:
        return self.n_beaten == self.n_samples


@dataclass
class GeometrySuite:
    perturbation: list[geometry.PerturbationRow] = field(default_factory=list)
    optimization: list[OptimizationResult] = field(default_factory=list)
    sampling: list[SamplingResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (all(r.holds for r in self.perturbation)
                and all(r.ok for r in self.optimization)
                and all(r.ok for r in self.sampling))


def run_geometry_suite(l_range=range(3, 9), seeds=range(1, 11), perturb_l_max: int = 12,
                       epsilons=DEFAULT_EPSILONS, relative_epsilons=DEFAULT_RELATIVE_EPSILONS,
                       steps: int = 5000, lr: float = 0.1, restarts: int = 10,
                       samples: int = 10_000) -> GeometrySuite:
    l_values = list(l_range)
    if not l_values:
        raise ValueError("empty label-count range")
    suite = GeometrySuite()
    suite.perturbation = geometry.perturbation_inequality_check(
        perturb_l_max, epsilons, relative_epsilons)
    for num_labels in l_values:
        for seed in seeds:
            config = geometry.optimize_configuration(num_labels, 2, steps, lr, seed, restarts)
            report = geometry.measure_angles(config)
            suite.optimization.append(OptimizationResult(
                num_labels, seed, report.max_gap_deviation, report.ranking_preserved,
                report.objective_value, config))
        uniform = geometry.class_objective(geometry.uniform_configuration(num_labels))
        if samples:
            random_values = geometry.batch_objective(
                geometry.random_configurations(num_labels, 2, samples, seed=num_labels))
            suite.sampling.append(SamplingResult(
                num_labels, uniform, float(random_values.min()), samples,
                int(np.sum(uniform < random_values))))
    return suite


def write_geometry_suite(suite: GeometrySuite, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    points_dir = out_dir / "points"
    points_dir.mkdir(parents=True, exist_ok=True)
    geometry.write_perturbation_csv(suite.perturbation, out_dir / "perturbation.csv")
    with open(out_dir / "optimization.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["L", "seed", "max_gap_deviation", "ranking_preserved", "objective", "holds"])
        for r in suite.optimization:
            writer.writerow([r.num_labels, r.seed, repr(r.max_gap_deviation),
                             _bool(r.ranking_preserved), repr(r.objective), _bool(r.ok)])
            geometry.write_points_csv(r.config, points_dir / f"L{r.num_labels}_seed{r.seed}.csv")
    with open(out_dir / "sampling.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["L", "uniform_objective", "min_random_objective", "samples", "beaten", "holds"])
        for r in suite.sampling:
            writer.writerow([r.num_labels, repr(r.uniform_objective), repr(r.min_random_objective),
                             r.n_samples, r.n_beaten, _bool(r.ok)])


def _bool(flag: bool) -> str:
    return "true" if flag else "false"


@dataclass
class AblationCell:
    kind: DmlKind
    es: bool
    seed: int
    accuracy: float = float("nan")
    accuracy_pm1: float = float("nan")
    error: str = ""

    @property
    def name(self) -> str:
        base = dict(TABLE_ORDER)[self.kind]
        return base + " + ES" if self.es else base

    @property
    def failed(self) -> bool:
        return bool(self.error)


def _train_cells(dataset: Dataset, base: TrainConfig, kind: DmlKind, seed: int) -> list[AblationCell]:
    """Train once and score the model with and without smoothing."""
    config = replace(base, dml_kind=kind, seed=seed)
    try:
        model, _ = train(dataset, config)
    except (LarError, FloatingPointError) as exc:
        return [AblationCell(kind, es, seed, error=f"{type(exc).__name__}: {exc}") for es in (False, True)]
    test = dataset.split("test")
    raws = [raw_predictions(model, rec.frames) for rec in test]
    num_labels = dataset.config.num_labels
    cells = []
    for es in (False, True):
        alpha = config.smoothing_alpha if es else None
        m = evaluate_raw(raws, test, num_labels, alpha, config.smooth_rounded)
        cells.append(AblationCell(kind, es, seed, m.accuracy, m.accuracy_pm1))
    return cells


def run_ablation(dataset: Dataset, base: TrainConfig, seeds=(1, 2, 3), jobs: int = 1,
                 progress=None) -> list[AblationCell]:
    """All loss settings with and without smoothing, for every seed.

    Cells are returned in a fixed order (seed, then table row) whatever
    the number of worker processes.
    """
    tasks = [(kind, seed) for seed in seeds for kind, _ in TABLE_ORDER]
    results: dict[tuple, list[AblationCell]] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_train_cells, dataset, base, kind, seed): (kind, seed)
                       for kind, seed in tasks}
            for future, key in futures.items():
                results[key] = future.result()
                if progress:
                    progress(results[key])
    else:
        for kind, seed in tasks:
            results[(kind, seed)] = _train_cells(dataset, base, kind, seed)
            if progress:
                progress(results[(kind, seed)])
    return [cell for key in tasks for cell in results[key]]


def summarize(cells: list[AblationCell]) -> list[tuple[str, float, float]]:
    """Median accuracy per table row over successful seeds, in table order."""
    rows = []
    for es in (False, True):
        for kind, _ in TABLE_ORDER:
            group = [c for c in cells if c.kind is kind and c.es == es and not c.failed]
            name = AblationCell(kind, es, 0).name
            if group:
                rows.append((name, statistics.median(c.accuracy for c in group),
                             statistics.median(c.accuracy_pm1 for c in group)))
            else:
                rows.append((name, float("nan"), float("nan")))
    return rows


def write_ablation(cells: list[AblationCell], out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["loss", "es", "seed", "accuracy", "accuracy_pm1", "status"])
        for c in cells:
            writer.writerow([c.kind.value, _bool(c.es), c.seed, repr(c.accuracy),
                             repr(c.accuracy_pm1), c.error or "ok"])
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["configuration", "accuracy", "accuracy_pm1"])
        for name, acc, acc_pm1 in summarize(cells):
            writer.writerow([name, f"{100 * acc:.1f}%", f"{100 * acc_pm1:.1f}%"])
