"""Experiment pipelines built on attacks and sharpness: loss-increase
distributions, basins, uncanny-valley statistics, scale sweeps and the
sharpness-threshold detector."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import nn
from .curvature import classifier_norms, sharpness_arrays
from .linalg import SeededRng
from .robustness import AttackConfig, AttackTrajectory, adversarial_batch, pgd_attack

DETECTOR_MODULE_ID = 5


@dataclass
class TrajectoryMetrics:
    sample_id: int
    label: int
    loss: np.ndarray
    normalized_loss: np.ndarray
    kappa_spectral: np.ndarray
    kappa_frobenius: np.ndarray
    confidence: np.ndarray
    predicted: np.ndarray

    @property
    def loss_increase(self) -> float:
        return float(self.loss[-1] - self.loss[0])

    @property
    def flipped(self) -> bool:
        return bool(self.predicted[-1] != self.label)


@dataclass
class TrajectorySummary:
    metrics: list[TrajectoryMetrics]
    loss_increase: np.ndarray
    flipped: int
    uncanny: int

    @property
    def uncanny_fraction(self) -> float:
        return self.uncanny / self.flipped if self.flipped else float("nan")


def normalized_series(values: np.ndarray) -> np.ndarray:
    """Min-max rescaling onto [0, 1]; a constant series maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def peak_then_decay(kappa: np.ndarray) -> bool:
    """Sharpness rises above both endpoints and ends below half its peak."""
    kappa = np.asarray(kappa)
    peak = float(np.max(kappa))
    return peak > max(kappa[0], kappa[-1]) and kappa[-1] < peak / 2


def trajectory_metrics(net: nn.MlpNetwork, trajectories: Sequence[AttackTrajectory], min_steps: int = 10) -> TrajectorySummary:
    """Re-evaluate ``net`` along recorded trajectories.

    ``net`` need not be the attacked network; evaluating a rescaled copy
    along the same iterates is how scale overlays are produced. The
    uncanny-valley count covers flipped trajectories with at least
    ``min_steps`` steps.
    """
    norms = classifier_norms(net)
    metrics = []
    flipped = uncanny = 0
    for t in trajectories:
        labels = np.full(t.iterates.shape[0], t.label)
        arr = sharpness_arrays(net, t.iterates, labels, w_norms=norms)
        m = TrajectoryMetrics(
            sample_id=t.sample_id,
            label=t.label,
            loss=arr["loss"],
            normalized_loss=normalized_series(arr["loss"]),
            kappa_spectral=arr["kappa_spectral"],
            kappa_frobenius=arr["kappa_frobenius"],
            confidence=arr["confidence"],
            predicted=nn.predict(net, t.iterates),
        )
        metrics.append(m)
        if m.flipped and t.steps >= min_steps:
            flipped += 1
            uncanny += peak_then_decay(m.kappa_spectral)
    inc = np.array([m.loss_increase for m in metrics])
    return TrajectorySummary(metrics, inc, flipped, uncanny)


def histogram(values, bins: int = 30):
    """Rows ``(bin_left, bin_right, count)`` over the range of ``values``."""
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def take_off(loss, tau: float = 0.1) -> int | None:
    """First iteration whose rise over the start exceeds ``tau`` of the total rise."""
    loss = np.asarray(loss, dtype=np.float64)
    if loss.size < 2:
        raise ValueError("take_off needs at least two points")
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    rise = float(np.max(loss) - loss[0])
    if rise <= 0:
        return None
    hits = np.flatnonzero(loss[1:] - loss[0] > tau * rise)
    return int(hits[0]) + 1 if hits.size else None


@dataclass
class SpearmanResult:
    rho: float | None
    n: int
    degenerate_ties: bool = False


def spearman(x, y) -> SpearmanResult:
    """Spearman's rho with average ranks for ties.

    Returns ``rho=None`` below three points, and ``rho=0`` flagged as
    degenerate when either side has no rank variance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 3:
        return SpearmanResult(None, n)
    rx = rankdata(x) - (n + 1) / 2
    ry = rankdata(y) - (n + 1) / 2
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0:
        return SpearmanResult(0.0, n, degenerate_ties=True)
    return SpearmanResult(float(np.sum(rx * ry) / denom), n)


@dataclass
class BasinReport:
    sample_ids: np.ndarray
    take_off: list[int | None]
    kappa_at_clean: np.ndarray
    correlation: SpearmanResult

    @property
    def widths(self) -> np.ndarray:
        return np.array([t for t in self.take_off if t is not None], dtype=np.int64)

    @property
    def defined(self) -> int:
        return sum(t is not None for t in self.take_off)


def basin_report(loss_series: Sequence, kappa_at_clean, sample_ids=None, tau: float = 0.1) -> BasinReport:
    """Take-off (basin width) per sample and its rank correlation with clean sharpness.

    ``loss_series`` holds one loss sequence per sample, either as arrays or
    as objects with a ``loss`` attribute (trajectories, metrics).
    """
    series = [np.asarray(getattr(s, "loss", s)) for s in loss_series]
    kappa = np.asarray(kappa_at_clean, dtype=np.float64)
    if len(series) != kappa.size:
        raise ValueError("need one clean sharpness value per trajectory")
    if sample_ids is None:
        sample_ids = [getattr(s, "sample_id", i) for i, s in enumerate(loss_series)]
    offs = [take_off(s, tau) for s in series]
    ok = np.array([t is not None for t in offs], dtype=bool)
    widths = np.array([t for t in offs if t is not None], dtype=np.float64)
    corr = spearman(kappa[ok], widths)
    return BasinReport(np.asarray(sample_ids), offs, kappa, corr)


@dataclass
class ScaleEntry:
    scale: float
    clean_accuracy: float
    robust_accuracy: float
    mean_kappa_spectral: float
    mean_kappa_frobenius: float
    transfer_rate: float
    mean_loss_increase: float


@dataclass
class ScaleSweepResult:
    entries: list[ScaleEntry]
    baseline: list[AttackTrajectory] = field(repr=False, default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.entries])


def scale_sweep(net: nn.MlpNetwork, scales: Sequence[float], attack: AttackConfig, data: nn.SampleBatch) -> ScaleSweepResult:
    """Attack each rescaled copy of ``net`` under the same budget.

    For every scale also reports how many of the successful s=1 adversarial
    examples stay misclassified by the rescaled net, and the mean loss
    increase of the rescaled net along the s=1 trajectories.
    """
    if any(s <= 0 for s in scales):
        raise ValueError("scales must be positive")
    attack = dataclasses.replace(attack, record_trajectory=True)
    base = pgd_attack(net, data, attack)
    adv = adversarial_batch(base)
    success = nn.predict(net, adv.inputs) != adv.labels
    entries = []
    for s in scales:
        scaled = nn.scale_penultimate(net, float(s))
        trajs = base if s == 1 else pgd_attack(scaled, data, attack)
        final = adversarial_batch(trajs)
        arr = sharpness_arrays(scaled, data.inputs, data.labels)
        if np.any(success):
            transfer = float(np.mean(nn.predict(scaled, adv.inputs[success]) != adv.labels[success]))
        else:
            transfer = float("nan")
        along = trajectory_metrics(scaled, base)
        entries.append(
            ScaleEntry(
                scale=float(s),
                clean_accuracy=nn.accuracy(scaled, data),
                robust_accuracy=float(np.mean(nn.predict(scaled, final.inputs) == final.labels)),
                mean_kappa_spectral=float(np.mean(arr["kappa_spectral"])),
                mean_kappa_frobenius=float(np.mean(arr["kappa_frobenius"])),
                transfer_rate=transfer,
                mean_loss_increase=float(np.mean(along.loss_increase)),
            )
        )
    return ScaleSweepResult(entries, base)


@dataclass
class FoldResult:
    fold: int
    threshold: float
    direction: int  # +1: values above the threshold are flagged positive
    split_rank: int
    train_accuracy: float
    test_accuracy: float


@dataclass
class DetectorResult:
    folds: list[FoldResult]
    seed: int

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.test_accuracy for f in self.folds])

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))


def fit_stump(values: np.ndarray, labels: np.ndarray):
    """Best single-threshold rule on one feature.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values (plus one below and one above the range). Ties in training
    accuracy go to the lowest threshold, then to direction +1.
    Returns ``(threshold, direction, split_rank, accuracy)`` where
    ``split_rank`` counts the distinct values below the threshold.
    """
    order = np.argsort(values, kind="stable")
    v = values[order]
    lab = labels[order].astype(np.int64)
    n = v.size
    distinct_end = np.flatnonzero(np.r_[v[1:] != v[:-1], True])  # last index of each distinct run
    pos_total = int(lab.sum())
    pos_below = np.r_[0, np.cumsum(lab)[distinct_end]]
    count_below = np.r_[0, distinct_end + 1]
    # direction +1: predict positive above; correct = negatives below + positives above
    acc_up = ((count_below - pos_below) + (pos_total - pos_below)) / n
    acc_down = (pos_below + (n - count_below) - (pos_total - pos_below)) / n
    best_up, best_down = int(np.argmax(acc_up)), int(np.argmax(acc_down))
    if acc_up[best_up] >= acc_down[best_down]:
        split, direction, acc = best_up, 1, acc_up[best_up]
    else:
        split, direction, acc = best_down, -1, acc_down[best_down]
    uniq = v[distinct_end]
    if split == 0:
        thr = uniq[0] - 1.0
    elif split == uniq.size:
        thr = uniq[-1] + 1.0
    else:
        thr = 0.5 * (uniq[split - 1] + uniq[split])
    return float(thr), direction, split, float(acc)


def stratified_folds(labels: np.ndarray, folds: int, rng: SeededRng) -> np.ndarray:
    gen = rng.generator()
    assign = np.empty(labels.size, dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < folds:
            raise ValueError(f"class {c} has {idx.size} samples, fewer than {folds} folds")
        idx = idx[gen.permutation(idx.size)]
        assign[idx] = np.arange(idx.size) % folds
    return assign


def stump_detector_cv(values, labels, folds: int = 5, seed: int = 0) -> DetectorResult:
    """Stratified k-fold accuracy of a one-threshold clean/adversarial detector."""
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if values.shape != labels.shape:
        raise ValueError("values and labels must align")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if np.unique(labels).size < 2:
        raise ValueError("detector needs both classes")
    assign = stratified_folds(labels, folds, SeededRng(seed).derive(DETECTOR_MODULE_ID))
    out = []
    for f in range(folds):
        train = assign != f
        thr, d, split, acc = fit_stump(values[train], labels[train])
        pred = (values[~train] > thr) if d == 1 else (values[~train] < thr)
        out.append(FoldResult(f, thr, d, split, acc, float(np.mean(pred == labels[~train]))))
    return DetectorResult(out, seed)
