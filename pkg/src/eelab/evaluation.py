"""Extreme-event labeling and forecast skill measures.

Events are excursions of the observable above z* = mean + k std of the
training series.  Skill is summarized by confusion counts and F1 at a
fixed prediction threshold, the threshold-independent precision-recall
AUC, the rate-adjusted alpha* = max_w (AUC(w) - w), event counting with
minimum peak separation, and the log-density tail distance D between
true and predicted observable distributions.

Classification is strict: only values strictly above a threshold count
as extreme; equality is non-extreme.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateDistributionError
from .forecaster.density import kde_density

logger = logging.getLogger(__name__)

DEFAULT_RATE_GRID = np.arange(0.01, 0.2001, 0.01)


@dataclass(frozen=True)
class EventThreshold:
    """Extreme-event level z* = mean + k std (population std, training split)."""

    z_star: float
    k: float
    mean: float
    std: float


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def precision(self):
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    @property
    def recall(self):
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0


@dataclass(frozen=True)
class PrCurve:
    """Precision/recall along a descending threshold sweep, with AUC."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    auc: float

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0 + 1e-12:
            raise ValueError("AUC must lie in [0, 1]")
        if np.any(np.diff(self.recall) < -1e-12):
            raise ValueError("recall must be non-decreasing along the sweep")


@dataclass(frozen=True)
class EventCountReport:
    n_true: int
    n_pred: int
    min_separation: float

    @property
    def delta(self):
        return abs(self.n_true - self.n_pred)


def threshold_from_series(z, k: float = 2.0) -> EventThreshold:
    """z* = mean + k std of the (training) series, population std."""
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        raise ValueError("threshold needs a nonempty series")
    mean = float(z.mean())
    std = float(z.std())
    return EventThreshold(z_star=mean + k * std, k=k, mean=mean, std=std)


def f1_score(counts: ConfusionCounts) -> float:
    s, r = counts.precision, counts.recall
    return 2.0 * s * r / (s + r) if (s + r) > 0 else 0.0


def confusion(z_true, z_pred, z_star: float, z_pred_star: float) -> ConfusionCounts:
    """Strict-inequality confusion counts at fixed thresholds."""
    z_true = np.asarray(z_true, dtype=float)
    z_pred = np.asarray(z_pred, dtype=float)
    if z_true.shape != z_pred.shape:
        raise ValueError("series must have equal lengths")
    actual = z_true > z_star
    predicted = z_pred > z_pred_star
    tp = int(np.sum(actual & predicted))
    tn = int(np.sum(~actual & ~predicted))
    fp = int(np.sum(~actual & predicted))
    fn = int(np.sum(actual & ~predicted))
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def pr_curve(z_true, z_pred, z_star: float) -> PrCurve:
    """Precision-recall curve over the descending prediction-threshold sweep.

    Thresholds run over the unique predicted values plus a -inf
    sentinel (predict everything).  Sweep points with no predicted
    positives take the first defined precision further down the sweep
    (the precision at the highest threshold that predicts anything), so
    the curve always starts at recall 0.  AUC is the trapezoid integral
    in the recall coordinate.
    """
    z_true = np.asarray(z_true, dtype=float)
    z_pred = np.asarray(z_pred, dtype=float)
    if z_true.shape != z_pred.shape:
        raise ValueError("series must have equal lengths")
    labels = z_true > z_star
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no true extremes: recall undefined")
    if n_pos == labels.size:
        raise ValueError("no non-extremes in the truth series")
    order = np.argsort(-z_pred, kind="stable")
    sorted_pred = z_pred[order]
    sorted_labels = labels[order]
    cum_tp = np.cumsum(sorted_labels)
    # last index of each run of equal predictions: predicting "> u" for
    # u = that value includes everything strictly above it
    uniq_last = np.nonzero(np.diff(sorted_pred, append=-np.inf))[0]
    thresholds = np.concatenate([sorted_pred[uniq_last], [-np.inf]])
    n_above = np.concatenate([[0], uniq_last + 1])  # counts strictly above
    tp = np.concatenate([[0], cum_tp[uniq_last]]).astype(float)
    fp = n_above - tp
    recall = tp / n_pos
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(n_above > 0, tp / np.maximum(n_above, 1), np.nan)
    # carry the first defined precision back to the empty-prediction points
    defined = np.nonzero(~np.isnan(precision))[0]
    first = precision[defined[0]]
    precision = np.where(np.isnan(precision), first, precision)
    auc = float(np.trapezoid(precision, recall))
    return PrCurve(thresholds=thresholds, precision=precision,
                   recall=recall, auc=auc)


def alpha_star(z_true, z_pred, rates: Optional[Sequence] = None) -> float:
    """Maximum over event rates of AUC(rate) - rate.

    For each rate w the event level is the (1 - w) quantile of the true
    series; rates whose quantile yields no positives or no negatives
    are skipped (finite-sample guard).
    """
    z_true = np.asarray(z_true, dtype=float)
    z_pred = np.asarray(z_pred, dtype=float)
    if z_true.max() == z_true.min():
        raise DegenerateDistributionError(
            "alpha* undefined for an all-equal truth series"
        )
    if rates is None:
        rates = DEFAULT_RATE_GRID
    best = None
    for w in rates:
        if not 0.0 < w < 1.0:
            raise ValueError("event rates must lie in (0, 1)")
        level = float(np.quantile(z_true, 1.0 - w))
        labels = z_true > level
        if labels.sum() == 0 or labels.all():
            continue
        adj = pr_curve(z_true, z_pred, level).auc - w
        if best is None or adj > best:
            best = adj
    if best is None:
        raise DegenerateDistributionError(
            "no event rate on the grid produced a valid PR curve"
        )
    return float(best)


def find_peaks(z, dt: float):
    """Local-maximum indices via sign change of the central-difference
    derivative (plateaus resolved by carrying the previous sign)."""
    z = np.asarray(z, dtype=float)
    if z.size < 3:
        return np.array([], dtype=int)
    d = np.empty(z.size)
    d[1:-1] = (z[2:] - z[:-2]) / (2.0 * dt)
    d[0] = d[1]
    d[-1] = d[-2]
    sign = np.sign(d)
    for i in range(1, sign.size):
        if sign[i] == 0:
            sign[i] = sign[i - 1]
    peaks = []
    for i in range(sign.size - 1):
        if sign[i] > 0 and sign[i + 1] <= 0:
            cand = i if z[i] >= z[i + 1] else i + 1
            if not peaks or peaks[-1] != cand:
                peaks.append(cand)
    return np.asarray(peaks, dtype=int)


def count_events(z, z_star: float, min_separation: float,
                 dt: float = 0.1) -> np.ndarray:
    """Indices of extreme-event peaks: local maxima above z*, greedily
    de-duplicated keeping the larger peak (earlier index on ties)."""
    z = np.asarray(z, dtype=float)
    peaks = find_peaks(z, dt)
    peaks = peaks[z[peaks] > z_star]
    if peaks.size == 0:
        return peaks
    # greedy suppression: taller first, earlier index breaks ties
    order = sorted(range(peaks.size), key=lambda j: (-z[peaks[j]], peaks[j]))
    accepted = []
    for j in order:
        t = peaks[j] * dt
        if all(abs(t - a * dt) >= min_separation for a in accepted):
            accepted.append(peaks[j])
    return np.array(sorted(accepted), dtype=int)


def estimate_min_separation(z, z_star: float, dt: float = 0.1,
                            fallback: float = 1.0) -> float:
    """Median inter-peak interval of the series above z* (raw peaks,
    before suppression); `fallback` when fewer than two peaks exist."""
    z = np.asarray(z, dtype=float)
    peaks = find_peaks(z, dt)
    peaks = peaks[z[peaks] > z_star]
    if peaks.size < 2:
        return fallback
    return float(np.median(np.diff(peaks)) * dt)


def event_count_report(z_true, z_pred, z_star: float, min_separation: float,
                       dt: float = 0.1) -> EventCountReport:
    n_true = count_events(z_true, z_star, min_separation, dt).size
    n_pred = count_events(z_pred, z_star, min_separation, dt).size
    return EventCountReport(n_true=n_true, n_pred=n_pred,
                            min_separation=min_separation)


def tail_distance(p_samples, q_samples, n_grid: int = 512) -> float:
    """Average |log p - log q| over the overlap of the observed ranges,
    normalized by the squared overlap length.

    Densities come from `kde_density` (same bandwidth rule both sides).
    Returns inf when the observed ranges do not overlap.
    """
    p_samples = np.asarray(p_samples, dtype=float)
    q_samples = np.asarray(q_samples, dtype=float)
    if p_samples.size == 0 or q_samples.size == 0:
        raise ValueError("tail distance needs nonempty sample sets")
    lo = max(p_samples.min(), q_samples.min())
    hi = min(p_samples.max(), q_samples.max())
    if hi <= lo:
        logger.warning(
            "tail_distance: observed ranges [%g, %g] and [%g, %g] do not "
            "overlap; returning inf",
            p_samples.min(), p_samples.max(),
            q_samples.min(), q_samples.max(),
        )
        return np.inf
    dp = kde_density(p_samples)
    dq = kde_density(q_samples)
    grid = np.linspace(lo, hi, n_grid)
    integrand = np.abs(np.log(dp.evaluate(grid)) - np.log(dq.evaluate(grid)))
    omega = hi - lo
    return float(np.trapezoid(integrand, grid) / omega**2)


# ---------------------------------------------------------------------------
# report writers

METRIC_KEYS = ("f1", "auc", "alpha_star", "n_ee_true", "n_ee_pred",
               "delta_n_ee", "tail_distance_D", "tau", "z_star")


def write_metric_report(path, metrics: dict):
    """Key-value text report with a fixed key order."""
    missing = [k for k in METRIC_KEYS if k not in metrics]
    if missing:
        raise ValueError(f"metric report missing keys: {missing}")
    with open(path, "w") as fh:
        for key in METRIC_KEYS:
            val = metrics[key]
            if isinstance(val, (int, np.integer)):
                fh.write(f"{key} = {int(val)}\n")
            else:
                fh.write(f"{key} = {float(val)!r}\n")


def read_metric_report(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            key, val = line.split("=")
            out[key.strip()] = float(val)
    return out


def write_pr_curve_csv(path, curve: PrCurve):
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall\n")
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            fh.write(f"{float(t)!r},{float(p)!r},{float(r)!r}\n")
