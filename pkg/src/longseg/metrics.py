"""Evaluation metrics: volume-change reliability, annualized change, effect
sizes, sample sizes, lesion change rates, Dice, and cross-validated LDA/ROC.
"""

from dataclasses import dataclass, field
import csv
from itertools import combinations
import math
from statistics import NormalDist

import numpy as np

from .errors import GridMismatchError, NumericalError, SingularSystemError, ValidationError
from .phantom import make_rng


@dataclass
class GroupSample:
    label: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()

    @property
    def n(self):
        return self.values.size


# --- volume change ------------------------------------------------------------------


def spc(v1, v2):
    """Symmetrized percent change ``100 (v2 - v1) / ((v1 + v2) / 2)``."""
    v1, v2 = float(v1), float(v2)
    if v1 < 0 or v2 < 0:
        raise ValidationError("volumes must be nonnegative")
    if v1 + v2 <= 0:
        raise ValidationError("both volumes are zero")
    return 200.0 * (v2 - v1) / (v1 + v2)


def aspc(v1, v2):
    return abs(spc(v1, v2))


def pairwise_aspc(volumes, signed=False):
    """(A)SPC over every unordered pair of repeated measurements, in input order."""
    f = spc if signed else aspc
    return [f(a, b) for a, b in combinations(list(volumes), 2)]


def apc(series, structure=None):
    """Annualized percent change: 100 * OLS slope / intercept at baseline.

    ``series`` is a VolumeTimeSeries (then ``structure`` is required) or a
    ``(times, volumes)`` pair.
    """
    if structure is not None:
        t, v = series.times, series.volumes(structure)
    else:
        t, v = (np.asarray(a, dtype=np.float64) for a in series)
    if t.size < 2:
        raise ValidationError("APC needs at least two time points")
    if np.ptp(t) <= 0:
        raise ValidationError("APC needs distinct time points")
    t = t - t[0]
    tm, vm = t.mean(), v.mean()
    slope = np.dot(t - tm, v - vm) / np.dot(t - tm, t - tm)
    intercept = vm - slope * tm
    if intercept <= 0:
        raise NumericalError("APC intercept is not positive")
    return float(100.0 * slope / intercept)


# --- group statistics -----------------------------------------------------------------


def _as_sample(x, label):
    return x if isinstance(x, GroupSample) else GroupSample(label, x)


def cohens_d(a, b):
    """``(mean_a - mean_b) / s_pooled`` with (n - 1)-weighted pooled variance."""
    a, b = _as_sample(a, "a"), _as_sample(b, "b")
    if a.n < 2 or b.n < 2:
        raise ValidationError("each group needs at least two values")
    va = np.var(a.values, ddof=1)
    vb = np.var(b.values, ddof=1)
    pooled = ((a.n - 1) * va + (b.n - 1) * vb) / (a.n + b.n - 2)
    if not pooled > 0:
        raise NumericalError("pooled variance is zero")
    return float((a.values.mean() - b.values.mean()) / math.sqrt(pooled))


def sample_size_for_d(d, power=0.8, alpha=0.05):
    """Per-group n of a two-sided two-sample normal-approximation test."""
    if not 0 < power < 1 or not 0 < alpha < 1:
        raise ValidationError("power and alpha must lie in (0, 1)")
    d = abs(float(d))
    if d == 0:
        raise NumericalError("zero effect size needs an unbounded sample")
    z = NormalDist()
    num = 2.0 * (z.inv_cdf(1 - alpha / 2) + z.inv_cdf(power)) ** 2
    return int(math.ceil(num / (d * d)))


def required_sample_size(a, b, power=0.8, alpha=0.05):
    return sample_size_for_d(cohens_d(a, b), power, alpha)


# --- masks ----------------------------------------------------------------------------


def dice(x, y):
    """``2|X & Y| / (|X| + |Y|)``; two empty masks score 1."""
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise GridMismatchError("masks must share one grid")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(x & y)) / total


def lesion_rates(masks):
    """``(LES_I, LES_D)`` in voxels/year from ``[(mask, time), ...]``.

    Consecutive-pair gains (voxels in t+1 not in t) and losses, each divided
    by the time gap, averaged over the T - 1 pairs.
    """
    masks = list(masks)
    if len(masks) < 2:
        raise ValidationError("need at least two time points")
    gains, losses = [], []
    for (m0, t0), (m1, t1) in zip(masks, masks[1:]):
        m0 = np.asarray(m0, dtype=bool)
        m1 = np.asarray(m1, dtype=bool)
        if m0.shape != m1.shape:
            raise GridMismatchError("masks must share one grid")
        dt = float(t1) - float(t0)
        if dt == 0:
            raise ValidationError("time gap between consecutive masks is zero")
        gains.append(np.count_nonzero(m1 & ~m0) / dt)
        losses.append(np.count_nonzero(m0 & ~m1) / dt)
    n = len(gains)
    return float(sum(gains) / n), float(sum(losses) / n)


# --- LDA / ROC -----------------------------------------------------------------------


@dataclass
class ROCResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    scores: np.ndarray
    ridge_folds: list = field(default_factory=list)


def roc_curve(scores, labels):
    """ROC points (fpr, tpr) for "higher score means class 1", ties grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise ValidationError("ROC needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tpr = np.r_[0.0, tp[last] / pos]
    fpr = np.r_[0.0, fp[last] / neg]
    return fpr, tpr


def auc_trapezoid(fpr, tpr):
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def lda_fit(X, y):
    """Two-class LDA with pooled covariance; returns ``(w, b, ridge_used)``.

    The score ``X @ w + b`` is the log-odds of class 1 under equal priors
    weighted by the training class frequencies.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y).astype(bool)
    X0, X1 = X[~y], X[y]
    n0, n1 = len(X0), len(X1)
    if n0 < 1 or n1 < 1 or n0 + n1 < 3:
        raise ValidationError("LDA needs both classes and at least three samples")
    m0, m1 = X0.mean(axis=0), X1.mean(axis=0)
    S = ((X0 - m0).T @ (X0 - m0) + (X1 - m1).T @ (X1 - m1)) / (n0 + n1 - 2)
    S = np.atleast_2d(S)
    dim = S.shape[0]
    ridge = False
    try:
        chol = np.linalg.cholesky(S)
        if np.min(np.diag(chol)) ** 2 <= 1e-12 * max(np.trace(S) / dim, 1e-300):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        ridge = True
        lam = 1e-6 * np.trace(S) / dim
        if not lam > 0:
            lam = 1e-6
        S = S + lam * np.eye(dim)
        try:
            chol = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("pooled covariance is singular even with ridge") from exc
    w = np.linalg.solve(chol.T, np.linalg.solve(chol, m1 - m0))
    b = -0.5 * (m0 + m1) @ w + math.log(n1 / n0)
    return w, float(b), ridge


def stratified_folds(labels, folds, seed):
    """Fold index per sample; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels).astype(bool)
    rng = make_rng(seed, 7)
    assign = np.empty(labels.size, dtype=np.int64)
    for cls in (False, True):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        assign[idx] = np.arange(idx.size) % folds
    return assign


def lda_roc(features, labels, folds=5, seed=0):
    """Cross-validated LDA scores pooled across held-out folds into one ROC.

    Each fold trains on the other ``folds - 1`` parts (80/20 with 5 folds).
    Class 1 (``labels == 1``) is the positive class.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels).astype(bool)
    if X.shape[0] != y.size:
        raise ValidationError("features and labels differ in length")
    if folds < 2:
        raise ValidationError("need at least two folds")
    if min(int(y.sum()), int((~y).sum())) < folds:
        raise ValidationError(f"each class needs at least {folds} subjects")
    if not np.all(np.isfinite(X)):
        raise ValidationError("features must be finite")
    assign = stratified_folds(y, folds, seed)
    scores = np.empty(y.size)
    ridge_folds = []
    for f in range(folds):
        test = assign == f
        w, b, ridge = lda_fit(X[~test], y[~test])
        if ridge:
            ridge_folds.append(f)
        scores[test] = X[test] @ w + b
    fpr, tpr = roc_curve(scores, y)
    return ROCResult(auc_trapezoid(fpr, tpr), fpr, tpr, scores, ridge_folds)


# --- tables -----------------------------------------------------------------------------


METRIC_HEADER = ("metric", "subject", "structure", "value")


def write_metric_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for metric, subject, structure, value in rows:
            w.writerow([metric, subject, structure, repr(float(value))])


def write_roc(fpr, tpr, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr"))
        for a, b in zip(fpr, tpr):
            w.writerow([repr(float(a)), repr(float(b))])


def apc_table(series_by_subject, structures=None):
    """``{subject: {structure: APC}}`` for every subject with at least two time points."""
    out = {}
    for sid, series in series_by_subject.items():
        if len(series.entries) < 2:
            continue
        names = structures or sorted(series.entries[0][1])
        out[sid] = {s: apc(series, s) for s in names}
    return out
