"""Evaluation protocol: rank/linear correlation after logistic mapping,
RMSE, and pairwise discriminability statistics (ROC areas and the correct
classification rate over better/worse pairs).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats


class UndefinedMetric(ValueError):
    """The statistic is undefined for these inputs (e.g. constant scores)."""


@dataclass(frozen=True)
class LogisticParams:
    """Five-parameter monotone mapping fitted before PLCC/RMSE."""

    beta1: float
    beta2: float
    beta3: float
    beta4: float
    beta5: float
    fallback: bool = False  # set when the nonlinear fit diverged (linear-only fit)

    def as_array(self) -> np.ndarray:
        return np.array([self.beta1, self.beta2, self.beta3, self.beta4, self.beta5])


@dataclass(frozen=True)
class EvalReport:
    """The metric bundle for one prediction set."""

    srocc: float
    plcc: float
    rmse: float
    n: int
    auc_ds: float | None = None
    auc_bw: float | None = None
    c0: float | None = None
    logistic_fallback: bool = False


@dataclass(frozen=True)
class Pair:
    """One judged image pair: objective scores plus subjective ground truth.

    different marks pairs whose subjective quality is significantly unequal;
    a_better is meaningful only for different pairs.
    """

    obj_a: float
    obj_b: float
    different: bool
    a_better: bool = False


def _ranks(x: np.ndarray) -> np.ndarray:
    """Fractional ranks (1-based), ties averaged."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x))
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise UndefinedMetric("correlation of a constant sequence is undefined")
    return float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))


def srocc(x, y) -> float:
    """Spearman rank-order correlation (Pearson over fractional ranks)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"score vectors must share a 1D shape, got {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise ValueError(f"need at least 3 samples, got {len(x)}")
    return pearson(_ranks(x), _ranks(y))


def logistic_map(params: LogisticParams, x: np.ndarray) -> np.ndarray:
    """y = b1 * (1/2 - 1 / (1 + exp(b2 (x - b3)))) + b4 x + b5."""
    x = np.asarray(x, dtype=np.float64)
    z = np.clip(params.beta2 * (x - params.beta3), -500.0, 500.0)
    return params.beta1 * (0.5 - 1.0 / (1.0 + np.exp(z))) + params.beta4 * x + params.beta5


def _linear_fit(pred: np.ndarray, mos: np.ndarray) -> LogisticParams:
    """Least-squares line as the degenerate (b1 = b2 = 0) mapping."""
    a = np.vstack([pred, np.ones_like(pred)]).T
    coef, *_ = np.linalg.lstsq(a, mos, rcond=None)
    return LogisticParams(0.0, 0.0, 0.0, float(coef[0]), float(coef[1]), fallback=True)


def fit_logistic(pred, mos, n_starts: int = 5) -> LogisticParams:
    """Fit the five-parameter mapping by multi-start Nelder-Mead on the SSE.

    Starts from range/slope-based heuristics with seeded jitter, refines the
    best simplex once, and falls back to a plain line (flagged) when the
    nonlinear fit cannot beat it or diverges.
    """
    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    if len(pred) < 6:
        raise ValueError(f"logistic fit needs >= 6 points, got {len(pred)}")
    linear = _linear_fit(pred, mos)
    pred_range = float(pred.max() - pred.min())
    if pred_range == 0.0:
        return linear

    def sse(beta: np.ndarray) -> float:
        mapped = logistic_map(LogisticParams(*beta), pred)
        err = mapped - mos
        val = float(err @ err)
        return val if np.isfinite(val) else 1e300

    base = np.array([
        float(mos.max() - mos.min()),
        4.0 / pred_range,
        float(pred.mean()),
        linear.beta4,
        linear.beta5,
    ])
    rng = np.random.default_rng(0)
    best_beta, best_sse = None, np.inf
    for start in range(n_starts):
        x0 = base if start == 0 else base * rng.normal(1.0, 0.3, size=5) + rng.normal(0.0, 0.1, size=5)
        res = optimize.minimize(sse, x0, method="Nelder-Mead",
                                options={"maxiter": 4000, "xatol": 1e-10, "fatol": 1e-12})
        if np.isfinite(res.fun) and res.fun < best_sse:
            best_sse, best_beta = float(res.fun), res.x
    if best_beta is not None:
        res = optimize.minimize(sse, best_beta, method="Nelder-Mead",
                                options={"maxiter": 4000, "xatol": 1e-12, "fatol": 1e-14})
        if np.isfinite(res.fun) and res.fun < best_sse:
            best_sse, best_beta = float(res.fun), res.x

    lin_sse = sse(linear.as_array())
    if best_beta is None or not np.all(np.isfinite(best_beta)) or best_sse > lin_sse:
        return linear
    return LogisticParams(*(float(b) for b in best_beta))


def plcc_rmse(pred, mos) -> tuple[float, float, LogisticParams]:
    """Pearson correlation and RMSE of predictions after the logistic mapping."""
    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    params = fit_logistic(pred, mos)
    mapped = logistic_map(params, pred)
    rmse = float(np.sqrt(np.mean((mapped - mos) ** 2)))
    return pearson(mapped, mos), rmse, params


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve, ties handled as a group.

    Equals the Mann-Whitney U statistic divided by n_pos * n_neg.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC needs at least one sample of each class")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    area = 0.0
    tp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        d_tp = int(lab[i:j + 1].sum())
        d_fp = (j - i + 1) - d_tp
        area += d_fp * (tp + 0.5 * d_tp)
        tp += d_tp
        i = j + 1
    return area / (n_pos * n_neg)


def krasula(pairs: list[Pair]) -> tuple[float | None, float | None, float | None]:
    """(auc_ds, auc_bw, c0) over judged pairs.

    auc_ds separates different from similar pairs by |delta objective|;
    auc_bw separates better from worse (among different pairs) by the signed
    delta; c0 is the fraction of different pairs whose objective sign agrees
    with the subjective direction.  A statistic whose category is empty is
    returned as None, the others are still computed.
    """
    if not pairs:
        raise ValueError("no pairs supplied")
    delta = np.array([p.obj_a - p.obj_b for p in pairs])
    different = np.array([p.different for p in pairs], dtype=bool)

    try:
        auc_ds = roc_auc(np.abs(delta), different)
    except UndefinedMetric:
        auc_ds = None

    d_delta = delta[different]
    d_better = np.array([p.a_better for p in pairs if p.different], dtype=bool)
    auc_bw = None
    c0 = None
    if len(d_delta) > 0:
        # Orient every pair as (better, worse): a worse-first pair flips sign.
        oriented = np.where(d_better, d_delta, -d_delta)
        c0 = float(np.mean(oriented > 0))
        try:
            auc_bw = roc_auc(d_delta, d_better)
        except UndefinedMetric:
            auc_bw = None
    return auc_ds, auc_bw, c0


def pairs_from_opinion_scores(scores_a: np.ndarray, scores_b: np.ndarray,
                              obj_a: float, obj_b: float,
                              alpha: float = 0.05) -> Pair:
    """Label one pair from raw per-subject scores via Welch's t-test."""
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    result = stats.ttest_ind(scores_a, scores_b, equal_var=False)
    different = bool(result.pvalue < alpha)
    return Pair(obj_a, obj_b, different, bool(scores_a.mean() > scores_b.mean()))


def evaluate_scores(pred, mos, pairs: list[Pair] | None = None) -> EvalReport:
    """Standard measures (plus pair statistics when pair labels are given)."""
    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    rho = srocc(pred, mos)
    plcc, rmse, params = plcc_rmse(pred, mos)
    auc_ds = auc_bw = c0 = None
    if pairs:
        auc_ds, auc_bw, c0 = krasula(pairs)
    return EvalReport(srocc=rho, plcc=plcc, rmse=rmse, n=len(pred),
                      auc_ds=auc_ds, auc_bw=auc_bw, c0=c0,
                      logistic_fallback=params.fallback)


def split_by_reference(records, n_test_refs: int = 3, seed: int = 0):
    """Partition manifest records by reference id with a seeded draw.

    Returns (train_records, test_records); no reference id ever appears on
    both sides.
    """
    refs = sorted({r.ref_id for r in records})
    if len(refs) < 4:
        raise ValueError(f"need at least 4 distinct references, got {len(refs)}")
    if n_test_refs >= len(refs):
        raise ValueError(
            f"cannot hold out {n_test_refs} of {len(refs)} references")
    rng = np.random.default_rng(seed)
    test_refs = set(rng.choice(refs, size=n_test_refs, replace=False).tolist())
    train = [r for r in records if r.ref_id not in test_refs]
    test = [r for r in records if r.ref_id in test_refs]
    return train, test
