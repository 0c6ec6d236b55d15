"""
Evaluation of probabilistic forecasts: central prediction intervals, Average
Empirical Coverage (AEC), Aggregate Pinball Score (APS) and the Kupiec and
Christoffersen likelihood-ratio tests.

A "hit" is an actual price inside the closed interval [L_t, U_t]. Kupiec compares
the hit rate with the nominal coverage alpha/100, which is equivalent to testing
the violation rate against 1 - alpha/100. Terms 0 * ln(0) are taken as 0; samples
with only hits or only misses produce a result flagged `degenerate` instead of
an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import xlogy
from scipy.stats import chi2

from qra.core import HourlyTimeSeries, pinball_loss
from qra.errors import AlignmentError, MissingLevel, ValidationError
from qra.log import get_logger

logger = get_logger(__name__)

ALPHAS_DEFAULT = (50, 70, 90)
SIGNIFICANCE_DEFAULT = 0.05


@dataclass(frozen=True)
class PredictionInterval:
    """Central interval at nominal coverage alpha (percent)."""

    nominal_alpha: float
    lower_level: float
    upper_level: float
    timestamps: pd.DatetimeIndex
    lower: np.ndarray
    upper: np.ndarray

    def __len__(self):
        return len(self.lower)


@dataclass(frozen=True)
class CoverageResult:
    aec: float
    hits: np.ndarray
    n: int


@dataclass(frozen=True)
class LrTestResult:
    """
    Outcome of a likelihood-ratio test.

    Attributes:
        statistic (float): LR statistic, >= 0.
        dof (int): Degrees of freedom of the chi-square reference.
        critical_value (float): Chi-square quantile at 1 - significance.
        reject (bool): statistic > critical_value.
        p_value (float): Chi-square survival function at the statistic.
        degenerate (bool): All hits or all misses.
        lr_uc (float): Unconditional-coverage part (Christoffersen only).
        lr_ind (float): Independence part (Christoffersen only).
    """

    statistic: float
    dof: int
    critical_value: float
    reject: bool
    p_value: float
    significance: float
    degenerate: bool = False
    lr_uc: float = None
    lr_ind: float = None


def interval_levels(alpha):
    """Quantile levels bounding the central alpha% interval."""
    alpha = float(alpha)
    if not 0 < alpha < 100:
        raise ValidationError(f"alpha must be a percent in (0, 100), got {alpha}")
    return (100 - alpha) / 200, (100 + alpha) / 200


def build_interval(surface, alpha):
    """
    Reads a central prediction interval off a quantile surface.

    Parameters:
        surface (QuantileForecastSurface): Forecast quantiles.
        alpha (float): Nominal coverage in percent, e.g. 50 uses levels 0.25, 0.75.

    Returns:
        PredictionInterval
    """
    lo_level, hi_level = interval_levels(alpha)
    lower, upper = surface.column(lo_level), surface.column(hi_level)
    absent = [k for k, col in ((lo_level, lower), (hi_level, upper)) if col is None]
    if absent:
        raise MissingLevel(f"alpha={alpha:g} needs levels {absent} on the grid")
    crossed = int(np.sum(lower > upper))
    if crossed:
        raise ValidationError(f"{crossed} intervals have L > U; repair the surface first")
    return PredictionInterval(float(alpha), lo_level, hi_level, surface.timestamps,
                              np.asarray(lower), np.asarray(upper))


def _aligned_actual(actual, timestamps):
    if isinstance(actual, HourlyTimeSeries):
        actual = actual.values
    if isinstance(actual, pd.Series):
        if not actual.index.equals(pd.DatetimeIndex(timestamps)):
            raise AlignmentError("actual prices and forecasts have different timestamps")
        return actual.to_numpy(dtype=float)
    actual = np.asarray(actual, dtype=float).reshape(-1)
    if actual.shape[0] != len(timestamps):
        raise AlignmentError(f"{actual.shape[0]} actual prices vs {len(timestamps)} "
                             f"forecast rows")
    return actual


def aec(interval, actual):
    """
    Average Empirical Coverage: percent of actuals inside [L_t, U_t].

    Parameters:
        interval (PredictionInterval): Bounds per timestamp.
        actual (HourlyTimeSeries, pd.Series or array-like): Observed prices.

    Returns:
        CoverageResult
    """
    p = _aligned_actual(actual, interval.timestamps)
    hits = ((interval.lower <= p) & (p <= interval.upper)).astype(int)
    n = int(hits.size)
    if n == 0:
        raise ValidationError("cannot compute coverage of an empty sample")
    return CoverageResult(aec=100.0 * hits.mean(), hits=hits, n=n)


def interval_width(interval):
    """Mean width U_t - L_t (sharpness)."""
    return float(np.mean(interval.upper - interval.lower))


def aps(surface, actual):
    """
    Aggregate Pinball Score: mean pinball loss over every timestamp and level.

    Parameters:
        surface (QuantileForecastSurface): Forecast quantiles.
        actual (HourlyTimeSeries, pd.Series or array-like): Observed prices.

    Returns:
        float
    """
    p = _aligned_actual(actual, surface.timestamps)
    if p.size == 0:
        raise ValidationError("cannot score an empty sample")
    per_level = [np.mean(pinball_loss(k, p - surface.values[:, j]))
                 for j, k in enumerate(surface.grid)]
    return float(np.mean(per_level))


def _hits(hits):
    h = np.asarray(hits).astype(int).reshape(-1)
    if not np.all((h == 0) | (h == 1)):
        raise ValidationError("hit sequence must be binary")
    return h


def _result(statistic, dof, significance, **extra):
    if not 0 < significance < 1:
        raise ValidationError(f"significance must lie in (0, 1), got {significance}")
    statistic = max(0.0, float(statistic))
    critical = float(chi2.ppf(1.0 - significance, dof))
    return LrTestResult(statistic=statistic,
                        dof=dof,
                        critical_value=critical,
                        reject=bool(statistic > critical),
                        p_value=float(chi2.sf(statistic, dof)),
                        significance=float(significance),
                        **extra)


def _lr_uc(h, p):
    n, n1 = h.size, int(h.sum())
    pi = n1 / n
    null = xlogy(n - n1, 1 - p) + xlogy(n1, p)
    alt = xlogy(n - n1, 1 - pi) + xlogy(n1, pi)
    return -2.0 * (null - alt)


def kupiec_test(hits, alpha, significance=SIGNIFICANCE_DEFAULT):
    """
    Kupiec unconditional-coverage test of the hit rate against alpha/100.

    Parameters:
        hits (array-like): 1 where the actual was inside the interval.
        alpha (float): Nominal coverage in percent.
        significance (float): Test size, e.g. 0.05.

    Returns:
        LrTestResult: dof 1.
    """
    h = _hits(hits)
    if h.size < 1:
        raise ValidationError("Kupiec test needs at least one observation")
    p = float(alpha) / 100
    if not 0 < p < 1:
        raise ValidationError(f"alpha must be a percent in (0, 100), got {alpha}")
    n1 = int(h.sum())
    return _result(_lr_uc(h, p), 1, significance, degenerate=n1 in (0, h.size))


def christoffersen_test(hits, alpha, significance=SIGNIFICANCE_DEFAULT):
    """
    Christoffersen conditional-coverage test: LR_cc = LR_uc + LR_ind, where LR_ind
    compares a first-order Markov chain of hits with independent Bernoulli draws.

    Parameters:
        hits (array-like): 1 where the actual was inside the interval.
        alpha (float): Nominal coverage in percent.
        significance (float): Test size.

    Returns:
        LrTestResult: dof 2, with lr_uc and lr_ind filled in.
    """
    h = _hits(hits)
    if h.size < 2:
        raise ValidationError("Christoffersen test needs at least two observations")
    p = float(alpha) / 100
    if not 0 < p < 1:
        raise ValidationError(f"alpha must be a percent in (0, 100), got {alpha}")

    prev, curr = h[:-1], h[1:]
    n00 = int(np.sum((prev == 0) & (curr == 0)))
    n01 = int(np.sum((prev == 0) & (curr == 1)))
    n10 = int(np.sum((prev == 1) & (curr == 0)))
    n11 = int(np.sum((prev == 1) & (curr == 1)))
    pi01 = n01 / (n00 + n01) if n00 + n01 else 0.0
    pi11 = n11 / (n10 + n11) if n10 + n11 else 0.0
    pi = (n01 + n11) / (n00 + n01 + n10 + n11)

    markov = (xlogy(n00, 1 - pi01) + xlogy(n01, pi01)
              + xlogy(n10, 1 - pi11) + xlogy(n11, pi11))
    bernoulli = xlogy(n00 + n10, 1 - pi) + xlogy(n01 + n11, pi)
    lr_ind = max(0.0, float(-2.0 * (bernoulli - markov)))
    lr_uc = max(0.0, float(_lr_uc(h, p)))
    return _result(lr_uc + lr_ind, 2, significance,
                   degenerate=int(h.sum()) in (0, h.size),
                   lr_uc=lr_uc, lr_ind=lr_ind)


def metrics_row(variant, alpha, coverage, width, kupiec, christoffersen):
    """One alpha of the metrics.csv layout."""
    return {
        "variant": variant,
        "alpha": float(alpha),
        "aec": coverage.aec,
        "width": width,
        "n": coverage.n,
        "kupiec_stat": kupiec.statistic,
        "kupiec_p": kupiec.p_value,
        "kupiec_reject": kupiec.reject,
        "christoffersen_stat": christoffersen.statistic,
        "christoffersen_p": christoffersen.p_value,
        "christoffersen_reject": christoffersen.reject,
        "lr_ind": christoffersen.lr_ind,
        "degenerate": kupiec.degenerate,
    }


def evaluate_surface(surface, actual, alphas=ALPHAS_DEFAULT,
                     significance=SIGNIFICANCE_DEFAULT, variant=None):
    """
    Interval metrics for several nominal coverages.

    Returns:
        pd.DataFrame: One row per alpha with aec, width and both tests.
    """
    rows = []
    for alpha in alphas:
        interval = build_interval(surface, alpha)
        coverage = aec(interval, actual)
        kupiec = kupiec_test(coverage.hits, alpha, significance)
        christoffersen = christoffersen_test(coverage.hits, alpha, significance)
        if kupiec.degenerate:
            logger.warning(f"{variant or 'surface'} alpha={alpha:g}: hit sequence "
                           f"is constant, tests are degenerate")
        rows.append(metrics_row(variant, alpha, coverage, interval_width(interval),
                                kupiec, christoffersen))
    return pd.DataFrame(rows)
