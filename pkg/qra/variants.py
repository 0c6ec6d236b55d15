"""
The nine QRA variants.

Each variant is a composition of optional preprocessing blocks applied to the point
forecast matrix X, followed by one solver kernel per quantile level:

    name    row-std  PCA  average  solver
    QRA        -      -      -     exact
    QRM        -      -      x     exact
    LQRA       -      -      -     L1
    FQRA       -      x      -     exact
    FQRM       -      x      x     exact
    sFQRA      x      x      -     exact
    sFQRM      x      x      x     exact
    SQRA       -      -      -     smoothed
    SQRM       -      -      x     smoothed

Preprocessing state (PCA loadings, training column means) is frozen at fit time and
reused unchanged at prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from qra.core import (PointForecastMatrix, QuantileForecastSurface, QuantileGrid,
                      repair_crossing, validate_finite)
from qra.errors import (DegenerateRow, DimensionMismatch, NotConverged, ParamError,
                        RankDeficient, RankError, ValidationError)
from qra.log import get_logger
from qra.qrsolve import (L1Penalty, QrCoefficients, QrProblem, SmoothingBandwidth,
                         solve_qr, solve_qr_l1, solve_qr_smoothed)

logger = get_logger(__name__)

VARIANT_NAMES = ("QRA", "QRM", "LQRA", "FQRA", "FQRM", "sFQRA", "sFQRM", "SQRA", "SQRM")
ROW_STD_CONVENTIONS = ("population", "sample")
FACTOR_COUNT_DEFAULT = 1
PCA_RANK_TOL = 1e-10

# (standardize rows, PCA, average columns, solver)
_BLOCKS = {
    "QRA": (False, False, False, "exact"),
    "QRM": (False, False, True, "exact"),
    "LQRA": (False, False, False, "l1"),
    "FQRA": (False, True, False, "exact"),
    "FQRM": (False, True, True, "exact"),
    "sFQRA": (True, True, False, "exact"),
    "sFQRM": (True, True, True, "exact"),
    "SQRA": (False, False, False, "smoothed"),
    "SQRM": (False, False, True, "smoothed"),
}


@dataclass(frozen=True)
class VariantSpec:
    """
    Which variant to fit and its hyper-parameters.

    Attributes:
        name (str): One of VARIANT_NAMES.
        factor_count (int): Principal components kept (F-variants).
        l1 (L1Penalty): Penalty (LQRA).
        bw (SmoothingBandwidth): Bandwidth (S-variants).
        include_intercept (bool): Fit an intercept per quantile.
        row_std (str): "population" divides by m, "sample" by m - 1.
        repair (bool): Sort each predicted row so quantiles do not cross.
    """

    name: str = "QRA"
    factor_count: int = FACTOR_COUNT_DEFAULT
    l1: L1Penalty = field(default_factory=L1Penalty)
    bw: SmoothingBandwidth = field(default_factory=SmoothingBandwidth)
    include_intercept: bool = True
    row_std: str = "population"
    repair: bool = True

    def __post_init__(self):
        if self.name not in VARIANT_NAMES:
            raise ParamError(f"unknown variant '{self.name}', expected one of "
                             f"{', '.join(VARIANT_NAMES)}")
        if int(self.factor_count) < 1:
            raise ParamError(f"factor_count must be >= 1, got {self.factor_count}")
        if self.row_std not in ROW_STD_CONVENTIONS:
            raise ParamError(f"row_std must be one of {ROW_STD_CONVENTIONS}")
        object.__setattr__(self, "factor_count", int(self.factor_count))

    @property
    def blocks(self):
        return _BLOCKS[self.name]

    @property
    def solver(self):
        return self.blocks[3]

    def to_dict(self):
        return {
            "name": self.name,
            "factor_count": self.factor_count,
            "lambda_l1": self.l1.lambda_l1,
            "penalize_intercept": self.l1.penalize_intercept,
            "h": self.bw.h,
            "bandwidth_rule": self.bw.rule,
            "include_intercept": self.include_intercept,
            "row_std": self.row_std,
            "repair": self.repair,
        }

    @classmethod
    def from_dict(cls, data):
        return variant_spec(**data)


def variant_spec(name="QRA", lambda_l1=0.0, penalize_intercept=False, h=None,
                 bandwidth_rule="rule_of_thumb", **params):
    """Builds a VariantSpec from flat keyword parameters (as found in configs)."""
    return VariantSpec(name=name,
                       l1=L1Penalty(lambda_l1, penalize_intercept),
                       bw=SmoothingBandwidth(h, bandwidth_rule),
                       **params)


@dataclass(frozen=True)
class PreprocessState:
    """Frozen preprocessing of a fitted variant."""

    standardize: bool
    average: bool
    row_ddof: int = 0
    column_means: tuple = ()
    loadings: tuple = ()
    explained_variance: tuple = ()
    input_columns: int = 0

    def loadings_matrix(self):
        return np.array(self.loadings, dtype=float).reshape(self.input_columns, -1)

    def apply(self, X):
        """Maps raw point forecasts onto the regressors the solver saw."""
        X = validate_finite(X, "point forecasts")
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape[1] != self.input_columns:
            raise DimensionMismatch(
                f"expected {self.input_columns} forecaster columns, got {X.shape[1]}")
        if self.standardize:
            X = standardize_rows(X, self.row_ddof)
        if self.loadings:
            X = (X - np.asarray(self.column_means)) @ self.loadings_matrix()
        if self.average:
            X = X.mean(axis=1, keepdims=True)
        return X

    def to_dict(self):
        return {
            "standardize": self.standardize,
            "average": self.average,
            "row_ddof": self.row_ddof,
            "column_means": list(self.column_means),
            "loadings": [list(row) for row in self.loadings],
            "explained_variance": list(self.explained_variance),
            "input_columns": self.input_columns,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["standardize"], data["average"], data["row_ddof"],
                   tuple(data["column_means"]),
                   tuple(tuple(row) for row in data["loadings"]),
                   tuple(data["explained_variance"]), data["input_columns"])


def standardize_rows(X, ddof=0):
    """
    Scales every row to mean 0 and standard deviation 1 across forecasters.

    Parameters:
        X (np.ndarray): n x m, m >= 2.
        ddof (int): 0 for the population convention, 1 for sample.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[1] < 2:
        raise DegenerateRow("row standardization needs at least two forecasters")
    mean = X.mean(axis=1, keepdims=True)
    std = X.std(axis=1, ddof=ddof, keepdims=True)
    flat = np.flatnonzero(std[:, 0] == 0)
    if flat.size:
        raise DegenerateRow(f"{flat.size} rows have zero spread (first at row {flat[0]})")
    return (X - mean) / std


def principal_components(X, factor_count):
    """
    PCA through the SVD of the column-demeaned matrix.

    Each loading vector is signed so its largest-magnitude entry is positive.

    Parameters:
        X (np.ndarray): n x m training matrix.
        factor_count (int): Components to keep.

    Returns:
        tuple: (column means, m x factor_count loadings, explained variance ratios).
    """
    means = X.mean(axis=0)
    Z = X - means
    _, s, vt = np.linalg.svd(Z, full_matrices=False)
    rank = int(np.sum(s > PCA_RANK_TOL * max(s[0], 1.0))) if s.size else 0
    if factor_count > rank:
        raise RankError(f"{factor_count} components requested, demeaned matrix has "
                        f"rank {rank}")
    loadings = vt[:factor_count].T.copy()
    for j in range(factor_count):
        if loadings[np.argmax(np.abs(loadings[:, j])), j] < 0:
            loadings[:, j] *= -1
    variance = s**2
    explained = variance[:factor_count] / variance.sum()
    return means, loadings, explained


def preprocess(spec, X):
    """
    Fits the preprocessing blocks of a variant on training forecasts.

    Parameters:
        spec (VariantSpec): The variant.
        X (PointForecastMatrix or array-like): n x m point forecasts.

    Returns:
        tuple: (design matrix for the solver, PreprocessState).
    """
    if isinstance(X, PointForecastMatrix):
        X = X.values
    X = validate_finite(X, "point forecasts")
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    standardize, pca, average, _ = spec.blocks
    ddof = 0 if spec.row_std == "population" else 1
    if pca and spec.factor_count > X.shape[1]:
        raise RankError(f"factor_count {spec.factor_count} exceeds "
                        f"{X.shape[1]} forecaster columns")

    Z = standardize_rows(X, ddof) if standardize else X
    means, loadings, explained = (), (), ()
    if pca:
        means_arr, load_arr, expl_arr = principal_components(Z, spec.factor_count)
        means = tuple(means_arr)
        loadings = tuple(tuple(row) for row in load_arr)
        explained = tuple(expl_arr)
    state = PreprocessState(standardize, average, ddof, means, loadings, explained,
                            X.shape[1])
    return state.apply(X), state


def _solve(spec, problem):
    if spec.solver == "l1":
        return solve_qr_l1(problem, spec.l1)
    if spec.solver == "smoothed":
        return solve_qr_smoothed(problem, spec.bw)
    return solve_qr(problem)


@dataclass(frozen=True)
class FittedVariant:
    """A variant fitted on one calibration window: preprocessing plus one model per level."""

    spec: VariantSpec
    state: PreprocessState
    grid: QuantileGrid
    per_quantile: tuple
    forecaster_names: tuple = ()

    def coefficients(self, level):
        i = self.grid.index_of(level)
        return None if i is None else self.per_quantile[i]

    def predict(self, X_new, timestamps=None):
        return predict_variant(self, X_new, timestamps)

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "state": self.state.to_dict(),
            "levels": list(self.grid.levels),
            "coefficients": [c.to_dict() for c in self.per_quantile],
            "forecaster_names": list(self.forecaster_names),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(VariantSpec.from_dict(data["spec"]),
                   PreprocessState.from_dict(data["state"]),
                   QuantileGrid(tuple(data["levels"])),
                   tuple(QrCoefficients.from_dict(c) for c in data["coefficients"]),
                   tuple(data.get("forecaster_names", ())))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_variant(spec, X_train, y_train, grid=None, day=None):
    """
    Preprocesses once, then solves one quantile regression per grid level.

    Parameters:
        spec (VariantSpec): The variant.
        X_train (PointForecastMatrix or array-like): n x m training forecasts.
        y_train (HourlyTimeSeries, pd.Series or array-like): n observed prices.
        grid (QuantileGrid): Levels to fit; defaults to 0.01..0.99.
        day (date): Prediction day, attached to solver errors.

    Returns:
        FittedVariant
    """
    grid = grid or QuantileGrid()
    names = X_train.forecaster_names if isinstance(X_train, PointForecastMatrix) else ()
    if hasattr(y_train, "to_numpy"):
        y_train = y_train.to_numpy()
    design, state = preprocess(spec, X_train)
    y = validate_finite(y_train, "responses").reshape(-1)
    if y.shape[0] != design.shape[0]:
        raise DimensionMismatch(f"{design.shape[0]} forecast rows vs {y.shape[0]} prices")

    fits = []
    for k in grid:
        problem = QrProblem(design, y, k, spec.include_intercept)
        try:
            fits.append(_solve(spec, problem))
        except (NotConverged, RankDeficient) as exc:
            raise exc.annotate(level=k, day=day) from exc
    logger.debug(f"Fitted {spec.name} on {design.shape[0]} rows, "
                 f"{design.shape[1]} regressors, {len(grid)} levels")
    return FittedVariant(spec, state, grid, tuple(fits), tuple(names))


def predict_variant(fv, X_new, timestamps=None):
    """
    Predicts every fitted quantile for new point forecasts.

    Parameters:
        fv (FittedVariant): Fitted variant.
        X_new (PointForecastMatrix or array-like): Rows to predict.
        timestamps (pd.DatetimeIndex): Row labels when X_new is a plain array;
            defaults to an hourly range from the epoch.

    Returns:
        QuantileForecastSurface: Crossing-repaired when the VariantSpec asks for it.
    """
    if isinstance(X_new, PointForecastMatrix):
        if fv.forecaster_names and X_new.forecaster_names != fv.forecaster_names:
            raise DimensionMismatch(
                f"forecasters {X_new.forecaster_names} differ from training "
                f"{fv.forecaster_names}")
        timestamps = X_new.timestamps
        X_new = X_new.values
    design = fv.state.apply(X_new)
    if timestamps is None:
        timestamps = pd.date_range("1970-01-01", periods=design.shape[0], freq="h")
    values = np.column_stack([c.predict(design) for c in fv.per_quantile])
    surface = QuantileForecastSurface(timestamps, fv.grid, values)
    if fv.spec.repair and not surface.is_monotone():
        surface = repair_crossing(surface)
    return surface


class QRA:
    """
    Quantile Regression Averaging: one linear quantile model per level on the raw
    point forecasts. Subclasses swap the preprocessing blocks or the solver.

    Parameters:
        quantiles (iterable): Percents (e.g. [25, 50, 75]) or a QuantileGrid.
        fit_intercept (bool): Fit an intercept per level.
        **params: factor_count, lambda_l1, h, row_std, repair.
    """

    name = "QRA"

    def __init__(self, quantiles=None, fit_intercept=True, **params):
        if quantiles is None:
            self.grid = QuantileGrid()
        elif isinstance(quantiles, QuantileGrid):
            self.grid = quantiles
        else:
            self.grid = QuantileGrid.from_percentiles(quantiles)
        self.spec = variant_spec(self.name, include_intercept=fit_intercept, **params)
        self.fitted = None

    def fit(self, X, y):
        self.fitted = fit_variant(self.spec, X, y, self.grid)
        return self

    def predict(self, X, timestamps=None):
        if self.fitted is None:
            raise ValidationError(f"{self.name} must be fitted before predicting")
        return predict_variant(self.fitted, X, timestamps)


class QRM(QRA):
    """QRA on the row mean of the forecasts."""
    name = "QRM"


class LQRA(QRA):
    """QRA with an L1 penalty on the weights."""
    name = "LQRA"


class FQRA(QRA):
    """QRA on principal-component scores."""
    name = "FQRA"


class FQRM(QRA):
    name = "FQRM"


class sFQRA(QRA):
    name = "sFQRA"


class sFQRM(QRA):
    name = "sFQRM"


class SQRA(QRA):
    """QRA with the kernel-smoothed check loss."""
    name = "SQRA"


class SQRM(QRA):
    name = "SQRM"


VARIANT_CLASSES = {cls.name: cls for cls in
                   (QRA, QRM, LQRA, FQRA, FQRM, sFQRA, sFQRM, SQRA, SQRM)}


def make_variant(name, quantiles=None, fit_intercept=True, **params):
    """Instantiates a variant class by name."""
    if name not in VARIANT_CLASSES:
        raise ParamError(f"unknown variant '{name}'")
    return VARIANT_CLASSES[name](quantiles, fit_intercept, **params)
