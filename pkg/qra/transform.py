"""
Scalers and variance stabilizing transformations (VSTs).

Prices go through P -> scaling -> p -> VST -> Y before modelling, and model output
comes back through the exact inverses: Y_hat -> p_hat -> P_hat.

Every fitted state is a frozen dataclass, serializable to JSON with repr-exact
floats so a backtest can be resumed from disk.

Every VST is monotone non-decreasing and round-trips exactly on [-5, 5], with
one exception: poly. Its formula, with either exponent mode, is undefined for
|p| <= 1 - c and decreases in |p| beyond that for the default c=0.33 and
lambda=0.125, so it raises DomainError inside that band and is not covered by
the monotonicity or round-trip guarantees.

mlog uses c = 1.0 by default. With a small c such as 0.33 the shift log(c)
pushes the image of small |p| across zero, so the sign-based inverse is
ambiguous there and raises DomainError.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit, logit

from qra.core import validate_finite
from qra.errors import DomainError, ParamError, ScaleError, ValidationError

SCALER_KINDS = ("mean_std", "median_mad")
VST_KINDS = ("none", "three_sigma", "three_sigma_log", "logistic", "arcsinh",
             "boxcox", "poly", "mlog", "pit")

BOXCOX_LAMBDA_DEFAULT = 0.5
POLY_LAMBDA_DEFAULT = 0.125
POLY_C_DEFAULT = 0.33
MLOG_C_DEFAULT = 1.0
PIT_REFERENCE_DEFAULT = "normal"
POLY_EXPONENT_MODES = ("printed", "literature")

CLIP = 3.0

_PIT_REFERENCES = {
    "normal": stats.norm,
    "logistic": stats.logistic,
    "laplace": stats.laplace,
}


def _as_array(values):
    if isinstance(values, pd.Series):
        return values.to_numpy(dtype=float)
    return np.asarray(values, dtype=float)


def _like(template, values):
    """Returns values shaped like the template (Series, scalar or array)."""
    if isinstance(template, pd.Series):
        return pd.Series(values, index=template.index, name=template.name)
    if np.ndim(template) == 0:
        return float(values)
    return values


# --------------------------------------------------------------------------
# Scalers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalerState:
    """Fitted location/scale pair; apply computes (x - center) / spread."""

    kind: str
    center: float
    spread: float

    def __post_init__(self):
        if self.kind not in SCALER_KINDS:
            raise ParamError(f"unknown scaler kind '{self.kind}'")
        if not self.spread > 0:
            raise ScaleError(f"scaler spread must be positive, got {self.spread}")


def fit_scaler(series, kind="mean_std"):
    """
    Fits a scaler.

    mean_std uses the mean and the sample standard deviation; median_mad uses the
    median and the mean absolute deviation around the median.

    Parameters:
        series (array-like): Training values.
        kind (str): "mean_std" or "median_mad".

    Returns:
        ScalerState
    """
    x = validate_finite(_as_array(series), "scaler input")
    if np.unique(x).size < 2:
        raise ScaleError("cannot fit a scaler on constant input")
    if kind == "mean_std":
        center = float(np.mean(x))
        spread = float(np.std(x, ddof=1))
    elif kind == "median_mad":
        center = float(np.median(x))
        spread = float(np.mean(np.abs(x - center)))
    else:
        raise ParamError(f"unknown scaler kind '{kind}'")
    return ScalerState(kind, center, spread)


def apply_scaler(state, series):
    x = _as_array(series)
    return _like(series, (x - state.center) / state.spread)


def invert_scaler(state, series):
    x = _as_array(series)
    return _like(series, x * state.spread + state.center)


# --------------------------------------------------------------------------
# Variance stabilizing transformations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VstParams:
    """
    Hyper-parameters and fitted state of one VST.

    Attributes:
        kind (str): One of VST_KINDS.
        lam (float): BoxCox / Poly lambda.
        c (float): Poly / Mlog c.
        poly_exponent (str): "printed" uses the 1/(lambda - 1) exponent,
            "literature" uses lambda - 1.
        pit_reference (str): Reference distribution G for PIT.
        pit_knots_x (tuple): Sorted distinct training values (PIT only).
        pit_knots_u (tuple): Empirical CDF at those values (PIT only).
    """

    kind: str
    lam: float = None
    c: float = None
    poly_exponent: str = "printed"
    pit_reference: str = PIT_REFERENCE_DEFAULT
    pit_knots_x: tuple = field(default=())
    pit_knots_u: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in VST_KINDS:
            raise ParamError(f"unknown VST kind '{self.kind}'")
        if self.kind == "boxcox":
            lam = BOXCOX_LAMBDA_DEFAULT if self.lam is None else float(self.lam)
            if lam < 0:
                raise ParamError(f"BoxCox needs lambda >= 0, got {lam}")
            object.__setattr__(self, "lam", lam)
        elif self.kind == "poly":
            lam = POLY_LAMBDA_DEFAULT if self.lam is None else float(self.lam)
            c = POLY_C_DEFAULT if self.c is None else float(self.c)
            if lam == 1.0 or lam <= 0:
                raise ParamError(f"Poly needs lambda > 0 and != 1, got {lam}")
            if c <= 0:
                raise ParamError(f"Poly needs c > 0, got {c}")
            if self.poly_exponent not in POLY_EXPONENT_MODES:
                raise ParamError(f"unknown poly exponent mode '{self.poly_exponent}'")
            object.__setattr__(self, "lam", lam)
            object.__setattr__(self, "c", c)
        elif self.kind == "mlog":
            c = MLOG_C_DEFAULT if self.c is None else float(self.c)
            if c <= 0:
                raise ParamError(f"Mlog needs c > 0, got {c}")
            object.__setattr__(self, "c", c)
        elif self.kind == "pit":
            if self.pit_reference not in _PIT_REFERENCES:
                raise ParamError(f"unknown PIT reference '{self.pit_reference}'")
            object.__setattr__(self, "pit_knots_x",
                               tuple(float(v) for v in self.pit_knots_x))
            object.__setattr__(self, "pit_knots_u",
                               tuple(float(v) for v in self.pit_knots_u))

    @property
    def is_fitted(self):
        return self.kind != "pit" or len(self.pit_knots_x) > 0

    def poly_power(self):
        if self.poly_exponent == "printed":
            return 1.0 / (self.lam - 1.0)
        return self.lam - 1.0


def fit_vst(kind, p=None, **hyper):
    """
    Builds VstParams, estimating the empirical CDF when kind is "pit".

    The PIT CDF interpolates linearly between order statistics; the i-th smallest
    distinct value gets its mean rank over n+1, so the estimate stays inside
    [1/(n+1), n/(n+1)] and G^-1 stays finite.

    Parameters:
        kind (str): One of VST_KINDS.
        p (array-like): Scaled training values (needed for PIT).
        **hyper: lam, c, poly_exponent, pit_reference.

    Returns:
        VstParams
    """
    if kind != "pit":
        return VstParams(kind, **hyper)
    if p is None:
        raise ValidationError("PIT needs training data to estimate its CDF")
    x = np.sort(validate_finite(_as_array(p), "PIT input"))
    n = x.size
    if n < 2:
        raise ValidationError("PIT needs at least two training points")
    distinct, first, counts = np.unique(x, return_index=True, return_counts=True)
    # mean 1-based rank of each tied block
    ranks = first + (counts + 1) / 2.0
    return VstParams("pit",
                     pit_knots_x=tuple(distinct),
                     pit_knots_u=tuple(ranks / (n + 1)),
                     **hyper)


def _poly_forward(params, a):
    base = (a / params.c + 1.0)**params.lam - (1.0 / params.c)**params.lam
    if np.any(base <= 0):
        raise DomainError(
            f"poly transform undefined for |p| <= {1.0 - params.c:g} "
            f"(c={params.c:g}, lambda={params.lam:g})")
    return base**params.poly_power()


def _poly_backward(params, b):
    if np.any(b <= 0):
        raise DomainError("poly inverse needs |Y| > 0")
    base = b**(1.0 / params.poly_power())
    return params.c * ((base + (1.0 / params.c)**params.lam)**(1.0 / params.lam) - 1.0)


def vst_transform(params, p):
    """
    Applies a VST elementwise.

    Parameters:
        params (VstParams): Transformation and its hyper-parameters.
        p (float, np.ndarray or pd.Series): Scaled values.

    Returns:
        Same type as p: transformed values Y.
    """
    x = validate_finite(_as_array(p), "VST input")
    sign, a = np.sign(x), np.abs(x)
    kind = params.kind
    if kind == "none":
        y = x.copy()
    elif kind == "three_sigma":
        y = np.clip(x, -CLIP, CLIP)
    elif kind == "three_sigma_log":
        y = np.where(a > CLIP, sign * (np.log(np.maximum(a, CLIP) - 2.0) + CLIP), x)
    elif kind == "logistic":
        y = expit(x)
    elif kind == "arcsinh":
        y = np.arcsinh(x)
    elif kind == "boxcox":
        if params.lam == 0:
            y = sign * np.log1p(a)
        else:
            y = sign * ((a + 1.0)**params.lam - 1.0) / params.lam
    elif kind == "poly":
        y = np.where(a > 0, sign, 0.0) * _poly_forward(params, a)
    elif kind == "mlog":
        y = sign * (np.log(a / params.c + 1.0) + np.log(params.c))
    elif kind == "pit":
        if not params.is_fitted:
            raise ValidationError("PIT transform used before fitting its CDF")
        u = np.interp(x, params.pit_knots_x, params.pit_knots_u)
        y = _PIT_REFERENCES[params.pit_reference].ppf(u)
    return _like(p, y)


def vst_inverse(params, y):
    """
    Inverts a VST elementwise.

    three_sigma returns its input unchanged: the clipped tails cannot be recovered.
    PIT inverts through G and the interpolated empirical quantile function.

    Parameters:
        params (VstParams): Transformation and its hyper-parameters.
        y (float, np.ndarray or pd.Series): Transformed values.

    Returns:
        Same type as y: values p on the scaled axis.
    """
    v = validate_finite(_as_array(y), "VST inverse input")
    sign, b = np.sign(v), np.abs(v)
    kind = params.kind
    if kind in ("none", "three_sigma"):
        x = v.copy()
    elif kind == "three_sigma_log":
        x = np.where(b > CLIP, sign * (np.exp(np.maximum(b, CLIP) - CLIP) + 2.0), v)
    elif kind == "logistic":
        if np.any((v <= 0) | (v >= 1)):
            raise DomainError("logistic inverse needs Y in (0, 1)")
        x = logit(v)
    elif kind == "arcsinh":
        x = np.sinh(v)
    elif kind == "boxcox":
        if params.lam == 0:
            x = sign * np.expm1(b)
        else:
            inner = params.lam * b + 1.0
            x = sign * (inner**(1.0 / params.lam) - 1.0)
    elif kind == "poly":
        x = np.where(b > 0, sign, 0.0) * _poly_backward(params, np.where(b > 0, b, 1.0))
    elif kind == "mlog":
        floor = -np.log(params.c) if params.c < 1 else 0.0
        if floor > 0 and np.any((b > 0) & (b < floor)):
            raise DomainError(
                f"mlog inverse is ambiguous for |Y| < {floor:g} when c < 1")
        x = sign * (np.exp(b) - params.c)
    elif kind == "pit":
        if not params.is_fitted:
            raise ValidationError("PIT inverse used before fitting its CDF")
        u = _PIT_REFERENCES[params.pit_reference].cdf(v)
        x = np.interp(u, params.pit_knots_u, params.pit_knots_x)
    return _like(y, x)


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


def default_scaler_for(vst_kind):
    """median_mad feeds a VST (robust to spikes), mean_std otherwise."""
    return "mean_std" if vst_kind == "none" else "median_mad"


@dataclass(frozen=True)
class VstPipeline:
    """A fitted scaler followed by a fitted VST, with exact inversion."""

    scaler: ScalerState
    vst: VstParams

    @classmethod
    def fit(cls, raw, scaler_kind=None, vst_kind="none", **hyper):
        """
        Fits the scaler on raw values, then the VST on the scaled values.

        Parameters:
            raw (array-like): Raw prices or loads.
            scaler_kind (str): Defaults to default_scaler_for(vst_kind).
            vst_kind (str): One of VST_KINDS.
            **hyper: VST hyper-parameters.

        Returns:
            VstPipeline
        """
        scaler_kind = scaler_kind or default_scaler_for(vst_kind)
        scaler = fit_scaler(raw, scaler_kind)
        scaled = apply_scaler(scaler, _as_array(raw))
        return cls(scaler, fit_vst(vst_kind, scaled, **hyper))

    def transform(self, raw):
        return vst_transform(self.vst, apply_scaler(self.scaler, raw))

    def inverse_transform(self, y):
        return invert_scaler(self.scaler, vst_inverse(self.vst, y))

    def to_dict(self):
        return {"scaler": asdict(self.scaler), "vst": asdict(self.vst)}

    @classmethod
    def from_dict(cls, data):
        vst = dict(data["vst"])
        vst["pit_knots_x"] = tuple(vst.get("pit_knots_x", ()))
        vst["pit_knots_u"] = tuple(vst.get("pit_knots_u", ()))
        return cls(ScalerState(**data["scaler"]), VstParams(**vst))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def vst_pipeline(raw_prices, scaler_kind=None, vst_params=None):
    """
    Runs the forward flow P -> p -> Y.

    Parameters:
        raw_prices (pd.Series or array-like): Gap-free raw values.
        scaler_kind (str): "mean_std" or "median_mad"; defaults by VST kind.
        vst_params (VstParams or str): VST to apply. PIT params are refitted on
            the scaled training values.

    Returns:
        tuple: (transformed values, fitted VstPipeline).
    """
    if vst_params is None:
        vst_params = VstParams("none")
    elif isinstance(vst_params, str):
        vst_params = VstParams(vst_params)
    hyper = {
        "lam": vst_params.lam,
        "c": vst_params.c,
        "poly_exponent": vst_params.poly_exponent,
        "pit_reference": vst_params.pit_reference,
    }
    hyper = {k: v for k, v in hyper.items() if v is not None}
    if vst_params.kind not in ("boxcox", "poly"):
        hyper.pop("lam", None)
    if vst_params.kind not in ("poly", "mlog"):
        hyper.pop("c", None)
    pipeline = VstPipeline.fit(raw_prices, scaler_kind, vst_params.kind, **hyper)
    return pipeline.transform(raw_prices), pipeline


def transform_panel(series, kinds=VST_KINDS[1:], scaler_kind=None):
    """
    Transforms one series with several VSTs side by side.

    Kinds whose transform is undefined on the data (poly near zero) are skipped
    with a column of NaN so the frame stays rectangular.

    Parameters:
        series (pd.Series): Raw prices.
        kinds (iterable): VST kinds to apply.
        scaler_kind (str): Scaler used for all columns; defaults by VST kind.

    Returns:
        pd.DataFrame: One column per VST plus the raw series.
    """
    out = {"raw": series.to_numpy(dtype=float)}
    for kind in kinds:
        try:
            transformed, _ = vst_pipeline(series, scaler_kind, VstParams(kind))
            out[kind] = _as_array(transformed)
        except DomainError:
            out[kind] = np.full(len(series), np.nan)
    return pd.DataFrame(out, index=series.index)


@dataclass(frozen=True)
class TransformSpec:
    """Unfitted scaler + VST choice, as carried in configs."""

    vst_kind: str = "none"
    scaler_kind: str = None
    lam: float = None
    c: float = None
    poly_exponent: str = "printed"
    pit_reference: str = PIT_REFERENCE_DEFAULT

    def __post_init__(self):
        if self.vst_kind not in VST_KINDS:
            raise ParamError(f"unknown VST kind '{self.vst_kind}'")
        if self.scaler_kind is not None and self.scaler_kind not in SCALER_KINDS:
            raise ParamError(f"unknown scaler kind '{self.scaler_kind}'")

    @classmethod
    def from_config(cls, entry):
        """Builds a spec from one `transforms` entry of a run configuration."""
        return cls(vst_kind=entry.get("vst", "none"),
                   scaler_kind=entry.get("scaler"),
                   lam=entry.get("lambda"),
                   c=entry.get("c"),
                   poly_exponent=entry.get("poly_exponent", "printed"),
                   pit_reference=entry.get("pit_reference", PIT_REFERENCE_DEFAULT))

    def hyper(self):
        out = {"poly_exponent": self.poly_exponent,
               "pit_reference": self.pit_reference}
        if self.lam is not None and self.vst_kind in ("boxcox", "poly"):
            out["lam"] = self.lam
        if self.c is not None and self.vst_kind in ("poly", "mlog"):
            out["c"] = self.c
        return out

    def fit(self, raw):
        """Fits a VstPipeline on raw values."""
        return VstPipeline.fit(raw, self.scaler_kind, self.vst_kind, **self.hyper())
