import numpy as np
import pytest

from qra import synthetic
from qra.core import QuantileGrid
from qra.errors import (DegenerateRow, DimensionMismatch, ParamError, RankDeficient, RankError,
                        ValidationError)
from qra.variants import (QRA, QRM, VARIANT_NAMES, FittedVariant, VariantSpec, fit_variant,
                          make_variant, predict_variant, preprocess, principal_components,
                          standardize_rows, variant_spec)

GRID = QuantileGrid((0.1, 0.25, 0.5, 0.75, 0.9))
TRAIN_HOURS = 15 * 24


@pytest.fixture(scope="module")
def data():
    X, y = synthetic.linear_gaussian(days=16, forecasters=3, seed=5)
    return X.take(slice(0, TRAIN_HOURS)), y.iloc[:TRAIN_HOURS], X.take(slice(TRAIN_HOURS, None))


@pytest.mark.parametrize("name", VARIANT_NAMES)
def test_every_variant_fits_and_predicts(name, data):
    X_train, y_train, X_new = data
    fv = fit_variant(variant_spec(name, lambda_l1=0.5), X_train, y_train, GRID)
    surface = predict_variant(fv, X_new)
    assert surface.values.shape == (24, len(GRID))
    assert surface.timestamps.equals(X_new.timestamps)
    assert surface.is_monotone()
    assert all(c.converged for c in fv.per_quantile)


def test_qrm_matches_qra_for_single_forecaster(data):
    X_train, y_train, X_new = data
    single_train, single_new = X_train.select(["f1"]), X_new.select(["f1"])
    qra = QRA(GRID).fit(single_train, y_train).predict(single_new)
    qrm = QRM(GRID).fit(single_train, y_train).predict(single_new)
    np.testing.assert_allclose(qra.values, qrm.values, atol=1e-8)


def test_qrm_is_qra_on_row_mean(data):
    X_train, y_train, X_new = data
    qrm = fit_variant(VariantSpec("QRM"), X_train, y_train, GRID)
    qra = fit_variant(VariantSpec("QRA"), X_train.values.mean(axis=1), y_train, GRID)
    np.testing.assert_allclose(predict_variant(qrm, X_new).values,
                               predict_variant(qra, X_new.values.mean(axis=1)).values,
                               atol=1e-8)


def test_collinear_forecasters_name_the_failing_level(data):
    X_train, y_train, _ = data
    twin = np.column_stack([X_train.values[:, 0], X_train.values[:, 0]])
    with pytest.raises(RankDeficient, match="quantile 0.1") as info:
        fit_variant(VariantSpec("QRA"), twin, y_train, GRID)
    assert info.value.level == 0.1


def test_full_rank_factors_match_qra_objective(data):
    X_train, y_train, _ = data
    qra = fit_variant(VariantSpec("QRA"), X_train, y_train, GRID)
    fqra = fit_variant(VariantSpec("FQRA", factor_count=3), X_train, y_train, GRID)
    for a, b in zip(qra.per_quantile, fqra.per_quantile):
        assert b.objective_value == pytest.approx(a.objective_value, rel=1e-6)


def test_principal_component_signs_and_variance(data):
    X_train, _, _ = data
    means, loadings, explained = principal_components(X_train.values, 2)
    assert loadings.shape == (3, 2)
    for j in range(2):
        assert loadings[np.argmax(np.abs(loadings[:, j])), j] > 0
    np.testing.assert_allclose(loadings.T @ loadings, np.eye(2), atol=1e-10)
    np.testing.assert_allclose(means, X_train.values.mean(axis=0))
    assert explained[0] >= explained[1] > 0
    assert explained.sum() <= 1 + 1e-12


def test_principal_components_rank_check():
    x = np.arange(20.0)
    with pytest.raises(RankError):
        principal_components(np.column_stack([x, 2 * x]), 2)
    with pytest.raises(RankError):
        preprocess(VariantSpec("FQRA", factor_count=3), np.column_stack([x, x ** 2]))


def test_row_standardization():
    Z = standardize_rows(np.array([[1.0, 2.0, 3.0], [10.0, 0.0, 5.0]]))
    np.testing.assert_allclose(Z.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(Z.std(axis=1), 1)
    sample = standardize_rows(np.array([[1.0, 3.0]]), ddof=1)
    np.testing.assert_allclose(sample, [[-1 / np.sqrt(2), 1 / np.sqrt(2)]])


def test_row_standardization_degenerate():
    with pytest.raises(DegenerateRow):
        standardize_rows(np.ones((4, 1)))
    with pytest.raises(DegenerateRow, match="first at row 1"):
        standardize_rows(np.array([[1.0, 2.0], [3.0, 3.0]]))


def test_standardized_variants_need_two_forecasters(data):
    X_train, y_train, _ = data
    with pytest.raises(DegenerateRow):
        fit_variant(VariantSpec("sFQRA"), X_train.select(["f1"]), y_train, GRID)


def test_preprocessing_state_is_frozen_at_fit(data):
    X_train, y_train, X_new = data
    fv = fit_variant(VariantSpec("FQRA", factor_count=2), X_train, y_train, GRID)
    _, state = preprocess(fv.spec, X_train)
    assert state == fv.state
    # predicting on new rows reuses the training means and loadings
    expected = (X_new.values - np.asarray(state.column_means)) @ state.loadings_matrix()
    np.testing.assert_allclose(fv.state.apply(X_new.values), expected)


def test_fitted_variant_round_trip(tmp_path, data):
    X_train, y_train, X_new = data
    fv = fit_variant(variant_spec("sFQRM", row_std="sample"), X_train, y_train, GRID)
    fv.save(tmp_path / "model.json")
    loaded = FittedVariant.load(tmp_path / "model.json")
    assert loaded.spec == fv.spec
    np.testing.assert_allclose(predict_variant(loaded, X_new).values,
                               predict_variant(fv, X_new).values)


def test_predict_checks_forecasters(data):
    X_train, y_train, X_new = data
    fv = fit_variant(VariantSpec("QRA"), X_train, y_train, GRID)
    with pytest.raises(DimensionMismatch):
        predict_variant(fv, X_new.select(["f2", "f1", "f3"]))
    with pytest.raises(DimensionMismatch):
        predict_variant(fv, X_new.values[:, :2])


def test_fit_checks_lengths(data):
    X_train, y_train, _ = data
    with pytest.raises(DimensionMismatch):
        fit_variant(VariantSpec("QRA"), X_train, y_train.iloc[:-1], GRID)


def test_repair_can_be_disabled(data):
    X_train, y_train, X_new = data
    fv = fit_variant(VariantSpec("QRA", repair=False), X_train, y_train, GRID)
    raw = np.column_stack([c.predict(X_new.values) for c in fv.per_quantile])
    np.testing.assert_allclose(predict_variant(fv, X_new).values, raw)


@pytest.mark.parametrize("kwargs", [
    {"name": "QRX"},
    {"name": "FQRA", "factor_count": 0},
    {"name": "sFQRA", "row_std": "biased"},
])
def test_spec_validation(kwargs):
    with pytest.raises(ParamError):
        VariantSpec(**kwargs)


def test_spec_dict_round_trip():
    spec = variant_spec("LQRA", lambda_l1=0.25, penalize_intercept=True, repair=False)
    assert VariantSpec.from_dict(spec.to_dict()) == spec
    assert spec.solver == "l1"


def test_make_variant():
    model = make_variant("LQRA", [25, 50, 75], lambda_l1=2.0)
    assert model.spec.l1.lambda_l1 == 2.0
    assert model.grid.levels == (0.25, 0.5, 0.75)
    assert make_variant("SQRM", h=0.5).spec.bw.h == 0.5
    with pytest.raises(ParamError):
        make_variant("XQRA")
    with pytest.raises(ValidationError):
        make_variant("QRA").predict(np.ones((2, 1)))
