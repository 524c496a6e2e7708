import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from lago.errors import EmptyDataset, NonContiguousCentres, RankDeficient, ValidationError, WeightDimensionMismatch
from lago.model import (
    InterventionPackage,
    ModelFit,
    TrialDataset,
    TrialRecord,
    build_design,
    centre_weights,
    fit,
    predict_mean,
)


def test_design_single_record_row():
    data = TrialDataset([1], [1], [1], [[1.0, 0.0]], [0.0], K=2, J=2, P=2)
    X, y = build_design(data)
    np.testing.assert_array_equal(X, [[1, 0, 1, 0, 0]])


def test_design_stage_two_centre_three():
    data = TrialDataset([2], [3], [0], [[0.0, 0.0]], [1.0], K=2, J=3, P=2)
    X, _ = build_design(data)
    np.testing.assert_array_equal(X, [[0, 0, 0, 0, 1, 1]])


def test_design_three_stages_uses_two_indicators():
    data = TrialDataset([1, 2, 3], [1, 1, 1], [1, 1, 1], [[1.0], [2.0], [3.0]], [0, 0, 0])
    X, _ = build_design(data)
    np.testing.assert_array_equal(X[:, -2:], [[0, 0], [1, 0], [0, 1]])
    assert X.shape == (3, 1 + 1 + 2)


def test_design_rows_have_one_centre_indicator():
    data = make_dataset([-1.7, -0.7], [1, 2, 3], [0.5])
    X, _ = build_design(data)
    np.testing.assert_array_equal(X[:, 2:5].sum(axis=1), 1)
    assert set(np.unique(X[:, 5])) <= {0.0, 1.0}


def test_empty_dataset_rejected():
    data = TrialDataset([], [], [], np.zeros((0, 2)), [], K=2, J=2, P=2)
    with pytest.raises(EmptyDataset):
        build_design(data)
    with pytest.raises(EmptyDataset):
        TrialDataset.from_records([])


def test_missing_centre_rejected():
    data = TrialDataset([1, 1], [1, 3], [1, 1], [[1.0], [2.0]], [0.0, 1.0])
    with pytest.raises(NonContiguousCentres):
        build_design(data)


def test_noiseless_recovery():
    data = make_dataset([-1.70, -0.70], [1, 2, 3], [0.5])
    res = fit(data)
    np.testing.assert_allclose(res.beta_A, [-1.70, -0.70], atol=1e-8)
    np.testing.assert_allclose(res.gamma, [1, 2, 3], atol=1e-8)
    np.testing.assert_allclose(res.eta, [0.5], atol=1e-8)


def test_fit_matches_lstsq():
    data = make_dataset([0.3, -1.1, 2.0], [0.0, -1.0, 4.0, 2.5], [1.0, -2.0], noise=1.0, seed=4)
    X, y = build_design(data)
    ref, *_ = np.linalg.lstsq(X, y, rcond=None)
    np.testing.assert_allclose(fit(data).coef, ref, rtol=1e-9, atol=1e-10)


def test_normal_equations_hold():
    data = make_dataset([1.0, 2.0], [0.0, 5.0], [1.0], noise=2.0, seed=8)
    res = fit(data)
    X, y = build_design(data)
    rel = np.linalg.norm(X.T @ (y - X @ res.coef)) / np.linalg.norm(X.T @ y)
    assert rel < 1e-10


def test_zero_interventions_rank_deficient():
    stage = [1, 1, 2, 2, 1, 2]
    centre = [1, 2, 1, 2, 1, 2]
    data = TrialDataset(stage, centre, [0] * 6, np.zeros((6, 2)), [7.0] * 6)
    with pytest.raises(RankDeficient) as info:
        fit(data)
    assert set(info.value.columns) == {"a1", "a2"}


def test_collinear_component_reported():
    data = make_dataset([1.0, 2.0], [0.0, 1.0], [0.3])
    A = data.actual.copy()
    A[:, 1] = 2 * A[:, 0]
    dup = TrialDataset(data.stage, data.centre, data.arm, A, data.outcome)
    with pytest.raises(RankDeficient) as info:
        fit(dup)
    assert {"a1", "a2"} <= set(info.value.columns)


def test_centre_residuals_sum_to_zero():
    data = make_dataset([-1.0, 0.5], [3.0, -2.0, 1.0], [2.0], noise=3.0, seed=11)
    res = fit(data)
    tol = 1e-8 * data.n * np.abs(data.outcome).max()
    for j in range(1, 4):
        assert abs(res.residuals[data.centre == j].sum()) < tol


def test_record_order_does_not_matter():
    data = make_dataset([-1.0, 0.5], [3.0, -2.0, 1.0], [2.0], noise=1.0, seed=2)
    perm = np.random.default_rng(5).permutation(data.n)
    shuffled = TrialDataset(data.stage[perm], data.centre[perm], data.arm[perm],
                            data.actual[perm], data.outcome[perm])
    np.testing.assert_allclose(fit(shuffled).coef, fit(data).coef, rtol=1e-12, atol=1e-12)


def test_covariance_symmetric_psd():
    res = fit(make_dataset([1.0, -1.0], [0.0, 2.0, 1.0], [0.5], noise=1.0, seed=3))
    cov = res.covariance
    np.testing.assert_allclose(cov, cov.T, atol=0)
    assert np.linalg.eigvalsh(cov).min() >= -1e-8 * np.abs(cov).max()


def test_unbiased_over_small_replicates():
    # 2000 replicates of J=3, 30 per centre; mean estimate within 4 standard errors.
    beta = np.array([-1.7, -0.7])
    est = np.array([
        fit(make_dataset(beta, [1.0, 0.0, -1.0], [0.5], n_per_cell=15, noise=1.0, seed=s)).beta_A
        for s in range(2000)
    ])
    z = (est.mean(axis=0) - beta) / (est.std(axis=0, ddof=1) / np.sqrt(len(est)))
    assert np.all(np.abs(z) < 4)


def test_predict_mean_examples():
    data = make_dataset([-1.70, -0.70], [0.0, 0.0], [0.0])
    res = fit(data)
    w = [0.5, 0.5]
    assert predict_mean(res, [2.94, 0.0], w) == pytest.approx(-4.998, abs=1e-6)
    res_c = fit(make_dataset([-1.70, -0.70], [3.0, 3.0], [0.0]))
    assert predict_mean(res_c, [1.0, 2.0], [0.9, 0.1]) == pytest.approx(-1.70 - 1.40 + 3.0, abs=1e-8)
    res_g = fit(make_dataset([-1.70, -0.70], [1.0, 5.0], [0.0]))
    assert predict_mean(res_g, [0.0, 0.0], [0.25, 0.75]) == pytest.approx(0.25 + 3.75, abs=1e-8)


def test_predict_mean_stage_term_and_weights():
    res = fit(make_dataset([1.0], [2.0, 4.0], [10.0]))
    assert predict_mean(res, [0.0], [0.5, 0.5], include_eta=True) == pytest.approx(13.0)
    with pytest.raises(WeightDimensionMismatch):
        predict_mean(res, [0.0], [1.0])


def test_default_weights_are_sample_shares():
    data = make_dataset([1.0], [0.0, 0.0, 0.0], [0.0], n_per_cell=4)
    keep = ~((data.centre == 3) & (np.arange(data.n) % 2 == 0))
    res = fit(data.subset(keep))
    counts = res.n_by_centre_stage.sum(axis=1)
    np.testing.assert_allclose(centre_weights(res), counts / counts.sum())
    np.testing.assert_allclose(centre_weights(res, "equal"), [1 / 3] * 3)


def test_records_roundtrip_and_counts():
    data = make_dataset([1.0, 2.0], [0.0, 1.0], [0.5], n_per_cell=3)
    again = TrialDataset.from_records(list(data.records()), K=2, J=2, P=2)
    np.testing.assert_array_equal(again.actual, data.actual)
    np.testing.assert_array_equal(data.counts(), [[3, 3], [3, 3]])
    assert data.single_stage_centres() == []


def test_control_violation_detected():
    data = TrialDataset([1, 1], [1, 1], [0, 1], [[1.0], [1.0]], [0.0, 0.0])
    np.testing.assert_array_equal(data.control_violations(), [0])


def test_package_validation():
    pkg = InterventionPackage([5.0, -1.0], [[0, 4], [0, 3]])
    assert not pkg.within_bounds()
    np.testing.assert_array_equal(pkg.clamped().components, [4.0, 0.0])
    with pytest.raises(ValidationError):
        InterventionPackage([1.0], [[2, 1]])
    with pytest.raises(ValidationError):
        InterventionPackage([1.0, 2.0], [[0, 1]])


@settings(max_examples=40, deadline=None)
@given(
    beta=st.lists(st.floats(-5, 5), min_size=1, max_size=3),
    J=st.integers(1, 4),
    eta=st.floats(-3, 3),
    seed=st.integers(0, 10_000),
)
def test_exact_recovery_property(beta, J, eta, seed):
    gamma = np.linspace(-2, 2, J)
    data = make_dataset(beta, gamma, [eta], n_per_cell=6, seed=seed, control_share=0.0)
    res = fit(data)
    np.testing.assert_allclose(res.coef, np.r_[beta, gamma, eta], atol=1e-8)
