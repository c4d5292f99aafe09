import numpy as np
import pytest

from magweyl.fields import constant_family
from magweyl.measure import DegenerateFitError, PowerLawRegressor, nu_estimate


def test_power_law_recovers_exponents(rng):
    X = rng.uniform(1, 100, size=(40, 2))
    y = 3.0 * X[:, 0] ** -1.0 * X[:, 1] ** 2.5
    fit = PowerLawRegressor().fit(X, y)
    np.testing.assert_allclose(fit.coef_, [-1.0, 2.5], atol=1e-10)
    assert fit.prefactor_ == pytest.approx(3.0)
    np.testing.assert_allclose(fit.predict(X[:3]), y[:3], rtol=1e-10)
    assert fit.score(X, y) == pytest.approx(1.0)


def test_power_law_degenerate():
    with pytest.raises(DegenerateFitError):
        PowerLawRegressor().fit([[1.0, 2.0]], [3.0])
    with pytest.raises(DegenerateFitError):
        PowerLawRegressor().fit([1.0, 2.0], [1.0, -1.0])
    with pytest.raises(DegenerateFitError):
        PowerLawRegressor().fit(np.array([[1.0, 1.0], [2.0, 2.0], [4.0, 4.0]]), [1.0, 2.0, 3.0])


def _abs_model(X, alpha):
    # |grad phi_alpha| = |x1 - alpha|: measure of {|x1 - alpha| <= rho} is linear in rho
    return np.abs(X[:, 0] - alpha)


def test_linear_sublevel_measure():
    box = (np.zeros(4), np.ones(4))
    est = nu_estimate(_abs_model, box, [0.01, 0.02, 0.05, 0.1], samples=100_000, seed=3)
    assert est.q == pytest.approx(1.0, abs=0.1)
    # exact measure on the unit box: 2 rho - rho^2
    exact = 2 * est.rho - est.rho**2
    np.testing.assert_allclose(est.nu, exact, rtol=0.1)


def test_determinism_across_jobs():
    box = (np.zeros(4), np.ones(4))
    ref = nu_estimate(_abs_model, box, [0.05, 0.1], samples=30_000, seed=1, block_size=5000)
    for jobs in (4, 8):
        other = nu_estimate(_abs_model, box, [0.05, 0.1], samples=30_000, seed=1, block_size=5000,
                            n_jobs=jobs)
        assert np.array_equal(ref.hits, other.hits)
        assert ref.q == other.q


def test_constant_field_has_no_small_set():
    f = constant_family(2.0, 1.0, v0=1.0, grad_v=[1.0, 0, 0, 0])
    box = (np.full(4, 0.5), np.full(4, 1.0))
    with pytest.raises(DegenerateFitError):
        nu_estimate(f, box, [0.1, 0.2], samples=10_000)


def test_input_validation():
    box = (np.zeros(4), np.ones(4))
    with pytest.raises(ValueError):
        nu_estimate(_abs_model, box, [0.0, 0.1])
    with pytest.raises(ValueError):
        nu_estimate(_abs_model, box, [0.1], samples=100)
