import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_skew, random_spd
from magweyl.fields import FieldData, Polynomial, constant_family, linear_family, polynomial_family
from magweyl.geometry import (
    ChartError,
    InconsistentMatrixError,
    PreconditionError,
    classify_point,
    ell_scale,
    ellipticity_check,
    hessian_rank_check,
    intensity_pair,
    intensity_values,
    magnetic_matrix,
    microhyperbolicity_margin,
    min_affine_norm,
    numeric_hessian,
    phi_alpha_gradient,
    resonance_scan,
)
from magweyl.params import SemiclassicalParams

X4 = [Polynomial.variable(i, 4) for i in range(4)]
ZERO = Polynomial.constant(0.0, 4)
ONE = Polynomial.constant(1.0, 4)


def exp_intensity_fields(v=None):
    """Field with intensities e^{2 x1} and e^{x1} on the slice x3 = 0, V = 1 by default."""
    d = 4

    def gauge(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 1] = np.exp(x[..., 0])
        out[..., 3] = x[..., 2] * np.exp(2 * x[..., 0])
        return out

    def jac(x):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape[:-1] + (d, d))
        J[..., 0, 1] = np.exp(x[..., 0])
        J[..., 2, 3] = np.exp(2 * x[..., 0])
        J[..., 0, 3] = 2 * x[..., 2] * np.exp(2 * x[..., 0])
        return J

    pot = v or (lambda x: np.ones(np.shape(x)[:-1]))
    return FieldData(metric=lambda x: np.broadcast_to(np.eye(d), np.shape(x)[:-1] + (d, d)),
                     gauge=gauge, potential=pot, dim=d, gauge_jacobian=jac)


# magnetic_matrix


def test_symmetric_gauge_block():
    f = constant_family(3.0, 0.0, gauge="symmetric")
    F, M = magnetic_matrix(f, np.array([0.2, -0.4, 1.0, 0.0]))
    expected = np.zeros((4, 4))
    expected[0, 1], expected[1, 0] = 3.0, -3.0
    np.testing.assert_allclose(F, expected)
    np.testing.assert_allclose(M, expected)


def test_zero_gauge_gives_zero_field():
    f = linear_family(np.zeros((4, 4)))
    F, _ = magnetic_matrix(f, np.ones(4))
    assert not F.any()


def test_symbolic_example():
    f = polynomial_family([ZERO, X4[0] * X4[2], ZERO, ZERO], ONE)
    F, _ = magnetic_matrix(f, np.array([1.0, 0.0, 2.0, 0.0]))
    # d_1 V_2 = x3 = 2, d_3 V_2 = x1 = 1
    expected = np.zeros((4, 4))
    expected[0, 1], expected[1, 0] = 2.0, -2.0
    expected[2, 1], expected[1, 2] = 1.0, -1.0
    np.testing.assert_allclose(F, expected)
    np.testing.assert_array_equal(F, -F.T)


# intensity_pair


def test_block_diagonal_intensities():
    F = np.zeros((4, 4))
    F[0, 1], F[1, 0], F[2, 3], F[3, 2] = 3.0, -3.0, 1.0, -1.0
    p = intensity_pair(F)
    assert (p.f1, p.f2) == pytest.approx((3.0, 1.0))
    z = intensity_pair(np.zeros((4, 4)))
    assert (z.f1, z.f2) == (0.0, 0.0)


def test_random_skew_matches_eigensolver(rng):
    for _ in range(50):
        M = random_skew(rng)
        p = intensity_pair(M)
        im = np.sort(np.abs(np.linalg.eigvals(M).imag))[::-1]
        assert p.f1 == pytest.approx(im[0], abs=1e-9)
        assert p.f2 == pytest.approx(im[2], abs=1e-9)


def test_invariants_with_metric(rng):
    for _ in range(50):
        g, F = random_spd(rng), random_skew(rng)
        M = g @ F
        p = intensity_pair(M)
        assert p.f1 >= p.f2 >= 0
        s = -0.5 * np.trace(M @ M)
        assert p.f1**2 + p.f2**2 == pytest.approx(s, rel=1e-10)
        assert (p.f1 * p.f2) ** 2 == pytest.approx(np.linalg.det(M), rel=1e-9)


def test_coordinate_change_invariance(rng):
    for _ in range(20):
        g, F = random_spd(rng), random_skew(rng)
        A = rng.normal(size=(4, 4)) + 3 * np.eye(4)
        Ai = np.linalg.inv(A)
        # contravariant g -> A^-1 g A^-T, covariant F -> A^T F A
        p0 = intensity_pair(g @ F)
        p1 = intensity_pair((Ai @ g @ Ai.T) @ (A.T @ F @ A))
        assert p1.f1 == pytest.approx(p0.f1, rel=1e-8)
        assert p1.f2 == pytest.approx(p0.f2, rel=1e-8)


def test_inconsistent_matrix_rejected():
    with pytest.raises(InconsistentMatrixError):
        intensity_pair(np.diag([1.0, 1.0, 1.0, 1.0]))
    rot = np.array([[1.0, 1.0], [-1.0, 1.0]])
    with pytest.raises(InconsistentMatrixError):
        intensity_pair(np.kron(np.eye(2), rot))


def test_batched_values(rng):
    Ms = np.stack([random_skew(rng) for _ in range(7)])
    f1, f2 = intensity_values(Ms)
    for M, a, b in zip(Ms, f1, f2):
        p = intensity_pair(M)
        assert (a, b) == pytest.approx((p.f1, p.f2))


# phi_alpha / microhyperbolicity


def test_constant_data_has_zero_gradient():
    f = constant_family(2.0, 1.0)
    for alpha in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(phi_alpha_gradient(f, np.zeros(4), alpha), 0.0, atol=1e-9)


def test_exponential_example():
    f = exp_intensity_fields()
    # f2 (the larger of e^{x1}, e^{2x1} for x1 > 0) is e^{2 x1}; ordering puts it first
    x = np.array([0.3, 0.1, 0.0, 0.0])
    # intensities are (e^{2x1}, e^{x1}): grad log f1 = (2,0,0,0), grad log f2 = (1,0,0,0)
    for alpha in (0.0, 0.25, 1.0):
        np.testing.assert_allclose(phi_alpha_gradient(f, x, alpha), [1 + alpha, 0, 0, 0], atol=1e-7)
    m, a = microhyperbolicity_margin(f, x)
    assert m == pytest.approx(1.0, abs=1e-7)
    assert a == pytest.approx(0.0)


def test_alpha_one_ignores_f2():
    f = exp_intensity_fields()
    x = np.array([0.3, 0.0, 0.0, 0.0])
    g1 = phi_alpha_gradient(f, x, 1.0)
    np.testing.assert_allclose(g1, [2.0, 0, 0, 0], atol=1e-7)


def test_sign_change_margin():
    m, a = min_affine_norm(np.array([1.0, 0, 0, 0]), np.array([-2.0, 0, 0, 0]))
    assert m == pytest.approx(0.0, abs=1e-15)
    assert a == pytest.approx(0.5)


def test_preconditions():
    f = constant_family(2.0, 0.0)
    with pytest.raises(PreconditionError, match="f2"):
        phi_alpha_gradient(f, np.zeros(4), 0.5)
    g = constant_family(2.0, 1.0, v0=-1.0)
    with pytest.raises(PreconditionError, match="V"):
        microhyperbolicity_margin(g, np.zeros(4))


def _random_field(rng):
    c = rng.normal(scale=0.3, size=6)
    gauge = [ZERO, (2.0 + c[0] * X4[2]) * X4[0], ZERO, (1.0 + c[1] * X4[0] * X4[0]) * X4[2]]
    pot = ONE + c[2] * X4[0] + c[3] * X4[1] + c[4] * X4[3] + c[5] * X4[2] * X4[2]
    return polynomial_family(gauge, pot)


def test_closed_form_equals_grid_minimum(rng):
    alphas = np.linspace(0.0, 1.0, 10_000)
    for _ in range(100):
        f = _random_field(rng)
        x = rng.uniform(-0.3, 0.3, size=4)
        m, a = microhyperbolicity_margin(f, x)
        grads = np.array([phi_alpha_gradient(f, x, al) for al in (0.0, 1.0)])
        vals = np.linalg.norm(grads[0][None] + alphas[:, None] * (grads[1] - grads[0])[None], axis=1)
        assert abs(m - vals.min()) <= 1e-6
        if 0 < a < 1:
            v1 = grads[1] - grads[0]
            assert abs(phi_alpha_gradient(f, x, a) @ v1) <= 1e-8 * max(1.0, v1 @ v1)


# ellipticity


def test_ellipticity_examples():
    f = constant_family(1.0, 1.0, v0=1.0)
    assert ellipticity_check(f, np.zeros(4), SemiclassicalParams(10.0, 1.0, mu_h_cap=20), 0.5)
    f2 = constant_family(1.0, 1.0, v0=2.0)
    assert not ellipticity_check(f2, np.zeros(4), SemiclassicalParams(1.0, 1.0), 0.1)


def test_ellipticity_enumeration(rng):
    params = SemiclassicalParams(3.0, 0.1)
    for _ in range(40):
        V = rng.uniform(1, 10)
        f1, f2 = sorted(rng.uniform(0.5, 2.0, size=2), reverse=True)
        eps = rng.uniform(0.01, 0.2)
        f = constant_family(f1, f2, v0=V)
        levels = [(2 * p + 1) * 0.3 * f1 + (2 * n + 1) * 0.3 * f2 for p in range(41) for n in range(41)]
        brute = min(abs(V - lv) for lv in levels) >= eps
        assert ellipticity_check(f, np.zeros(4), params, eps) == brute


# resonances


def test_resonance_examples():
    assert resonance_scan(2.0, 1.0, 5, 1e-9) == [(1, 2, 0.0)]
    assert resonance_scan(1.0, 1.0, 5, 1e-9)[0] == (1, 1, 0.0)
    assert resonance_scan(math.sqrt(2), 1.0, 5, 0.05) == []


def test_resonance_enumeration_oracle():
    f1, f2 = math.sqrt(2), 1.0
    residuals = {(k, l): abs(k * f1 - l * f2) for k in range(1, 5) for l in range(1, 5)
                 if k + l <= 5 and math.gcd(k, l) == 1}
    assert min(residuals.values()) == pytest.approx(abs(2 * math.sqrt(2) - 3))
    assert min(residuals.values()) > 0.05


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 3.0), st.floats(0.5, 3.0), st.floats(-1e-4, 1e-4))
def test_resonance_stability(a, b, delta):
    f1, f2 = max(a, b), min(a, b)
    M = 5
    base = {(k, l): r for k, l, r in resonance_scan(f1, f2, M, 10.0)}
    pert = {(k, l): r for k, l, r in resonance_scan(f1 + delta, f2, M, 10.0)}
    for key in base:
        assert abs(base[key] - pert[key]) <= M * abs(delta) + 1e-12


# Hessian rank


def test_hessian_rank_examples():
    fn = lambda x: x[0] ** 2 + x[1] ** 2 - x[2] ** 2  # noqa: E731
    hess = lambda x: np.diag([2.0, 2.0, -2.0, 0.0])  # noqa: E731
    assert hessian_rank_check(fn, np.zeros(4), 1.0, 3, hessian=hess)
    assert not hessian_rank_check(fn, np.zeros(4), 1.0, 4, hessian=hess)
    assert hessian_rank_check(fn, np.zeros(4), 1.0, 3)


def test_restricted_hessian_and_bad_chart():
    fn = lambda x: x[0] ** 2 + x[1] ** 2 - x[2] ** 2  # noqa: E731
    chart = lambda u: np.array([u[0], 0.0, u[1], 0.0])  # noqa: E731
    assert hessian_rank_check(fn, np.zeros(4), 1.0, 2, chart=chart, chart_point=np.zeros(2))
    assert not hessian_rank_check(fn, np.zeros(4), 1.0, 3, chart=chart, chart_point=np.zeros(2))
    flat = lambda u: np.array([u[0], u[0], 0.0, 0.0])  # noqa: E731
    with pytest.raises(ChartError):
        hessian_rank_check(fn, np.zeros(4), 1.0, 1, chart=flat, chart_point=np.zeros(2))


def test_numeric_hessian_of_quartic(rng):
    terms = {tuple(rng.integers(0, 3, size=4)): rng.normal() for _ in range(8)}
    p = Polynomial(terms, 4)
    x = rng.uniform(-0.5, 0.5, size=4)
    np.testing.assert_allclose(numeric_hessian(p, x), p.hessian(x), atol=1e-5)


# ell_scale


def test_ell_scale_examples():
    f0 = constant_family(1.0, 1.0, v0=0.0)
    h = 1e-4
    p = SemiclassicalParams(h**-0.5, h)
    ell, branch = ell_scale(f0, np.zeros(4), p)
    assert ell == pytest.approx(0.5 * math.sqrt(p.mu_h))
    assert branch == "mu_h"
    ell1, _ = ell_scale(constant_family(1.0, 1.0, v0=1.0), np.zeros(4), p)
    assert ell1 >= 0.1


def test_ell_scale_hand_evaluation():
    f = constant_family(1.0, 1.0, v0=0.0, grad_v=[1.0, 0, 0, 0])
    p = SemiclassicalParams(10.0, 1e-3)
    x = np.array([0.02, 0.0, 0.0, 0.0])
    ell, branch = ell_scale(f, x, p)
    expected = 0.1 * math.sqrt(0.02 + 1.0) + 0.5 * max(math.sqrt(1e-2), 0.1)
    assert ell == pytest.approx(expected)
    # mu = 10 = h^{-1/3} sits exactly on the branch boundary
    assert branch in ("mu_h", "inv_mu")
    _, b2 = ell_scale(f, x, SemiclassicalParams(5.0, 1e-3))
    assert b2 == "inv_mu"


# classify_point


def test_classification_invariants():
    p = SemiclassicalParams(10.0, 0.01)
    c = classify_point(constant_family(1.0, 1.0), np.zeros(4), p)
    assert c.sigma_distance == 0.0
    assert c.resonances[0][:2] == (1, 1)
    c2 = classify_point(constant_family(2.0, 1.0), np.zeros(4), p)
    assert c2.sigma_distance == 0.5
    assert (1, 1) not in [r[:2] for r in c2.resonances]
    d = c2.to_dict()
    assert d["resonances"][0]["order"] == 3


def test_sigma_distance_on_engineered_fields():
    # f1 - f2 = 2 sqrt(v1^2 + v2^2) with v = (x1, x3): F12 = 1 + r, F34 = 1 - r
    for x1, x3 in itertools.product((0.0, 0.1, -0.2), (0.0, 0.05)):
        r = math.hypot(x1, x3)
        F = np.zeros((4, 4))
        F[0, 1], F[2, 3] = 1 + r, 1 - r
        F = F - F.T
        p = intensity_pair(F)
        assert p.sigma_distance == pytest.approx(r, abs=1e-12)
