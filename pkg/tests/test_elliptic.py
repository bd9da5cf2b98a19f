import math

import numpy as np
import pytest

from dhym_lab.elliptic import (
    LinearizedOperator,
    NewtonConfig,
    PositivityError,
    apply_linearized,
    dhym_coefficient,
    dhym_residual,
    dhym_target,
    j_coefficient,
    j_residual,
    j_target,
    jacobian_fd_orders,
    newton_dhym,
    newton_j,
    omega_field,
)
from dhym_lab.torus import GridSpec, ScalarGridField, curvature_array, gauge_fix, hessian_array, random_trig_field

F0 = np.diag([3.0, 5.0])
CHI = np.eye(2)
OMEGA = np.diag([2.0, 4.0])


@pytest.fixture
def spec():
    return GridSpec(2, 12)


def test_targets():
    assert dhym_target(F0) == pytest.approx(math.atan(3) + math.atan(5), abs=1e-15)
    assert j_target(CHI, OMEGA) == pytest.approx(0.75, abs=1e-15)


def test_residuals_vanish_at_constant_representative(spec):
    zero = np.zeros(spec.shape)
    assert np.max(np.abs(dhym_residual(zero, F0, dhym_target(F0), spec))) < 1e-15
    assert np.max(np.abs(j_residual(zero, CHI, OMEGA, 0.75, spec))) < 1e-15


def test_j_residual_positivity(spec):
    x = spec.coords()
    bad = 2.0 * np.cos(2 * np.pi * x[0])
    with pytest.raises(PositivityError) as info:
        j_residual(bad, CHI, OMEGA, 0.75, spec)
    assert info.value.margin <= 0 and len(info.value.index) == 4


def test_linearized_zero_and_symbol(spec):
    rng = np.random.default_rng(0)
    A = np.array([[2.0, 0.3 + 0.2j], [0.3 - 0.2j, 1.0]])
    L = LinearizedOperator(spec, np.broadcast_to(A, spec.shape + (2, 2)).copy())
    assert np.all(apply_linearized(L, ScalarGridField.zeros(spec)).data == 0)
    k = [1, 2, -3, 4]
    x = spec.coords()
    mode = np.exp(2j * np.pi * sum(k[a] * x[a] for a in range(4)))
    out = L.apply(mode.real) + 1j * L.apply(mode.imag)
    idx = tuple(kk % spec.N for kk in k)
    assert np.max(np.abs(out - L.symbol()[idx] * mode)) < 1e-10
    assert np.all(L.symbol() <= 1e-12)
    psi = rng.normal(size=spec.shape)
    direct = np.real(np.einsum("ab,...ba->...", A, hessian_array(psi, spec)))
    assert np.allclose(L.apply(psi), direct, atol=1e-10)


def test_coefficients_are_hermitian_positive(spec):
    phi = random_trig_field(spec, 0.05, np.random.default_rng(1))
    for A in (dhym_coefficient(curvature_array(F0, phi.data, spec)),
              j_coefficient(omega_field(phi.data, OMEGA, spec), CHI)):
        assert np.max(np.abs(A - np.conj(np.swapaxes(A, -1, -2)))) < 1e-14
        assert np.min(np.linalg.eigvalsh(A)) > 0


@pytest.mark.parametrize("which", ["dhym", "j"])
def test_linearization_against_finite_differences(spec, which):
    rng = np.random.default_rng(2)
    phi = random_trig_field(spec, 0.05, rng).data
    psi = random_trig_field(spec, 1.0, rng).data
    if which == "dhym":
        res = lambda p: dhym_residual(p, F0, 0.0, spec)
        coef = lambda p: dhym_coefficient(curvature_array(F0, p, spec))
    else:
        # R = c - tr(omega^{-1} chi) linearizes to +tr(A H(psi))
        res = lambda p: j_residual(p, CHI, OMEGA, 0.0, spec)
        coef = lambda p: j_coefficient(omega_field(p, OMEGA, spec), CHI)
    errs, orders = jacobian_fd_orders(res, coef, phi, psi, spec)
    assert errs[-1] < 1e-3
    assert min(orders) >= 1.9


def test_newton_dhym_flat_solution(spec):
    phi0 = random_trig_field(spec, 0.05, np.random.default_rng(3))
    phi, rep = newton_dhym(F0, None, phi0)
    assert rep.converged and rep.iterations <= 20
    assert np.max(np.abs(phi.data)) < 1e-8
    assert rep.residual_sup <= 1e-10


def test_newton_exact_initial_guess(spec):
    phi, rep = newton_dhym(F0, None, ScalarGridField.zeros(spec))
    assert rep.converged and rep.iterations == 0 and rep.history == []


def test_newton_dhym_manufactured(spec):
    bar = ScalarGridField(spec, gauge_fix(random_trig_field(spec, 0.05, np.random.default_rng(4)).data, spec))
    target = dhym_residual(bar.data, F0, 0.0, spec)
    phi, rep = newton_dhym(F0, target, ScalarGridField.zeros(spec))
    assert rep.converged and rep.iterations <= 20
    assert np.max(np.abs(phi.data - bar.data)) < 1e-6


def test_newton_j_cases(spec):
    phi0 = random_trig_field(spec, 0.05, np.random.default_rng(5))
    phi, rep = newton_j(CHI, OMEGA, 0.75, phi0)
    assert rep.converged and np.max(np.abs(phi.data)) < 1e-8
    phi, rep = newton_j(CHI, OMEGA, 9.99, phi0)
    assert rep.verdict == "NON_CONVERGED" and "inconsistent" in rep.message
    bar = gauge_fix(random_trig_field(spec, 0.05, np.random.default_rng(6)).data, spec)
    c = -j_residual(bar, CHI, OMEGA, 0.0, spec)
    phi, rep = newton_j(CHI, OMEGA, c, ScalarGridField.zeros(spec))
    assert rep.converged and np.max(np.abs(phi.data - bar)) < 1e-6


def test_newton_max_iters_reported(spec):
    phi0 = random_trig_field(spec, 0.05, np.random.default_rng(7))
    phi, rep = newton_dhym(F0, None, phi0, NewtonConfig(max_iters=1))
    assert rep.verdict == "NON_CONVERGED" and rep.message == "max_iters exceeded"
    assert len(rep.history) == 1


def test_newton_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(newton_tol=0)
    with pytest.raises(ValueError):
        NewtonConfig(damping=1.5)


def test_newton_j_rejects_nonpositive_start(spec):
    x = spec.coords()
    with pytest.raises(PositivityError):
        newton_j(CHI, OMEGA, 0.75, ScalarGridField(spec, 2.0 * np.cos(2 * np.pi * x[0])))
