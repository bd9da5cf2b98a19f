import math

import numpy as np
import pytest

from dhym_lab.hermitian import lagrangian_angle
from dhym_lab.torus import (
    GridBudgetError,
    GridSpec,
    HermitianGridField,
    ScalarGridField,
    angle_gradient_sup,
    average,
    bianchi_residual,
    central_charge,
    complex_hessian,
    curvature_field,
    first_derivative_residual,
    gauge_fix,
    hessian_array,
    hessian_array_direct,
    kernel_mask,
    load_snapshot,
    mean_zero,
    random_trig_field,
    save_snapshot,
)


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(0, 16)
    with pytest.raises(ValueError):
        GridSpec(2, 15)
    with pytest.raises(ValueError):
        GridSpec(2, 16, stencil_order=3)
    with pytest.raises(GridBudgetError):
        GridSpec(3, 16)
    s = GridSpec(2, 16)
    assert s.shape == (16,) * 4 and s.size == 16 ** 4 and s.h == 1 / 16


def test_fields_are_read_only():
    s = GridSpec(1, 8)
    phi = ScalarGridField.zeros(s)
    with pytest.raises(ValueError):
        phi.data[0, 0] = 1.0
    with pytest.raises(ValueError):
        ScalarGridField(s, np.zeros((8, 7)))
    with pytest.raises(ValueError):
        ScalarGridField(s, np.full((8, 8), np.nan))


def test_hessian_zero_field():
    s = GridSpec(2, 8)
    assert np.all(complex_hessian(ScalarGridField.zeros(s)).data == 0)


@pytest.mark.parametrize("order", [2, 4])
def test_hessian_cosine_oracle(order):
    errs = []
    for N in (32, 64):
        s = GridSpec(1, N, order)
        x, y = s.coords()
        H = hessian_array(np.cos(2 * np.pi * x), s)[..., 0, 0]
        errs.append(np.max(np.abs(H - (-np.pi ** 2 * np.cos(2 * np.pi * x)))))
    assert errs[0] < 0.2
    ratio = errs[0] / errs[1]
    assert abs(ratio - 2 ** order) <= 0.2 * 2 ** order


@pytest.mark.parametrize("order", [2, 4])
def test_hessian_refinement_order_n2(order):
    # phi = sin(2 pi (x1 + y2)) has d^2/dz1 dzbar2 = (i/4) d_x1 d_y2 phi = -(i/4)(2pi)^2 phi
    errs = []
    for N in (16, 32):
        s = GridSpec(2, N, order)
        x1, y1, x2, y2 = s.coords()
        arg = 2 * np.pi * (x1 + y2)
        H = hessian_array(np.sin(arg), s)
        exact = -0.25j * (2 * np.pi) ** 2 * np.sin(arg)
        errs.append(np.max(np.abs(H[..., 0, 1] - exact)))
    assert abs(errs[0] / errs[1] - 2 ** order) <= 0.2 * 2 ** order


def test_fft_hessian_matches_rolled_stencil():
    rng = np.random.default_rng(0)
    for order in (2, 4):
        s = GridSpec(2, 12, order)
        data = rng.normal(size=s.shape)
        assert np.max(np.abs(hessian_array(data, s) - hessian_array_direct(data, s))) < 1e-12 * s.N ** 2


def test_pluriharmonic_interior():
    # x1 and Re(z1 z2) are annihilated by ddbar; the roll wraps, so check interior points
    s = GridSpec(2, 16)
    x1, y1, x2, y2 = s.coords()
    inner = (slice(2, -2),) * 4
    for phi in (x1, x1 * x2 - y1 * y2):
        H = hessian_array_direct(phi, s)
        assert np.max(np.abs(H[inner])) < 1e-9


def test_hessian_hermitian_everywhere():
    rng = np.random.default_rng(1)
    s = GridSpec(2, 16)
    H = hessian_array(rng.normal(size=s.shape), s)
    asym = np.max(np.abs(H - np.conj(np.swapaxes(H, -1, -2))))
    assert asym <= 1e-12 * np.max(np.abs(H))
    assert np.all(np.abs(H[..., 0, 0].imag) <= 1e-12 * np.max(np.abs(H)))


def test_curvature_field_examples():
    s = GridSpec(2, 8)
    F0 = np.diag([3.0, 5.0])
    F = curvature_field(F0, ScalarGridField.zeros(s))
    assert np.all(F.data == F0)
    phi = random_trig_field(s, 0.01, np.random.default_rng(2))
    F = curvature_field(F0, phi)
    # a periodic Hessian telescopes to zero mean
    assert np.max(np.abs(F.data.reshape(-1, 2, 2).mean(axis=0) - F0)) < 1e-13
    E = F.data - F0
    bound = np.max(np.linalg.norm(E, ord=2, axis=(-2, -1)))
    lam = F.eigenvalues()
    assert np.max(np.abs(lam - np.array([3.0, 5.0]))) <= bound + 1e-14


def test_gauge_invariance():
    s = GridSpec(2, 8)
    phi = random_trig_field(s, 0.1, np.random.default_rng(3))
    assert np.max(np.abs(hessian_array(phi.data + 7.0, s) - hessian_array(phi.data, s))) < 1e-12


def test_mean_zero_and_average():
    s = GridSpec(1, 16)
    x, y = s.coords()
    assert np.all(mean_zero(ScalarGridField(s, np.full(s.shape, 3.0))).data == 0)
    phi = ScalarGridField(s, np.cos(2 * np.pi * x) + 2.0)
    once = mean_zero(phi)
    assert abs(once.data.mean()) < 1e-16
    assert np.max(np.abs(mean_zero(once).data - once.data)) < 1e-15
    assert abs(average(np.sin(2 * np.pi * x))) < 1e-16


def test_kernel_modes_are_invisible():
    s = GridSpec(1, 8)
    x, y = s.coords()
    checker = np.cos(np.pi * s.N * x)  # frequency N/2
    assert kernel_mask(s).sum() == 4
    assert np.max(np.abs(hessian_array(checker, s))) < 1e-12
    assert np.max(np.abs(gauge_fix(checker + 1.0, s))) < 1e-13
    rng = np.random.default_rng(4)
    d = rng.normal(size=s.shape)
    g = gauge_fix(d, s)
    assert np.allclose(hessian_array(g, s), hessian_array(d, s), atol=1e-11)
    assert np.allclose(gauge_fix(g, s), g, atol=1e-14)


def test_first_derivative_residual():
    s = GridSpec(2, 16)
    const = HermitianGridField(s, np.broadcast_to(np.diag([1.0, 2.0]), s.shape + (2, 2)))
    assert first_derivative_residual(None, const) == 0
    phi = random_trig_field(s, 0.05, np.random.default_rng(5))
    F = curvature_field(np.diag([3.0, 5.0]), phi)
    # tr(eta^{-1} dF) is the discrete derivative of the angle up to the stencil error
    a = first_derivative_residual(None, F)
    b = angle_gradient_sup(F)
    assert a > 1e-3
    assert abs(a - b) <= 0.05 * b


def test_bianchi():
    s = GridSpec(2, 16)
    assert bianchi_residual(ScalarGridField.zeros(s)) == 0
    for seed in range(3):
        phi = random_trig_field(s, 1.0, np.random.default_rng(seed), max_freq=2, max_l1=4)
        assert bianchi_residual(phi) <= 1e-12


def test_central_charge_examples():
    s = GridSpec(2, 8)
    cc = central_charge(np.eye(2), np.diag([1.0, 2.0]), ScalarGridField.zeros(s))
    assert cc.Z == pytest.approx(-1 + 3j, abs=1e-14)
    assert cc.hat_theta == pytest.approx(math.atan(1) + math.atan(2), abs=1e-15)
    assert cc.consistent
    cc0 = central_charge(np.eye(2), np.zeros((2, 2)), ScalarGridField.zeros(s))
    assert cc0.Z.real > 0 and cc0.Z.imag == 0 and cc0.hat_theta == 0


def test_central_charge_invariance():
    s = GridSpec(2, 16)
    F0 = np.diag([1.0, 2.0])
    Z0 = central_charge(np.eye(2), F0, ScalarGridField.zeros(s)).Z
    rng = np.random.default_rng(6)
    for _ in range(3):
        phi = random_trig_field(s, 0.05, rng)
        assert abs(central_charge(np.eye(2), F0, phi).Z - Z0) <= 1e-3 * abs(Z0)


def test_central_charge_lift_above_pi():
    s = GridSpec(2, 8)
    cc = central_charge(np.eye(2), np.diag([3.0, 5.0]), ScalarGridField.zeros(s))
    assert cc.hat_theta == pytest.approx(lagrangian_angle([3.0, 5.0]))
    assert cc.hat_theta > math.pi / 2 and cc.consistent


def test_snapshot_round_trip(tmp_path):
    s = GridSpec(2, 8)
    phi = random_trig_field(s, 0.3, np.random.default_rng(7))
    p = save_snapshot(phi, tmp_path / "phi.f64", "phi")
    back = load_snapshot(p)
    assert back.spec == s and np.array_equal(back.data, phi.data)
    F = curvature_field(np.array([[2.0, 1j], [-1j, 3.0]]), phi)
    p = save_snapshot(F, tmp_path / "F.f64", "F")
    back = load_snapshot(p)
    assert isinstance(back, HermitianGridField) and np.array_equal(back.data, F.data)
    assert p.stat().st_size == s.size * 6 * 8


def test_random_trig_field_amplitude():
    s = GridSpec(2, 8)
    phi = random_trig_field(s, 0.05, np.random.default_rng(8))
    assert np.max(np.abs(phi.data)) == pytest.approx(0.05)
    assert abs(phi.data.mean()) < 1e-15
    again = random_trig_field(s, 0.05, np.random.default_rng(8))
    assert np.array_equal(phi.data, again.data)
