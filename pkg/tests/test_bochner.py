import itertools

import numpy as np
import pytest

from dhym_lab.bochner import (
    ConstraintError,
    JetSymmetryError,
    PointwiseJet,
    curvature_only_jet,
    final_dhym,
    final_j,
    first_order_constraint,
    grid_bochner_check,
    identity_suite,
    j_lap_at_solution,
    lap_at_solution,
    lap_expansion_general,
    project_first_order,
    random_jet,
    relative_gap,
    solution_weights,
    subharmonicity_monitor,
)
from dhym_lab.torus import GridSpec, ScalarGridField, curvature_array, random_trig_field


def zero_jet(lam, R=None):
    n = len(lam)
    return PointwiseJet(np.asarray(lam, float), np.zeros((n,) * 3), np.zeros((n,) * 4),
                        np.zeros((n, n)) if R is None else R)


def test_zero_jet_all_forms():
    jet = zero_jet([0.5, 1.5])
    lhs, rhs, _ = lap_expansion_general(jet)
    assert lhs == 0 and rhs == 0
    assert lap_at_solution(jet) == (0.0, 0.0)
    assert j_lap_at_solution(jet) == (0.0, 0.0)


def _fd_laplacian(jet, h=1e-4):
    """eta^{p qbar} d_p d_qbar log det(I + F(z)^2) by finite differences of a flat jet."""
    n = jet.n
    F, T, Fb, Q, _, _ = jet.matrices()

    def field(z):
        M = F + np.einsum("ijp,p->ij", T, z) + np.einsum("ijq,q->ij", Fb, np.conj(z))
        M = M + np.einsum("ijpq,p,q->ij", Q, z, np.conj(z))
        return np.linalg.slogdet(np.eye(n) + M @ M)[1].real

    def d2(a, b):
        # real second derivative along real coordinates a, b of (x1, y1, x2, y2, ...)
        def at(da, db):
            x = np.zeros(2 * n)
            x[a] += da
            x[b] += db
            return field(x[0::2] + 1j * x[1::2])
        return (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4 * h * h)

    H = np.zeros((n, n), dtype=complex)
    for p, q in itertools.product(range(n), repeat=2):
        xp, yp, xq, yq = 2 * p, 2 * p + 1, 2 * q, 2 * q + 1
        H[p, q] = 0.25 * ((d2(xp, xq) + d2(yp, yq)) + 1j * (d2(xp, yq) - d2(yp, xq)))
    ieta = np.linalg.inv(np.eye(n) + F @ F)
    return float(np.real(np.einsum("qp,pq->", ieta, H)))


@pytest.mark.parametrize("n", [2, 3])
def test_direct_laplacian_against_finite_differences(n):
    rng = np.random.default_rng(n)
    jet = random_jet(n, rng, R=np.zeros((n, n)))
    lhs, rhs, scale = lap_expansion_general(jet)
    assert abs(lhs - _fd_laplacian(jet)) <= 1e-6 * scale


@pytest.mark.parametrize("n", [2, 3])
def test_general_identity_random(n):
    rng = np.random.default_rng(10 + n)
    for _ in range(50):
        jet = random_jet(n, rng, R=None if n == 3 else np.zeros((n, n)))
        lhs, rhs, scale = lap_expansion_general(jet)
        assert abs(lhs - rhs) <= 1e-10 * scale


def test_symmetry_violation_rejected():
    n = 2
    T = np.zeros((n,) * 3, dtype=complex)
    T[0, 0, 1] = 1.0
    with pytest.raises(JetSymmetryError):
        PointwiseJet(np.array([1.0, 2.0]), T, np.zeros((n,) * 4), np.zeros((n, n)))


def test_constraint_required():
    rng = np.random.default_rng(0)
    jet = random_jet(2, rng, lam=[1.0, 2.0])
    with pytest.raises(ConstraintError):
        lap_at_solution(jet)


def test_projection_is_exact():
    rng = np.random.default_rng(1)
    jet = random_jet(3, rng, kind="dhym")
    w = solution_weights(jet.lam, "dhym")
    assert np.max(np.abs(first_order_constraint(jet.T, w))) < 1e-13
    again = project_first_order(jet.T, w)
    assert np.allclose(again, jet.T, atol=1e-14)


def _final_dhym_loops(lam, T, R):
    n = len(lam)
    th = 1.0 / (1.0 + np.asarray(lam) ** 2)
    v = 0.0
    for i, j, p in itertools.product(range(n), repeat=3):
        v += 2 * th[i] * th[j] * th[p] * (1 + lam[i] * lam[j]) * abs(T[j, p, i]) ** 2
    for i in range(n):
        for p in range(i + 1, n):
            v += 2 * th[i] * th[p] * R[i, p] * (lam[i] - lam[p]) ** 2
    return v


@pytest.mark.parametrize("n", [2, 3])
def test_dhym_at_solution(n):
    rng = np.random.default_rng(20 + n)
    for _ in range(50):
        jet = random_jet(n, rng, kind="dhym")
        pen, fin = lap_at_solution(jet)
        assert relative_gap(pen, fin, 0.0) <= 1e-10
        assert fin >= 0
        assert fin == pytest.approx(_final_dhym_loops(jet.lam, jet.T, jet.R), rel=1e-12)


@pytest.mark.parametrize("n", [2, 3])
def test_j_at_solution(n):
    rng = np.random.default_rng(30 + n)
    for _ in range(50):
        jet = random_jet(n, rng, kind="j", lam_range=(0.5, 4.0))
        pen, fin = j_lap_at_solution(jet)
        assert relative_gap(pen, fin, 0.0) <= 1e-10 and fin >= 0


def test_j_rejects_nonpositive():
    with pytest.raises(ValueError):
        j_lap_at_solution(zero_jet([-1.0, 2.0]))


def test_curvature_spot_values_from_closed_form():
    # the final forms sum the curvature term over unordered pairs i < p
    R = np.array([[0.0, 1.0], [1.0, 0.0]])
    pen, fin = lap_at_solution(curvature_only_jet([3.0, 5.0], R))
    assert fin == pytest.approx(2 * (1 / 10) * (1 / 26) * 4, abs=1e-15)
    assert pen == pytest.approx(fin, abs=1e-15)
    pen, fin = j_lap_at_solution(curvature_only_jet([2.0, 4.0], R))
    assert fin == pytest.approx(2 * 4 / (4 * 16), abs=1e-15)
    assert pen == pytest.approx(fin, abs=1e-15)


def test_final_j_scaling():
    # lam -> 2 lam scales the gradient part by 2^-4 and the curvature part by 2^-2
    rng = np.random.default_rng(5)
    T = rng.normal(size=(2, 2, 2)) + 0j
    R = np.array([[0.0, 0.7], [0.7, 0.0]])
    Z2, Z3 = np.zeros((2, 2)), np.zeros((2, 2, 2))
    lam = np.array([1.3, 2.1])
    assert final_j(2 * lam, T, Z2) == pytest.approx(final_j(lam, T, Z2) / 16, rel=1e-13)
    assert final_j(2 * lam, Z3, R) == pytest.approx(final_j(lam, Z3, R) / 4, rel=1e-13)
    assert final_dhym(lam, np.zeros((2, 2, 2)), np.zeros((2, 2))) == 0


def test_identity_suite_deterministic():
    a = identity_suite("dhym", 2, 20, seed=3)
    b = identity_suite("dhym", 2, 20, seed=3)
    assert a.as_dict() == b.as_dict()
    assert a.max_rel_err <= 1e-10 and not a.failures
    with pytest.raises(ValueError):
        identity_suite("bogus", 2, 1, 0)


def test_grid_check_zero_and_refinement():
    s = GridSpec(1, 16)
    rep = grid_bochner_check(ScalarGridField.zeros(s), np.eye(1))
    assert rep.rel_linf == 0 and rep.lhs_max == 0
    errs = []
    for N in (32, 64):
        s = GridSpec(1, N)
        x, y = s.coords()
        phi = ScalarGridField(s, 0.05 * (np.cos(2 * np.pi * x) + np.sin(2 * np.pi * (x + y))))
        errs.append(grid_bochner_check(phi, np.eye(1)).rel_linf)
    assert 3 <= errs[0] / errs[1] <= 5


def test_monitor():
    s = GridSpec(2, 8)
    const = np.broadcast_to(np.diag([3.0, 5.0]), s.shape + (2, 2)).astype(complex)
    rep = subharmonicity_monitor(const, s)
    assert rep.status == "OK" and rep.min_value == 0 and rep.constraint_residual == 0
    bad = np.broadcast_to(np.diag([-2.0, 2.0]), s.shape + (2, 2)).astype(complex)
    assert subharmonicity_monitor(bad, s).status == "REGIME_EXIT"
    assert subharmonicity_monitor(bad, s, "j").status == "REGIME_EXIT"
    phi = random_trig_field(s, 0.05, np.random.default_rng(0))
    F = curvature_array(np.diag([3.0, 5.0]), phi.data, s)
    rep = subharmonicity_monitor(F, s)
    # off-solution the first-order constraint is visibly violated and reported
    assert rep.constraint_residual > 1e-4
