"""Newton-Krylov solvers for the discrete dHYM and J-equations on the flat torus.

Both residuals are scalar grid fields

    dHYM:  R(phi) = Theta(F0 + ddbar phi) - target
    J:     R(phi) = c - tr(omega_phi^{-1} chi0)

and both linearize to psi -> tr(A(x) ddbar psi) with A = (I + F^2)^{-1} and
A = omega^{-1} chi omega^{-1} respectively.  Central differences cannot see
the constant and checkerboard modes, so the Newton system is solved on their
orthogonal complement.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .hermitian import as_hermitian, eigvalsh_batch, lagrangian_angle
from .torus import (
    GridSpec,
    ScalarGridField,
    curvature_array,
    difference_symbol,
    gauge_fix,
    hessian_array,
    kernel_mask,
    relative_eigenvalue_field,
)


class PositivityError(ArithmeticError):
    def __init__(self, message, index=None, margin=None):
        super().__init__(message)
        self.index = index
        self.margin = margin


# ---------------------------------------------------------------------------
# residuals and coefficients

def dhym_target(F0) -> float:
    """Exact angle of the constant representative."""
    return float(lagrangian_angle(eigvalsh_batch(as_hermitian(F0))))


def j_target(chi0, omega0) -> float:
    """tr(omega0^{-1} chi0): the only c admitting a solution in the class."""
    return float(np.real(np.trace(np.linalg.solve(as_hermitian(omega0), as_hermitian(chi0)))))


def dhym_angle(phi_data, F0, spec: GridSpec):
    """(Theta field, eigenvalue field, F field)."""
    F = curvature_array(F0, phi_data, spec)
    lam = eigvalsh_batch(F)
    return lagrangian_angle(lam), lam, F


def dhym_residual(phi_data, F0, target, spec: GridSpec) -> np.ndarray:
    return dhym_angle(phi_data, F0, spec)[0] - target


def omega_field(phi_data, omega0, spec: GridSpec) -> np.ndarray:
    return curvature_array(omega0, phi_data, spec)


def positivity_margin(omega: np.ndarray):
    """(min eigenvalue over the grid, grid index where it occurs)."""
    lam = eigvalsh_batch(omega)[..., 0]
    idx = np.unravel_index(int(np.argmin(lam)), lam.shape)
    return float(lam[idx]), tuple(int(i) for i in idx)


def j_trace_field(omega: np.ndarray, chi0) -> np.ndarray:
    return np.real(np.einsum("...ii->...", np.linalg.solve(omega, np.broadcast_to(chi0, omega.shape))))


def j_residual(phi_data, chi0, omega0, c, spec: GridSpec, check=True) -> np.ndarray:
    omega = omega_field(phi_data, omega0, spec)
    if check:
        margin, idx = positivity_margin(omega)
        if margin <= 0:
            raise PositivityError(f"omega_phi not positive at grid index {idx} (min eig {margin:.3e})",
                                  idx, margin)
    return c - j_trace_field(omega, as_hermitian(chi0))


def dhym_coefficient(F: np.ndarray) -> np.ndarray:
    n = F.shape[-1]
    A = np.linalg.inv(np.eye(n) + F @ F)
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


def j_coefficient(omega: np.ndarray, chi0) -> np.ndarray:
    wi = np.linalg.inv(omega)
    A = wi @ as_hermitian(chi0) @ wi
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


@dataclass
class LinearizedOperator:
    spec: GridSpec
    coeff: np.ndarray  # A(x), so that L psi = tr(A H(psi)) = eta^{i jbar} psi_{i jbar}

    def __post_init__(self):
        n = self.spec.n
        if self.coeff.shape != self.spec.shape + (n, n):
            raise ValueError("coefficient field shape does not match grid")

    def apply(self, psi_data: np.ndarray) -> np.ndarray:
        H = hessian_array(psi_data, self.spec)
        return np.real(np.einsum("...ab,...ba->...", self.coeff, H))

    def max_eigenvalue(self) -> float:
        return float(np.max(eigvalsh_batch(self.coeff)[..., -1]))

    def symbol(self) -> np.ndarray:
        """Fourier symbol of the grid-mean coefficient operator (real, <= 0)."""
        return constant_symbol(self.spec, self.coeff.reshape(-1, self.spec.n, self.spec.n).mean(axis=0))


def apply_linearized(L: LinearizedOperator, psi) -> ScalarGridField:
    data = psi.data if isinstance(psi, ScalarGridField) else psi
    return ScalarGridField(L.spec, L.apply(data))


def constant_symbol(spec: GridSpec, A: np.ndarray) -> np.ndarray:
    """Symbol of psi -> tr(A H(psi)) for constant A, on the full FFT grid."""
    n = spec.n
    d = difference_symbol(spec, spec.wavenumbers())
    m = 2 * n
    grids = np.meshgrid(*([d] * m), indexing="ij")
    w = [0.5 * (grids[2 * i] - 1j * grids[2 * i + 1]) for i in range(n)]
    s = np.zeros(spec.shape, dtype=complex)
    for i in range(n):
        for j in range(n):
            s -= A[j, i] * w[i] * np.conj(w[j])
    return np.real(s)


class FlatPreconditioner:
    """FFT inverse of the constant-coefficient operator, zero on the kernel."""

    def __init__(self, spec: GridSpec, symbol: np.ndarray):
        self.spec = spec
        mask = kernel_mask(spec) | (np.abs(symbol) < 1e-14 * np.max(np.abs(symbol)))
        inv = np.zeros_like(symbol)
        inv[~mask] = 1.0 / symbol[~mask]
        self.inv = inv

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return np.real(np.fft.ifftn(np.fft.fftn(r) * self.inv))


# ---------------------------------------------------------------------------
# Newton

@dataclass
class NewtonConfig:
    max_iters: int = 30
    newton_tol: float = 1e-10
    damping: float = 1.0
    linear_tol: float = 1e-10
    linear_max_iters: int = 200
    min_step: float = 2.0 ** -8

    def __post_init__(self):
        if self.newton_tol <= 0 or self.linear_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must be in (0, 1]")
        if self.max_iters < 0 or self.linear_max_iters <= 0:
            raise ValueError("iteration limits must be nonnegative")


@dataclass
class NewtonReport:
    verdict: str
    iterations: int
    residual_sup: float
    projected_residual_sup: float
    history: list = field(default_factory=list)  # (iter, residual_sup, step_norm, linear_iters)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.verdict == "CONVERGED"


def _solve_linear(L: LinearizedOperator, rhs: np.ndarray, cfg: NewtonConfig):
    spec = L.spec
    shape = spec.shape
    size = spec.size
    pre = FlatPreconditioner(spec, L.symbol())

    def matvec(v):
        v = gauge_fix(v.reshape(shape), spec)
        return gauge_fix(L.apply(v), spec).ravel()

    op = LinearOperator((size, size), matvec=matvec, dtype=float)
    M = LinearOperator((size, size), matvec=lambda v: pre(v.reshape(shape)).ravel(), dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    b = gauge_fix(rhs, spec).ravel()
    x, info = gmres(op, b, rtol=cfg.linear_tol, atol=0.0, restart=min(60, size),
                    maxiter=cfg.linear_max_iters, M=M, callback=cb, callback_type="pr_norm")
    return gauge_fix(x.reshape(shape), spec), info, count[0]


def _newton(residual, coefficient, phi0: np.ndarray, spec: GridSpec, cfg: NewtonConfig):
    phi = gauge_fix(np.asarray(phi0, dtype=float), spec)
    history = []
    R = residual(phi)
    for it in range(cfg.max_iters + 1):
        res = float(np.max(np.abs(R)))
        pres = float(np.max(np.abs(gauge_fix(R, spec))))
        if res <= cfg.newton_tol:
            return phi, NewtonReport("CONVERGED", it, res, pres, history)
        if pres <= cfg.newton_tol:
            msg = "residual is constant on the grid: target is inconsistent with the classes"
            return phi, NewtonReport("NON_CONVERGED", it, res, pres, history, msg)
        if it == cfg.max_iters:
            break
        L = LinearizedOperator(spec, coefficient(phi))
        delta, info, lin_iters = _solve_linear(L, -R, cfg)
        alpha = cfg.damping
        accepted = False
        while alpha >= cfg.min_step:
            trial = gauge_fix(phi + alpha * delta, spec)
            try:
                R_trial = residual(trial)
            except PositivityError:
                alpha *= 0.5
                continue
            if float(np.max(np.abs(gauge_fix(R_trial, spec)))) < pres:
                accepted = True
                break
            alpha *= 0.5
        step_norm = float(np.max(np.abs(alpha * delta)))
        history.append((it, res, step_norm if accepted else 0.0, lin_iters))
        if not accepted:
            msg = f"line search failed below step {cfg.min_step} (linear solver info {info})"
            return phi, NewtonReport("NON_CONVERGED", it + 1, res, pres, history, msg)
        phi, R = trial, R_trial
    res = float(np.max(np.abs(R)))
    pres = float(np.max(np.abs(gauge_fix(R, spec))))
    return phi, NewtonReport("NON_CONVERGED", cfg.max_iters, res, pres, history, "max_iters exceeded")


def _as_data(phi, spec):
    if phi is None:
        return np.zeros(spec.shape)
    return phi.data if isinstance(phi, ScalarGridField) else np.asarray(phi, dtype=float)


def newton_dhym(F0, hat_theta, phi_init, cfg: NewtonConfig | None = None, spec: GridSpec | None = None):
    """Solve Theta(F0 + ddbar phi) = hat_theta (scalar or field)."""
    cfg = cfg or NewtonConfig()
    spec = spec or phi_init.spec
    F0 = as_hermitian(F0)
    target = dhym_target(F0) if hat_theta is None else hat_theta
    if isinstance(target, ScalarGridField):
        target = target.data

    def residual(p):
        return dhym_residual(p, F0, target, spec)

    def coefficient(p):
        return dhym_coefficient(curvature_array(F0, p, spec))

    phi, rep = _newton(residual, coefficient, _as_data(phi_init, spec), spec, cfg)
    return ScalarGridField(spec, phi), rep


def newton_j(chi0, omega0, c, phi_init, cfg: NewtonConfig | None = None, spec: GridSpec | None = None):
    """Solve tr(omega_phi^{-1} chi0) = c (scalar or field), keeping omega_phi > 0."""
    cfg = cfg or NewtonConfig()
    spec = spec or phi_init.spec
    chi0 = as_hermitian(chi0)
    omega0 = as_hermitian(omega0)
    c = j_target(chi0, omega0) if c is None else c
    if isinstance(c, ScalarGridField):
        c = c.data
    phi0 = _as_data(phi_init, spec)
    margin, idx = positivity_margin(omega_field(gauge_fix(phi0, spec), omega0, spec))
    if margin <= 0:
        raise PositivityError(f"initial omega_phi not positive at {idx}", idx, margin)

    def residual(p):
        return j_residual(p, chi0, omega0, c, spec)

    def coefficient(p):
        return j_coefficient(omega_field(p, omega0, spec), chi0)

    phi, rep = _newton(residual, coefficient, phi0, spec, cfg)
    return ScalarGridField(spec, phi), rep


def jacobian_fd_orders(residual, coefficient, phi, psi, spec, eps_list=(1e-2, 5e-3, 2.5e-3)):
    """Observed orders of the central-difference error against the Jacobian-vector product."""
    Jpsi = LinearizedOperator(spec, coefficient(phi)).apply(psi)
    errs = []
    for eps in eps_list:
        fd = (residual(phi + eps * psi) - residual(phi - eps * psi)) / (2.0 * eps)
        errs.append(float(np.max(np.abs(fd - Jpsi))))
    orders = [np.log(errs[k] / errs[k + 1]) / np.log(eps_list[k] / eps_list[k + 1])
              for k in range(len(errs) - 1)]
    return errs, orders


def eigen_field(phi: ScalarGridField, F0) -> np.ndarray:
    return relative_eigenvalue_field(curvature_array(F0, phi.data, phi.spec))
