"""Forward-Euler line-bundle mean curvature flow and J-flow on the flat torus."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .bochner import subharmonicity_monitor
from .elliptic import (
    PositivityError,
    dhym_angle,
    dhym_target,
    j_trace_field,
    j_target,
    omega_field,
    positivity_margin,
)
from .hermitian import as_hermitian, eigvalsh_batch
from .torus import (
    GridSpec,
    HermitianGridField,
    ScalarGridField,
    dz,
    first_derivative_residual,
    gauge_fix,
    hessian_array,
    relative_eigenvalue_field,
)

KINDS = ("LBMCF", "JFLOW")
RIGID_TOL = 1e-6


@dataclass
class FlowConfig:
    kind: str
    spec: GridSpec
    phi0: ScalarGridField | None = None
    F0: np.ndarray | None = None
    chi0: np.ndarray | None = None
    omega0: np.ndarray | None = None
    target: float | None = None  # hat_theta or c; None means the exact class value
    dt_safety: float = 0.2
    t_max: float = 200.0
    residual_tol: float = 1e-8
    max_steps: int = 200000
    record_every: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not 0 < self.dt_safety <= 1:
            raise ValueError("dt_safety must be in (0, 1]")
        if self.residual_tol <= 0 or self.t_max <= 0:
            raise ValueError("residual_tol and t_max must be positive")
        n = self.spec.n
        if self.kind == "LBMCF":
            if self.F0 is None:
                raise ValueError("LBMCF needs F0")
            self.F0 = as_hermitian(self.F0)
            if self.target is None:
                self.target = dhym_target(self.F0)
        else:
            if self.chi0 is None or self.omega0 is None:
                raise ValueError("JFLOW needs chi0 and omega0")
            self.chi0 = as_hermitian(self.chi0)
            self.omega0 = as_hermitian(self.omega0)
            for name, M in (("chi0", self.chi0), ("omega0", self.omega0)):
                if np.min(eigvalsh_batch(M)) <= 0:
                    raise ValueError(f"{name} must be positive definite")
            if self.target is None:
                self.target = j_target(self.chi0, self.omega0)
            self.chi_max = float(eigvalsh_batch(self.chi0)[-1])
        for M in (self.F0, self.chi0, self.omega0):
            if M is not None and M.shape != (n, n):
                raise ValueError("matrix dimension does not match grid")
        if self.phi0 is None:
            self.phi0 = ScalarGridField.zeros(self.spec)

    @property
    def background(self) -> np.ndarray:
        return self.F0 if self.kind == "LBMCF" else self.omega0


@dataclass
class FlowState:
    t: float
    phi: np.ndarray
    dt: float = 0.0
    step_count: int = 0
    residual_sup: float = np.inf
    eigen_variance: np.ndarray | None = None
    positivity_margin: float | None = None


@dataclass
class FlowReport:
    verdict: str
    kind: str
    steps: int
    t_final: float
    residual_sup: float
    eigen_means: list
    eigen_variance: list
    first_derivative_residual: float
    hessian_sup: float
    phi_sup: float
    min_positivity: float | None
    hypercritical: bool | None
    subharmonic_min: float | None
    subharmonic_status: str
    history: list = field(default_factory=list)
    message: str = ""
    wall_seconds: float = 0.0
    phi: np.ndarray | None = None

    def history_csv(self) -> str:
        n = len(self.eigen_means)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "dt", "residual_sup"] + [f"eigen_variance_{i + 1}" for i in range(n)]
                   + ["positivity_margin"])
        for row in self.history:
            w.writerow([repr(float(v)) if v is not None else "" for v in row])
        return buf.getvalue()

    def summary(self) -> dict:
        keep = ("verdict", "kind", "steps", "t_final", "residual_sup", "eigen_means", "eigen_variance",
                "first_derivative_residual", "hessian_sup", "phi_sup", "min_positivity",
                "hypercritical", "subharmonic_min", "subharmonic_status", "message")
        return {k: getattr(self, k) for k in keep}


def _eigen_variance(lam: np.ndarray) -> np.ndarray:
    flat = lam.reshape(-1, lam.shape[-1])
    return np.max(np.abs(flat - flat.mean(axis=0)), axis=0)


def lbmcf_rhs(phi: ScalarGridField, F0, hat_theta) -> ScalarGridField:
    theta, _, _ = dhym_angle(phi.data, as_hermitian(F0), phi.spec)
    return ScalarGridField(phi.spec, theta - hat_theta)


def jflow_rhs(phi: ScalarGridField, chi0, omega0, c) -> ScalarGridField:
    omega = omega_field(phi.data, as_hermitian(omega0), phi.spec)
    margin, idx = positivity_margin(omega)
    if margin <= 0:
        raise PositivityError(f"omega_phi lost positivity at grid index {idx} (min eig {margin:.3e})",
                              idx, margin)
    return ScalarGridField(phi.spec, c - j_trace_field(omega, as_hermitian(chi0)))


def _evaluate(phi: np.ndarray, cfg: FlowConfig):
    """(rhs, eigenvalue field, largest coefficient eigenvalue, positivity margin)."""
    spec = cfg.spec
    if cfg.kind == "LBMCF":
        theta, lam, _ = dhym_angle(phi, cfg.F0, spec)
        # (I + F^2)^{-1} has largest eigenvalue 1 / (1 + min lam_i^2)
        amax = float(np.max(1.0 / (1.0 + np.min(lam * lam, axis=-1))))
        return theta - cfg.target, lam, amax, None
    omega = omega_field(phi, cfg.omega0, spec)
    margin, idx = positivity_margin(omega)
    if margin <= 0:
        raise PositivityError(f"omega_phi lost positivity at grid index {idx} (min eig {margin:.3e})",
                              idx, margin)
    # eigenvalues of chi^{-1} omega; tr(omega^{-1} chi) is the sum of their reciprocals
    lam = relative_eigenvalue_field(omega, cfg.chi0)
    rhs = cfg.target - np.sum(1.0 / lam, axis=-1)
    # |omega^{-1} chi omega^{-1}| <= |chi| / min eig(omega)^2, which only shrinks dt
    amax = cfg.chi_max / margin ** 2
    return rhs, lam, amax, margin


def stable_dt(cfg: FlowConfig, amax: float) -> float:
    return cfg.dt_safety * cfg.spec.h ** 2 * 2.0 / amax


def step(state: FlowState, cfg: FlowConfig) -> FlowState:
    """One forward-Euler step; phi stays gauge fixed."""
    rhs, lam, amax, margin = _evaluate(state.phi, cfg)
    if not np.all(np.isfinite(rhs)):
        raise FloatingPointError("non-finite right-hand side")
    dt = stable_dt(cfg, amax)
    phi = gauge_fix(state.phi + dt * rhs, cfg.spec)
    return FlowState(state.t + dt, phi, dt, state.step_count + 1, float(np.max(np.abs(rhs))),
                     _eigen_variance(lam), margin)


def _finalize(cfg: FlowConfig, state: FlowState, verdict, history, message, hyper, min_pos, t0):
    spec = cfg.spec
    phi = state.phi
    M = cfg.background + hessian_array(phi, spec)
    try:
        rhs, lam, _, margin = _evaluate(phi, cfg)
        residual = float(np.max(np.abs(rhs)))
    except PositivityError:
        lam = relative_eigenvalue_field(M, cfg.chi0)
        residual = state.residual_sup
    var = _eigen_variance(lam)
    means = lam.reshape(-1, spec.n).mean(axis=0)
    if cfg.kind == "LBMCF":
        fdr = first_derivative_residual(None, HermitianGridField(spec, M))
        mon = subharmonicity_monitor(M, spec, "dhym")
    else:
        # chi0 = I frame: the J-analogue uses eta = omega chi^{-1} omega
        Lc = np.linalg.cholesky(cfg.chi0)
        Li = np.linalg.inv(Lc)
        Mn = Li @ M @ Li.conj().T
        Mn = 0.5 * (Mn + np.conj(np.swapaxes(Mn, -1, -2)))
        fdr = _j_first_derivative_residual(Mn, spec)
        mon = subharmonicity_monitor(Mn, spec, "j")
    if verdict == "CONVERGED":
        rigid = bool(np.all(var <= RIGID_TOL)) and fdr <= RIGID_TOL
        verdict = "CONVERGED_RIGID" if rigid else "CONVERGED_NONRIGID"
    return FlowReport(
        verdict=verdict, kind=cfg.kind, steps=state.step_count, t_final=state.t,
        residual_sup=residual, eigen_means=[float(v) for v in means],
        eigen_variance=[float(v) for v in var], first_derivative_residual=float(fdr),
        hessian_sup=float(np.max(np.abs(hessian_array(phi, spec)))),
        phi_sup=float(np.max(np.abs(phi))), min_positivity=min_pos, hypercritical=hyper,
        subharmonic_min=mon.min_value, subharmonic_status=mon.status, history=history,
        message=message, wall_seconds=time.perf_counter() - t0, phi=phi,
    )


def _j_first_derivative_residual(omega: np.ndarray, spec: GridSpec) -> float:
    ieta = np.linalg.inv(omega @ omega)
    worst = 0.0
    for j in range(spec.n):
        d = dz(omega, j, spec)
        worst = max(worst, float(np.max(np.abs(np.einsum("...pq,...qp->...", ieta, d)))))
    return worst


def run_flow(cfg: FlowConfig, progress=None) -> FlowReport:
    """Integrate until the residual drops below tolerance or t_max is reached."""
    t0 = time.perf_counter()
    spec = cfg.spec
    state = FlowState(0.0, gauge_fix(cfg.phi0.data, spec))
    history = []
    min_pos = None
    hyper = None
    n = spec.n
    verdict, message = "TIMEOUT", ""
    while True:
        try:
            rhs, lam, amax, margin = _evaluate(state.phi, cfg)
        except PositivityError as err:
            verdict, message = "ABORTED", str(err)
            min_pos = err.margin if min_pos is None else min(min_pos, err.margin)
            break
        if not np.all(np.isfinite(rhs)):
            verdict, message = "ABORTED", "non-finite right-hand side"
            break
        if hyper is None and cfg.kind == "LBMCF":
            hyper = bool(np.min(rhs + cfg.target) > (n - 1) * np.pi / 2)
        if margin is not None:
            min_pos = margin if min_pos is None else min(min_pos, margin)
        res = float(np.max(np.abs(rhs)))
        var = _eigen_variance(lam)
        state.residual_sup = res
        if state.step_count % cfg.record_every == 0 or res < cfg.residual_tol:
            history.append([state.t, state.dt, res] + list(var) + [margin])
        if res < cfg.residual_tol:
            verdict = "CONVERGED"
            break
        spread = float(np.max(rhs) - np.min(rhs))
        if spread < cfg.residual_tol:
            verdict = "NON_CONVERGED"
            message = (f"right-hand side is spatially constant ({float(np.mean(rhs)):.6g}): "
                       "target is inconsistent with the classes")
            break
        if state.t >= cfg.t_max or state.step_count >= cfg.max_steps:
            message = f"stopped at t={state.t:.4g} after {state.step_count} steps"
            break
        dt = stable_dt(cfg, amax)
        phi = gauge_fix(state.phi + dt * rhs, spec)
        state = FlowState(state.t + dt, phi, dt, state.step_count + 1, res, var, margin)
        if progress is not None:
            progress(state)
    return _finalize(cfg, state, verdict, history, message, hyper, min_pos, t0)
