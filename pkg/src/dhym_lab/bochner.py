"""Pointwise and grid checks of the Laplacian of log det(eta).

Index conventions (g = I frame, all arrays may carry leading batch axes):

* ``F[i, j]``        = F_{i jbar}
* ``Fd[i, j, p]``    = F_{i jbar, p}        (first holomorphic derivative)
* ``Fb[i, j, q]``    = F_{i jbar, qbar}     = conj(Fd[j, i, q])
* ``Fdd[i, j, p, q]``= F_{i jbar, p qbar}   (p applied first)
* ``P[p, q, i, t]``  = F_{p qbar, tbar i}   (tbar applied first)
* ``Rt[a, b, c, d]`` = R_{a bbar c dbar}

eta = shift * I + F^2, with shift 1 for the dHYM angle and shift 0 for the
J-equation (where F plays the role of omega in a frame with chi = I).
Contraction with the inverse metric is ``eta^{p qbar} X_{p qbar} = tr(eta^{-1} X)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .hermitian import curvature_input, eigvalsh_batch
from .torus import GridSpec, ScalarGridField, curvature_array, dz, dzbar, hessian_array

SYMMETRY_TOL = 1e-12
CONSTRAINT_TOL = 1e-10


class JetSymmetryError(ValueError):
    pass


class ConstraintError(ValueError):
    pass


# ---------------------------------------------------------------------------
# curvature bookkeeping

def curvature_tensor(R) -> np.ndarray:
    """Full R_{a bbar c dbar} keeping only the orthogonal bisectional components.

    R_{a abar c cbar} = R_{a cbar c abar} = R[a][c] for a != c, zero otherwise.
    """
    R = curvature_input(R, nonnegative=False)
    n = R.shape[0]
    Rt = np.zeros((n,) * 4)
    for a in range(n):
        for c in range(n):
            if a != c:
                Rt[a, a, c, c] = R[a, c]
                Rt[a, c, c, a] = R[a, c]
    return Rt


def commutator_tensor(lam, R) -> np.ndarray:
    """F_{i jbar, k lbar} - F_{i jbar, lbar k} for diagonal F in a normal frame."""
    lam = np.asarray(lam, dtype=float)
    n = len(lam)
    C = np.zeros((n,) * 4)
    for i in range(n):
        for k in range(n):
            if i != k:
                C[i, k, k, i] = (lam[k] - lam[i]) * R[i, k]
    return C


def _commutator_split(lam, R) -> np.ndarray:
    # real tensor X with Q = S + X giving the right symmetries for both Q and P = Q - C
    n = len(lam)
    X = np.zeros((n,) * 4)
    for i in range(n):
        for k in range(n):
            if i != k:
                X[i, k, k, i] = 0.5 * (lam[k] - lam[i]) * R[i, k]
                X[i, i, k, k] = 0.5 * (lam[i] - lam[k]) * R[i, k]
    return X


def bianchi_symmetrize(T):
    return 0.5 * (T + T.transpose(2, 1, 0))


def hermitian_jet_symmetrize(G):
    """Symmetrize in i<->k and j<->l, then impose S[i,j,k,l] = conj(S[j,i,l,k])."""
    S = 0.25 * (G + G.transpose(2, 1, 0, 3) + G.transpose(0, 3, 2, 1) + G.transpose(2, 3, 0, 1))
    return 0.5 * (S + np.conj(S.transpose(1, 0, 3, 2)))


# ---------------------------------------------------------------------------
# jets

@dataclass(frozen=True)
class PointwiseJet:
    lam: np.ndarray
    T: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    # which at-solution constraint has been projected in: None, "dhym" or "j"
    constraint: str | None = None

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        n = len(lam)
        T = np.asarray(self.T, dtype=complex)
        Q = np.asarray(self.Q, dtype=complex)
        R = curvature_input(self.R if self.R is not None else np.zeros((n, n)), nonnegative=False)
        if T.shape != (n,) * 3 or Q.shape != (n,) * 4 or R.shape != (n, n):
            raise ValueError("jet component shapes do not match lam")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        self.check_symmetries()

    @property
    def n(self) -> int:
        return len(self.lam)

    @property
    def P(self) -> np.ndarray:
        return self.Q - commutator_tensor(self.lam, self.R)

    def check_symmetries(self, tol: float = SYMMETRY_TOL):
        T, Q, P = self.T, self.Q, self.P
        scale = max(1.0, float(np.max(np.abs(T), initial=0)), float(np.max(np.abs(Q), initial=0)))
        gaps = {
            "Bianchi T[i,j,k]=T[k,j,i]": np.max(np.abs(T - T.transpose(2, 1, 0))),
            "Q symmetric i<->k": np.max(np.abs(Q - Q.transpose(2, 1, 0, 3))),
            "P symmetric j<->l": np.max(np.abs(P - P.transpose(0, 3, 2, 1))),
            "conj Q[i,j,k,l] = P[j,i,l,k]": np.max(np.abs(np.conj(Q) - P.transpose(1, 0, 3, 2))),
        }
        for name, gap in gaps.items():
            if gap > tol * scale:
                raise JetSymmetryError(f"jet violates {name} (gap {gap:.3e})")

    def matrices(self):
        """(F, Fd, Fb, Fdd, P, Rt) in the general index layout."""
        F = np.diag(self.lam).astype(complex)
        Fb = np.conj(self.T.transpose(1, 0, 2))
        return F, self.T, Fb, self.Q, self.P, curvature_tensor(self.R)


def solution_weights(lam, kind: str) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if kind == "dhym":
        return 1.0 / (1.0 + lam * lam)
    if kind == "j":
        return 1.0 / (lam * lam)
    raise ValueError(f"unknown kind {kind!r}")


def _shift(kind: str) -> float:
    return {"dhym": 1.0, "j": 0.0}[kind]


def first_order_constraint(T, w) -> np.ndarray:
    """sum_p w_p T[p, p, j] for each j."""
    return np.einsum("p,ppj->j", w, T)


def project_first_order(T, w) -> np.ndarray:
    """Orthogonal projection of a Bianchi-symmetric T onto sum_p w_p T[p,p,j] = 0."""
    n = T.shape[0]
    basis = []
    for j in range(n):
        E = np.zeros((n,) * 3)
        for p in range(n):
            E[p, p, j] = w[p]
        basis.append(bianchi_symmetrize(E))
    gram = np.array([[np.sum(a * b) for b in basis] for a in basis])
    beta = np.linalg.solve(gram, first_order_constraint(T, w))
    return T - np.einsum("j,jabc->abc", beta, np.array(basis))


@lru_cache(maxsize=None)
def _second_order_basis(n):
    basis = []
    for idx in np.ndindex(*(n,) * 4):
        for z in (1.0, 1j):
            B = np.zeros((n,) * 4, dtype=complex)
            B[idx] = z
            basis.append(hermitian_jet_symmetrize(B))
    return np.array(basis)


def second_order_target(F, Fd, Fb, shift) -> np.ndarray:
    """-eta^{i jbar}_{,p} F_{i jbar, qbar}: what eta^{i jbar} F_{i jbar, qbar p} equals at a solution."""
    ieta = np.linalg.inv(shift * np.eye(F.shape[-1]) + F @ F)
    eta_p = _eta_first(F, Fd)
    return np.einsum("...ti,...js,...stp,...ijq->...pq", ieta, ieta, eta_p, Fb)


def project_second_order(jet: PointwiseJet, kind: str) -> PointwiseJet:
    """Adjust the flat-symmetric part of Q so the differentiated equation holds.

    Only needed when comparing the direct Laplacian with the at-solution forms.
    """
    n = jet.n
    F, Fd, Fb, _, P, _ = jet.matrices()
    ieta = np.linalg.inv(_shift(kind) * np.eye(n) + F @ F)
    target = second_order_target(F, Fd, Fb, _shift(kind))
    basis = _second_order_basis(n)
    A = np.einsum("ji,mijpq->pqm", ieta, basis).reshape(n * n, -1)
    r = (np.einsum("ji,ijpq->pq", ieta, P) - target).ravel()
    A_real = np.concatenate([A.real, A.imag])
    r_real = np.concatenate([r.real, r.imag])
    coef = np.linalg.lstsq(A_real, r_real, rcond=None)[0]
    dQ = np.einsum("m,mabcd->abcd", coef, basis)
    return PointwiseJet(jet.lam, jet.T, jet.Q - dQ, jet.R, constraint=kind)


def random_lams(n, rng, low, high, kind="dhym", max_tries=10000) -> np.ndarray:
    """Uniform draw with all pairwise products > -1 (dHYM) or all entries > 0 (J)."""
    for _ in range(max_tries):
        lam = rng.uniform(low, high, n)
        prods = np.outer(lam, lam)[np.triu_indices(n, 1)]
        if kind == "j" and np.any(lam <= 0):
            continue
        if np.all(prods > -1.0):
            return lam
    raise RuntimeError("could not draw admissible eigenvalues")


def random_jet(n, rng, lam=None, R=None, lam_range=(-0.5, 2.0), kind=None,
               curvature_scale=1.0) -> PointwiseJet:
    """Random jet with exact symmetries; ``kind`` projects the first-order constraint."""
    if lam is None:
        lam = random_lams(n, rng, *lam_range, kind=kind or "dhym")
    lam = np.asarray(lam, dtype=float)
    if R is None:
        R = rng.uniform(0.0, curvature_scale, (n, n))
        R = 0.5 * (R + R.T)
    R = curvature_input(R, nonnegative=False)
    T = bianchi_symmetrize(rng.normal(size=(n,) * 3) + 1j * rng.normal(size=(n,) * 3))
    if kind is not None:
        T = project_first_order(T, solution_weights(lam, kind))
    S = hermitian_jet_symmetrize(rng.normal(size=(n,) * 4) + 1j * rng.normal(size=(n,) * 4))
    Q = S + _commutator_split(lam, R)
    return PointwiseJet(lam, T, Q, R, constraint=kind)


def curvature_only_jet(lam, R) -> PointwiseJet:
    """Jet with T = 0 and the smallest Q compatible with the curvature commutator."""
    lam = np.asarray(lam, dtype=float)
    n = len(lam)
    R = curvature_input(R, nonnegative=False)
    return PointwiseJet(lam, np.zeros((n,) * 3), _commutator_split(lam, R).astype(complex), R)


# ---------------------------------------------------------------------------
# the expressions

def _eta_first(F, Fd):
    return np.einsum("...ibp,...bj->...ijp", Fd, F) + np.einsum("...ib,...bjp->...ijp", F, Fd)


def _ieta(F, shift):
    n = F.shape[-1]
    return np.linalg.inv(shift * np.eye(n) + F @ F)


def lhs_direct(F, Fd, Fb, Fdd, shift) -> np.ndarray:
    """eta^{p qbar} d_p d_qbar log det(eta) by matrix calculus."""
    ieta = _ieta(F, shift)
    eta_p = _eta_first(F, Fd)
    eta_q = _eta_first(F, Fb)
    eta_pq = (np.einsum("...ibpq,...bj->...ijpq", Fdd, F)
              + np.einsum("...ibp,...bjq->...ijpq", Fd, Fb)
              + np.einsum("...ibq,...bjp->...ijpq", Fb, Fd)
              + np.einsum("...ib,...bjpq->...ijpq", F, Fdd))
    A = np.einsum("...ab,...bapq->...pq", ieta, eta_pq)
    B = np.einsum("...ab,...bcq,...cd,...dap->...pq", ieta, eta_q, ieta, eta_p, optimize=F.ndim > 2)
    return np.real(np.einsum("...qp,...pq->...", ieta, A - B))


def _curv_terms(ei, F, Rt):
    c1 = (np.einsum("pq,ij,tj,at,paiq->", ei, ei, F, F, Rt)
          - np.einsum("pq,ij,tj,pa,atiq->", ei, ei, F, F, Rt))
    c2 = (np.einsum("pq,ij,it,aj,patq->", ei, ei, F, F, Rt)
          - np.einsum("pq,ij,it,pa,ajtq->", ei, ei, F, F, Rt))
    return c1, c2


def rhs_terms(F, Fd, Fb, P, shift, Rt=None) -> list:
    """The four groups of the expanded Laplacian, curvature substituted in.

    Returns [t1, t2, t3, t4] (real parts), summing to the Laplacian.
    """
    ei = np.swapaxes(_ieta(F, shift), -1, -2)  # ei[p, q] = eta^{p qbar}
    eta_p = _eta_first(F, Fd)
    eta_q = _eta_first(F, Fb)
    opt = dict(optimize=F.ndim > 2)
    t1 = -np.einsum("...pq,...it,...sj,...stq,...ijp->...", ei, ei, ei, eta_q, eta_p, **opt)
    t2 = (np.einsum("...pq,...ij,...itp,...tjq->...", ei, ei, Fd, Fb, **opt)
          + np.einsum("...pq,...ij,...itq,...tjp->...", ei, ei, Fb, Fd, **opt))
    t3 = np.einsum("...pq,...ij,...tj,...pqit->...", ei, ei, F, P, **opt)
    t4 = np.einsum("...pq,...ij,...it,...pqtj->...", ei, ei, F, P, **opt)
    if Rt is not None and np.any(Rt):
        c1, c2 = _curv_terms(ei, F, Rt)
        t3 = t3 + c1
        t4 = t4 + c2
    return [np.real(t) for t in (t1, t2, t3, t4)]


def penultimate_terms(F, Fd, Fb, shift, Rt=None) -> list:
    """The six-line at-solution form: second derivatives of F eliminated."""
    ei = np.swapaxes(_ieta(F, shift), -1, -2)
    eta_p = _eta_first(F, Fd)
    eta_q = _eta_first(F, Fb)
    opt = dict(optimize=F.ndim > 2)
    l1 = -np.einsum("...pq,...it,...sj,...stq,...ijp->...", ei, ei, ei, eta_q, eta_p, **opt)
    l2 = (np.einsum("...pq,...ij,...itp,...tjq->...", ei, ei, Fd, Fb, **opt)
          + np.einsum("...pq,...ij,...itq,...tjp->...", ei, ei, Fb, Fd, **opt))
    l3 = np.einsum("...ij,...tj,...pd,...cq,...pqt,...cdi->...", ei, F, ei, ei, Fb, eta_p, **opt)
    l5 = np.einsum("...ij,...it,...pd,...cq,...pqj,...cdt->...", ei, F, ei, ei, Fb, eta_p, **opt)
    l4 = l6 = 0.0
    if Rt is not None and np.any(Rt):
        l4, l6 = _curv_terms(ei, F, Rt)
    return [np.real(t) for t in (l1, l2, l3, l4, l5, l6)]


def final_dhym(lam, T, R) -> float:
    lam = np.asarray(lam, dtype=float)
    th = 1.0 / (1.0 + lam * lam)
    n = len(lam)
    v = 2.0 * np.einsum("i,j,p,ij,jpi->", th, th, th, 1.0 + np.outer(lam, lam), np.abs(T) ** 2)
    for i in range(n):
        for p in range(i + 1, n):
            v += 2.0 * th[i] * th[p] * R[i, p] * (lam[i] - lam[p]) ** 2
    return float(v)


def final_j(lam, T, R) -> float:
    lam = np.asarray(lam, dtype=float)
    inv = 1.0 / lam
    n = len(lam)
    v = 2.0 * np.einsum("i,j,p,jpi->", inv, inv, inv ** 2, np.abs(T) ** 2)
    for i in range(n):
        for p in range(i + 1, n):
            v += 2.0 * R[i, p] * (lam[i] - lam[p]) ** 2 * (inv[i] * inv[p]) ** 2
    return float(v)


def relative_gap(a, b, scale) -> float:
    denom = max(abs(a), abs(b), scale, 1e-300)
    return abs(a - b) / denom


def lap_expansion_general(jet: PointwiseJet, shift: float = 1.0):
    """(lhs, rhs, scale): direct Laplacian versus the expanded form."""
    jet.check_symmetries()
    F, Fd, Fb, Q, P, Rt = jet.matrices()
    lhs = float(lhs_direct(F, Fd, Fb, Q, shift))
    terms = rhs_terms(F, Fd, Fb, P, shift, Rt)
    return lhs, float(sum(terms)), float(sum(abs(t) for t in terms))


def _at_solution(jet: PointwiseJet, kind: str):
    jet.check_symmetries()
    w = solution_weights(jet.lam, kind)
    resid = np.max(np.abs(first_order_constraint(jet.T, w)), initial=0.0)
    if resid > CONSTRAINT_TOL * max(1.0, float(np.max(np.abs(jet.T), initial=0))):
        raise ConstraintError(f"first-order constraint not projected (residual {resid:.3e})")
    F, Fd, Fb, _, _, Rt = jet.matrices()
    terms = penultimate_terms(F, Fd, Fb, _shift(kind), Rt)
    return float(sum(terms)), float(sum(abs(t) for t in terms))


def lap_at_solution(jet: PointwiseJet):
    """(penultimate, final) for the dHYM at-solution identity."""
    pen, _ = _at_solution(jet, "dhym")
    return pen, final_dhym(jet.lam, jet.T, jet.R)


def j_lap_at_solution(jet: PointwiseJet):
    """(penultimate, final) for the J-equation analog; needs lam > 0."""
    if np.any(jet.lam <= 0):
        raise ValueError("J-equation jets need strictly positive eigenvalues")
    pen, _ = _at_solution(jet, "j")
    return pen, final_j(jet.lam, jet.T, jet.R)


# ---------------------------------------------------------------------------
# randomized suites

@dataclass
class TrialReport:
    suite: str
    seed: int
    n: int
    trials: int
    max_rel_err: float = 0.0
    min_final_value: float = np.inf
    regime_flags: int = 0
    failures: list = field(default_factory=list)

    def as_dict(self):
        return {
            "suite": self.suite, "seed": self.seed, "n": self.n, "trials": self.trials,
            "max_rel_err": self.max_rel_err,
            "min_final_value": None if np.isinf(self.min_final_value) else self.min_final_value,
            "regime_flags": self.regime_flags,
        }


SUITES = ("general", "dhym", "j")


def identity_suite(suite: str, n: int, trials: int, seed: int, lam_range=None) -> TrialReport:
    """Run randomized identity trials; per-trial generators spawn from one root seed."""
    if suite not in SUITES:
        raise ValueError(f"suite must be one of {SUITES}")
    if lam_range is None:
        lam_range = (0.5, 4.0) if suite == "j" else (-0.5, 2.0)
    rep = TrialReport(suite, seed, n, trials)
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        rng = np.random.default_rng(child)
        kind = None if suite == "general" else suite
        jet = random_jet(n, rng, lam_range=lam_range, kind=kind)
        if suite == "general":
            lhs, rhs, scale = lap_expansion_general(jet)
            err = relative_gap(lhs, rhs, scale)
        else:
            pen, fin = lap_at_solution(jet) if suite == "dhym" else j_lap_at_solution(jet)
            err = relative_gap(pen, fin, 0.0)
            rep.min_final_value = min(rep.min_final_value, fin)
            if fin < 0:
                rep.failures.append((k, "negative final", fin))
        rep.max_rel_err = max(rep.max_rel_err, err)
    return rep


# ---------------------------------------------------------------------------
# grid versions

def _grid_jet(F: np.ndarray, spec: GridSpec):
    n = spec.n
    Fd = np.stack([dz(F, p, spec) for p in range(n)], axis=-1)
    Fb = np.stack([dzbar(F, q, spec) for q in range(n)], axis=-1)
    return Fd, Fb


@dataclass
class GridBochnerReport:
    N: int
    rel_linf: float
    lhs_min: float
    lhs_max: float
    rhs_scale: float


def grid_bochner_check(phi: ScalarGridField, F0) -> GridBochnerReport:
    """Discrete Laplacian of log det(I + F^2) versus the expanded form on the flat torus."""
    spec = phi.spec
    n = spec.n
    F = curvature_array(F0, phi.data, spec)
    eta = np.eye(n) + F @ F
    logdet = np.real(np.linalg.slogdet(eta)[1])
    ieta = np.linalg.inv(eta)
    lhs = np.real(np.einsum("...qp,...pq->...", ieta, hessian_array(logdet, spec)))
    Fd, Fb = _grid_jet(F, spec)
    # P[p, q, i, t] = d_i d_tbar F_{p qbar}; derivatives commute on the flat grid
    P = np.empty(spec.shape + (n,) * 4, dtype=complex)
    for t in range(n):
        for i in range(n):
            P[..., i, t] = dz(Fb[..., t], i, spec)
    rhs = sum(rhs_terms(F, Fd, Fb, P, 1.0))
    scale = float(np.max(np.abs(rhs)))
    if scale == 0.0:
        rel = float(np.max(np.abs(lhs - rhs)))
    else:
        rel = float(np.max(np.abs(lhs - rhs))) / scale
    return GridBochnerReport(spec.N, rel, float(lhs.min()), float(lhs.max()), scale)


@dataclass
class MonitorReport:
    status: str
    min_value: float | None
    constraint_residual: float


def subharmonicity_monitor(F: np.ndarray, spec: GridSpec, kind: str = "dhym") -> MonitorReport:
    """Min over the grid of the at-solution form, with the first-order constraint measured."""
    n = spec.n
    lam = eigvalsh_batch(F)
    if kind == "dhym":
        prods = [lam[..., i] * lam[..., j] for i in range(n) for j in range(i + 1, n)]
        bad = any(np.any(p <= -1.0) for p in prods)
    else:
        bad = bool(np.any(lam <= 0))
    Fd, Fb = _grid_jet(F, spec)
    ieta = _ieta(F, _shift(kind))
    cres = float(np.max(np.abs(np.einsum("...ab,...baj->...j", ieta, Fd))))
    if bad:
        return MonitorReport("REGIME_EXIT", None, cres)
    pen = sum(penultimate_terms(F, Fd, Fb, _shift(kind)))
    return MonitorReport("OK", float(np.min(pen)), cres)
