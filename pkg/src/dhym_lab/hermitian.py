"""Pointwise Hermitian linear algebra and the scalar operators built on it.

All matrix data follows one convention: a background metric ``g`` and a
curvature ``F`` are Hermitian ``n x n`` arrays, ``K = g^{-1} F`` and
``zeta = det(I + i K)``.  Form-level factors such as ``i/2`` are absorbed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HERMITIAN_RTOL = 1e-10
JACOBI_TOL = 1e-13


class NotHermitianError(ValueError):
    pass


def as_hermitian(H, rtol: float = HERMITIAN_RTOL) -> np.ndarray:
    """Return ``H`` as a complex square array after checking Hermitian symmetry.

    Works on stacks: the last two axes are the matrix axes.
    """
    H = np.asarray(H, dtype=complex)
    if H.ndim == 0:
        H = H.reshape(1, 1)
    if H.ndim < 2 or H.shape[-1] != H.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {H.shape}")
    scale = max(float(np.max(np.abs(H), initial=0.0)), 1.0)
    asym = float(np.max(np.abs(H - np.conj(np.swapaxes(H, -1, -2))), initial=0.0))
    if asym > rtol * scale:
        raise NotHermitianError(f"matrix is not Hermitian (asymmetry {asym:.3e})")
    return H


def diag_matrix(values) -> np.ndarray:
    return np.diag(np.asarray(values, dtype=float)).astype(complex)


# ---------------------------------------------------------------------------
# eigenvalues

def _eigvals2(H):
    a = H[..., 0, 0].real
    d = H[..., 1, 1].real
    b = H[..., 0, 1]
    mean = 0.5 * (a + d)
    rad = np.hypot(0.5 * (a - d), np.abs(b))
    return np.stack([mean - rad, mean + rad], axis=-1)


def _charpoly3(H):
    a, b, c = H[..., 0, 0].real, H[..., 1, 1].real, H[..., 2, 2].real
    x, y, z = H[..., 0, 1], H[..., 0, 2], H[..., 1, 2]
    ax, ay, az = np.abs(x) ** 2, np.abs(y) ** 2, np.abs(z) ** 2
    c2 = a + b + c
    c1 = a * b + a * c + b * c - ax - ay - az
    c0 = a * b * c + 2.0 * np.real(x * z * np.conj(y)) - a * az - b * ay - c * ax
    return c2, c1, c0


def _eigvals3(H):
    # The trigonometric root of the characteristic cubic loses half the digits
    # near a double root (arccos is ill-conditioned at +-1).  It is used only to
    # locate the isolated eigenvalue; that eigenvector is a cross product of two
    # rows of H - mu I, and the remaining pair comes from the 2x2 compression of
    # H onto its orthogonal complement, where _eigvals2 is accurate.
    c2, c1, c0 = _charpoly3(H)
    q = c2 / 3.0
    offdiag = np.abs(H[..., 0, 1]) ** 2 + np.abs(H[..., 0, 2]) ** 2 + np.abs(H[..., 1, 2]) ** 2
    d = np.stack([H[..., k, k].real - q for k in range(3)], axis=-1)
    p2 = np.sum(d * d, axis=-1) + 2.0 * offdiag
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0, p, 1.0)
    B = (H - q[..., None, None] * np.eye(3)) / safe[..., None, None]
    _, _, detB = _charpoly3(B)
    r = np.clip(0.5 * detB, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l_hi = q + 2.0 * p * np.cos(phi)
    l_lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l_mid = 3.0 * q - l_hi - l_lo
    trig = np.sort(np.stack([l_lo, l_mid, l_hi], axis=-1), axis=-1)
    trig = np.where((p > 0)[..., None], trig, q[..., None])

    mu = np.where(r >= 0, l_hi, l_lo)
    M = H - mu[..., None, None] * np.eye(3)
    rows = [M[..., k, :] for k in range(3)]
    cands = [np.cross(rows[0], rows[1]), np.cross(rows[0], rows[2]), np.cross(rows[1], rows[2])]
    norms = np.stack([np.linalg.norm(c, axis=-1) for c in cands], axis=-1)
    best = np.argmax(norms, axis=-1)
    v = np.choose(best[..., None], cands)
    vn = np.max(norms, axis=-1)
    scale = np.max(np.abs(M), axis=(-1, -2))
    good = (p > 0) & (vn > 1e-8 * scale * scale)
    v = v / np.where(good, vn, 1.0)[..., None]
    # unit u1 orthogonal to v, built from the coordinate axis where v is smallest
    k = np.argmin(np.abs(v), axis=-1)
    e = np.zeros(v.shape, dtype=complex)
    np.put_along_axis(e, k[..., None], 1.0, axis=-1)
    vk = np.take_along_axis(v, k[..., None], axis=-1)
    u1 = e - np.conj(vk) * v
    u1 = u1 / np.where(good, np.linalg.norm(u1, axis=-1), 1.0)[..., None]
    u2 = np.conj(np.cross(v, u1))
    U = np.stack([u1, u2], axis=-1)
    C = np.einsum("...ki,...kl,...lj->...ij", np.conj(U), H, U)
    pair = _eigvals2(C)
    iso = np.real(np.einsum("...k,...kl,...l->...", np.conj(v), H, v))
    refined = np.sort(np.concatenate([pair, iso[..., None]], axis=-1), axis=-1)
    return np.where(good[..., None], refined, trig)


def jacobi_eigh(H, tol: float = JACOBI_TOL, max_sweeps: int = 100):
    """Cyclic complex Jacobi rotations for one Hermitian matrix.

    Returns ``(values, vectors)`` in the original diagonal order (unsorted).
    """
    A = np.array(H, dtype=complex)
    n = A.shape[0]
    V = np.eye(n, dtype=complex)
    norm = max(np.linalg.norm(A), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(np.abs(A) ** 2) - np.sum(np.abs(np.diag(A)) ** 2), 0.0))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                h = A[p, q]
                mag = abs(h)
                if mag <= 1e-18 * norm:
                    continue
                phase = h / mag
                theta = (A[q, q].real - A[p, p].real) / (2.0 * mag)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                elif theta != 0:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                else:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # unitary acting on the (p, q) plane: phase removal then real rotation
                R = np.array([[c, s], [-s * np.conj(phase), c * np.conj(phase)]], dtype=complex)
                idx = [p, q]
                A[:, idx] = A[:, idx] @ R
                A[idx, :] = np.conj(R.T) @ A[idx, :]
                A[p, q] = A[q, p] = 0.0
                V[:, idx] = V[:, idx] @ R
    return np.real(np.diag(A)).copy(), V


def eigvalsh_batch(H) -> np.ndarray:
    """Ascending eigenvalues of a stack of Hermitian matrices (last two axes)."""
    H = np.asarray(H, dtype=complex)
    n = H.shape[-1]
    if n == 1:
        return H[..., 0, 0].real[..., None].copy()
    if n == 2:
        return _eigvals2(H)
    if n == 3:
        return _eigvals3(H)
    flat = H.reshape(-1, n, n)
    out = np.empty(flat.shape[:-1])
    for k, M in enumerate(flat):
        out[k] = np.sort(jacobi_eigh(M)[0])
    return out.reshape(H.shape[:-1])


@dataclass(frozen=True)
class EigenData:
    values: np.ndarray
    thetas: np.ndarray = field(init=False)
    inv_thetas: np.ndarray = field(init=False)
    # position of each sorted eigenvalue in the solver's native output
    order: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        thetas = 1.0 + vals * vals
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "inv_thetas", 1.0 / thetas)


def eig_hermitian(H) -> EigenData:
    """Eigenvalues of a single Hermitian matrix, ascending.

    Closed-form roots with eigenvector refinement for n <= 3, cyclic Jacobi otherwise.
    Ties keep their native order (stable sort) and ``order`` records it.
    """
    H = as_hermitian(H)
    if H.ndim != 2:
        raise ValueError("eig_hermitian takes a single matrix; use eigvalsh_batch for stacks")
    n = H.shape[0]
    if n <= 3:
        vals = eigvalsh_batch(H)
        return EigenData(vals, order=np.arange(n))
    raw, _ = jacobi_eigh(H)
    order = np.argsort(raw, kind="stable")
    return EigenData(raw[order], order=order)


# ---------------------------------------------------------------------------
# scalar operators

def lagrangian_angle(lams) -> np.ndarray | float:
    """Sum of arctan over the last axis."""
    return np.sum(np.arctan(np.asarray(lams, dtype=float)), axis=-1)


def _check_metric(g):
    g = as_hermitian(g)
    if np.min(eigvalsh_batch(g)) <= 0:
        raise np.linalg.LinAlgError("background metric must be positive definite")
    return g


def endomorphism(g, F) -> np.ndarray:
    """K = g^{-1} F."""
    g = _check_metric(g)
    return np.linalg.solve(g, as_hermitian(F))


def zeta_det(g, F) -> complex:
    """det(I + i g^{-1} F)."""
    K = endomorphism(g, F)
    return complex(np.linalg.det(np.eye(K.shape[-1]) + 1j * K))


def eta_form(g, F) -> np.ndarray:
    """The Hermitian form g + F g^{-1} F."""
    g = _check_metric(g)
    F = as_hermitian(F)
    eta = g + F @ np.linalg.solve(g, F)
    return 0.5 * (eta + eta.conj().T)


def relative_eigenvalues(g, F) -> np.ndarray:
    """Eigenvalues of K = g^{-1}F, computed through the congruent Hermitian matrix."""
    g = _check_metric(g)
    L = np.linalg.cholesky(g)
    Li = np.linalg.inv(L)
    M = Li @ as_hermitian(F) @ Li.conj().T
    return eigvalsh_batch(0.5 * (M + M.conj().T))


def _positive(lams, what):
    lams = np.asarray(lams, dtype=float)
    if np.any(lams <= 0):
        raise ValueError(f"{what} requires strictly positive eigenvalues, got {lams}")
    return lams


def j_trace(lams) -> float:
    return float(np.sum(1.0 / _positive(lams, "j_trace")))


def dhym_to_j_limit(lams, k: float) -> float:
    """sum_i k (pi/2 - arctan(k lam_i)); tends to sum 1/lam_i as k grows."""
    lams = _positive(lams, "dhym_to_j_limit")
    if k <= 0:
        raise ValueError("k must be positive")
    # pi/2 - arctan(x) == arctan(1/x) for x > 0, without cancellation
    return float(np.sum(k * np.arctan(1.0 / (k * lams))))


def arctan_concavity(lam: float) -> float:
    """Second derivative of arctan at lam."""
    return -2.0 * lam / (1.0 + lam * lam) ** 2


def glz_condition2_value(lam_n: float) -> float:
    if lam_n <= 0:
        raise ValueError("lam_n must be positive")
    return (1.0 - lam_n ** 2) / (lam_n * (1.0 + lam_n ** 2) ** 2)


def real_embedding_probe(a: float, c: float):
    """n = 1 real embedding: B = [[a, c], [c, a]] and max-entry norm of B/(1+a^2)."""
    B = np.array([[a, c], [c, a]], dtype=float)
    return B, float(np.max(np.abs(B))) / (1.0 + a * a)


def curvature_input(R, nonnegative: bool = True) -> np.ndarray:
    """Validate a table R[i][p] of orthogonal bisectional curvatures R_{i i p p}.

    The diagonal is ignored and returned as zero.
    """
    R = np.array(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError("curvature table must be square")
    if np.max(np.abs(R - R.T), initial=0.0) > 1e-14 * max(1.0, np.max(np.abs(R), initial=0.0)):
        raise ValueError("curvature table must be symmetric")
    np.fill_diagonal(R, 0.0)
    if nonnegative and np.any(R < 0):
        raise ValueError("orthogonal bisectional curvature must be nonnegative")
    return R
