"""Periodic fields on the flat torus C^n / (Z^n + i Z^n).

Grid arrays have shape ``(N,) * 2n`` with real axes ordered x1, y1, x2, y2, ...
and spacing h = 1/N.  Derivatives are central differences applied with
``np.roll``; second derivatives are compositions of first derivatives, so
all discrete partials commute and the complex Hessian is exactly Hermitian.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .hermitian import as_hermitian, eigvalsh_batch, lagrangian_angle

DEFAULT_BUDGET = 2 ** 20

_STENCILS = {
    2: ((1, 0.5),),
    4: ((1, 8.0 / 12.0), (2, -1.0 / 12.0)),
}


class GridBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    n: int
    N: int
    stencil_order: int = 2
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if not 1 <= self.n <= 3:
            raise ValueError(f"complex dimension must be 1..3, got {self.n}")
        if self.N < 8 or self.N % 2:
            raise ValueError(f"N must be even and >= 8, got {self.N}")
        if self.stencil_order not in _STENCILS:
            raise ValueError(f"stencil_order must be 2 or 4, got {self.stencil_order}")
        if self.size > self.budget:
            raise GridBudgetError(f"grid has {self.size} points, budget is {self.budget}")

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def shape(self) -> tuple:
        return (self.N,) * (2 * self.n)

    @property
    def size(self) -> int:
        return self.N ** (2 * self.n)

    def coords(self):
        """Meshgrid of real coordinates, in axis order x1, y1, x2, y2, ..."""
        x = np.arange(self.N) * self.h
        return np.meshgrid(*([x] * (2 * self.n)), indexing="ij")

    def wavenumbers(self):
        """Angular wavenumbers 2 pi k along one axis (FFT ordering)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.N, d=self.h)


@dataclass(frozen=True)
class ScalarGridField:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != self.spec.shape:
            raise ValueError(f"data shape {data.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("scalar field has non-finite values")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, spec: GridSpec) -> "ScalarGridField":
        return cls(spec, np.zeros(spec.shape))

    def __add__(self, other):
        other = other.data if isinstance(other, ScalarGridField) else other
        return ScalarGridField(self.spec, self.data + other)


@dataclass(frozen=True)
class HermitianGridField:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        n = self.spec.n
        data = np.asarray(self.data, dtype=complex)
        if data.shape != self.spec.shape + (n, n):
            raise ValueError(f"matrix field shape {data.shape} does not match grid")
        as_hermitian(data)
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def eigenvalues(self, g0=None) -> np.ndarray:
        """Eigenvalue field of g0^{-1} F, shape grid + (n,), ascending."""
        return relative_eigenvalue_field(self.data, g0)


@dataclass(frozen=True)
class CentralCharge:
    Z: complex
    hat_theta: float
    lift_note: str
    arg_gap: float = 0.0
    consistent: bool = True
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# difference operators

def diff(data: np.ndarray, axis: int, spec: GridSpec) -> np.ndarray:
    """Central first difference along one real axis."""
    out = np.zeros_like(data)
    for shift, w in _STENCILS[spec.stencil_order]:
        out += w * (np.roll(data, -shift, axis=axis) - np.roll(data, shift, axis=axis))
    return out / spec.h


def dz(data: np.ndarray, j: int, spec: GridSpec) -> np.ndarray:
    """d/dz_j = (d/dx_j - i d/dy_j) / 2."""
    return 0.5 * (diff(data, 2 * j, spec) - 1j * diff(data, 2 * j + 1, spec))


def dzbar(data: np.ndarray, j: int, spec: GridSpec) -> np.ndarray:
    return 0.5 * (diff(data, 2 * j, spec) + 1j * diff(data, 2 * j + 1, spec))


def second_table(data: np.ndarray, spec: GridSpec) -> dict:
    """All D_a D_b data for real axes a <= b, keyed symmetrically."""
    m = 2 * spec.n
    first = [diff(data, a, spec) for a in range(m)]
    table = {}
    for a in range(m):
        for b in range(a, m):
            table[a, b] = table[b, a] = diff(first[a], b, spec)
    return table


def hessian_array_direct(data: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Complex Hessian d^2/dz_i dzbar_j built from rolled differences."""
    n = spec.n
    dd = second_table(data, spec)
    out = np.empty(spec.shape + (n, n), dtype=complex)
    for i in range(n):
        xi, yi = 2 * i, 2 * i + 1
        for j in range(i, n):
            xj, yj = 2 * j, 2 * j + 1
            re = dd[xi, xj] + dd[yi, yj]
            im = dd[xi, yj] - dd[yi, xj]
            out[..., i, j] = 0.25 * (re + 1j * im)
            out[..., j, i] = 0.25 * (re - 1j * im)
    return out


def difference_symbol(spec: GridSpec, k: np.ndarray) -> np.ndarray:
    """d(k) such that the central difference of exp(i k x) is i d(k) exp(i k x)."""
    kh = k * spec.h
    if spec.stencil_order == 2:
        return np.sin(kh) / spec.h
    return (8.0 * np.sin(kh) - np.sin(2.0 * kh)) / (6.0 * spec.h)


@lru_cache(maxsize=16)
def _hessian_symbols(spec: GridSpec):
    m = 2 * spec.n
    full = difference_symbol(spec, spec.wavenumbers())
    half = difference_symbol(spec, 2.0 * np.pi * np.fft.rfftfreq(spec.N, d=spec.h))
    d = np.meshgrid(*([full] * (m - 1) + [half]), indexing="ij", sparse=True)
    re, im = {}, {}
    for i in range(spec.n):
        xi, yi = 2 * i, 2 * i + 1
        for j in range(i, spec.n):
            xj, yj = 2 * j, 2 * j + 1
            re[i, j] = -0.25 * (d[xi] * d[xj] + d[yi] * d[yj])
            if i != j:
                im[i, j] = -0.25 * (d[xi] * d[yj] - d[yi] * d[xj])
    return re, im


def hessian_array(data: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Complex Hessian d^2/dz_i dzbar_j of a grid array, shape grid + (n, n).

    Applies exactly the composed central-difference stencil, diagonalized by
    the FFT; agrees with ``hessian_array_direct`` to roundoff.
    """
    n = spec.n
    re, im = _hessian_symbols(spec)
    axes = tuple(range(2 * n))
    coef = np.fft.rfftn(data, axes=axes)
    out = np.zeros(spec.shape + (n, n), dtype=complex)
    for (i, j), sym in re.items():
        out[..., i, j] = np.fft.irfftn(coef * sym, s=spec.shape, axes=axes)
    for (i, j), sym in im.items():
        out[..., i, j] += 1j * np.fft.irfftn(coef * sym, s=spec.shape, axes=axes)
    for i in range(n):
        for j in range(i + 1, n):
            out[..., j, i] = np.conj(out[..., i, j])
    return out


def _data(phi):
    return phi.data if isinstance(phi, ScalarGridField) else np.asarray(phi, dtype=float)


def complex_hessian(phi: ScalarGridField) -> HermitianGridField:
    return HermitianGridField(phi.spec, hessian_array(phi.data, phi.spec))


def curvature_array(F0, phi_data: np.ndarray, spec: GridSpec) -> np.ndarray:
    F0 = as_hermitian(F0)
    if F0.shape != (spec.n, spec.n):
        raise ValueError("F0 dimension does not match grid")
    return F0 + hessian_array(phi_data, spec)


def curvature_field(F0, phi: ScalarGridField) -> HermitianGridField:
    return HermitianGridField(phi.spec, curvature_array(F0, phi.data, phi.spec))


def relative_eigenvalue_field(F: np.ndarray, g0=None) -> np.ndarray:
    """Eigenvalues of g0^{-1}F pointwise; g0 defaults to the identity."""
    if g0 is None:
        return eigvalsh_batch(F)
    g0 = as_hermitian(g0)
    if np.array_equal(g0, np.eye(g0.shape[0])):
        return eigvalsh_batch(F)
    Li = np.linalg.inv(np.linalg.cholesky(g0))
    M = np.einsum("ij,...jk,lk->...il", Li, F, Li.conj(), optimize=True)
    return eigvalsh_batch(0.5 * (M + np.conj(np.swapaxes(M, -1, -2))))


def angle_field(F: np.ndarray, g0=None) -> np.ndarray:
    return lagrangian_angle(relative_eigenvalue_field(F, g0))


def eta_array(F: np.ndarray, g0=None) -> np.ndarray:
    """Pointwise g + F g^{-1} F."""
    n = F.shape[-1]
    if g0 is None:
        eta = np.eye(n) + F @ F
    else:
        g0 = as_hermitian(g0)
        eta = g0 + F @ np.linalg.solve(g0, F)
    return 0.5 * (eta + np.conj(np.swapaxes(eta, -1, -2)))


# ---------------------------------------------------------------------------
# gauge and reductions

def average(field) -> float:
    return float(np.mean(_data(field)))


def mean_zero(phi: ScalarGridField) -> ScalarGridField:
    return ScalarGridField(phi.spec, phi.data - np.mean(phi.data))


def kernel_mask(spec: GridSpec) -> np.ndarray:
    """True on the Fourier modes annihilated by every central difference.

    These are the modes whose frequency on each axis is 0 or N/2; the mean
    is one of them.
    """
    k = np.fft.fftfreq(spec.N, d=1.0 / spec.N).astype(int)
    axis_ok = (k == 0) | (np.abs(k) == spec.N // 2)
    mask = axis_ok
    for _ in range(2 * spec.n - 1):
        mask = np.multiply.outer(mask, axis_ok)
    return mask


def gauge_fix(data: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Remove the mean and the other stencil-invisible modes."""
    coef = np.fft.fftn(data)
    coef[kernel_mask(spec)] = 0.0
    return np.real(np.fft.ifftn(coef))


# ---------------------------------------------------------------------------
# diagnostics

def first_derivative_residual(g0, F_field, eta_field=None) -> float:
    """sup over grid and j of |tr(eta^{-1} d_j F)|."""
    spec = F_field.spec
    F = F_field.data
    eta = eta_array(F, g0) if eta_field is None else np.asarray(eta_field.data)
    ieta = np.linalg.inv(eta)
    worst = 0.0
    for j in range(spec.n):
        dF = _dz_matrix(F, j, spec)
        val = np.einsum("...pq,...qp->...", ieta, dF)
        worst = max(worst, float(np.max(np.abs(val))))
    return worst


def _dz_matrix(F: np.ndarray, j: int, spec: GridSpec) -> np.ndarray:
    # grid axes come first, so the axis index is unchanged for matrix fields
    return 0.5 * (diff(F, 2 * j, spec) - 1j * diff(F, 2 * j + 1, spec))


def angle_gradient_sup(F_field, g0=None) -> float:
    """sup |d_j theta| from differentiating the angle field directly."""
    spec = F_field.spec
    theta = angle_field(F_field.data, g0)
    return max(float(np.max(np.abs(dz(theta, j, spec)))) for j in range(spec.n))


def bianchi_residual(phi: ScalarGridField) -> float:
    """max |d_k F_{i jbar} - d_i F_{k jbar}| relative to the field scale."""
    spec = phi.spec
    H = hessian_array(phi.data, spec)
    dH = [_dz_matrix(H, k, spec) for k in range(spec.n)]
    scale = max(max(float(np.max(np.abs(d))) for d in dH), 1e-300)
    worst = 0.0
    for k in range(spec.n):
        for i in range(spec.n):
            gap = dH[k][..., i, :] - dH[i][..., k, :]
            worst = max(worst, float(np.max(np.abs(gap))))
    return worst / scale if worst > 0 else 0.0


def central_charge(g0, F0, phi: ScalarGridField, tol: float = 1e-3) -> CentralCharge:
    """Grid integral of det(I + i g0^{-1}F) with the angle lifted through F0.

    Z is reported up to the positive volume constant 1/n!.
    """
    spec = phi.spec
    g0 = as_hermitian(g0)
    F = curvature_array(F0, phi.data, spec)
    K = np.linalg.solve(g0, F)
    zeta = np.linalg.det(np.eye(spec.n) + 1j * K)
    Z = complex(np.mean(zeta) * np.real(np.linalg.det(g0)))
    mu = relative_eigenvalue_field(as_hermitian(F0), g0)
    hat_theta = float(lagrangian_angle(mu))
    gap = float(abs(np.angle(np.exp(1j * (np.angle(Z) - hat_theta)))))
    return CentralCharge(
        Z=Z,
        hat_theta=hat_theta,
        lift_note="sum of arctan over eigenvalues of g0^-1 F0 (constant representative)",
        arg_gap=gap,
        consistent=gap <= tol,
    )


# ---------------------------------------------------------------------------
# snapshot IO

def _upper_pairs(n):
    return [(i, j) for i in range(n) for j in range(i, n)]


def save_snapshot(field, path, name: str = "field") -> Path:
    """Write raw little-endian float64 plus a ``.json`` sidecar header."""
    path = Path(path)
    spec = field.spec
    header = {"n": spec.n, "N": spec.N, "stencil_order": spec.stencil_order, "field_name": name}
    if isinstance(field, HermitianGridField):
        pairs = _upper_pairs(spec.n)
        comps = []
        for i, j in pairs:
            comps.append(field.data[..., i, j].real)
            comps.append(field.data[..., i, j].imag)
        raw = np.stack(comps, axis=-1)
        header["kind"] = "hermitian"
        header["layout"] = [f"{part}({i},{j})" for i, j in pairs for part in ("re", "im")]
    else:
        raw = field.data
        header["kind"] = "scalar"
    path.write_bytes(np.ascontiguousarray(raw, dtype="<f8").tobytes())
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2))
    return path


def load_snapshot(path):
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    spec = GridSpec(header["n"], header["N"], header["stencil_order"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if header["kind"] == "scalar":
        return ScalarGridField(spec, raw.reshape(spec.shape))
    n = spec.n
    pairs = _upper_pairs(n)
    raw = raw.reshape(spec.shape + (2 * len(pairs),))
    data = np.zeros(spec.shape + (n, n), dtype=complex)
    for k, (i, j) in enumerate(pairs):
        val = raw[..., 2 * k] + 1j * raw[..., 2 * k + 1]
        data[..., i, j] = val
        data[..., j, i] = np.conj(val)
    return HermitianGridField(spec, data)


def random_trig_field(spec: GridSpec, amplitude: float, rng, max_freq: int = 1,
                      max_l1: int = 2, terms: int | None = None) -> ScalarGridField:
    """Smooth random trigonometric polynomial with sup-norm ``amplitude``.

    Wave vectors have entries in [-max_freq, max_freq] and L1 norm <= max_l1,
    which keeps the complex Hessian of order amplitude * pi^2 * max_l1.
    """
    coords = spec.coords()
    m = 2 * spec.n
    data = np.zeros(spec.shape)
    terms = 2 * m if terms is None else terms
    added = 0
    while added < terms:
        k = rng.integers(-max_freq, max_freq + 1, size=m)
        if not np.any(k) or np.sum(np.abs(k)) > max_l1:
            continue
        arg = sum(2.0 * np.pi * k[a] * coords[a] for a in range(m))
        data += rng.normal() * np.cos(arg) + rng.normal() * np.sin(arg)
        added += 1
    data -= data.mean()
    peak = np.max(np.abs(data))
    if peak > 0:
        data *= amplitude / peak
    return ScalarGridField(spec, data)
