"""Radial self-shrinkers of the dHYM and J flows on C^n.

For u(z) = psi(s) with s = |z|^2 the complex Hessian has eigenvalues psi'
(multiplicity n - 1) and psi' + s psi''.  The pairing term of the shrinker
equation reduces to s psi' - psi.

Integration is carried out for the deviation e = psi - p0 - q0 s from the
quadratic through the starting data.  Written this way the right-hand side
vanishes identically on e = 0, so exact quadratics are reproduced to the bit
instead of being swamped by roundoff growing like exp((1 + q0^2) s).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

EQUATIONS = ("dhym", "j")
BLOWUP = 1e8
QUADRATIC_TOL = 1e-10
SATURATION_EPS = 1e-12


class InconsistentStartError(ValueError):
    pass


class PSHViolation(ValueError):
    pass


# ---------------------------------------------------------------------------
# pointwise pieces

def radial_eigs(psi1: float, psi2: float, s: float, n: int) -> np.ndarray:
    if s < 0:
        raise ValueError("s must be nonnegative")
    return np.array([psi1] * (n - 1) + [psi1 + s * psi2], dtype=float)


def radial_hessian(psi1: float, psi2: float, z) -> np.ndarray:
    """Complex Hessian of psi(|z|^2): psi' delta_ij + psi'' zbar_i z_j."""
    z = np.asarray(z, dtype=complex)
    return psi1 * np.eye(len(z)) + psi2 * np.outer(np.conj(z), z)


def dhym_shrinker_residual(s, psi, psi1, psi2, theta0, n) -> float:
    lam = radial_eigs(psi1, psi2, s, n)
    return float(np.sum(np.arctan(lam)) - theta0 - (s * psi1 - psi))


def j_shrinker_residual(s, psi, psi1, psi2, c, n) -> float:
    lam = radial_eigs(psi1, psi2, s, n)
    if np.any(lam <= 0):
        raise PSHViolation(f"eigenvalues {lam} not positive at s={s}")
    return float(c - np.sum(1.0 / lam) - (s * psi1 - psi))


def consistent_p0(equation: str, params: dict, q0: float, n: int) -> float:
    """psi(0) forced by the equation at s = 0 given psi'(0) = q0."""
    if equation == "dhym":
        return params["theta0"] - n * math.atan(q0)
    if equation == "j":
        if q0 <= 0:
            raise PSHViolation("J shrinkers need q0 > 0")
        return n / q0 - params["c"]
    raise ValueError(f"equation must be one of {EQUATIONS}")


# ---------------------------------------------------------------------------
# profiles

@dataclass
class RadialProfile:
    n: int
    equation: str
    params: dict
    q0: float
    p0: float
    s: np.ndarray
    psi: np.ndarray
    psi1: np.ndarray
    psi2: np.ndarray
    dense: object = None  # callable s -> (e, e') when available

    def __post_init__(self):
        self._rhs = _deviation_rhs(self.equation, self.params, self.n, self.q0)

    @property
    def r(self) -> np.ndarray:
        return np.sqrt(self.s)

    def eigenvalues(self) -> np.ndarray:
        lam = np.repeat(self.psi1[:, None], self.n, axis=1)
        lam[:, -1] = self.psi1 + self.s * self.psi2
        return lam

    def evaluate(self, s: float):
        """(psi, psi', psi'') at s inside the sampled range."""
        if not self.s[0] <= s <= self.s[-1]:
            raise ValueError(f"s={s} outside profile range [{self.s[0]}, {self.s[-1]}]")
        if self.dense is not None:
            e, e1 = self.dense(s)
            e2 = self._rhs(s, np.array([e, e1]))[1]
            return self.p0 + self.q0 * s + e, self.q0 + e1, e2
        spl0 = CubicHermiteSpline(self.s, self.psi, self.psi1)
        spl1 = CubicHermiteSpline(self.s, self.psi1, self.psi2)
        return float(spl0(s)), float(spl1(s)), float(spl1(s, 1))


def _deviation_rhs(equation, params, n, q0):
    """Right-hand side of (e, e')' for the deviation from p0 + q0 s."""
    if equation == "dhym":
        aq = math.atan(q0)
        k = 1.0 + q0 * q0

        def excess(s, e, e1):
            delta = (n - 1) * (aq - math.atan(q0 + e1)) + s * e1 - e
            td = math.tan(delta)
            return td * k / (1.0 - q0 * td)
    else:

        def excess(s, e, e1):
            a = q0 + e1
            delta = (n - 1) * e1 / (q0 * a) - s * e1 + e
            return -q0 * q0 * delta / (1.0 + q0 * delta)

    def rhs(s, y):
        e, e1 = y
        if s == 0.0:
            return np.array([e1, 0.0])
        return np.array([e1, (excess(s, e, e1) - e1) / s])

    return rhs


def _guards(equation, params, n, q0):
    """solve_ivp event functions; each is terminal."""
    aq = math.atan(q0)

    def blowup(s, y):
        e, e1 = y
        a = q0 + e1
        b = a + s * _second(s, y)
        return BLOWUP - max(abs(a), abs(b))

    def _second(s, y):
        return rhs(s, y)[1]

    rhs = _deviation_rhs(equation, params, n, q0)
    events = [blowup]
    if equation == "dhym":

        def saturation(s, y):
            e, e1 = y
            delta = (n - 1) * (aq - math.atan(q0 + e1)) + s * e1 - e
            # arctan of the radial eigenvalue must stay inside (-pi/2, pi/2)
            return math.pi / 2 - SATURATION_EPS - abs(aq + delta)

        events.append(saturation)
    else:

        def psh(s, y):
            e, e1 = y
            a = q0 + e1
            delta = (n - 1) * e1 / (q0 * a) - s * e1 + e if a > 0 else -np.inf
            return min(a, 1.0 / q0 + delta)

        events.append(psh)
    for ev in events:
        ev.terminal = True
    return events


@dataclass
class ShootResult:
    profile: RadialProfile
    classification: str
    s_reached: float
    max_abs_psi2: float
    message: str = ""
    growth_condition_held: bool | None = None
    growth_onset_radius: float | None = None

    def row(self):
        return [repr(float(self.profile.q0)), repr(float(self.profile.p0)), self.classification,
                repr(float(self.s_reached)), repr(float(self.max_abs_psi2)),
                "" if self.growth_condition_held is None else str(self.growth_condition_held)]


def integrate_profile(n, equation, params, q0, p0, s0=0.0, e0=0.0, e1=0.0, S_max=200.0,
                      rtol=1e-12, atol=1e-14, max_samples=4000) -> ShootResult:
    """Integrate the shrinker ODE for the deviation from p0 + q0 s starting at s0.

    From s0 = 0 only e0 = e1 = 0 is regular; s0 > 0 lets callers build
    non-quadratic local solutions.
    """
    if equation not in EQUATIONS:
        raise ValueError(f"equation must be one of {EQUATIONS}")
    rhs = _deviation_rhs(equation, params, n, q0)
    events = _guards(equation, params, n, q0)
    y0 = np.array([e0, e1], dtype=float)
    for ev in events:
        if ev(s0, y0) <= 0:
            raise PSHViolation("starting data already outside the admissible region")
    sol = solve_ivp(rhs, (s0, S_max), y0, method="RK45", rtol=rtol, atol=atol, events=events,
                    dense_output=True, max_step=(S_max - s0) / 400.0)
    s = sol.t
    e, de = sol.y
    d2 = np.array([rhs(si, yi)[1] for si, yi in zip(s, sol.y.T)])
    if len(s) > max_samples:
        keep = np.unique(np.linspace(0, len(s) - 1, max_samples).astype(int))
        s, e, de, d2 = s[keep], e[keep], de[keep], d2[keep]
    dense = sol.sol

    def dense_eval(x):
        v = dense(x)
        return float(v[0]), float(v[1])

    prof = RadialProfile(n, equation, dict(params), float(q0), float(p0), s,
                         p0 + q0 * s + e, q0 + de, d2, dense_eval)
    max2 = float(np.max(np.abs(d2))) if len(d2) else 0.0
    fired = [i for i, t in enumerate(sol.t_events) if len(t)]
    msg = sol.message
    if sol.status == -1:
        cls = "INTEGRATION_FAILURE"
    elif fired:
        which = fired[0]
        if which == 0:
            cls = "HESSIAN_BLOWUP"
        elif equation == "dhym":
            cls = "HESSIAN_BLOWUP"
            msg = "arctan argument saturated"
        else:
            cls = "PSH_EXIT"
    elif max2 <= QUADRATIC_TOL:
        cls = "QUADRATIC"
    else:
        cls = "INDETERMINATE"
    res = ShootResult(prof, cls, float(s[-1]), max2, msg)
    if equation == "j":
        held, onset = growth_condition(prof, params.get("delta", 0.5))
        res.growth_condition_held, res.growth_onset_radius = held, onset
    return res


def shoot(n, equation, params, q0, S_max=200.0, tol=QUADRATIC_TOL, p0=None) -> ShootResult:
    """Regular start at s = 0 with psi'(0) = q0 and the consistent psi(0)."""
    expected = consistent_p0(equation, params, q0, n)
    if p0 is not None and abs(p0 - expected) > 1e-12 * max(1.0, abs(expected)):
        raise InconsistentStartError(f"p0={p0} inconsistent with q0={q0}: need {expected}")
    res = integrate_profile(n, equation, params, q0, expected, S_max=S_max)
    if res.classification == "QUADRATIC" and res.max_abs_psi2 > tol:
        res.classification = "INDETERMINATE"
    return res


def growth_condition(profile: RadialProfile, delta: float = 0.5):
    """Check min eigenvalue >= sqrt(2n - 1 + delta) / r.

    Returns (held on the outer half of the radial range, onset radius beyond
    which it holds everywhere sampled, or None).
    """
    r = profile.r
    lam_min = profile.eigenvalues().min(axis=1)
    with np.errstate(divide="ignore"):
        bound = np.where(r > 0, math.sqrt(2 * profile.n - 1 + delta) / np.where(r > 0, r, 1.0), np.inf)
    ok = lam_min >= bound
    outer = r >= 0.5 * r[-1]
    held = bool(np.all(ok[outer])) if np.any(outer) else False
    bad = np.where(~ok)[0]
    if len(bad) == 0:
        onset = float(r[0])
    elif bad[-1] + 1 < len(r):
        onset = float(r[bad[-1] + 1])
    else:
        onset = None
    return held, onset


# ---------------------------------------------------------------------------
# scans

@dataclass
class ScanTable:
    n: int
    equation: str
    params: dict
    results: list = field(default_factory=list)

    def quadratic_q0(self):
        return [r.profile.q0 for r in self.results if r.classification == "QUADRATIC"]

    def regular_nonquadratic(self, S_max):
        """Entries that are non-quadratic yet regular with bounded Hessian up to S_max."""
        return [r for r in self.results
                if r.max_abs_psi2 > QUADRATIC_TOL and r.classification == "INDETERMINATE"
                and r.s_reached >= S_max]

    def classifications(self):
        return [(r.profile.q0, r.classification, r.max_abs_psi2) for r in self.results]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["q0", "p0", "classification", "s_reached", "max_abs_psi2", "growth_condition_held"])
        for r in self.results:
            w.writerow(r.row())
        return buf.getvalue()


def rigidity_scan(n, equation, params, q0_grid, S_max=200.0) -> ScanTable:
    table = ScanTable(n, equation, dict(params))
    for q0 in q0_grid:
        table.results.append(shoot(n, equation, params, float(q0), S_max=S_max))
    return table


# ---------------------------------------------------------------------------
# barriers and reconstruction

def angle_profile(profile: RadialProfile) -> np.ndarray:
    """Theta(r) for dHYM, or -J = -sum 1/lambda for the J-equation."""
    lam = profile.eigenvalues()
    if profile.equation == "dhym":
        return np.sum(np.arctan(lam), axis=1)
    return -np.sum(1.0 / lam, axis=1)


@dataclass
class BarrierReport:
    r0: float
    eps: list
    barrier_holds: dict
    min_margin: dict
    drift_nonpositive: bool
    drift_max: float
    eta_bound_holds: bool | None = None
    operator_nonpositive: bool | None = None


def barrier_compare(profile: RadialProfile, eps=(0.1, 0.01), delta: float = 0.5) -> BarrierReport:
    """Compare Theta (or -J) with w = eps r^2 + max (or eps r^(1+delta) + max) outside r0."""
    n = profile.n
    r = profile.r
    if profile.equation == "dhym":
        r0, power = math.sqrt(n), 2.0
    else:
        r0, power = 1.0, 1.0 + delta
    if r[-1] < r0:
        raise ValueError(f"profile reaches r={r[-1]:.3g}, needs r >= {r0:.3g}")
    vals = angle_profile(profile)
    ref = float(np.interp(r0, r, vals))
    outside = r >= r0
    holds, margins = {}, {}
    for e in eps:
        w = e * r[outside] ** power + ref
        gap = w - vals[outside]
        holds[e] = bool(np.all(gap >= -1e-12))
        margins[e] = float(np.min(gap))
    drift_r = r[r >= math.sqrt(n)]
    # (n/(2r) - r/2) w_r with w_r = 2 eps r for the quadratic barrier
    drift = (n / (2.0 * drift_r) - drift_r / 2.0) * (2.0 * drift_r)
    rep = BarrierReport(r0, list(eps), holds, margins, bool(np.all(drift <= 1e-12)),
                        float(np.max(drift)) if len(drift) else 0.0)
    if profile.equation == "j":
        lam = profile.eigenvalues()
        s = profile.s
        eta = 1.0 / lam ** 2
        ok = np.all(eta <= (s / (2 * n - 1 + delta))[:, None], axis=1)
        rep.eta_bound_holds = bool(np.all(ok[outside]))
        # eta^{i jbar} w_{i jbar} - s w' for w = s^((1+delta)/2), where the bound holds
        with np.errstate(divide="ignore", invalid="ignore"):
            w1 = 0.5 * (1 + delta) * s ** (0.5 * (delta - 1))
            w2 = 0.5 * (1 + delta) * 0.5 * (delta - 1) * s ** (0.5 * (delta - 3))
            Lw = (n - 1) * w1 * eta[:, 0] + (w1 + s * w2) * eta[:, -1] - s * w1
        mask = outside & ok
        rep.operator_nonpositive = bool(np.all(Lw[mask] <= 1e-12)) if np.any(mask) else None
    return rep


def drift_residual(profile: RadialProfile):
    """Radial form of eta^{i jbar} Theta_{i jbar} - s Theta' along the profile.

    Theta is recomputed from the eigenvalues and differentiated by central
    differences through the profile's dense solution.  Returns (s, residual).
    """
    if profile.equation != "dhym":
        raise ValueError("drift residual implemented for the dHYM shrinker")
    n = profile.n
    s = profile.s[(profile.s > profile.s[0]) & (profile.s < profile.s[-1])]
    h = 1e-4 * np.maximum(1.0, s)
    s = s[(s - h > profile.s[0]) & (s + h < profile.s[-1])]
    h = 1e-4 * np.maximum(1.0, s)

    def theta(x):
        _, p1, p2 = profile.evaluate(float(x))
        return float(np.sum(np.arctan(radial_eigs(p1, p2, float(x), n))))

    out = []
    for si, hi in zip(s, h):
        tm, t0, tp = theta(si - hi), theta(si), theta(si + hi)
        d1 = (tp - tm) / (2 * hi)
        d2 = (tp - 2 * t0 + tm) / hi ** 2
        _, p1, p2 = profile.evaluate(float(si))
        b = p1 + si * p2
        lap = (n - 1) * d1 / (1 + p1 * p1) + (d1 + si * d2) / (1 + b * b)
        out.append(lap - si * d1)
    return s, np.array(out)


def selfsimilar_residual(profile: RadialProfile, z, t: float) -> float:
    """dv/dt minus the flow speed for v(z, t) = -t u(z / sqrt(-t))."""
    if t >= 0:
        raise ValueError("self-similar time must be negative")
    z = np.asarray(z, dtype=complex)
    s = float(np.sum(np.abs(z) ** 2) / (-t))
    psi, p1, p2 = profile.evaluate(s)
    dvdt = s * p1 - psi
    lam = radial_eigs(p1, p2, s, profile.n)
    if profile.equation == "dhym":
        speed = float(np.sum(np.arctan(lam))) - profile.params["theta0"]
    else:
        if np.any(lam <= 0):
            raise PSHViolation("profile left the plurisubharmonic region")
        speed = profile.params["c"] - float(np.sum(1.0 / lam))
    return dvdt - speed
