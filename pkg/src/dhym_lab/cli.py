"""Batch entry point: ``dhym-lab <command> [flags]``.

Every run writes into a fresh subdirectory of the output root (``--out``,
else ``$DHYM_LAB_OUT``, else ``./dhym_runs``) and records a manifest listing
the configuration, seed, verdict and every artifact written.

Exit codes: 0 verdict success, 2 verdict failure, 1 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bochner import SUITES, grid_bochner_check, identity_suite
from .elliptic import NewtonConfig, PositivityError, newton_dhym, newton_j
from .flows import FlowConfig, run_flow
from .hermitian import (
    NotHermitianError,
    arctan_concavity,
    as_hermitian,
    dhym_to_j_limit,
    glz_condition2_value,
    j_trace,
    real_embedding_probe,
)
from .shrinker import EQUATIONS, InconsistentStartError, PSHViolation, rigidity_scan, shoot
from .torus import GridBudgetError, GridSpec, ScalarGridField, random_trig_field, save_snapshot

OUT_ENV = "DHYM_LAB_OUT"
DEFAULT_OUT = "dhym_runs"
BOCHNER_TOL = 1e-10


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; this contract reserves 2 for verdicts."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config parsing

def parse_floats(text) -> list:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _entry(v) -> complex:
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, str):
        return complex(v.replace(" ", "").replace("i", "j"))
    return complex(v)


def parse_matrix(value, name: str) -> np.ndarray:
    """Comma list or flat list gives a diagonal; a nested list gives a full Hermitian matrix.

    Full-matrix entries may be numbers, strings like "1+2j", or [re, im] pairs.
    """
    try:
        if isinstance(value, list) and value and all(isinstance(row, list) for row in value):
            M = np.array([[_entry(v) for v in row] for row in value], dtype=complex)
            return as_hermitian(M)
        return np.diag(parse_floats(value)).astype(complex)
    except (TypeError, ValueError, NotHermitianError) as err:
        raise UsageError(f"malformed matrix for {name}: {err}") from None


def load_config(path) -> dict:
    """Flat JSON object of key -> value; keys use flag names with dashes or underscores."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"malformed config {path}: {err}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    out = {}
    for k, v in data.items():
        if isinstance(v, dict):
            raise UsageError(f"config key {k!r} is nested; config must be flat")
        out[k.replace("-", "_")] = v
    return out


def merge_config(command: str, args: argparse.Namespace, known: dict) -> dict:
    """Defaults, then config file, then explicit flags.  Missing required keys are reported together."""
    cfg = {k: d for k, (d, _) in known.items()}
    file_cfg = load_config(getattr(args, "config", None))
    unknown = sorted(set(file_cfg) - set(known) - {"seed"})
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg["seed"] = 0
    cfg.update(file_cfg)
    for k in list(known) + ["seed"]:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    missing = [k for k, (_, req) in known.items() if req and cfg.get(k) is None]
    if missing:
        raise UsageError(f"missing required keys for {command}: {', '.join(missing)}")
    return cfg


# ---------------------------------------------------------------------------
# run directories and manifests

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (complex, np.complexfloating)):
        return [float(v.real), float(v.imag)]
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


class Run:
    """One experiment's output directory; artifacts are written once and recorded."""

    def __init__(self, root: Path, command: str, config: dict, seed: int):
        self.command = command
        self.config = config
        self.seed = seed
        self.started = _now()
        root.mkdir(parents=True, exist_ok=True)
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
        k = 0
        while True:
            d = root / f"{command}-{stamp}-{k:03d}"
            try:
                d.mkdir()
                break
            except FileExistsError:
                k += 1
        self.dir = d
        self.artifacts = []

    def _record(self, path: Path):
        self.artifacts.append(path.name)

    def write_text(self, name: str, text: str) -> Path:
        p = self.dir / name
        with open(p, "x", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self._record(p)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def write_csv(self, name: str, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
        return self.write_text(name, buf.getvalue())

    def write_snapshot(self, name: str, field) -> Path:
        p = save_snapshot(field, self.dir / name, name=name)
        self._record(p)
        self._record(Path(str(p) + ".json"))
        return p

    def finish(self, verdict: str, exit_code: int, summary: dict) -> Path:
        manifest = {
            "command": self.command,
            "config": self.config,
            "version": __version__,
            "seed": self.seed,
            "started": self.started,
            "finished": _now(),
            "verdict": verdict,
            "exit_code": exit_code,
            "summary": summary,
            "artifacts": sorted(self.artifacts),
        }
        p = self.dir / "manifest.json"
        with open(p, "x", encoding="utf-8") as fh:
            fh.write(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
        return p


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# commands

def _grid(cfg) -> GridSpec:
    return GridSpec(int(cfg["n"]), int(cfg["N"]), int(cfg["stencil"]))


def _check_dim(M, n, name):
    if M.shape != (n, n):
        raise UsageError(f"{name} is {M.shape[0]}x{M.shape[1]} but n={n}")


def _initial_phi(spec, cfg) -> ScalarGridField:
    amp = float(cfg["amp"])
    if amp == 0:
        return ScalarGridField.zeros(spec)
    return random_trig_field(spec, amp, np.random.default_rng(int(cfg["seed"])))


GRID_KEYS = {"n": (2, False), "N": (16, False), "stencil": (2, False), "amp": (0.05, False)}
FLOW_KEYS = {"t_max": (200.0, False), "tol": (1e-8, False), "dt_safety": (0.2, False),
             "max_steps": (200000, False), "record_every": (10, False), "save_phi": (False, False)}
NEWTON_KEYS = {"max_iters": (30, False), "tol": (1e-10, False), "amp": (0.0, False)}


def _flow(run: Run, cfg: dict, kind: str):
    spec = _grid(cfg)
    phi0 = _initial_phi(spec, cfg)
    common = dict(spec=spec, phi0=phi0, t_max=float(cfg["t_max"]), residual_tol=float(cfg["tol"]),
                  dt_safety=float(cfg["dt_safety"]), max_steps=int(cfg["max_steps"]),
                  record_every=int(cfg["record_every"]))
    if kind == "LBMCF":
        F0 = parse_matrix(cfg["F0"], "F0")
        _check_dim(F0, spec.n, "F0")
        target = None if cfg.get("theta") is None else float(cfg["theta"])
        fc = FlowConfig("LBMCF", F0=F0, target=target, **common)
    else:
        chi0 = parse_matrix(cfg["chi0"], "chi0")
        omega0 = parse_matrix(cfg["omega0"], "omega0")
        _check_dim(chi0, spec.n, "chi0")
        _check_dim(omega0, spec.n, "omega0")
        target = None if cfg.get("c") is None else float(cfg["c"])
        try:
            fc = FlowConfig("JFLOW", chi0=chi0, omega0=omega0, target=target, **common)
        except ValueError as err:
            raise UsageError(str(err)) from None
    rep = run_flow(fc)
    run.write_text("history.csv", rep.history_csv())
    if cfg.get("save_phi"):
        run.write_snapshot("phi_final.f64", ScalarGridField(spec, rep.phi))
    summary = rep.summary()
    summary["target"] = fc.target
    summary["wall_seconds"] = rep.wall_seconds
    run.write_json("summary.json", summary)
    ok = rep.verdict.startswith("CONVERGED")
    return rep.verdict, ok, summary


def cmd_flow_dhym(run, cfg):
    return _flow(run, cfg, "LBMCF")


def cmd_flow_j(run, cfg):
    return _flow(run, cfg, "JFLOW")


def _newton_summary(rep, phi):
    return {"verdict": rep.verdict, "iterations": rep.iterations, "residual_sup": rep.residual_sup,
            "projected_residual_sup": rep.projected_residual_sup, "message": rep.message,
            "phi_sup": float(np.max(np.abs(phi.data)))}


def _newton_run(run, cfg, solve):
    spec = _grid(cfg)
    phi_init = _initial_phi(spec, cfg)
    ncfg = NewtonConfig(max_iters=int(cfg["max_iters"]), newton_tol=float(cfg["tol"]))
    phi, rep = solve(spec, phi_init, ncfg)
    run.write_csv("newton_history.csv", ["iteration", "residual_sup", "step_sup", "linear_iters"],
                  [[_fmt(v) for v in row] for row in rep.history])
    if cfg.get("save_phi"):
        run.write_snapshot("phi_solution.f64", phi)
    summary = _newton_summary(rep, phi)
    run.write_json("summary.json", summary)
    return rep.verdict, rep.converged, summary


def cmd_solve_dhym(run, cfg):
    F0 = parse_matrix(cfg["F0"], "F0")
    _check_dim(F0, int(cfg["n"]), "F0")
    theta = None if cfg.get("theta") is None else float(cfg["theta"])
    return _newton_run(run, cfg, lambda spec, p, nc: newton_dhym(F0, theta, p, nc, spec))


def cmd_solve_j(run, cfg):
    chi0 = parse_matrix(cfg["chi0"], "chi0")
    omega0 = parse_matrix(cfg["omega0"], "omega0")
    _check_dim(chi0, int(cfg["n"]), "chi0")
    _check_dim(omega0, int(cfg["n"]), "omega0")
    c = None if cfg.get("c") is None else float(cfg["c"])
    return _newton_run(run, cfg, lambda spec, p, nc: newton_j(chi0, omega0, c, p, nc, spec))


def cmd_bochner_point(run, cfg):
    suites = [s.strip() for s in str(cfg["suites"]).split(",") if s.strip()]
    bad = [s for s in suites if s not in SUITES]
    if bad:
        raise UsageError(f"unknown suites {bad}; choose from {list(SUITES)}")
    rows, reports = [], []
    for k, suite in enumerate(suites):
        rep = identity_suite(suite, int(cfg["n"]), int(cfg["trials"]), int(cfg["seed"]) + k)
        d = rep.as_dict()
        d["negative_finals"] = len(rep.failures)
        reports.append(d)
        rows.append([suite, rep.n, rep.trials, rep.seed, _fmt(rep.max_rel_err),
                     _fmt(d["min_final_value"]), len(rep.failures)])
    run.write_csv("bochner_point.csv", ["suite", "n", "trials", "seed", "max_rel_err", "min_final_value",
                                        "negative_finals"], rows)
    max_err = max(r["max_rel_err"] for r in reports)
    ok = max_err <= BOCHNER_TOL and all(r["negative_finals"] == 0 for r in reports)
    summary = {"suites": reports, "max_rel_err": max_err, "tolerance": BOCHNER_TOL}
    run.write_json("summary.json", summary)
    return ("IDENTITY_HOLDS" if ok else "IDENTITY_FAILS"), ok, summary


def cmd_bochner_grid(run, cfg):
    Ns = [int(v) for v in parse_floats(cfg["Ns"])]
    F0 = parse_matrix(cfg["F0"], "F0")
    n = F0.shape[0]
    rows, errs = [], []
    for N in Ns:
        spec = GridSpec(n, N, int(cfg["stencil"]))
        phi = random_trig_field(spec, float(cfg["amp"]), np.random.default_rng(int(cfg["seed"])))
        rep = grid_bochner_check(phi, F0)
        errs.append(rep.rel_linf)
        rows.append([N, _fmt(rep.rel_linf), _fmt(rep.lhs_min), _fmt(rep.lhs_max), _fmt(rep.rhs_scale)])
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    run.write_csv("bochner_grid.csv", ["N", "rel_linf", "lhs_min", "lhs_max", "rhs_scale"], rows)
    lo, hi = parse_floats(cfg["ratio_window"])
    ok = bool(ratios) and all(lo <= r <= hi for r in ratios)
    summary = {"errors": errs, "ratios": ratios, "ratio_window": [lo, hi]}
    run.write_json("summary.json", summary)
    return ("REFINEMENT_OK" if ok else "REFINEMENT_OFF"), ok, summary


def _shrinker_params(cfg) -> dict:
    eq = cfg["equation"]
    if eq not in EQUATIONS:
        raise UsageError(f"equation must be one of {EQUATIONS}")
    if eq == "dhym":
        return {"theta0": float(cfg["theta0"])}
    return {"c": float(cfg["c"]), "delta": float(cfg["delta"])}


def cmd_shrinker_shoot(run, cfg):
    params = _shrinker_params(cfg)
    p0 = None if cfg.get("p0") is None else float(cfg["p0"])
    try:
        res = shoot(int(cfg["n"]), cfg["equation"], params, float(cfg["q0"]), float(cfg["S_max"]), p0=p0)
    except (InconsistentStartError, PSHViolation) as err:
        raise UsageError(str(err)) from None
    prof = res.profile
    run.write_csv("profile.csv", ["s", "psi", "psi1", "psi2"],
                  [[_fmt(a), _fmt(b), _fmt(c), _fmt(d)]
                   for a, b, c, d in zip(prof.s, prof.psi, prof.psi1, prof.psi2)])
    summary = {"classification": res.classification, "q0": prof.q0, "p0": prof.p0,
               "s_reached": res.s_reached, "max_abs_psi2": res.max_abs_psi2, "message": res.message,
               "growth_condition_held": res.growth_condition_held,
               "growth_onset_radius": res.growth_onset_radius}
    run.write_json("summary.json", summary)
    # a regular non-quadratic profile over the whole range would contradict rigidity
    counter = res.classification == "INDETERMINATE" and res.s_reached >= float(cfg["S_max"])
    return res.classification, not counter, summary


def cmd_shrinker_scan(run, cfg):
    params = _shrinker_params(cfg)
    lo, hi = parse_floats(cfg["q0_range"])
    grid = np.linspace(lo, hi, int(cfg["points"]))
    S_max = float(cfg["S_max"])
    try:
        table = rigidity_scan(int(cfg["n"]), cfg["equation"], params, grid, S_max)
    except PSHViolation as err:
        raise UsageError(str(err)) from None
    run.write_text("scan.csv", table.to_csv())
    counter = table.regular_nonquadratic(S_max)
    counts = {}
    for r in table.results:
        counts[r.classification] = counts.get(r.classification, 0) + 1
    summary = {"points": len(grid), "quadratic_q0": table.quadratic_q0(), "counts": counts,
               "regular_nonquadratic": [r.profile.q0 for r in counter]}
    run.write_json("summary.json", summary)
    ok = not counter
    return ("RIGIDITY_CONSISTENT" if ok else "RIGIDITY_VIOLATED"), ok, summary


def cmd_limit_check(run, cfg):
    lam = parse_floats(cfg["lam"])
    ks = parse_floats(cfg["ks"])
    try:
        limit = j_trace(lam)
        vals = [dhym_to_j_limit(lam, k) for k in ks]
    except ValueError as err:
        raise UsageError(str(err)) from None
    errs = [abs(v - limit) for v in vals]
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    rows = [[_fmt(k), _fmt(v), _fmt(e), _fmt(ratios[i - 1]) if i else ""]
            for i, (k, v, e) in enumerate(zip(ks, vals, errs))]
    run.write_csv("limit.csv", ["k", "value", "abs_error", "ratio_prev"], rows)
    lo, hi = parse_floats(cfg["ratio_window"])
    ok = bool(ratios) and all(lo <= r <= hi for r in ratios)
    summary = {"lam": lam, "limit": limit, "values": vals, "errors": errs, "ratios": ratios}
    run.write_json("summary.json", summary)
    return ("LIMIT_OK" if ok else "LIMIT_OFF"), ok, summary


def cmd_probes(run, cfg):
    conc = arctan_concavity(float(cfg["concavity_at"]))
    glz = glz_condition2_value(float(cfg["glz_at"]))
    a = float(cfg["a"])
    cs = [10.0 ** e for e in range(4)]
    norms = [real_embedding_probe(a, c)[1] for c in cs]
    slope = float(np.polyfit(np.log10(cs), np.log10(norms), 1)[0])
    rows = [["arctan_concavity", _fmt(float(cfg["concavity_at"])), _fmt(conc)],
            ["glz_condition2_value", _fmt(float(cfg["glz_at"])), _fmt(glz)]]
    rows += [["real_embedding_norm", _fmt(c), _fmt(v)] for c, v in zip(cs, norms)]
    run.write_csv("probes.csv", ["probe", "input", "value"], rows)
    ok = conc > 0 and glz < 0 and abs(slope - 1.0) < 0.05
    summary = {"arctan_concavity": conc, "glz_condition2_value": glz, "real_embedding_norms": norms,
               "log_log_slope": slope}
    run.write_json("summary.json", summary)
    return ("COUNTEREXAMPLES_CONFIRMED" if ok else "COUNTEREXAMPLES_NOT_SEEN"), ok, summary


SHRINK_KEYS = {"n": (2, False), "equation": ("dhym", False), "theta0": (math.pi / 2, False),
               "c": (2.0, False), "delta": (0.5, False), "S_max": (200.0, False)}

COMMANDS = {
    "flow-dhym": (cmd_flow_dhym, "line-bundle mean curvature flow on the flat torus",
                  {**GRID_KEYS, **FLOW_KEYS, "F0": (None, True), "theta": (None, False)}),
    "flow-j": (cmd_flow_j, "J-flow on the flat torus",
               {**GRID_KEYS, **FLOW_KEYS, "chi0": (None, True), "omega0": (None, True), "c": (None, False)}),
    "solve-dhym": (cmd_solve_dhym, "Newton-Krylov solve of the dHYM equation",
                   {**GRID_KEYS, **NEWTON_KEYS, "F0": (None, True), "theta": (None, False),
                    "save_phi": (False, False)}),
    "solve-j": (cmd_solve_j, "Newton-Krylov solve of the J-equation",
                {**GRID_KEYS, **NEWTON_KEYS, "chi0": (None, True), "omega0": (None, True), "c": (None, False),
                 "save_phi": (False, False)}),
    "bochner-point": (cmd_bochner_point, "randomized pointwise Bochner identity suites",
                      {"n": (2, False), "trials": (1000, False), "suites": (",".join(SUITES), False)}),
    "bochner-grid": (cmd_bochner_grid, "grid Bochner check under refinement",
                     {"Ns": ("64,128", False), "F0": ("1", False), "amp": (0.05, False),
                      "stencil": (2, False), "ratio_window": ("3,5", False)}),
    "shrinker-shoot": (cmd_shrinker_shoot, "integrate one radial shrinker profile",
                       {**SHRINK_KEYS, "q0": (None, True), "p0": (None, False)}),
    "shrinker-scan": (cmd_shrinker_scan, "scan q0 and classify radial shrinker profiles",
                      {**SHRINK_KEYS, "q0_range": ("0,2", False), "points": (41, False)}),
    "limit-check": (cmd_limit_check, "convergence of the rescaled angle operator to the J-operator",
                    {"lam": ("1,2,3", False), "ks": ("10,20,40,80", False), "ratio_window": ("3.5,4.5", False)}),
    "probes": (cmd_probes, "counterexample probes for concavity and embedding bounds",
               {"concavity_at": (-1.0, False), "glz_at": (2.0, False), "a": (1.0, False)}),
}

_TYPES = {"n": int, "N": int, "stencil": int, "trials": int, "points": int, "max_steps": int,
          "record_every": int, "max_iters": int}
_FLOATS = {"amp", "t_max", "tol", "dt_safety", "theta", "c", "theta0", "delta", "S_max", "q0", "p0",
           "concavity_at", "glz_at", "a"}


def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="dhym-lab", description="dHYM / J-equation numerical laboratory")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=ArgumentParser)
    sub.required = True
    for name, (_, helptext, keys) in COMMANDS.items():
        sp = sub.add_parser(name, help=helptext, description=helptext)
        sp.add_argument("--config", help="flat JSON config; flags override its values")
        sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--seed", type=int, help="root random seed (default 0)")
        for key in keys:
            flag = "--" + key.replace("_", "-")
            if key == "save_phi":
                sp.add_argument(flag, action="store_const", const=True, dest=key, help="write final potential")
            elif key in _TYPES:
                sp.add_argument(flag, type=_TYPES[key], dest=key)
            elif key in _FLOATS:
                sp.add_argument(flag, type=float, dest=key)
            else:
                sp.add_argument(flag, dest=key, help="comma list")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        func, _, keys = COMMANDS[args.command]
        cfg = merge_config(args.command, args, keys)
        out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
        run = Run(out, args.command, cfg, int(cfg["seed"]))
        try:
            verdict, ok, summary = func(run, cfg)
        except (UsageError, GridBudgetError, NotHermitianError, PositivityError) as err:
            run.finish("CONFIG_ERROR", 1, {"error": str(err)})
            raise UsageError(str(err)) from None
        except (ValueError, TypeError) as err:
            run.finish("CONFIG_ERROR", 1, {"error": str(err)})
            raise UsageError(f"invalid configuration: {err}") from None
        code = 0 if ok else 2
        run.finish(verdict, code, summary)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except SystemExit as err:  # --help and --version
        return int(err.code or 0)
    print(json.dumps({"verdict": verdict, "exit_code": code, "run_dir": str(run.dir)}))
    return code


if __name__ == "__main__":
    sys.exit(main())
