"""Experiment harness: ``mpexp <command> [options]``.

Every command writes CSV (to ``--out`` or stdout) preceded by ``#`` comment
lines holding the package version and the effective configuration. The exit
status is 1 when any requested row could not be computed.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .integrators import IntegratorConfig, abs_l2_error, effective_matvecs, integrate, ode_system, rel_linf_error
from .phikrylov import FULL, KrylovConvergenceError, KrylovError, KrylovOverflowError, PrecisionSchedule, phi_combination
from .precision import DOUBLE, SINGLE, get_format
from .problems import AdrProblem, adr_initial, reference_solution
from .sparsemat import MODES, CsrMatrix, poisson2d, poisson_rhs, read_matrix_market
from .suitesparse import FetchError, UnknownMatrixError, ensure_cached

EPS_DOUBLE = float(np.finfo(np.float64).eps)
LOW_FORMATS = ("single", "tf32", "half", "bfloat16")
FORMAT_COLUMNS = ("double", "single", "tf32", "half", "bfloat16")

# per-matrix defaults for the Krylov experiments
MATRIX_DEFAULTS = {
    "orani678": {"t": 10.0, "tol": math.sqrt(EPS_DOUBLE)},
    "bcspwr10": {"t": 10.0, "tol": 1e-5},
    "poisson": {"t": 1.0, "tol": 1e-12},
}


@dataclass
class ExperimentSpec:
    command: str = ""
    matrix: str = "poisson"
    t: float | None = None
    tol: float | None = None
    formats: tuple = LOW_FORMATS
    mchop1: float | None = None
    mchop2: float | None = None
    mode: str = "out"
    controller: str = "kiops"
    m_max: int = 128
    sweep_step: int = 5
    poisson_k: int = 99
    poisson_scale: float = 2500.0
    poisson_sign: int = -1
    steps: tuple = (10, 18, 32, 56, 100, 178, 316, 562, 1000, 1778, 3162, 5623, 10000)
    gamma: str = "optimal"
    bc: str = "neumann"
    nx: int = 21
    tf: float = 0.3
    krylov_tol: float = 1e-12
    error: str = "l2"
    a: float = 2.0
    b: float = 4.0
    out: str = "-"
    cache_dir: str | None = None

    def __post_init__(self):
        self.formats = tuple(get_format(f).name for f in self.formats)
        self.steps = tuple(int(s) for s in self.steps)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.error not in ("l2", "linf"):
            raise ValueError("error must be 'l2' or 'linf'")
        if not self.formats:
            raise ValueError("format list is empty")
        if not self.steps or min(self.steps) < 1:
            raise ValueError("steps must be a nonempty list of positive integers")
        if self.sweep_step < 1:
            raise ValueError("sweep step must be >= 1")

    def resolved_t(self) -> float:
        return self.t if self.t is not None else MATRIX_DEFAULTS.get(self.matrix, {}).get("t", 1.0)

    def resolved_tol(self) -> float:
        return self.tol if self.tol is not None else MATRIX_DEFAULTS.get(self.matrix, {}).get("tol", 1e-7)

    def items(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            yield f.name, v


# ---------------------------------------------------------------- loading


def load_matrix(spec: ExperimentSpec) -> CsrMatrix:
    name = spec.matrix
    if name == "poisson":
        return poisson2d(spec.poisson_k, spec.poisson_scale, spec.poisson_sign)
    if name.endswith(".mtx") and Path(name).is_file():
        with open(name, "rb") as fh:
            return read_matrix_market(fh)
    with open(ensure_cached(name, spec.cache_dir), "rb") as fh:
        return read_matrix_market(fh)


def initial_vector(spec: ExperimentSpec, N: int) -> np.ndarray:
    if spec.matrix == "poisson":
        return poisson_rhs(spec.poisson_k)
    if spec.matrix.split("/")[-1] == "bcspwr10":
        b = np.zeros(N)
        b[0] = b[-1] = 1.0
        return b
    return np.ones(N)


def experiment_vectors(spec: ExperimentSpec, N: int, p: int):
    if p == 0:
        return [initial_vector(spec, N)]
    return [np.ones(N) for _ in range(p + 1)]


# ---------------------------------------------------------------- helpers


def _inf_or_int(x):
    return x if x is None or math.isinf(x) else int(x)


def _schedules(spec: ExperimentSpec):
    """(label, format, schedule) rows: double, each format naive, optionally scheduled."""
    yield "double", "double", FULL
    for f in spec.formats:
        if f != "double":
            yield "naive", f, PrecisionSchedule.naive(f, spec.mode)
    if spec.mchop1 is not None or spec.mchop2 is not None:
        m1 = spec.mchop1 if spec.mchop1 is not None else 0
        m2 = spec.mchop2 if spec.mchop2 is not None else math.inf
        for f in spec.formats:
            if f != "double":
                yield "mixed", f, PrecisionSchedule.mixed(m1, m2, f, SINGLE, spec.mode)


def _counter_cols(counters):
    return {f"mv_{name}": counters[name] for name in FORMAT_COLUMNS}


def _fractions(counters):
    total = counters.total
    if total == 0:
        return 0.0, 0.0
    below_double = total - counters["double"]
    below_single = counters["half"] + counters["bfloat16"] + counters["tf32"]
    return below_double / total, below_single / total


class RowFailed(Exception):
    pass


def _solve(A, bs, spec, schedule):
    """Run one phi-combination; overflow is a result, not a failure."""
    try:
        res = phi_combination(spec.resolved_t(), A, bs, spec.resolved_tol(), schedule=schedule,
                              m_max=spec.m_max, controller=spec.controller)
    except KrylovOverflowError as exc:
        return None, "overflow", exc
    except KrylovConvergenceError as exc:
        raise RowFailed(str(exc)) from exc
    return res, "ok", None


def _reference(A, bs, spec):
    res = phi_combination(spec.resolved_t(), A, bs, EPS_DOUBLE, m_max=spec.m_max, controller=spec.controller)
    return res.w


# ---------------------------------------------------------------- commands

KRYLOV_COLUMNS = ["matrix", "schedule", "format", "mchop1", "mchop2", "t", "tol", "err", "final_m",
                  "substeps", "rejections", *[f"mv_{f}" for f in FORMAT_COLUMNS], "status"]


def _krylov_experiment(spec: ExperimentSpec, p: int):
    rows, failed = [], False
    try:
        A = load_matrix(spec)
    except (FetchError, UnknownMatrixError, ValueError, OSError) as exc:
        return [{"matrix": spec.matrix, "status": f"error: {exc}"}], True
    bs = experiment_vectors(spec, A.n_rows, p)
    try:
        ref = _reference(A, bs, spec)
    except KrylovError as exc:
        return [{"matrix": spec.matrix, "status": f"error: reference failed: {exc}"}], True
    for label, fmt, sched in _schedules(spec):
        row = {"matrix": spec.matrix, "schedule": label, "format": fmt,
               "mchop1": _inf_or_int(sched.m_chop1), "mchop2": _inf_or_int(sched.m_chop2),
               "t": spec.resolved_t(), "tol": spec.resolved_tol()}
        try:
            res, status, _ = _solve(A, bs, spec, sched)
        except RowFailed as exc:
            failed = True
            rows.append({**row, "err": math.nan, "status": f"error: {exc}"})
            continue
        if res is None:
            rows.append({**row, "err": math.inf, "status": status})
            continue
        row.update(err=rel_linf_error(res.w, ref), final_m=res.final_m, substeps=res.substeps,
                   rejections=res.rejections, status=status, **_counter_cols(res.counters))
        rows.append(row)
    return rows, failed


def cmd_exp1(spec: ExperimentSpec):
    """exp(tA) b_0 under each precision schedule."""
    return KRYLOV_COLUMNS, *_krylov_experiment(spec, 0)


def cmd_exp2(spec: ExperimentSpec):
    """sum_{k<=4} t^k phi_k(tA) b_k with all-ones b_k."""
    return KRYLOV_COLUMNS, *_krylov_experiment(spec, 4)


SWEEP_COLUMNS = ["matrix", "fmt2", "phase", "mchop1", "mchop2", "err", "target", "met",
                 "frac_below_double", "frac_below_single", "final_m", "total_matvecs", "status"]


def sweep_chop(A, bs, spec: ExperimentSpec, fmt2: str, ref=None, err_double=None):
    """Two-phase threshold search; returns (trial rows, chosen row or None).

    Phase one grows ``m_chop1`` (double to single) with no third format until
    the target ``max(err_double, tol)`` is met; phase two fixes it and grows
    ``m_chop2`` (single to ``fmt2``).
    """
    tol = spec.resolved_tol()
    if ref is None:
        ref = _reference(A, bs, spec)
    if err_double is None:
        res, _, _ = _solve(A, bs, spec, FULL)
        err_double = rel_linf_error(res.w, ref)
    target = max(err_double, tol)
    grid = list(range(0, spec.m_max + 1, spec.sweep_step))
    if not grid:
        raise ValueError("empty sweep range")
    trials = []

    def trial(phase, m1, m2):
        sched = PrecisionSchedule.mixed(m1, m2, fmt2, SINGLE, spec.mode)
        row = {"matrix": spec.matrix, "fmt2": fmt2, "phase": phase, "mchop1": _inf_or_int(m1),
               "mchop2": _inf_or_int(m2), "target": target}
        try:
            res, status, _ = _solve(A, bs, spec, sched)
        except RowFailed as exc:
            row.update(err=math.nan, met=False, status=f"error: {exc}")
            trials.append(row)
            return row
        if res is None:
            row.update(err=math.inf, met=False, status=status)
        else:
            fd, fs = _fractions(res.counters)
            err = rel_linf_error(res.w, ref)
            row.update(err=err, met=bool(err <= target), frac_below_double=fd, frac_below_single=fs,
                       final_m=res.final_m, total_matvecs=res.counters.total, status=status)
        trials.append(row)
        return row

    trial("double", math.inf, math.inf)
    m1 = next((m for m in grid if trial("mchop1", m, math.inf)["met"]), None)
    if m1 is None:
        return trials, None
    for m2 in grid:
        if m2 < m1:
            continue
        row = trial("mchop2", m1, m2)
        if row["met"]:
            return trials, {**row, "phase": "chosen"}
    return trials, None


def cmd_sweep_chop(spec: ExperimentSpec):
    try:
        A = load_matrix(spec)
    except (FetchError, UnknownMatrixError, ValueError, OSError) as exc:
        return SWEEP_COLUMNS, [{"matrix": spec.matrix, "status": f"error: {exc}"}], True
    bs = experiment_vectors(spec, A.n_rows, 0)
    try:
        ref = _reference(A, bs, spec)
        res, status, exc = _solve(A, bs, spec, FULL)
    except (KrylovError, RowFailed) as exc:
        return SWEEP_COLUMNS, [{"matrix": spec.matrix, "status": f"error: {exc}"}], True
    if res is None:
        return SWEEP_COLUMNS, [{"matrix": spec.matrix, "status": f"error: double run: {exc}"}], True
    err_double = rel_linf_error(res.w, ref)
    rows, failed = [], False
    for fmt2 in spec.formats:
        if fmt2 in ("double", "single"):
            continue
        trials, chosen = sweep_chop(A, bs, spec, fmt2, ref, err_double)
        rows.extend(trials)
        if chosen is None:
            best = min((r["err"] for r in trials if r["phase"] != "double"), default=math.nan)
            rows.append({"matrix": spec.matrix, "fmt2": fmt2, "phase": "exhausted", "err": best,
                         "target": max(err_double, spec.resolved_tol()), "met": False,
                         "status": "error: sweep exhausted"})
            failed = True
        else:
            rows.append(chosen)
    return SWEEP_COLUMNS, rows, failed


# thresholds for the mixed integrator arm unless given explicitly
DEFAULT_MIXED = (2, 6)
ARMS = ("ere_dbl", "ere_low", "rere_low", "rere_mixed")


def convergence_arms(spec: ExperimentSpec):
    """Integrator configuration per arm, keyed by arm name (without step count)."""
    low = spec.formats[0]
    naive = PrecisionSchedule.naive(low, spec.mode)
    m1 = spec.mchop1 if spec.mchop1 is not None else DEFAULT_MIXED[0]
    m2 = spec.mchop2 if spec.mchop2 is not None else DEFAULT_MIXED[1]
    mixed = PrecisionSchedule.mixed(m1, m2, low, SINGLE, spec.mode)
    base = dict(tf=spec.tf, krylov_tol=spec.krylov_tol, m_max=spec.m_max, controller=spec.controller,
                gamma_mode=spec.gamma)
    return {
        "ere_dbl": IntegratorConfig(method="ERE", schedule=FULL, jacobian_format=DOUBLE, **base),
        "ere_low": IntegratorConfig(method="ERE", schedule=naive, jacobian_format=low, **base),
        "rere_low": IntegratorConfig(method="RERE", schedule=naive, jacobian_format=low, **base),
        "rere_mixed": IntegratorConfig(method="RERE", schedule=mixed, jacobian_format=DOUBLE, **base),
    }


def _convergence_runs(spec: ExperimentSpec):
    problem = AdrProblem(nx=spec.nx, bc=spec.bc)
    system = ode_system(problem)
    u0 = adr_initial(problem)
    ref = reference_solution(problem, (0.0, spec.tf), cache_dir=spec.cache_dir)
    measure = abs_l2_error if spec.error == "l2" else rel_linf_error
    arms = convergence_arms(spec)
    for n in spec.steps:
        out = {}
        for name, cfg in arms.items():
            try:
                u, stats = integrate(system, u0, replace(cfg, steps=n))
            except Exception as exc:  # one arm failing must not stop the study
                out[name] = (math.nan, None, exc)
                continue
            out[name] = (measure(u, ref), stats, None)
        yield n, out


def cmd_convergence(spec: ExperimentSpec):
    cols = ["steps"] + [f"{a}_error" for a in ARMS]
    rows, failed = [], False
    for n, out in _convergence_runs(spec):
        row = {"steps": n}
        for a in ARMS:
            err, _, exc = out[a]
            row[f"{a}_error"] = err
            if exc is not None:
                failed = True
                print(f"steps={n} {a}: {exc}", file=sys.stderr)
        rows.append(row)
    return cols, rows, failed


def cmd_work(spec: ExperimentSpec):
    cols = ["steps"]
    for a in ARMS:
        cols += [f"{a}_err", f"{a}_mv_effective"]
    rows, failed = [], False
    for n, out in _convergence_runs(spec):
        row = {"steps": n}
        for a in ARMS:
            err, stats, exc = out[a]
            row[f"{a}_err"] = err
            row[f"{a}_mv_effective"] = math.nan if stats is None else effective_matvecs(stats.counters, spec.a, spec.b)
            if exc is not None:
                failed = True
                print(f"steps={n} {a}: {exc}", file=sys.stderr)
        rows.append(row)
    return cols, rows, failed


def cmd_fetch(spec: ExperimentSpec):
    try:
        path = ensure_cached(spec.matrix, spec.cache_dir)
    except (FetchError, UnknownMatrixError) as exc:
        return ["matrix", "path", "status"], [{"matrix": spec.matrix, "status": f"error: {exc}"}], True
    with open(path, "rb") as fh:
        A = read_matrix_market(fh)
    return ["matrix", "path", "n_rows", "nnz", "status"], [
        {"matrix": spec.matrix, "path": str(path), "n_rows": A.n_rows, "nnz": A.nnz, "status": "ok"}], False


COMMANDS = {
    "exp1": cmd_exp1,
    "exp2": cmd_exp2,
    "sweep-chop": cmd_sweep_chop,
    "convergence": cmd_convergence,
    "work": cmd_work,
    "fetch": cmd_fetch,
}


# ---------------------------------------------------------------- argument handling


def _float_or_inf(s: str) -> float:
    return math.inf if s.strip().lower() in ("inf", "infinity") else float(s)


def _csv_list(s: str):
    return tuple(x.strip() for x in str(s).split(",") if x.strip())


# flag name -> (spec field, converter)
OPTIONS = {
    "matrix": ("matrix", str),
    "t": ("t", float),
    "tol": ("tol", float),
    "format": ("formats", _csv_list),
    "mchop1": ("mchop1", _float_or_inf),
    "mchop2": ("mchop2", _float_or_inf),
    "mode": ("mode", str),
    "controller": ("controller", str),
    "m-max": ("m_max", int),
    "sweep-step": ("sweep_step", int),
    "poisson-k": ("poisson_k", int),
    "poisson-scale": ("poisson_scale", float),
    "poisson-sign": ("poisson_sign", int),
    "steps": ("steps", _csv_list),
    "gamma": ("gamma", str),
    "bc": ("bc", str),
    "nx": ("nx", int),
    "tf": ("tf", float),
    "krylov-tol": ("krylov_tol", float),
    "error": ("error", str),
    "a": ("a", float),
    "b": ("b", float),
    "out": ("out", str),
    "cache-dir": ("cache_dir", str),
}
HELP = {
    "matrix": "poisson, a SuiteSparse name (orani678, bcspwr10, Group/name) or a path to a .mtx file",
    "t": "final time of the phi-combination (default per matrix)",
    "tol": "Krylov tolerance (default per matrix)",
    "format": "comma-separated reduced formats: single, tf32, half, bfloat16",
    "mchop1": "iteration where matvecs drop from double to single (inf = never)",
    "mchop2": "iteration where matvecs drop from single to the low format",
    "mode": "where matvec rounding happens: op (every operation), io (inputs and output), out (output only)",
    "controller": "Krylov step controller",
    "m-max": "largest Krylov dimension",
    "sweep-step": "grid spacing of the threshold sweep",
    "poisson-k": "interior points per side of the Poisson grid",
    "poisson-scale": "scale applied to the Poisson matrix",
    "poisson-sign": "sign applied to the Poisson matrix",
    "steps": "comma-separated step counts for convergence and work",
    "gamma": "how RERE chooses gamma",
    "bc": "boundary conditions of the ADR problem",
    "nx": "grid points per side of the ADR problem",
    "tf": "final time of the ADR integration",
    "krylov-tol": "Krylov tolerance inside the integrators",
    "error": "error norm for the integrator studies",
    "a": "cost ratio double/single in effective matvecs",
    "b": "cost ratio double/half in effective matvecs",
    "out": "CSV destination; - for stdout",
    "cache-dir": "cache for downloaded matrices and reference solutions",
}
CHOICES = {"mode": MODES, "gamma": ("one", "zero", "estimate", "optimal"), "bc": ("neumann", "dirichlet"),
           "controller": ("kiops", "fixed"), "error": ("l2", "linf")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpexp", description="Mixed-precision exponential integration experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "fetch":
            p.add_argument("name", nargs="?", help="matrix name, e.g. orani678")
        for flag, (dest, _) in OPTIONS.items():
            # strings are converted after merging with the config file
            p.add_argument(f"--{flag}", dest=dest, default=None, choices=CHOICES.get(flag), help=HELP[flag])
        p.add_argument("--config", help="file of key=value lines; flags take precedence")
        p.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key = key.strip().replace("_", "-")
        if key not in OPTIONS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[OPTIONS[key][0]] = value.strip()
    return values


def spec_from_args(args) -> ExperimentSpec:
    raw = read_config(args.config) if args.config else {}
    for flag, (dest, _) in OPTIONS.items():
        v = getattr(args, dest, None)
        if v is not None:
            raw[dest] = v
    if getattr(args, "name", None):
        raw["matrix"] = args.name
    converters = {dest: conv for dest, conv in OPTIONS.values()}
    values = {k: converters[k](v) for k, v in raw.items()}
    return ExperimentSpec(command=args.command, **values)


def write_csv(stream, spec: ExperimentSpec, columns, rows):
    stream.write(f"# mpexp {__version__}\n")
    for k, v in spec.items():
        stream.write(f"# {k}={v}\n")
    writer = csv.DictWriter(stream, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run(spec: ExperimentSpec):
    """Execute a command; returns ``(columns, rows, failed)``."""
    return COMMANDS[spec.command](spec)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = spec_from_args(args)
    except (ValueError, OSError) as exc:
        print(f"mpexp: {exc}", file=sys.stderr)
        return 2
    if args.dump_config:
        for k, v in spec.items():
            print(f"{k}={v}")
        return 0
    if args.verbose:
        import logging

        logging.basicConfig(level=logging.INFO)
    start = time.perf_counter()
    columns, rows, failed = run(spec)
    if spec.out == "-":
        write_csv(sys.stdout, spec, columns, rows)
    else:
        Path(spec.out).parent.mkdir(parents=True, exist_ok=True)
        with open(spec.out, "w", newline="") as fh:
            write_csv(fh, spec, columns, rows)
    if args.verbose:
        print(f"done in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
