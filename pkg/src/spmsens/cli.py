"""Config-driven command line front end.

    spmsens <subcommand> --config FILE [--out DIR] [--seed N] [--threads N]

A config is an INI file.  ``[problem]`` names the model file, the initial
measure and the horizon; ``[experiment]`` holds the numeric knobs.  Relative
paths are resolved against the config file's directory.  Every run writes
its CSVs, ``summary.txt`` and ``manifest.csv`` (sha256 of every output) to
the output directory.

Exit codes: 0 success, 2 config error, 3 model validation failure,
4 solver failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import math
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .dsl import (ExprError, ModelTriple, NonlinearModel, SmoothFunction, ValidationGrid,
                  load_model, validate_model)
from .flow import FlowError, check_flow_regularity
from .linear import (LinearProblem, ModelValidationError, SolverError, check_linear_inequalities,
                     solve_linear_particles)
from .measures import (DiscreteMeasure, GridError, MeasureError, NormBudget, flat_distance,
                       read_measure_csv, write_measure_csv, z_distance)
from .nonlinear import LevelCache, NonlinearProblem, cross_level_distance, h_lipschitz_scan
from .sensitivity import (Backend, SolutionCache, cauchy_diagnostic,
                          delta_kt_study, derivative_estimate, fit_rate, holder_scan,
                          quotient_measures)
from .volterra import VolterraError, solve_dual

SUBCOMMANDS = ("validate", "solve-linear", "solve-nonlinear", "flat-distance", "z-distance",
               "sensitivity", "delta-kt", "holder-scan")

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Configuration

_POW2 = re.compile(r"^([+-]?)2\^([+-]?\d+)$")


def parse_number(text: str) -> float:
    """A float, or a power of two written ``2^-4`` / ``-2^-4``."""
    text = text.strip()
    m = _POW2.match(text)
    if m:
        return (-1.0 if m.group(1) == "-" else 1.0) * 2.0 ** int(m.group(2))
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


def parse_list(text: str) -> List[float]:
    """Comma-separated numbers; ``+-2^-3..-8`` expands to +-2^-3, ..., +-2^-8."""
    out: List[float] = []
    for item in (s.strip() for s in text.split(",")):
        if not item:
            continue
        m = re.fullmatch(r"(\+-|±)?2\^(-?\d+)\.\.(-?\d+)", item)
        if m:
            a, b = int(m.group(2)), int(m.group(3))
            step = 1 if b >= a else -1
            for e in range(a, b + step, step):
                out.append(2.0 ** e)
                if m.group(1):
                    out.append(-(2.0 ** e))
            continue
        out.append(parse_number(item))
    return out


def parse_range(text: str) -> List[int]:
    """``2..6`` or ``2,3,4``."""
    text = text.strip()
    m = re.fullmatch(r"(\d+)\s*\.\.\s*(\d+)", text)
    if m:
        return list(range(int(m.group(1)), int(m.group(2)) + 1))
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"not a level range: {text!r}") from None


@dataclass
class ExperimentConfig:
    path: Path
    problem: Dict[str, str]
    experiment: Dict[str, str]
    out: Path
    seed: int = 0
    threads: int = 1

    @classmethod
    def load(cls, path, out=None, seed=None, threads=None) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str          # keys are case sensitive (T, N)
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        problem = dict(cp["problem"]) if cp.has_section("problem") else {}
        experiment = dict(cp["experiment"]) if cp.has_section("experiment") else {}
        out_dir = out or experiment.get("out")
        if out_dir is None:
            out_dir = f"out/{path.stem}"
        out_path = Path(out_dir)
        if not out_path.is_absolute() and out is None:
            out_path = path.parent / out_path
        cfg = cls(path, problem, experiment, out_path,
                  int(seed if seed is not None else experiment.get("seed", 0)),
                  int(threads if threads is not None else experiment.get("threads", 1)))
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
        return cfg

    # typed accessors -------------------------------------------------------
    def _get(self, section: Dict[str, str], key: str, default):
        if key in section and section[key].strip() != "":
            return section[key].strip()
        if default is _REQUIRED:
            raise ConfigError(f"{self.path}: missing key {key!r}")
        return default

    def file(self, key: str, section: str = "problem", required: bool = True) -> Optional[Path]:
        sec = self.problem if section == "problem" else self.experiment
        v = self._get(sec, key, _REQUIRED if required else None)
        if v is None:
            return None
        p = Path(v)
        if not p.is_absolute():
            p = self.path.parent / p
        if not p.is_file():
            raise ConfigError(f"{self.path}: file for {key!r} not found: {p}")
        return p

    def num(self, key: str, default=None, section: str = "experiment") -> Optional[float]:
        sec = self.problem if section == "problem" else self.experiment
        v = self._get(sec, key, _REQUIRED if default is _REQUIRED else default)
        return parse_number(v) if isinstance(v, str) else v

    def integer(self, key: str, default=None) -> Optional[int]:
        v = self.num(key, default)
        if v is None:
            return None
        if float(v) != int(v):
            raise ConfigError(f"{key} must be an integer")
        return int(v)

    def text(self, key: str, default=None, section: str = "experiment") -> Optional[str]:
        sec = self.problem if section == "problem" else self.experiment
        return self._get(sec, key, default)

    def floats(self, key: str, default=None) -> Optional[List[float]]:
        v = self._get(self.experiment, key, default)
        return parse_list(v) if isinstance(v, str) else v

    def levels(self, key: str, default=None) -> Optional[List[int]]:
        v = self._get(self.experiment, key, default)
        return parse_range(v) if isinstance(v, str) else v


_REQUIRED = object()


def load_problem(cfg: ExperimentConfig, validate: bool = True):
    try:
        model = load_model(cfg.file("model"))
    except (ExprError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"model file: {exc}") from None
    h_range = cfg.text("h_range", None, "problem")
    if h_range is not None:
        lo, hi = parse_list(h_range)
        model = type(model)(*[getattr(model, k) for k in ("a", "b", "c")], (lo, hi), model.x_max)
    try:
        mu0 = read_measure_csv(cfg.file("mu0"))
    except (MeasureError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"initial measure: {exc}") from None
    T = cfg.num("T", _REQUIRED, "problem")
    h = cfg.num("h", 0.0, "problem")
    if isinstance(model, NonlinearModel):
        cut = cfg.text("cutoff", "off", "problem")
        cutoff = None if cut == "off" else ("auto" if cut == "auto" else parse_number(cut))
        return NonlinearProblem(model, h, mu0, T, cutoff, validate=validate)
    return LinearProblem(model, h, mu0, T, validate=validate)


def budget_from(cfg: ExperimentConfig, default_kind: str = "z") -> NormBudget:
    kind = cfg.text("metric", default_kind)
    if kind == "flat":
        return NormBudget.flat()
    if kind != "z":
        raise ConfigError(f"metric must be 'flat' or 'z', not {kind!r}")
    return NormBudget.z(alpha=cfg.num("alpha", 0.75), nodes=cfg.integer("nodes", 257))


# --------------------------------------------------------------------------
# Reports

@dataclass
class Report:
    """Result of one experiment: named CSV tables, summary lines and gate checks."""

    kind: str
    tables: Dict[str, Tuple[List[str], List[Sequence]]] = field(default_factory=dict)
    lines: List[str] = field(default_factory=list)
    checks: List[Tuple[str, Optional[bool]]] = field(default_factory=list)
    writers: List[Callable[[Path], List[Path]]] = field(default_factory=list)

    def table(self, name: str, header: List[str], rows: List[Sequence]):
        self.tables[name] = (header, rows)

    def check(self, name: str, ok: Optional[bool]):
        """Gate result; ``None`` means reported without a pass/fail gate."""
        self.checks.append((name, ok))


def _saved(path: Path, write: Callable[[Path], object]) -> List[Path]:
    write(path)
    return [path]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def emit_report(report: Report, out: Path) -> List[str]:
    """Write CSV tables, extra artifacts, ``summary.txt`` and ``manifest.csv``.

    Returns the summary lines (also printed by the CLI).
    """
    out.mkdir(parents=True, exist_ok=True)
    files: List[Path] = []
    for name, (header, rows) in report.tables.items():
        path = out / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        files.append(path)
    for write in report.writers:
        files.extend(write(out))
    summary = [f"spmsens {__version__} {report.kind}"]
    summary += [f"tables: {', '.join(report.tables) or '(none)'}"]
    for name, (_, rows) in report.tables.items():
        summary.append(f"  {name}: {len(rows)} rows")
    summary += report.lines
    for name, ok in report.checks:
        summary.append(f"{'PASS' if ok else 'FAIL' if ok is not None else 'INFO'} {name}")
    (out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    files.append(out / "summary.txt")
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "sha256", "bytes"])
        for p in sorted(set(files)):
            data = p.read_bytes()
            w.writerow([p.relative_to(out).as_posix(), hashlib.sha256(data).hexdigest(), len(data)])
    return summary


# --------------------------------------------------------------------------
# Experiments

def run_validate(cfg: ExperimentConfig) -> Report:
    model = load_model(cfg.file("model"))
    grid = ValidationGrid(model.x_max, model.h_range)
    rep = validate_model(model, grid)
    r = Report("validate")
    r.table("validation", ["check", "passed", "detail", "witness"],
            [(c.name, c.passed, c.detail,
              "" if c.witness is None else ";".join(f"{k}={v!r}" for k, v in c.witness.items()))
             for c in rep.checks])
    r.lines += rep.lines()
    if isinstance(model, ModelTriple):
        T = cfg.num("T", 1.0, "problem")
        reg = check_flow_regularity(model, T, samples=cfg.integer("samples", 64), seed=cfg.seed)
        r.writers.append(lambda out: _saved(out / "flow_regularity.csv", reg.to_csv))
        r.check("flow regularity ratios finite", reg.passed)
    r.check("model validation", rep.passed)
    if not rep.passed:
        raise ModelValidationError("model fails validation: " +
                                   "; ".join(c.name for c in rep.failures()), rep)
    return r


def run_solve_linear(cfg: ExperimentConfig) -> Report:
    p = load_problem(cfg)
    if not isinstance(p, LinearProblem):
        raise ConfigError("solve-linear needs a linear model (keys a, b, c)")
    dt = cfg.num("dt", 2.0 ** -10)
    traj = solve_linear_particles(p, dt, cfg.integer("save_every", None))
    r = Report("solve-linear")
    r.writers.append(lambda out: traj.write(out, "mu"))
    r.lines.append(f"particle scheme dt={dt:g}, {len(traj.times)} saved times, "
                   f"final TV={traj.final.tv_norm():.10g}, atoms={len(traj.final)}")
    xi_src = cfg.text("xi", None)
    if xi_src:
        xi = SmoothFunction(xi_src)
        N = cfg.integer("N", None)
        sol = solve_dual(p.model, xi, p.h, p.T, N)
        dual = float(np.dot(sol(0.0, p.mu0.positions), p.mu0.weights)) if len(p.mu0) else 0.0
        part = traj.final.pair(xi)
        r.table("functional", ["xi", "dual", "particles", "abs_diff"],
                [(xi.name, dual, part, abs(dual - part))])
        r.writers.append(lambda out: _saved(out / "volterra_trace.csv", sol.to_csv))
        r.lines.append(f"int xi d mu_T: dual {dual:.10g}, particles {part:.10g}")
    hbar = cfg.num("h_compare", None)
    if hbar is not None:
        rep = check_linear_inequalities(p, p.with_h(hbar), dt, cfg.integer("save_every", None))
        r.table("inequalities", ["name", "t", "lhs", "rhs", "passed"],
                [(w.name, w.t, w.lhs, w.rhs, w.passed) for w in rep.rows])
        r.lines += [f"{k} = {v:.6g}" for k, v in sorted(rep.constants.items())]
        r.check(f"inequalities ({len(rep.violations())} violations of {len(rep.rows)})", rep.passed)
    return r


def run_solve_nonlinear(cfg: ExperimentConfig) -> Report:
    p = load_problem(cfg)
    if not isinstance(p, NonlinearProblem):
        raise ConfigError("solve-nonlinear needs a kernel model (keys F_a, K_a, ...)")
    cache = LevelCache(p)
    k = cfg.integer("k", 4)
    level = cache.get(k)
    r = Report("solve-nonlinear")
    r.writers.append(lambda out: level.write(out))
    r.lines.append(f"level k={k}, inner dt={level.dt_inner:g}, final TV={level.trajectory.final.tv_norm():.10g}")
    ks = cfg.levels("k_range", None)
    t = cfg.num("t", p.T)
    rows = []
    if ks:
        dists = [(kk, cross_level_distance(p, kk, t, cache=cache)) for kk in ks]
        rows += [(kk, "", "flat_cross_level", d) for kk, d in dists]
        fit = fit_rate([kk for kk, _ in dists], [d for _, d in dists], "dyadic")
        r.lines.append("cross-level flat distance: " + fit.line())
        r.check("cross-level decay rate >= 0.8", None if math.isnan(fit.rate) else fit.rate >= 0.8)
        tvs = [(kk, float(cache.get(kk).trajectory.tv_norms().max())) for kk in ks]
        r.table("tv_by_level", ["k", "max_tv"], tvs)
    dhs = cfg.floats("dh_list", None)
    if dhs:
        scan = h_lipschitz_scan(p, k, t, dhs, cache=cache)
        rows += [(k, dh, "flat_over_dh", ratio) for dh, _, ratio in scan.rows]
        r.lines += scan.lines()
        r.check("h-Lipschitz ratios refinement-stable", scan.passed)
    r.table("study", ["k", "dh", "metric", "value"], rows)
    return r


def _two_measures(cfg: ExperimentConfig) -> Tuple[DiscreteMeasure, DiscreteMeasure]:
    try:
        return (read_measure_csv(cfg.file("measure_a", "experiment")),
                read_measure_csv(cfg.file("measure_b", "experiment")))
    except MeasureError as exc:
        raise ConfigError(str(exc)) from None


def run_flat_distance(cfg: ExperimentConfig) -> Report:
    a, b = _two_measures(cfg)
    value, tf = flat_distance(a, b)
    r = Report("flat-distance")
    r.table("distance", ["metric", "value"], [("flat", value)])
    r.writers.append(lambda out: _saved(out / "witness.csv", tf.to_csv))
    r.lines.append(f"flat distance = {value!r}")
    return r


def run_z_distance(cfg: ExperimentConfig) -> Report:
    a, b = _two_measures(cfg)
    budget = NormBudget.z(alpha=cfg.num("alpha", 0.75), nodes=cfg.integer("nodes", 257))
    res = z_distance(a, b, budget, return_info=True)
    r = Report("z-distance")
    r.table("distance", ["metric", "value"], [(budget.describe(), res.value)])
    r.writers.append(lambda out: _saved(out / "witness.csv", res.witness.to_csv))
    r.lines.append(f"z distance = {res.value!r} ({res.witness.grid_info})")
    return r


def _backend(cfg: ExperimentConfig, p) -> Backend:
    text = cfg.text("backend", None)
    kw = dict(dt=cfg.num("dt", None), N=cfg.integer("N", None))
    if text is None:
        if isinstance(p, NonlinearProblem):
            return Backend("dyadic", k=cfg.integer("k", 4), **kw)
        return Backend("linear-dual", **kw)
    return Backend.parse(text, **kw)


def _prefetch(cache: SolutionCache, hs: Sequence[float], t: float, threads: int):
    """Solve for all h up front (in parallel when threads > 1); results are memoised."""
    hs = list(dict.fromkeys(float(h) for h in hs))
    if threads > 1 and cache.backend.kind != "dyadic":
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(lambda h: cache.measure(h, t), hs))
    for h in hs:
        cache.measure(h, t)


def run_sensitivity(cfg: ExperimentConfig) -> Report:
    p = load_problem(cfg)
    t = cfg.num("t", p.T)
    dhs = cfg.floats("dh_list", None) or [s * 2.0 ** -j for j in range(4, 9) for s in (1.0, -1.0)]
    budget = budget_from(cfg, "z")
    backend = _backend(cfg, p)
    cache = SolutionCache(p, backend)
    _prefetch(cache, [p.h] + [p.h + d for d in dhs], t, cfg.threads)
    qs = quotient_measures(p, t, p.h, dhs, cache=cache)
    rep = cauchy_diagnostic(qs, budget, full=cfg.text("full_matrix", "no") == "yes")
    level = backend.k if backend.kind == "dyadic" else ""
    r = Report("sensitivity")
    r.table("cauchy", ["k", "dh", "metric", "value"],
            [(level, s, budget.kind, d) for s, d in rep.sequence])
    r.lines += rep.lines()
    if rep.divergent:
        r.writers.append(lambda out: _saved(out / "witness.csv", rep.witness.to_csv))
        r.check("quotients form a Cauchy sequence", None)
    else:
        r.check("quotients form a Cauchy sequence", True)
    dh0 = cfg.num("dh0", None)
    if dh0 is not None:
        est = derivative_estimate(p, t, p.h, dh0, NormBudget.z(alpha=cfg.num("alpha", 0.75),
                                                               nodes=cfg.integer("nodes", 257)),
                                  cache=cache)
        r.table("derivative", ["xi", "value"], est.table)
        r.writers.append(lambda out: _saved(out / "derivative_measure.csv",
                                            lambda path: write_measure_csv(est.representation, path)))
        r.lines += est.lines()
    return r


def run_delta_kt(cfg: ExperimentConfig) -> Report:
    p = load_problem(cfg)
    if not isinstance(p, NonlinearProblem):
        raise ConfigError("delta-kt needs a kernel model")
    alpha = cfg.num("alpha", 0.9)
    res = delta_kt_study(p, cfg.num("t", p.T), p.h, cfg.levels("k_range", [2, 3, 4, 5, 6]),
                         cfg.floats("dh_list", None), alpha, cfg.integer("nodes", 257))
    r = Report("delta-kt")
    r.table("delta_kt", ["k", "delta_hat"], res.delta_hat)
    r.table("study", ["k", "dh", "metric", "value"], [(k, dh, f"z{alpha:g}", v) for k, dh, v in res.rows])
    r.lines += res.lines()
    if alpha > 0.5:
        r.check(f"fitted rate >= 2*alpha-1 - 0.4 = {res.target - 0.4:.3g}",
                None if math.isnan(res.fit.rate) else res.fit.rate >= res.target - 0.4)
    else:
        r.check("alpha <= 1/2: rate reported without a gate", None)
    return r


def run_holder_scan(cfg: ExperimentConfig) -> Report:
    p = load_problem(cfg)
    t = cfg.num("t", p.T)
    budget = budget_from(cfg, "z")
    scan = holder_scan(p, t, cfg.floats("h_grid", _REQUIRED), cfg.num("dh0", 2.0 ** -5),
                       budget, _backend(cfg, p))
    r = Report("holder-scan")
    r.table("holder", ["h1", "h2", "distance"], scan.rows)
    r.lines += scan.lines()
    if scan.constant:
        r.check("constant derivative", None)
    elif budget.kind == "z":
        r.check(f"exponent >= alpha - 0.15 = {budget.alpha - 0.15:.3g}",
                None if math.isnan(scan.fit.rate) else scan.fit.rate >= budget.alpha - 0.15)
    return r


RUNNERS: Dict[str, Callable[[ExperimentConfig], Report]] = {
    "validate": run_validate,
    "solve-linear": run_solve_linear,
    "solve-nonlinear": run_solve_nonlinear,
    "flat-distance": run_flat_distance,
    "z-distance": run_z_distance,
    "sensitivity": run_sensitivity,
    "delta-kt": run_delta_kt,
    "holder-scan": run_holder_scan,
}


def run(kind: str, cfg: ExperimentConfig) -> Tuple[int, List[str]]:
    """Run one experiment; returns (exit status, summary or diagnostic lines)."""
    try:
        report = RUNNERS[kind](cfg)
        return EXIT_OK, emit_report(report, cfg.out)
    except ModelValidationError as exc:
        lines = [f"model validation failed: {exc}"]
        if exc.report is not None:
            lines += exc.report.lines()
        return EXIT_VALIDATION, lines
    except (SolverError, FlowError, VolterraError, GridError) as exc:
        return EXIT_SOLVER, [f"solver failure: {exc}"]
    except (ConfigError, ExprError, MeasureError, configparser.Error) as exc:
        return EXIT_CONFIG, [f"config error: {exc}"]
    except ValueError as exc:
        return EXIT_CONFIG, [f"invalid setting: {exc}"]


HELP = {
    "validate": "check a model file against the standing assumptions",
    "solve-linear": "particle solution of a linear model (plus dual functional and inequality checks)",
    "solve-nonlinear": "dyadic solution of a kernel model (plus cross-level and h-Lipschitz studies)",
    "flat-distance": "flat distance between two measure files",
    "z-distance": "(C^{1+alpha})* distance between two measure files",
    "sensitivity": "difference quotients in h: Cauchy diagnostic and derivative estimate",
    "delta-kt": "cross-level quotient study Delta-hat^{k,t}",
    "holder-scan": "Holder continuity of the h-derivative",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spmsens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"spmsens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", required=True, metavar="PATH", help="INI experiment config")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, metavar="N", help="seed for randomized sampling")
        sp.add_argument("--threads", type=int, metavar="N", help="worker threads for parameter sweeps")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config, args.out, args.seed, args.threads)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status, lines = run(args.command, cfg)
    stream = sys.stdout if status == EXIT_OK else sys.stderr
    print("\n".join(lines), file=stream)
    return status


if __name__ == "__main__":
    sys.exit(main())
