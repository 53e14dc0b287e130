"""Batch driver: scenario config in, deterministic report and CSV tables out.

Checks run in dependency order ``dichotomy -> theta -> perturb ->
admissibility``; ``example`` needs ``dichotomy`` and compares the run against
the scenario's analytic facts. A check whose prerequisite did not pass is
recorded with verdict ``error`` and reason ``upstream``.

Exit status: 0 all requested checks pass, 1 some check failed, 2 usage or
config error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .admissibility import check_pair_admissible
from .dichotomy import check_dichotomy, envelope_table, fit_dichotomy
from .errors import ConfigError, EDRoughError, NoDichotomyError
from .roughness import (StarNorm, picard_perturbed, perturbed_dichotomy, select_exponents,
                        tabulated_cocycle_residual, theta_for, verify_perturbed_identity)
from .scenarios import BUILDERS, build, catalog, example_sys_bound

log = logging.getLogger("edrough")

SCHEMA_VERSION = "edrough-report/1.0"
CHECK_ORDER = ("dichotomy", "theta", "perturb", "admissibility", "example")
REQUIRES = {"theta": "dichotomy", "perturb": "theta", "admissibility": "perturb",
            "example": "dichotomy"}
PIPELINES = {
    "theta": ["dichotomy", "theta"],
    "perturb": ["dichotomy", "theta", "perturb"],
    "admissible": ["dichotomy", "theta", "perturb", "admissibility"],
}
EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
CONTRACTION_SLACK = 0.05


@dataclass
class RunConfig:
    scenario: str = "scalar_decay"
    params: dict = field(default_factory=dict)
    grid: Optional[list] = None
    beta: Union[float, str] = "auto"
    tol: float = 1e-10
    max_iter: int = 200
    checks: list = field(default_factory=lambda: ["dichotomy"])
    out: Optional[str] = None
    seed: Optional[int] = None
    eps_fixed: Optional[float] = None
    stride: int = 10
    sample_nodes: int = 200
    target_k_theta: float = 0.9
    bv_delta: float = 0.05
    admissibility_tol: float = 1e-3

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {extra}")
        return cls(**data)

    def validate(self):
        if self.scenario not in BUILDERS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; known: {sorted(BUILDERS)}")
        if not self.checks:
            raise ConfigError("no checks requested")
        bad = [c for c in self.checks if c not in CHECK_ORDER]
        if bad:
            raise ConfigError(f"unknown checks {bad}; choose from {list(CHECK_ORDER)}")
        if not self.tol > 0 or not self.admissibility_tol > 0:
            raise ConfigError("tolerances must be positive")
        if self.max_iter < 1 or self.stride < 1 or self.sample_nodes < 10:
            raise ConfigError("max_iter and stride must be >= 1, sample_nodes >= 10")
        if self.grid is not None and len(self.grid) != 3:
            raise ConfigError("grid must be [t_min, t_max, h]")
        if self.beta != "auto":
            try:
                self.beta = float(self.beta)
            except (TypeError, ValueError):
                raise ConfigError(f"beta must be a number or 'auto', got {self.beta!r}") from None
            if not self.beta > 0:
                raise ConfigError("beta must be positive")
        self.checks = [c for c in CHECK_ORDER if c in self.checks]
        return self

    def to_record(self) -> dict:
        rec = asdict(self)
        rec.pop("out")
        return rec


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


# ------------------------------------------------------------------- helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isfinite(f):
            return f
        return "nan" if math.isnan(f) else ("inf" if f > 0 else "-inf")
    return obj


class _State:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.scenario = build(cfg.scenario, cfg.params)
        g = cfg.grid
        self.grid = self.scenario.grid(*g) if g is not None else self.scenario.grid()
        self.proj = self.scenario.projections(self.grid)
        self.est = None
        self.theta = None
        self.beta = None
        self.pf = None
        self.tables = {"envelope": [], "iterations": [], "theta_profile": []}


def _check_dichotomy(st: _State) -> tuple[str, dict]:
    cfg = st.cfg
    sc = st.scenario
    try:
        est = fit_dichotomy(sc.flow, st.proj, st.grid, eps_fixed=cfg.eps_fixed,
                            max_nodes=cfg.sample_nodes, seed=cfg.seed)
    except NoDichotomyError as exc:
        return "fail", {"reason": str(exc), "details": exc.details}
    rep = check_dichotomy(sc.flow, est, st.grid, tol=1e-9, max_nodes=cfg.sample_nodes,
                          seed=cfg.seed)
    st.est = est
    st.tables["envelope"] = envelope_table(sc.flow, est, st.grid)
    rec = {"estimate": est.to_record(), "report": rep.to_record()}
    return ("pass" if rep.passes else "fail"), rec


def _check_theta(st: _State) -> tuple[str, dict]:
    cfg = st.cfg
    sc = st.scenario
    rec = {}
    if cfg.beta == "auto":
        choice = select_exponents(sc.flow, st.est, sc.perturbation, st.grid,
                                  target=cfg.target_k_theta)
        est, beta, th = choice.est, choice.beta, choice.theta
        rec["selection"] = {"target": cfg.target_k_theta, "candidates": choice.candidates}
    else:
        est, beta = st.est, float(cfg.beta)
        if not beta < est.alpha:
            return "fail", {"reason": f"beta = {beta} is not below the fitted alpha {est.alpha}"}
        th = theta_for(est, sc.perturbation, st.grid, beta)
    st.theta, st.beta = th, beta
    st.est_used = est
    st.tables["theta_profile"] = list(zip(st.grid.nodes.tolist(), th.profile.tolist()))
    rec.update({"theta": th.to_record(), "beta": beta, "estimate_used": est.to_record()})
    return ("pass" if th.passes else "fail"), rec


def _check_perturb(st: _State) -> tuple[str, dict]:
    cfg = st.cfg
    sc = st.scenario
    est = st.est_used
    pf = picard_perturbed(sc.flow, est, sc.perturbation, st.grid, StarNorm(st.beta, est.eps),
                          tol=cfg.tol, max_iter=cfg.max_iter, stride=cfg.stride)
    st.pf = pf
    hist = pf.contraction_history
    ratios = pf.ratios
    st.tables["iterations"] = [(k + 1, d, (ratios[k - 1] if k >= 1 else None))
                               for k, d in enumerate(hist)]
    limit = st.theta.K_theta * (1 + CONTRACTION_SLACK)
    contraction_ok = bool(np.all(ratios <= limit))
    identity = verify_perturbed_identity(pf, sc.flow, sc.perturbation, st.grid)
    cocycle = tabulated_cocycle_residual(pf, seed=cfg.seed or 0)
    diag = pf.values[pf.anchors, np.arange(len(pf.anchors))]
    rec = {"picard": pf.summary(), "contraction_limit": limit, "contraction_ok": contraction_ok,
           "identity_residual": identity, "cocycle_residual": cocycle,
           "diagonal_defect": float(np.abs(diag - np.eye(sc.flow.dim)).max())}
    try:
        pest = perturbed_dichotomy(pf, st.grid, st.beta)
    except NoDichotomyError as exc:
        rec["perturbed_dichotomy"] = {"passes": False, "reason": str(exc),
                                      "details": exc.details}
        return "fail", rec
    rec["perturbed_dichotomy"] = {"passes": True, "estimate": pest.to_record()}
    st.perturbed_est = pest
    ok = contraction_ok and pest.alpha >= st.beta - 0.05
    return ("pass" if ok else "fail"), rec


def _check_admissibility(st: _State) -> tuple[str, dict]:
    rep = check_pair_admissible(st.pf, tol=st.cfg.admissibility_tol, solver_tol=st.cfg.tol,
                                max_iter=st.cfg.max_iter)
    return ("pass" if rep.passes else "fail"), rep.to_record()


def _bv_profile(sc, grid, eps_bv):
    """``||B(t)|| exp(2 eps |t|)``: the smallest admissible pointwise ``delta`` at each node."""
    return sc.perturbation.norms(grid) * np.exp(2 * eps_bv * np.abs(grid.nodes))


def _check_example(st: _State) -> tuple[str, dict]:
    sc = st.scenario
    cfg = st.cfg
    facts = sc.analytic_facts
    est = st.est
    sub = {}
    sub["K_within_5pct"] = bool(est.K <= facts["K"] * 1.05 + 1e-12)
    sub["alpha_within_5pct"] = bool(est.alpha >= facts["alpha"] * 0.95)
    rec = {"analytic_facts": facts, "fitted": {"K": est.K, "alpha": est.alpha, "eps": est.eps}}
    if sc.name == "scalar_decay" and getattr(st, "perturbed_est", None) is not None:
        pa = st.perturbed_est.alpha
        sub["perturbed_alpha"] = bool(abs(pa - facts["perturbed_alpha"]) <= 0.02)
        rec["perturbed_alpha"] = pa
    eps_bv = {"example_sys": sc.params.get("eps"),
              "nonlocal_ide": sc.params.get("kernel", {}).get("w_eps")}.get(sc.name)
    if sc.name == "example_sys":
        nrm = sc.perturbation.norms(st.grid)
        bound = example_sys_bound(sc.params["eps"], sc.params["gamma"], st.grid.nodes)
        defect = bound - nrm
        sub["norm_bound_holds"] = bool(np.all(defect >= -1e-12))
        rec["norm_bound_min_defect"] = float(defect.min())
    if sc.name == "nonlocal_ide":
        rec["kernel_tail_mass"] = facts["kernel_tail_mass"]
        rec["model_reduction"] = facts["model_reduction"]
    if eps_bv is not None:
        prof = _bv_profile(sc, st.grid, eps_bv)
        i = int(np.argmax(prof))
        bv_passes = bool(prof[i] <= cfg.bv_delta)
        th = st.theta
        if th is None:
            choice = select_exponents(sc.flow, est, sc.perturbation, st.grid,
                                      target=cfg.target_k_theta)
            th = choice.theta
        rec["pointwise_bound"] = {"delta": cfg.bv_delta, "eps": eps_bv,
                                  "required_delta": float(prof[i]), "at_t": float(st.grid.nodes[i]),
                                  "passes": bv_passes}
        rec["integral_condition"] = th.to_record()
        sub["pointwise_bound_fails"] = not bv_passes
        sub["integral_condition_passes"] = bool(th.passes)
        rec["gap_demonstrated"] = (not bv_passes) and bool(th.passes)
    rec["subchecks"] = sub
    return ("pass" if all(sub.values()) else "fail"), rec


RUNNERS = {"dichotomy": _check_dichotomy, "theta": _check_theta, "perturb": _check_perturb,
           "admissibility": _check_admissibility, "example": _check_example}


TABLE_SOURCES = {"dichotomy": "envelope", "theta": "theta_profile", "perturb": "iterations"}


def _closure(checks) -> list:
    """Requested checks plus their prerequisites, in dependency order."""
    need = set(checks)
    for name in reversed(CHECK_ORDER):
        if name in need and name in REQUIRES:
            need.add(REQUIRES[name])
    return [c for c in CHECK_ORDER if c in need]


def run(cfg: RunConfig) -> tuple[dict, dict]:
    """Execute the requested checks; returns ``(report, timings)``.

    ``report`` is deterministic for a fixed config; wall times go to
    ``timings``.
    """
    cfg.validate()
    st = _State(cfg)
    if cfg.beta != "auto":
        alpha = st.scenario.analytic_facts.get("alpha")
        if alpha is not None and not cfg.beta < alpha:
            raise ConfigError(f"beta = {cfg.beta} must be below alpha = {alpha}")
    records = []
    verdicts = {}
    timings = {}
    for name in _closure(cfg.checks):
        need = REQUIRES.get(name)
        if need and verdicts.get(need) != "pass":
            verdict, rec = "error", {"reason": "upstream", "requires": need}
        else:
            t0 = time.perf_counter()
            try:
                verdict, rec = RUNNERS[name](st)
            except EDRoughError as exc:
                verdict, rec = "error", {"reason": type(exc).__name__, "message": str(exc)}
                if getattr(exc, "history", None):
                    rec["history"] = exc.history
            timings[name] = time.perf_counter() - t0
        verdicts[name] = verdict
        if name in cfg.checks:
            records.append({"check": name, "verdict": verdict, "record": rec})
        log.info("%s: %s", name, verdict)
    for check, table in TABLE_SOURCES.items():
        if check not in cfg.checks:
            st.tables[table] = []
    sc = st.scenario
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_record(),
        "scenario": {"name": sc.name, "params": sc.params, "interval": sc.interval,
                     "dim": sc.flow.dim, "analytic_facts": sc.analytic_facts, "notes": sc.notes,
                     "grid": {"t_min": st.grid.t_min, "t_max": st.grid.t_max, "h": st.grid.h,
                              "nodes": st.grid.size}},
        "checks": records,
        "tables": {k: [list(r) for r in v] for k, v in st.tables.items()},
        "exit_code": exit_code(records),
    }
    return _clean(report), timings


def exit_code(records) -> int:
    verdicts = [r["verdict"] for r in records]
    if any(r["verdict"] == "error" and r["record"].get("reason") != "upstream" for r in records):
        return EXIT_NUMERIC
    if all(v == "pass" for v in verdicts):
        return EXIT_PASS
    return EXIT_FAIL


# -------------------------------------------------------------------- output

TABLE_HEADERS = {
    "envelope": ["branch", "t_minus_s", "s", "norm", "bound", "ratio"],
    "iterations": ["k", "delta", "ratio"],
    "theta_profile": ["t", "inner_integral"],
}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_tables(report: dict, path) -> list[Path]:
    """Write ``report.json`` and the three CSV tables into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    target = out / "report.json"
    target.write_text(dumps_report(report), encoding="utf-8")
    written.append(target)
    tables = report.get("tables", {})
    for name, header in TABLE_HEADERS.items():
        rows = tables.get(name, [])
        target = out / f"{name}.csv"
        with open(target, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                r = list(r)
                if name == "envelope":
                    r.append(r[3] / r[4] if r[4] else None)
                w.writerow([_fmt(v) for v in r])
        written.append(target)
    return written


# ----------------------------------------------------------------------- CLI


def _parse_grid(text: str) -> list:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be t_min,t_max,h; got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("grid must have three comma-separated numbers")
    return vals


def _parse_beta(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("beta must be a number or 'auto'") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edrough",
        description="Verify exponential dichotomies and their roughness under perturbations.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--scenario", choices=sorted(BUILDERS))
        p.add_argument("--grid", type=_parse_grid, help="t_min,t_max,h")
        p.add_argument("--beta", type=_parse_beta, help="star-norm exponent or 'auto'")
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iter", type=int, dest="max_iter")
        p.add_argument("--checks", help="comma-separated subset of " + ",".join(CHECK_ORDER))
        p.add_argument("--out", help="directory for report.json and CSV tables")
        p.add_argument("--seed", type=int, help="seed for sampled pair selection")

    for name, text in (("verify", "run the checks named in the config (default: dichotomy)"),
                       ("theta", "dichotomy fit and smallness condition"),
                       ("perturb", "dichotomy, smallness and perturbed family"),
                       ("admissible", "full pipeline including admissibility")):
        add_run_flags(sub.add_parser(name, help=text))
    sub.add_parser("catalog", help="list built-in scenarios")
    rp = sub.add_parser("report", help="re-emit CSV tables from an existing report.json")
    rp.add_argument("input", help="path to report.json")
    rp.add_argument("--out", required=True)
    return parser


def config_from_args(args) -> RunConfig:
    data = load_config(args.config) if args.config else {}
    if args.command in PIPELINES:
        data["checks"] = PIPELINES[args.command]
    for key in ("scenario", "grid", "beta", "tol", "max_iter", "out", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    if args.checks:
        data["checks"] = [c.strip() for c in args.checks.split(",") if c.strip()]
    try:
        return RunConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _summary_line(report) -> str:
    parts = [f"{r['check']}={r['verdict']}" for r in report["checks"]]
    return f"{report['scenario']['name']}: " + " ".join(parts)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "catalog":
        rows = [{"name": s.name, "dim": s.flow.dim, "interval": s.interval, "params": s.params,
                 "analytic_facts": s.analytic_facts} for s in catalog()]
        sys.stdout.write(json.dumps(_clean(rows), indent=2, sort_keys=True) + "\n")
        return EXIT_PASS
    if args.command == "report":
        try:
            report = json.loads(Path(args.input).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        emit_tables(report, args.out)
        return EXIT_PASS
    try:
        cfg = config_from_args(args)
        report, timings = run(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if cfg.out:
        emit_tables(report, cfg.out)
        Path(cfg.out, "timings.json").write_text(
            json.dumps({k: round(v, 6) for k, v in timings.items()}, indent=2, sort_keys=True)
            + "\n", encoding="utf-8")
    print(_summary_line(report))
    return report["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
