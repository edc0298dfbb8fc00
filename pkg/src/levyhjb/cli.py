"""Command-line entry point: ``levyhjb {simulate,solve,evaluate,validate,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import hjb
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .feynman_kac import McEstimate, Sampler
from .integrator import ControlSignal, run_paths, simulate
from .integrator import dump_path_csv
from .spectral import load_snapshot
from .validation import format_table, paired_cost_difference, report_dict, run_validation

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 1, 2, 3
log = logging.getLogger("levyhjb")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="experiment config (INI, schema v1)")
    p.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides LEVYHJB_SEED)")
    p.add_argument("--workers", type=int, metavar="N", help="worker threads (overrides LEVYHJB_WORKERS)")
    p.add_argument("--out", metavar="DIR", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="levyhjb", description="Controlled stochastic Navier-Stokes toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate uncontrolled paths and write summaries")
    _common(p)
    p.add_argument("--paths", type=int, help="number of paths (default: experiment.n_paths)")
    p.add_argument("--dump", type=int, default=0, metavar="K", help="write full CSV for the first K paths")

    p = sub.add_parser("solve", help="solve the HJB mild form by Picard iteration")
    _common(p)

    p = sub.add_parser("evaluate", help="cost table, identity and DPP residuals per policy")
    _common(p)
    p.add_argument("--value", metavar="PATH", help="value-function JSON (default: OUT/value.json)")
    p.add_argument("--policy", default="all", choices=["zero", "feedback", "random", "all"])
    p.add_argument("--paths", type=int, help="evaluation paths (default: experiment.n_eval)")

    p = sub.add_parser("validate", help="run the invariant and oracle battery")
    _common(p)
    p.add_argument("--level", default="fast", choices=["fast", "full"])
    p.add_argument("--tensor", metavar="PATH", help="use a trilinear tensor snapshot instead of building one")

    p = sub.add_parser("report", help="collect outputs in OUT into report.json and plot files")
    _common(p)
    return ap


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    for msg in cfg.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    return cfg.with_overrides(args.seed, args.workers, args.out)


def _outdir(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.output.dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"fingerprint": cfg.fingerprint, "seed": cfg.seed}


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def cmd_simulate(args) -> int:
    cfg = _config(args)
    n = args.paths or cfg.experiment.n_paths
    if n < 1:
        raise UsageError("--paths must be positive")
    model = cfg.model()
    out = _outdir(cfg)
    b = run_paths(model, cfg.integrator, cfg.x0[None], np.arange(n), cfg.seed,
                  workers=cfg.output.workers)
    term = np.sum(b.state[0] ** 2, axis=-1)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["# fingerprint", cfg.fingerprint, "seed", cfg.seed])
        w.writerow(["path_id", "terminal_norm_sq", "enstrophy_integral", "cost", "sup_norm_sq",
                    "n_jumps", "aborted"])
        for i in range(n):
            w.writerow([int(b.path_ids[i]), _fmt(term[i]), _fmt(b.enstrophy[0, i]), _fmt(b.cost[0, i]),
                        _fmt(b.sup_sq[0, i]), int(b.n_jumps[i]), int(b.aborted[0, i])])
    ok = b.ok[0]
    summary = {**_stamp(cfg), "schema": "levyhjb.simulate", "version": 1, "n_paths": n,
               "n_aborted": int(np.sum(~ok)), "total_jump_events": int(np.sum(b.n_jumps)),
               "terminal_norm_sq": McEstimate.from_samples(term[ok]).to_dict(),
               "enstrophy_integral": McEstimate.from_samples(b.enstrophy[0][ok]).to_dict(),
               "uncontrolled_cost": McEstimate.from_samples(b.cost[0][ok]).to_dict(),
               "sup_norm_sq": McEstimate.from_samples(b.sup_sq[0][ok]).to_dict()}
    _write_json(out / "summary.json", summary)
    for k in range(min(args.dump, n)):
        pb = simulate(cfg.x0, model, cfg.integrator, rng=cfg.seed, path_id=k)
        dump_path_csv(pb, out / f"path_{k:05d}.csv")
    print(f"simulated {n} paths, {summary['total_jump_events']} jump events, "
          f"mean cost {summary['uncontrolled_cost']['value']:.6g} "
          f"+- {summary['uncontrolled_cost']['stderr']:.2g}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    model = cfg.model()
    sampler = Sampler(model, cfg.integrator.dt, cfg.seed, cfg.integrator.scheme,
                      workers=cfg.output.workers)
    mach = hjb.PicardMachinery.build(model, cfg.hjb, sampler, cfg.fingerprint)
    try:
        v, rep = hjb.solve_value_function(cfg.hjb, mach)
    except hjb.PicardDivergence as exc:
        _write_json(out / "solve_report.json", {**_stamp(cfg), "converged": False,
                                                "residuals": exc.history, "error": str(exc)})
        raise
    v.meta["seed"] = cfg.seed
    (out / "value.json").write_text(v.to_json() + "\n")
    _write_json(out / "solve_report.json", {**_stamp(cfg), "schema": "levyhjb.solve", "version": 1,
                                            **rep.to_dict()})
    with open(out / "residuals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "residual"])
        for i, r in enumerate(rep.residuals, 1):
            w.writerow([i, _fmt(r)])
    state = f"converged: {rep.iterations}" if rep.converged else f"not converged after {rep.iterations}"
    print(state)
    print("residuals: " + " ".join(f"{r:.3e}" for r in rep.residuals))
    return EXIT_OK


def _load_value(path: Path, cfg: ExperimentConfig) -> hjb.ValueFunction:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read value file {path}: {exc.strerror}") from exc
    v = hjb.ValueFunction.from_json(text)
    if v.fingerprint != cfg.fingerprint:
        raise ConfigError(f"value file fingerprint {v.fingerprint} does not match config "
                          f"{cfg.fingerprint}", "value")
    return v


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    v = _load_value(Path(args.value) if args.value else out / "value.json", cfg)
    model = cfg.model()
    n = args.paths or cfg.experiment.n_eval
    T, R, x = cfg.integrator.T, cfg.hjb.R, cfg.x0
    sampler = Sampler(model, cfg.integrator.dt, cfg.seed + 1, cfg.integrator.scheme,
                      workers=cfg.output.workers)
    names = ["zero", "random", "feedback"] if args.policy == "all" else [args.policy]
    rows = []
    for name in names:
        pol = hjb.policy_by_name(name, v, R)
        ic = hjb.verify_identity(pol, v, x, T, n, sampler, R)
        dpp = hjb.dpp_consistency(v, x, 0.0, T / 2, n, sampler, R, pol if name != "feedback" else "feedback")
        rows.append({"policy": name, "cost": ic.lhs.value, "cost_stderr": ic.lhs.stderr,
                     "identity_residual": ic.residual, "identity_stderr": ic.stderr,
                     "identity_status": "PASS" if ic.passes() else "FAIL",
                     "dpp_residual": dpp.value, "dpp_stderr": dpp.stderr})
    comparison = None
    if "feedback" in names and "zero" in names:
        d = paired_cost_difference(sampler, x, T, n, hjb.feedback_policy(v, R), ControlSignal.zero())
        comparison = {"feedback_minus_zero": d.value, "stderr": d.stderr,
                      "significant_95": bool(d.value + 1.645 * d.stderr < 0)}
    value_at_x = float(v.value(T, x))
    _write_json(out / "evaluate.json", {**_stamp(cfg), "schema": "levyhjb.evaluate", "version": 1,
                                        "value_at_x0": value_at_x, "rows": rows,
                                        "comparison": comparison})
    with open(out / "evaluate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"v(T, x0) = {value_at_x:.6g}")
    print(f"{'policy':<9} {'cost':>10} {'stderr':>9} {'identity':>10} {'status':>6} {'dpp':>10}")
    for r in rows:
        mark = ""
        if comparison and r["policy"] == "feedback" and comparison["significant_95"]:
            mark = " *"
        print(f"{r['policy']:<9} {r['cost']:>10.5g} {r['cost_stderr']:>9.2g} "
              f"{r['identity_residual']:>+10.4g} {r['identity_status']:>6} {r['dpp_residual']:>+10.4g}{mark}")
    if comparison:
        print(f"feedback - zero = {comparison['feedback_minus_zero']:+.4g} "
              f"+- {comparison['stderr']:.2g} ({'*' if comparison['significant_95'] else 'n.s.'} at 95%)")
    failed = [r for r in rows if r["identity_status"] != "PASS"]
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_validate(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    tensor = None
    if args.tensor:
        try:
            tensor = load_snapshot(Path(args.tensor).read_text())
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load tensor snapshot {args.tensor}: {exc}", "tensor") from exc
    records = run_validation(cfg, args.level, tensor)
    rep = report_dict(records, cfg, args.level)
    _write_json(out / "validation.json", rep)
    print(format_table(records))
    bad = [r for r in records if not r.passed]
    for r in bad:
        print(f"FAIL {r.name}: measured {r.measured:.4g} > tolerance {r.tolerance:.4g} {r.detail}",
              file=sys.stderr)
    return EXIT_OK if not bad else EXIT_VALIDATION


def cmd_report(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    parts = {}
    for name in ("summary", "solve_report", "evaluate", "validation"):
        p = out / f"{name}.json"
        if p.exists():
            parts[name] = json.loads(p.read_text())
    if not parts:
        raise UsageError(f"no outputs found in {out}; run simulate, solve, evaluate or validate first")
    checks = list(parts.get("validation", {}).get("checks", []))
    for row in parts.get("evaluate", {}).get("rows", []):
        checks.append({"name": f"identity_{row['policy']}", "status": row["identity_status"],
                       "measured": abs(row["identity_residual"]), "stderr": row["identity_stderr"],
                       "tolerance": max(3 * row["identity_stderr"], 0.05 * abs(row["cost"])), "runtime": 0.0})
    report = {**_stamp(cfg), "schema": "levyhjb.report", "version": 1, "checks": checks,
              "passed": all(c["status"] == "PASS" for c in checks), "sources": sorted(parts)}
    _write_json(out / "report.json", report)
    with open(out / "checks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "status", "measured", "tolerance", "stderr"])
        for c in checks:
            w.writerow([c["name"], c["status"], c["measured"], c["tolerance"], c["stderr"]])
    gp = ["# gnuplot script stub; run: gnuplot -p plot.gp"]
    if (out / "residuals.csv").exists():
        gp += ["set datafile separator ','", "set logscale y", "set xlabel 'Picard iteration'",
               "plot 'residuals.csv' every ::1 using 1:2 with linespoints title 'sup residual'"]
    (out / "plot.gp").write_text("\n".join(gp) + "\n")
    print(f"{len(checks)} checks, {'all PASS' if report['passed'] else 'some FAIL'}; "
          f"sources: {', '.join(sorted(parts))}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "evaluate": cmd_evaluate,
            "validate": cmd_validate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except hjb.PicardDivergence as exc:
        print(f"numerical failure: {exc}; residuals {exc.history}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
