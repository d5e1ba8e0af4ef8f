"""Command-line runner: ``plap <command> --config <path> [--out <dir>] [--seed <u64>]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure (non-convergence
or a breached certificate). Every run that gets past validation writes
``manifest.json`` with the config echo and a sha256 per artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .benchmarks import interval_refinement_study, named_datum
from .config import SCHEMA_VERSION, ConfigError, RunConfig
from .entropy import (
    DEFAULT_WINDOW,
    apriori_estimate_check,
    apriori_k_grid,
    grad_decay_check,
    run_approximation,
    u_decay_check,
    uniqueness_crosscheck,
    write_report,
)
from .fields import (
    DegenerateInputError,
    DiscreteFunction,
    distribution_function,
    layer_cake_check,
    lp_norm,
    marcinkiewicz_norm,
    poincare_ratio,
    save_curve_csv,
    save_function_csv,
    truncation_gradient_check,
)
from .picone import comparison_check, picone_integral, picone_pointwise, save_picone_csv
from .solver import IncompatibleDataError, solve_weak

COMMANDS = ("solve", "entropy", "estimates", "picone", "compare", "convergence")

OK, CONFIG_ERROR, NUMERICAL_FAILURE = 0, 1, 2


def _dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(outdir: Path, command: str, cfg: RunConfig, artifacts, status: int) -> Path:
    entries = [{"file": p.name if p.parent == outdir else str(p.relative_to(outdir)),
                "sha256": _sha256(p)} for p in sorted(set(artifacts))]
    manifest = {
        "tool": "plap",
        "version": __version__,
        "schema": SCHEMA_VERSION,
        "command": command,
        "seed": cfg.seed,
        "exit_status": status,
        "config": cfg.raw,
        "artifacts": entries,
    }
    return _dump(manifest, outdir / "manifest.json")


def _data(cfg: RunConfig, mesh):
    f = named_datum(mesh, cfg.raw["data"], cfg.base_dir)
    if cfg.raw.get("center_data"):
        m = mesh.lumped_mass
        f = f - math.fsum(f.values * m) / math.fsum(m)
    return f


# -- commands ---------------------------------------------------------------------------


def cmd_solve(cfg: RunConfig, out: Path):
    mesh = cfg.mesh()
    sc = cfg.solver_config()
    outcome = solve_weak(mesh, _data(cfg, mesh), sc)
    arts = [out / "solution.csv"]
    save_function_csv(outcome.solution, arts[0])
    arts.append(_dump(outcome.to_dict(), out / "outcome.json"))
    return (OK if outcome.converged else NUMERICAL_FAILURE), arts


def cmd_entropy(cfg: RunConfig, out: Path):
    mesh = cfg.mesh()
    sc = cfg.solver_config()
    sec = cfg.section("entropy")
    report = run_approximation(
        mesh, _data(cfg, mesh), cfg.schedule(), sc,
        pass_to_limit=sec.get("pass_to_limit", True),
        k_grid=cfg.raw.get("k_grid"),
        test_bank_size=sec.get("test_bank_size", 5),
        seed=cfg.seed,
        u_window=cfg.window("entropy", "u_window", DEFAULT_WINDOW),
        grad_window=cfg.window("entropy", "grad_window", DEFAULT_WINDOW),
    )
    arts = write_report(report, out)
    apriori_bound = sec.get("apriori_bound", 1.05)
    cert_bound = sec.get("certificate_bound", 50 * sc.grad_tol)
    worst = report.worst_apriori_ratio
    ok = (all(s.outcome.converged for s in report.stages)
          and worst <= apriori_bound
          and report.certificate.max_scaled <= cert_bound)
    summary = {"apriori_bound": apriori_bound, "worst_apriori_ratio": worst,
               "certificate_bound": cert_bound,
               "certificate_max_scaled": report.certificate.max_scaled, "passed": bool(ok)}
    arts.append(_dump(summary, out / "summary.json"))
    return (OK if ok else NUMERICAL_FAILURE), arts


def cmd_estimates(cfg: RunConfig, out: Path):
    mesh = cfg.mesh()
    sc = cfg.solver_config()
    sec = cfg.section("estimates")
    f = _data(cfg, mesh)
    outcome = solve_weak(mesh, f, sc)
    u = outcome.solution
    p = sc.p
    arts = []
    result = {"converged": outcome.converged, "p": p}
    breaches = []

    curve = distribution_function(mesh, u)
    if curve.thresholds.size:
        save_curve_csv(curve, out / "u_curve.csv")
        arts.append(out / "u_curve.csv")
    q_values = sec.get("q_values", [1.0, 1.5, 2.0, 3.0])
    emb = []
    for q in q_values:
        lq = lp_norm(mesh, u, q) ** q
        mq = marcinkiewicz_norm(curve, q) if curve.thresholds.size else 0.0
        emb.append({"q": q, "marcinkiewicz": mq, "lq_power": lq, "holds": bool(mq <= lq + 1e-10)})
        if mq > lq + 1e-10:
            breaches.append(f"embedding fails at q={q}")
    result["embedding"] = emb

    tol = sec.get("layer_cake_tol", 1e-3)
    n_thr = sec.get("n_thresholds", 10_000)
    cakes = []
    for q in q_values:
        if q < 1:
            continue
        lhs, rhs = layer_cake_check(mesh, u, q, n_thr)
        gap = abs(lhs - rhs) / max(abs(lhs), 1e-300) if lhs else abs(rhs)
        cakes.append({"q": q, "lhs": lhs, "rhs": rhs, "relative_gap": gap})
        if gap > tol:
            breaches.append(f"layer cake gap {gap:.2e} at q={q}")
    result["layer_cake"] = cakes

    try:
        result["poincare_ratio"] = poincare_ratio(mesh, u, p)
    except DegenerateInputError as exc:
        result["poincare_ratio"] = None
        result["poincare_note"] = str(exc)

    ks = apriori_k_grid(u)
    tr = [truncation_gradient_check(mesh, u, k).__dict__ for k in ks]
    result["truncation_gradient"] = [dict(d, k=k) for d, k in zip(tr, ks.tolist())]
    try:
        apri = apriori_estimate_check(mesh, u, f, ks, p)
        result["apriori"] = {"k_grid": ks.tolist(), "ratios": apri.ratios.tolist(),
                             "band_ratios": apri.band_ratios.tolist(), "worst": apri.worst_ratio}
    except DegenerateInputError as exc:
        result["apriori"] = {"note": str(exc)}

    ufit = u_decay_check(mesh, u, p, window=cfg.window("estimates", "u_window", DEFAULT_WINDOW))
    gfit = grad_decay_check(mesh, u, p, window=cfg.window("estimates", "grad_window", DEFAULT_WINDOW))
    result["u_tail_fit"] = ufit.to_dict()
    result["grad_tail_fit"] = gfit.to_dict()
    if gfit.curve is not None and gfit.curve.thresholds.size:
        save_curve_csv(gfit.curve, out / "grad_curve.csv")
        arts.append(out / "grad_curve.csv")
    save_function_csv(u, out / "solution.csv")
    arts.append(out / "solution.csv")
    result["breaches"] = breaches
    arts.append(_dump(result, out / "estimates.json"))
    failed = breaches or not outcome.converged
    return (NUMERICAL_FAILURE if failed else OK), arts


def cmd_picone(cfg: RunConfig, out: Path):
    mesh = cfg.mesh()
    sec = cfg.section("picone")
    rng = np.random.default_rng(cfg.seed)
    p_values = sec.get("p_values", [1.3, 2.0, 4.0])
    samples = sec.get("samples", 100)
    mode = sec.get("mode", "chain_rule")
    n = mesh.n_vertices
    interior = np.zeros(n, dtype=bool)
    interior[mesh.interior_nodes] = True
    summary = []
    first = None
    bad_total = 0
    for p in p_values:
        worst_gap = 0.0
        min_l = math.inf
        kv_max = 0.0
        bad_cells = 0
        for _ in range(samples):
            u = DiscreteFunction(mesh, rng.uniform(0.0, 1.0, n))
            v = DiscreteFunction(mesh, rng.uniform(0.5, 1.5, n))
            fld = picone_pointwise(mesh, u, v, p, mode)
            if first is None:
                first = fld
            worst_gap = max(worst_gap, fld.max_identity_gap() / (1.0 + fld.max_abs_l()))
            min_l = min(min_l, fld.min_l())
            bad_cells += int(np.sum(~fld.identity_holds()))
            k = rng.uniform(0.1, 3.0)
            kv_max = max(kv_max, picone_pointwise(mesh, v * k, v, p, mode).max_abs_l())
        entry = {"p": p, "samples": samples, "mode": mode, "max_relative_identity_gap": worst_gap,
                 "min_L": min_l, "max_abs_L_proportional": kv_max, "invalid_identity_cells": bad_cells}
        if mode == "chain_rule":
            bad_total += bad_cells + int(min_l < -1e-12) + int(kv_max > 1e-12)
        summary.append(entry)
    result = {"pointwise": summary}
    if mesh.boundary_nodes.size:
        # integral inequality against the torsion-type supersolution v = S(1)
        sc = cfg.solver_config(p=2.0)
        v = solve_weak(mesh, DiscreteFunction(mesh, np.ones(n)), sc).solution
        rows = []
        for _ in range(min(samples, 20)):
            u = np.where(interior, rng.uniform(0.0, 1.0, n), 0.0)
            lhs, rhs = picone_integral(mesh, DiscreteFunction(mesh, u), v, 2.0)
            rows.append({"lhs": lhs, "rhs": rhs, "slack": lhs - rhs})
            if lhs - rhs < -1e-8 * (1 + lhs):
                bad_total += 1
        result["integral_p2"] = rows
    arts = [out / "picone.csv"]
    save_picone_csv(first, arts[0])
    arts.append(_dump(result, out / "picone.json"))
    return (OK if bad_total == 0 else NUMERICAL_FAILURE), arts


def cmd_compare(cfg: RunConfig, out: Path):
    mesh = cfg.mesh()
    sc = cfg.solver_config()
    sec = cfg.section("compare")
    f = _data(cfg, mesh)
    rep = uniqueness_crosscheck(mesh, f, cfg.schedule("schedule"), cfg.schedule("schedule_b"), sc,
                                seed=cfg.seed)
    gap_tol = sec.get("gap_tol", 1e-3)
    result = {"uniqueness": rep.to_dict(), "gap_tol": gap_tol}
    ok = rep.relative_l1_gap <= gap_tol
    arts = []
    save_function_csv(rep.report_a.candidate, out / "solution_a.csv")
    save_function_csv(rep.report_b.candidate, out / "solution_b.csv")
    arts += [out / "solution_a.csv", out / "solution_b.csv"]
    if "q" in sec and mesh.boundary_nodes.size:
        h = named_datum(mesh, sec.get("h", "constant:1"), cfg.base_dir)
        cmp_ = comparison_check(mesh, sec.get("lambda", 1.0), h, sec["q"], sc, sec.get("mu", 0.5))
        result["comparison"] = cmp_.to_dict()
        ok = ok and cmp_.violations == 0 and cmp_.restart_gap <= 10 * sc.grad_tol
    result["passed"] = bool(ok)
    arts.append(_dump(result, out / "compare.json"))
    return (OK if ok else NUMERICAL_FAILURE), arts


def cmd_convergence(cfg: RunConfig, out: Path):
    sec = cfg.section("convergence")
    n_values = sec.get("n_values", [32, 64, 128, 256])
    p_values = sec.get("p_values", [cfg.raw["p"]])
    min_order = sec.get("min_order", {})
    spc = sec.get("samples_per_cell", 16)
    base = cfg.solver_config()
    rows_out, fits = [], []
    ok = True
    for p in p_values:
        rows, order = interval_refinement_study(p, n_values, base, spc)
        need = min_order.get(str(p), min_order.get(f"{float(p):g}", 1.5 if p == 2 else 1.0))
        fits.append({"p": p, "fitted_order": order, "min_order": need, "passed": bool(order >= need)})
        ok = ok and order >= need and all(r[4] for r in rows)
        rows_out += [(p,) + r for r in rows]
    path = out / "convergence.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "n", "h", "linf_error", "nodal_error", "converged"])
        for p, n, h, e, nod, conv in rows_out:
            w.writerow([format(p, ".17g"), n, format(h, ".17g"), format(e, ".17g"),
                        format(nod, ".17g"), int(conv)])
    arts = [path, _dump({"fits": fits}, out / "convergence.json")]
    return (OK if ok else NUMERICAL_FAILURE), arts


HANDLERS = {
    "solve": cmd_solve,
    "entropy": cmd_entropy,
    "estimates": cmd_estimates,
    "picone": cmd_picone,
    "compare": cmd_compare,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plap", description="p-Laplace entropy-solution lab")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", help="output directory (overrides the config's 'output')")
    ap.add_argument("--seed", type=int, help="seed for randomized sweeps (overrides the config)")
    ap.add_argument("--version", action="version", version=f"plap {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.command)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("seed must be an unsigned 64-bit integer", source="--seed")
            cfg.raw["seed"] = args.seed
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    out = Path(args.out or cfg.raw.get("output") or f"runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    try:
        status, arts = HANDLERS[args.command](cfg, out)
    except (IncompatibleDataError, ValueError) as exc:
        # data-dependent failures that validation cannot see (e.g. nonzero-mean data)
        print(f"error: {exc}", file=sys.stderr)
        status, arts = CONFIG_ERROR, []
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        status, arts = NUMERICAL_FAILURE, []
    write_manifest(out, args.command, cfg, arts, status)
    print(f"plap {args.command}: exit {status}; artifacts in {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
