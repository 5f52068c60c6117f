"""Command-line front end: two-stage runs, oracle comparisons, stage-size
planning, and the built-in validation suites.

Stages can run in separate invocations: stage 1 writes ratio.json, stage 2
reads it back, which mirrors the independence of the two sampling stages.
All outputs are deterministic for a fixed config (seeds included), whatever
the thread count.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .blvs import BlvsFamily, ModelState
from .config import StudyConfig, load_config
from .errors import ConfigError, PriorsweepError
from .families import ConjugateToy
from .ratio import RatioEstimate, build_log_weight_matrix, estimate_ratios
from .surface import Stage2Workspace, attach_standard_errors, bf_cv_hat, surface
from .validate import run_all
from .variance import PlanInputs, SpectralConfig, c_hat, q_opt, tau_sq_hat

MANIFEST_SCHEMA_VERSION = 1


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{float(x):.17g}"


def _sample_stage(family, specs, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(family.sample_posterior, specs))
    return [family.sample_posterior(sp) for sp in specs]


def _write_chain_csv(path: Path, family, chain) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if isinstance(family, BlvsFamily):
            writer.writerow(["sweep", "gamma", "sigma", "beta0",
                             *[f"b_{nm}" for nm in family.names]])
            for i, st in enumerate(chain):
                assert isinstance(st, ModelState)
                row = [i, "".join("1" if b else "0" for b in st.gamma),
                       _fmt(st.sigma), _fmt(st.beta0)]
                vals = iter(st.beta)
                row.extend(_fmt(next(vals)) if g else "" for g in st.gamma)
                writer.writerow(row)
        else:
            writer.writerow(["step", "theta"])
            for i, th in enumerate(np.asarray(chain)):
                writer.writerow([i, _fmt(th)])


def _write_surface_csv(path: Path, cfg: StudyConfig, records) -> None:
    names = [f.name for f in cfg.functions]
    header = [*cfg.family.coord_names, "bf_hat", "bf_cv_hat", "se_bf", "se_bf_cv"]
    for nm in names:
        header += [f"pe_{nm}", f"se_pe_{nm}"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            row = [*(_fmt(c) for c in rec.h), _fmt(rec.bf), _fmt(rec.bf_cv),
                   _fmt(rec.se_bf), _fmt(rec.se_bf_cv)]
            for nm in names:
                row += [_fmt(rec.pe[nm]), _fmt(rec.se_pe.get(nm))]
            writer.writerow(row)


def _write_variance_csv(path: Path, cfg: StudyConfig, records, breakdowns) -> None:
    kind = "bf_cv" if len(cfg.skeleton) > 1 else "bf"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*cfg.family.coord_names,
                         "stage1_term", "stage2_term", "total", "se"])
        for rec, point in zip(records, breakdowns):
            vb = point[kind]
            writer.writerow([*(_fmt(c) for c in rec.h), _fmt(vb.stage1_term),
                             _fmt(vb.stage2_term), _fmt(vb.total), _fmt(vb.se)])


def cmd_run(cfg: StudyConfig, stage: str, threads: int | None) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ratio_path = out / "ratio.json"
    manifest: dict = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "package_version": __version__,
        "config_hash": cfg.config_hash,
        "config": cfg.raw,
        "stages_run": stage,
        "versions": {"python": sys.version.split()[0],
                     "numpy": np.__version__},
        "timings": {},
        "sizes": {},
    }

    est = None
    if stage in ("1", "both"):
        specs = cfg.stage1.chain_specs(cfg.skeleton)
        t0 = time.perf_counter()
        chains = _sample_stage(cfg.family, specs, threads)
        stage1_s = time.perf_counter() - t0
        steps = sum(sp.length + sp.burn_in for sp in specs)
        manifest["timings"]["stage1_s"] = stage1_s
        manifest["timings"]["t1_s_per_step"] = stage1_s / steps
        if cfg.save_chains:
            for i, c in enumerate(chains):
                _write_chain_csv(out / f"chain-stage1-{i:02d}.csv", cfg.family, c)
        W1 = build_log_weight_matrix(cfg.family, cfg.skeleton, chains)
        est = estimate_ratios(W1, spectral=cfg.spectral)
        est.save(ratio_path)
    if stage in ("2", "both"):
        if est is None:
            if not ratio_path.exists():
                raise ConfigError(f"stage 2 requires {ratio_path} from a prior "
                                  f"stage-1 run")
            est = RatioEstimate.load(ratio_path)
        specs = cfg.stage2.chain_specs(cfg.skeleton)
        t0 = time.perf_counter()
        chains = _sample_stage(cfg.family, specs, threads)
        stage2_s = time.perf_counter() - t0
        manifest["timings"]["stage2_s"] = stage2_s
        if cfg.save_chains:
            for i, c in enumerate(chains):
                _write_chain_csv(out / f"chain-stage2-{i:02d}.csv", cfg.family, c)
        W2 = build_log_weight_matrix(cfg.family, cfg.skeleton, chains)
        ws = Stage2Workspace(W2, est)
        n, N = ws.n, est.N
        q = cfg.q_override if cfg.q_override is not None else n / N
        t0 = time.perf_counter()
        records = surface(ws, cfg.grid, cfg.functions)
        surface_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        breakdowns = attach_standard_errors(ws, records, est.sigma_hat, q,
                                            cfg.functions, cfg.spectral)
        variance_s = time.perf_counter() - t0
        manifest["timings"]["surface_s"] = surface_s
        manifest["timings"]["t2_s_per_term"] = surface_s / (len(cfg.grid) * n)
        manifest["timings"]["variance_s"] = variance_s
        manifest["sizes"] = {"N": int(N), "n": int(n), "q": q,
                             "k": len(cfg.skeleton), "grid": len(cfg.grid)}
        manifest["d_hat_provenance"] = ("this run" if stage == "both"
                                        else str(ratio_path))
        _write_surface_csv(out / "surface.csv", cfg, records)
        _write_variance_csv(out / "variance.csv", cfg, records, breakdowns)
        totals = [point["bf_cv" if ws.k > 1 else "bf"].total for point in breakdowns]
        imax = int(np.argmax(totals))
        manifest["variance_argmax"] = {"h": list(records[imax].h),
                                       "total": totals[imax]}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    return out


def _exact_surface(cfg: StudyConfig):
    """Exact Bayes factors and posterior expectations on the config grid."""
    family = cfg.family
    h1 = cfg.skeleton[0]
    rows = []
    if isinstance(family, ConjugateToy):
        for h in cfg.grid:
            pes = {f.name: family.exact_pe(f.name, h) for f in cfg.functions}
            rows.append((h, family.exact_bf(h, h1), pes))
    elif isinstance(family, BlvsFamily):
        enum = family.enumeration()
        log_m1 = enum.log_marginal(h1)
        for h in cfg.grid:
            probs = enum.inclusion_probs(h)
            pes = {}
            for f in cfg.functions:
                if f.name.startswith("inclusion:"):
                    pes[f.name] = float(probs[family.names.index(f.name.split(":", 1)[1])])
            rows.append((h, math.exp(enum.log_marginal(h) - log_m1), pes))
    else:
        raise ConfigError("no exact oracle for this model kind")
    return rows


def cmd_oracle(cfg: StudyConfig, estimates_dir: Path | None) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    exact = _exact_surface(cfg)
    names = [f.name for f in cfg.functions]
    with open(out / "oracle.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*cfg.family.coord_names, "bf_exact",
                         *[f"pe_{nm}_exact" for nm in names]])
        for h, bf, pes in exact:
            writer.writerow([*(_fmt(c) for c in h), _fmt(bf),
                             *[_fmt(pes.get(nm)) for nm in names]])

    report = {"grid_points": len(exact)}
    est_dir = estimates_dir or cfg.out_dir
    surface_path = Path(est_dir) / "surface.csv"
    if surface_path.exists():
        with open(surface_path, newline="", encoding="utf-8") as fh:
            est_rows = list(csv.DictReader(fh))
        if len(est_rows) != len(exact):
            raise ConfigError(
                f"{surface_path} has {len(est_rows)} rows, expected {len(exact)}")
        coord_names = cfg.family.coord_names
        for row, (h, _, _) in zip(est_rows, exact):
            got = tuple(float(row[c]) for c in coord_names)
            if any(abs(a - b) > 1e-9 for a, b in zip(got, h)):
                raise ConfigError(f"grid mismatch against {surface_path}: "
                                  f"{got} vs {h}")
        exact_bf = np.array([bf for _, bf, _ in exact])
        for col in ("bf_hat", "bf_cv_hat"):
            est = np.array([float(r[col]) for r in est_rows])
            err = est - exact_bf
            report[f"rmse_{col}"] = float(np.sqrt(np.mean(err**2)))
            report[f"max_abs_err_{col}"] = float(np.max(np.abs(err)))
        se = np.array([float(r["se_bf_cv"]) for r in est_rows])
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, (np.array([float(r["bf_cv_hat"]) for r in est_rows])
                                  - exact_bf) / se, np.nan)
        z = z[np.isfinite(z)]
        if z.size:
            report["z_bf_cv"] = {"mean": float(z.mean()),
                                 "sd": float(z.std(ddof=1)) if z.size > 1 else 0.0,
                                 "max_abs": float(np.max(np.abs(z)))}
        else:
            report["z_bf_cv"] = None
        per_f = {}
        for nm in names:
            exact_pe = np.array([pes[nm] for _, _, pes in exact])
            est = np.array([float(r[f"pe_{nm}"]) for r in est_rows])
            per_f[nm] = {
                "rmse": float(np.sqrt(np.mean((est - exact_pe) ** 2))),
                "max_abs_err": float(np.max(np.abs(est - exact_pe))),
            }
        if per_f:
            report["functions"] = per_f
    with open(out / "comparison.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    return out


def cmd_plan(cfg: StudyConfig, budget_s: float, pilot_length: int,
             threads: int | None) -> Path:
    """Measure t1/t2 and pilot variance components, then solve for q_opt."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    specs1 = [sp.__class__(h=sp.h, length=pilot_length, burn_in=sp.burn_in,
                           seed=sp.seed) for sp in cfg.stage1.chain_specs(cfg.skeleton)]
    t0 = time.perf_counter()
    chains1 = _sample_stage(cfg.family, specs1, threads)
    t1 = (time.perf_counter() - t0) / sum(sp.length + sp.burn_in for sp in specs1)
    W1 = build_log_weight_matrix(cfg.family, cfg.skeleton, chains1)
    est = estimate_ratios(W1, spectral=cfg.spectral)

    specs2 = [sp.__class__(h=sp.h, length=pilot_length, burn_in=sp.burn_in,
                           seed=sp.seed) for sp in cfg.stage2.chain_specs(cfg.skeleton)]
    chains2 = _sample_stage(cfg.family, specs2, threads)
    W2 = build_log_weight_matrix(cfg.family, cfg.skeleton, chains2)
    ws = Stage2Workspace(W2, est)

    # pilot variance components at a few representative grid points
    idxs = sorted({0, len(cfg.grid) // 2, len(cfg.grid) - 1})
    pilots = []
    t0 = time.perf_counter()
    for i in idxs:
        h = cfg.grid[i]
        vec = c_hat(ws, h)
        v1 = float(vec @ est.sigma_hat @ vec) if vec.size else 0.0
        v2 = tau_sq_hat(ws, h, cfg.spectral)
        pilots.append({"h": list(h), "v1": v1, "v2": v2})
    probe_elapsed = time.perf_counter() - t0
    t2 = probe_elapsed / (len(idxs) * ws.n)

    plans = []
    for p in pilots:
        if p["v1"] <= 0 or p["v2"] <= 0:
            continue
        inputs = PlanInputs(t1=max(t1, 1e-12), t2=max(t2, 1e-12),
                            g=len(cfg.grid), T=budget_s, v1=p["v1"], v2=p["v2"])
        sol = q_opt(inputs)
        plans.append({"h": p["h"], "q_opt": sol.q_opt,
                      "n": sol.n, "N": sol.N})
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "t1_s_per_step": t1,
        "t2_s_per_term": t2,
        "grid_points": len(cfg.grid),
        "budget_s": budget_s,
        "pilot_points": pilots,
        "plans": plans,
        "q_opt_spread": ([min(p["q_opt"] for p in plans),
                          max(p["q_opt"] for p in plans)] if plans else None),
    }
    with open(out / "plan.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    return out


def cmd_validate(reps_scale: float, corrupt_dhat: bool) -> int:
    results = run_all(reps_scale=reps_scale, corrupt_dhat=corrupt_dhat)
    failed = 0
    for res in results:
        print(res.line())
        for d in res.details:
            print(f"    {d}")
        failed += 0 if res.passed else 1
    return 1 if failed else 0


def _apply_overrides(cfg: StudyConfig, overrides: list[str]) -> None:
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"bad --seed-override {ov!r}; expected stage1=SEED")
        key, val = ov.split("=", 1)
        if key not in ("stage1", "stage2"):
            raise ConfigError(f"unknown seed override target {key!r}")
        getattr(cfg, key).seed = int(val)
        cfg.raw.setdefault(key, {})["seed"] = int(val)
    if cfg.stage1.seed == cfg.stage2.seed:
        raise ConfigError("stage1 and stage2 seeds must differ")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="priorsweep",
        description="Bayes-factor and posterior-expectation surfaces over a "
                    "prior hyperparameter space from two stages of MCMC runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="two-stage estimation run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--threads", type=int, default=None)
    p_run.add_argument("--seed-override", action="append", default=[],
                       metavar="STAGE=SEED")

    p_or = sub.add_parser("oracle", help="exact surfaces and comparison report")
    p_or.add_argument("--config", required=True)
    p_or.add_argument("--out", default=None)
    p_or.add_argument("--estimates", default=None,
                      help="directory holding surface.csv to compare against")

    p_plan = sub.add_parser("plan", help="stage-allocation planning")
    p_plan.add_argument("--config", required=True)
    p_plan.add_argument("--budget", type=float, required=True,
                        help="total computational budget in seconds")
    p_plan.add_argument("--pilot-length", type=int, default=500)
    p_plan.add_argument("--threads", type=int, default=None)
    p_plan.add_argument("--out", default=None)

    p_val = sub.add_parser("validate", help="run the built-in toy suites")
    p_val.add_argument("--reps-scale", type=float, default=1.0)
    p_val.add_argument("--corrupt-dhat", action="store_true",
                       help="negative control: corrupt d_hat and expect failure")

    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args.reps_scale, args.corrupt_dhat)
        cfg = load_config(args.config)
        if args.out:
            cfg.out_dir = Path(args.out)
        if getattr(args, "threads", None):
            cfg.threads = args.threads
        if args.command == "run":
            _apply_overrides(cfg, args.seed_override)
            out = cmd_run(cfg, args.stage, cfg.threads)
            print(f"wrote {out}")
            return 0
        if args.command == "oracle":
            out = cmd_oracle(cfg, Path(args.estimates) if args.estimates else None)
            print(f"wrote {out / 'oracle.csv'}")
            return 0
        if args.command == "plan":
            out = cmd_plan(cfg, args.budget, args.pilot_length, cfg.threads)
            print(f"wrote {out / 'plan.json'}")
            return 0
        raise ConfigError(f"unknown command {args.command}")
    except (PriorsweepError, OSError, ValueError) as exc:
        print(f"priorsweep: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
