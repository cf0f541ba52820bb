"""Command-line interface.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .coxcore import build_risk_structure
from .dataio import (DatasetManifest, artifact_curves, build_artifact, json_safe,
                     load_activity, load_dataset, load_manifest, read_artifact, write_artifact, write_csv,
                     write_dataset, write_functional_long, write_manifest)
from .design import DesignBuilder, backtransform
from .errors import ConfigurationError, FuncoxError, InputError, NumericalError
from .lmoments import diurnal_profiles
from .simulate import (SimConfig, StudySettings, augment_with_pseudo, generate_dataset,
                       mc_curve_summary, run_mc_study, selection_stability)
from .solver import PenaltyConfig, fit
from .tuning import (DEFAULT_PSI_GRID, adaptive_configuration, adaptive_weights, grid_search,
                     initial_curves)

log = logging.getLogger("funcox")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or any(not np.isfinite(v) or v < 0 for v in vals):
        raise argparse.ArgumentTypeError(f"expected nonnegative finite numbers, got {text!r}")
    return vals


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _window(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:END in hours, got {text!r}")
    return lo, hi


def _grid_hours(ds, window):
    """Hour value of every grid point: the grid itself, or mapped linearly onto a window."""
    if window is None:
        return ds.grid
    lo, hi = window
    g = ds.grid
    return lo + (g - g[0]) / (g[-1] - g[0]) * (hi - lo)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--penalty", choices=("mcp", "lasso"), default="mcp")
    p.add_argument("--phi", type=float, default=3.0, help="MCP concavity (> 1)")
    p.add_argument("--adaptive", action="store_true",
                   help="two-stage fit with adaptive group weights")
    p.add_argument("--adaptive-mode", choices=("lambda", "absorbed"), default="lambda")
    p.add_argument("--no-size-scaling", action="store_true",
                   help="use the same lambda for every group regardless of its dimension")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--num-basis", type=int, default=10)
    p.add_argument("--bic-sample-size", choices=("events", "n"), default="events")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funcox", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"funcox {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit at a fixed (lambda, psi)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--psi", type=float, required=True)
    _add_model_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("tune", help="EBIC grid search over (lambda, psi)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lambda-grid", type=_float_list, default=None)
    p.add_argument("--psi-grid", type=_float_list, default=list(DEFAULT_PSI_GRID))
    p.add_argument("--n-lambda", type=_positive_int, default=50)
    p.add_argument("--lambda-ratio", type=float, default=1e-3)
    p.add_argument("--spot-checks", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo selection and estimation study")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--replicates", type=_positive_int, default=200)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--method", choices=("vsfcox", "grplasso"), default="vsfcox")
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--adaptive-mode", choices=("lambda", "absorbed"), default="lambda")
    p.add_argument("--no-size-scaling", action="store_true")
    p.add_argument("--psi-grid", type=_float_list, default=list(DEFAULT_PSI_GRID))
    p.add_argument("--n-lambda", type=_positive_int, default=50)
    p.add_argument("--threads", type=_positive_int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="write one simulated dataset")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("lmoments", help="diurnal L-moment profiles from minute-level activity")
    p.add_argument("--activity-file", required=True)
    p.add_argument("--orders", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--zeta", type=float, default=5 / 60, help="half window in hours")
    p.add_argument("--window", type=_window, default=(6.0, 22.0))
    p.add_argument("--log1p", action="store_true")
    p.add_argument("--min-days", type=int, default=4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pseudo-augment", help="append random functional pseudo covariates")
    p.add_argument("--manifest", required=True)
    p.add_argument("--count", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-hours", type=_window, default=None,
                   help="map the grid linearly onto START:END hours (default: grid is hours)")
    p.add_argument("--out", required=True, help="output manifest path")

    p = sub.add_parser("stability", help="selection percentages under pseudo augmentation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pseudo", type=int, default=10)
    p.add_argument("--reps", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-hours", type=_window, default=None,
                   help="map the grid linearly onto START:END hours (default: grid is hours)")
    p.add_argument("--psi-grid", type=_float_list, default=list(DEFAULT_PSI_GRID))
    p.add_argument("--threads", type=_positive_int, default=None)
    _add_model_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-curves", help="coefficient functions of a fit as CSV")
    p.add_argument("--artifact", required=True)
    p.add_argument("--grid-points", type=_positive_int, default=200)
    p.add_argument("--out", required=True)
    return parser


def _penalty(args) -> PenaltyConfig:
    return PenaltyConfig(args.penalty, 0.0, args.phi, size_scaling=not args.no_size_scaling)


def _model_config(args) -> dict:
    return {"penalty": args.penalty, "phi": args.phi, "adaptive": args.adaptive,
            "adaptive_mode": args.adaptive_mode, "size_scaling": not args.no_size_scaling,
            "degree": args.degree, "num_basis": args.num_basis,
            "bic_sample_size": args.bic_sample_size}


def _adaptive_setup(builder, penalty, args):
    """Weights from the EBIC-optimal non-adaptive fit, translated per mode."""
    initial = grid_search(builder, None, DEFAULT_PSI_GRID, penalty,
                          sample_size=args.bic_sample_size)
    a, b = builder.bases[0].domain
    grid = np.linspace(a, b, 201)
    f, f2 = initial_curves(initial, builder, grid)
    w, v = adaptive_weights(f, f2, grid)
    gw, rw, qw = adaptive_configuration(w, v, args.adaptive_mode)
    penalty = PenaltyConfig(penalty.family, penalty.lam, penalty.phi, penalty.scalar_weights,
                            gw, penalty.size_scaling)
    return penalty, rw, qw


def cmd_fit(args) -> None:
    ds = load_dataset(args.manifest)
    builder = DesignBuilder(ds, degree=args.degree, num_basis=args.num_basis)
    penalty = _penalty(args)
    rw = qw = None
    if args.adaptive:
        penalty, rw, qw = _adaptive_setup(builder, penalty, args)
    design = builder.build(args.psi, rw, qw)
    rs = build_risk_structure(ds.y, ds.delta)
    res = fit(design, rs, penalty.with_lambda(args.lam))
    coefs = backtransform(res.theta, design, builder.bases, ds.grid)
    config = {"command": "fit", "manifest": str(args.manifest), "lambda": args.lam,
              "psi": args.psi, **_model_config(args)}
    write_artifact(build_artifact(ds, res, design, builder.bases, coefs, config=config), args.out)


def cmd_tune(args) -> None:
    ds = load_dataset(args.manifest)
    builder = DesignBuilder(ds, degree=args.degree, num_basis=args.num_basis)
    penalty = _penalty(args)
    rw = qw = None
    if args.adaptive:
        penalty, rw, qw = _adaptive_setup(builder, penalty, args)
    surface = grid_search(builder, args.lambda_grid, args.psi_grid, penalty,
                          n_lambda=args.n_lambda, lambda_ratio=args.lambda_ratio,
                          r_weights=rw, q_weights=qw, sample_size=args.bic_sample_size,
                          spot_checks=args.spot_checks, seed=args.seed)
    best = surface.best
    design = surface.best_design
    coefs = backtransform(best.fit.theta, design, builder.bases, ds.grid)
    config = {"command": "tune", "manifest": str(args.manifest),
              "lambda_grid": args.lambda_grid, "psi_grid": args.psi_grid,
              "n_lambda": args.n_lambda, "lambda_ratio": args.lambda_ratio,
              **_model_config(args)}
    doc = build_artifact(ds, best.fit, design, builder.bases, coefs, config=config,
                         seed=args.seed, surface=surface)
    write_artifact(doc, args.out)
    out = Path(args.out)
    rows = surface.rows()
    cols = list(rows[0].keys())
    write_csv(out.with_name(out.stem + "_surface.csv"), cols,
              ([r[c] for c in cols] for r in rows))


def cmd_simulate(args) -> None:
    config = SimConfig(n=args.n, n_replicates=args.replicates, seed=args.seed)
    settings = StudySettings(args.method, args.adaptive, args.adaptive_mode,
                             psi_grid=tuple(args.psi_grid), n_lambda=args.n_lambda,
                             size_scaling=not args.no_size_scaling)
    metrics = run_mc_study(config, settings, threads=args.threads)
    write_study(metrics, Path(args.out))
    if metrics.n_ok == 0:
        raise NumericalError("every replicate failed")


def write_study(metrics, out: Path) -> None:
    """Selection, estimation, per-replicate and curve tables plus a JSON summary."""
    out.mkdir(parents=True, exist_ok=True)
    cfg, st = metrics.config, metrics.settings
    label = st.method + ("-adaptive" if st.adaptive else "")
    write_csv(out / "selection.csv",
              ["n", "method", "type", "tpr", "fpr", "model_size", "replicates", "failed"],
              ([cfg.n, label, key, metrics.tpr.get(key, np.nan), metrics.fpr.get(key, np.nan),
                metrics.avg_model_size, len(metrics.records), metrics.n_failed]
               for key in ("scalar", "functional", "all")))
    est = []
    for j, idx in enumerate(cfg.true_scalar_set):
        b = metrics.bias[j] if metrics.bias is not None else np.nan
        m = metrics.mse[j] if metrics.mse is not None else np.nan
        est.append([cfg.n, label, f"beta{idx + 1}", cfg.true_beta[idx], b, m])
    write_csv(out / "estimation.csv", ["n", "method", "coefficient", "truth", "bias", "mse"], est)
    write_csv(out / "mise.csv", ["n", "method", "function", "mise"],
              ([cfg.n, label, f"beta{g + 1}(s)",
                metrics.mise[j] if metrics.mise is not None else np.nan]
               for j, g in enumerate(cfg.true_group_set)))
    rep_rows = []
    for r in metrics.records:
        if r.ok:
            rep_rows.append([r.replicate, "", r.censoring, r.lam, r.psi, r.ebic, r.failed_cells,
                             ";".join(str(j + 1) for j in np.flatnonzero(r.selected_scalars)),
                             ";".join(str(g + 1) for g in np.flatnonzero(r.selected_groups))]
                            + list(r.beta[cfg.true_scalar_set]))
        else:
            rep_rows.append([r.replicate, r.error, r.censoring] + [np.nan] * 4 + ["", ""]
                            + [np.nan] * len(cfg.true_scalar_set))
    write_csv(out / "replicates.csv",
              ["replicate", "error", "censoring", "lambda", "psi", "ebic", "failed_cells",
               "selected_scalars", "selected_functional"]
              + [f"beta{j + 1}_hat" for j in cfg.true_scalar_set], rep_rows)
    for g, table in mc_curve_summary(metrics).items():
        write_csv(out / f"curve_beta{g + 1}.csv", ["s", "truth", "mc_mean", "q025", "q975"], table)
    summary = {"config": asdict(cfg), "settings": asdict(st), "summary": metrics.summary(),
               "bias": metrics.bias, "mse": metrics.mse, "mise": metrics.mise}
    (out / "summary.json").write_text(json.dumps(json_safe(summary), indent=2) + "\n",
                                      encoding="utf-8")


def cmd_generate(args) -> None:
    ds, _ = generate_dataset(SimConfig(n=args.n, seed=args.seed), args.replicate)
    write_dataset(ds, args.out, "sim", {"seed": args.seed, "replicate": args.replicate})


def cmd_lmoments(args) -> None:
    records, valid = load_activity(args.activity_file)
    prof = diurnal_profiles(records, args.orders, args.zeta, log1p=args.log1p,
                            window=args.window, valid_days=valid, min_days=args.min_days)
    for sid, why in sorted(prof.rejected.items()):
        print(f"rejected subject {sid}: {why}", file=sys.stderr)
    out = Path(args.out)
    names = [f"L{o}" for o in prof.orders]
    blocks = [prof.block(o) for o in prof.orders]
    write_functional_long(out, prof.subject_ids, names, blocks)
    write_csv(out.with_name(out.stem + "_grid.csv"), ["grid_index", "s_value"],
              enumerate(prof.grid))


def cmd_pseudo_augment(args) -> None:
    man = load_manifest(args.manifest)
    ds = load_dataset(man)
    aug = augment_with_pseudo(ds, args.count, args.seed, _grid_hours(ds, args.grid_hours))
    out = Path(args.out)
    stem = out.stem
    func_file = f"{stem}_functional.csv"
    write_functional_long(out.parent / func_file, aug.subject_ids, aug.functional_names,
                          aug.functional)
    grid_file = f"{stem}_grid.csv"
    write_csv(out.parent / grid_file, ["grid_index", "s_value"], enumerate(aug.grid))
    base = man.base_dir.resolve()

    def rel(name):
        if name is None:
            return None
        target = (base / name).resolve()
        try:
            return str(target.relative_to(out.parent.resolve()))
        except ValueError:
            return str(target)

    opts = dict(man.options)
    opts.update({"pseudo_count": args.count, "pseudo_seed": args.seed})
    write_manifest(DatasetManifest(rel(man.survival_file), func_file, grid_file,
                                   rel(man.scalar_file), opts), out)


def cmd_stability(args) -> None:
    ds = load_dataset(args.manifest)
    settings = StudySettings("vsfcox" if args.penalty == "mcp" else "grplasso", args.adaptive,
                             args.adaptive_mode, args.phi, tuple(args.psi_grid),
                             sample_size=args.bic_sample_size,
                             size_scaling=not args.no_size_scaling, degree=args.degree,
                             num_basis=args.num_basis)
    res = selection_stability(ds, args.pseudo, args.reps, args.seed, settings,
                              hours=_grid_hours(ds, args.grid_hours), threads=args.threads)
    write_csv(args.out, ["variable", "kind", "selected_pct"],
              zip(res.names, res.kinds, res.percentages))
    if res.n_failed:
        print(f"{res.n_failed} of {res.n_runs} runs failed; first: {res.errors[0]}",
              file=sys.stderr)


def cmd_export_curves(args) -> None:
    doc = read_artifact(args.artifact)
    grid, vals = artifact_curves(doc, args.grid_points)
    names = doc["functional_names"]
    write_csv(args.out, ["s"] + names,
              ([grid[i]] + [vals[k, i] for k in range(len(names))] for i in range(grid.size)))


COMMANDS = {"fit": cmd_fit, "tune": cmd_tune, "simulate": cmd_simulate,
            "generate": cmd_generate, "lmoments": cmd_lmoments,
            "pseudo-augment": cmd_pseudo_augment, "stability": cmd_stability,
            "export-curves": cmd_export_curves}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigurationError, InputError) as exc:
        print(f"funcox {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FuncoxError) as exc:
        print(f"funcox {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
