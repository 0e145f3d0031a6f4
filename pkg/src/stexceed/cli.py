"""Command-line interface: ``python -m stexceed <command>``.

Exit status is 0 on success; failures print ``error [stage]: message`` to
stderr and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import io

__all__ = ["main", "build_parser"]


def _scheme(args):
    from .likelihood import PairScheme

    return PairScheme(args.max_distance, args.max_lag)


def cmd_ingest(args):
    data = io.ingest(args.coords, args.observations, max_missing=args.max_missing, months=args.months)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.export(data, out / "coords.csv", out / "observations.csv")
    data.report.to_csv(out / "ingest_report.csv", index=False, float_format=io.FLOAT_FORMAT)
    print(f"{data.n_sites} stations x {data.times.size} times written to {out}")


def cmd_margins(args):
    data = io.ingest(args.coords, args.observations, max_missing=args.max_missing, months=args.months)
    fits = io.fit_margins(data, args.threshold_order, args.convention, args.min_exceedances, standard_errors=True)
    pd.DataFrame([asdict(f) for f in fits]).to_csv(args.out, index=False, float_format=io.FLOAT_FORMAT)
    print(f"{sum(f.ok for f in fits)} of {len(fits)} stations fitted; table in {args.out}")


def cmd_transform(args):
    data = io.ingest(args.coords, args.observations, max_missing=args.max_missing, months=args.months)
    table = pd.read_csv(args.margins, dtype={"station_id": str})
    fits = []
    for row in table.to_dict("records"):
        err = row.get("error")
        row["error"] = None if err is None or (isinstance(err, float) and np.isnan(err)) else str(err)
        fits.append(io.MarginalFit(**row))
    q = args.threshold_order if args.convention == "all" else None
    panel = io.to_common_margins(data, fits, q, args.convention)
    io.write_panel(panel, args.out)
    print(f"transformed panel ({panel.n_sites} x {panel.n_times}, censoring rate {panel.meta['censoring_rate']:.6g}) in {args.out}")


def cmd_fit(args):
    panel = io.read_panel(args.panel)
    kappa = panel.meta.get("censoring_rate", args.censoring_rate)
    cfg = io.RunConfig(
        max_distance=args.max_distance, max_lag=args.max_lag, maxfev=args.maxfev, restarts=args.restarts,
        multistart=args.multistart, compute_se=not args.no_se, seed=args.seed, n_threads=args.threads,
        families=[args.family],
        init={args.family: json.loads(args.init)} if args.init else {},
    )
    res = io.fit_family(args.family, panel, _scheme(args), cfg, kappa)
    Path(args.out).write_text(res.to_json())
    print(json.dumps({"family": args.family, "estimates": res.estimates, "pl_value": res.pl_value,
                      "clic_star": res.clic_star}, indent=2))


def cmd_compare(args):
    panel = io.read_panel(args.panel)
    kappa = panel.meta.get("censoring_rate", args.censoring_rate)
    cfg = io.RunConfig(
        max_distance=args.max_distance, max_lag=args.max_lag, maxfev=args.maxfev, seed=args.seed,
        families=args.families, compute_se=True, n_threads=args.threads,
    )
    rows = []
    for fam in args.families:
        res = io.fit_family(fam, panel, _scheme(args), cfg, kappa)
        rows.append({"family": fam, "n_free": len(res.free), "pl_value": res.pl_value,
                     "clic": res.clic, "clic_star": res.clic_star})
    table = pd.DataFrame(rows)
    table.to_csv(args.out, index=False, float_format=io.FLOAT_FORMAT)
    print(table.to_string(index=False))


def cmd_simulate(args):
    from .simulate import SimulationDesign, scenario_a, scenario_b, simulate_panel, uniform_sites

    params = scenario_a() if args.scenario == "A" else scenario_b(args.semi_axis2)
    design = SimulationDesign(uniform_sites(args.sites, args.seed), np.arange(1, args.times + 1, dtype=float), args.seed)
    panel = simulate_panel(design, params, n_threads=args.threads)
    panel.site_ids = [f"S{i:03d}" for i in range(panel.n_sites)]
    panel.meta.update({"scenario": args.scenario, "censoring_rate": params.censoring_rate})
    io.write_panel(panel, args.out)
    print(f"simulated {panel.n_sites} x {panel.n_times} panel, exceedance rate {np.mean(panel.values > 0):.4f}, in {args.out}")


def cmd_diagnose(args):
    from .diagnostics import chi_curve

    panel = io.read_panel(args.panel)
    frames = [chi_curve(panel, q, k, args.bins) for q in args.quantiles for k in args.lags]
    table = pd.concat(frames, ignore_index=True)
    table.to_csv(args.out, index=False, float_format=io.FLOAT_FORMAT)
    print(f"{len(table)} rows written to {args.out}")


def cmd_run(args):
    cfg = io.RunConfig.load(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    out = io.run(cfg)
    print(f"run complete: {out}")


def _data_args(p):
    p.add_argument("--coords", required=True, help="coordinates CSV")
    p.add_argument("--observations", required=True, help="long-format observations CSV")
    p.add_argument("--max-missing", type=float, default=0.7, help="drop stations with at least this missing fraction")
    p.add_argument("--months", type=int, nargs="*", default=None, help="keep only these calendar months")


def _margin_args(p):
    p.add_argument("--threshold-order", type=float, default=0.99)
    p.add_argument("--convention", choices=("all", "wet"), default="all")
    p.add_argument("--min-exceedances", type=int, default=30)


def _pair_args(p):
    p.add_argument("--panel", required=True, help="transformed panel directory")
    p.add_argument("--max-distance", type=float, default=1.0)
    p.add_argument("--max-lag", type=int, default=15)
    p.add_argument("--maxfev", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--censoring-rate", type=float, default=9.0, help="used when the panel metadata lacks it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stexceed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="align raw station files and report missing data")
    _data_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("margins", help="per-station GP fits above empirical thresholds")
    _data_args(p)
    _margin_args(p)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_margins)

    p = sub.add_parser("transform", help="map excesses to common margins")
    _data_args(p)
    _margin_args(p)
    p.add_argument("--margins", required=True, help="table written by the margins command")
    p.add_argument("--out", required=True, help="output panel directory")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("fit", help="fit one dependence family by pairwise likelihood")
    _pair_args(p)
    p.add_argument("--family", choices=io.FAMILY_CHOICES, default="hierarchical")
    p.add_argument("--init", help="JSON object of starting values")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--multistart", type=int, default=0)
    p.add_argument("--no-se", action="store_true", help="skip Godambe standard errors and CLIC")
    p.add_argument("--out", required=True, help="output JSON")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="fit several families and tabulate CLIC")
    _pair_args(p)
    p.add_argument("--families", nargs="+", choices=io.FAMILY_CHOICES,
                   default=["hierarchical", "hierarchical_static", "gauss_separable"])
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simulate", help="simulate a scenario panel")
    p.add_argument("--scenario", choices=("A", "B"), default="A")
    p.add_argument("--semi-axis2", type=float, default=0.3, help="second semi-axis in scenario B")
    p.add_argument("--sites", type=int, default=20)
    p.add_argument("--times", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output panel directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="empirical chi and chibar curves against distance")
    p.add_argument("--panel", required=True)
    p.add_argument("--quantiles", type=float, nargs="+", default=[0.95, 0.99])
    p.add_argument("--lags", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("run", help="end-to-end analysis from a YAML or JSON configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except io.RunError as err:
        print(f"error [{err.stage}]: {err.__cause__ or err}", file=sys.stderr)
        return 1
    except (ValueError, OSError, np.linalg.LinAlgError) as err:
        print(f"error [{args.command}]: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
