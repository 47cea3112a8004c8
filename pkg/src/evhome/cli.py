"""Command-line interface.

Subcommands: ``simulate`` (year run, metrics + ledger), ``train`` (fit and
save a forecaster), ``sweep`` (scenario A/B grid over gamma, capacity and
load multiplier), ``verify`` (oracle and gradient suites) and ``report``
(summaries from a saved ledger).

Exit codes: 0 success, 1 input/configuration error, 2 numerical-quality
failure (failed verification or too many solver failures).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data_io, engine, forecaster, verification
from .errors import DomainError, SimulationFault, ValidationError

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_QUALITY = 2

_TABLE_FIELDS = ("fc", "ec", "bc", "bd", "bd_cal", "bd_cyc", "e_batt_kwh")


def _print_metrics_row(label: str, m: engine.YearlyMetrics) -> None:
    print(f"{label:>10s}  FC {m.fc:12.2f}  EC {m.ec:12.2f}  BC {m.bc:9.2f}  "
          f"BD {m.bd:6.3f}%  BD_cal {m.bd_cal:6.3f}%  BD_cyc {m.bd_cyc:6.3f}%  "
          f"E_batt {m.e_batt_kwh:10.1f} kWh")


def _cmd_simulate(args: argparse.Namespace) -> int:
    app = data_io.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenarios = ["A", "B"] if args.scenario == "both" else [args.scenario]
    results = {}
    for scenario in scenarios:
        cfg = engine.prepare_simulation(
            app, scenario=scenario, gamma=args.gamma, seed=args.seed,
            capacity_kwh=args.capacity_kwh,
            load_multiplier=args.load_multiplier,
            model_path=args.model, no_forecast=args.no_forecast)
        metrics = engine.run_year(cfg)
        results[scenario] = metrics
        suffix = f"_{scenario}" if len(scenarios) > 1 else ""
        metrics.write_json(out / f"metrics{suffix}.json")
        metrics.ledger.write_csv(out / f"ledger{suffix}.csv")
        _print_metrics_row(f"scenario {scenario}", metrics)
        if metrics.solver_failures > args.max_solver_failures:
            print(f"solver failures: {metrics.solver_failures} "
                  f"(> {args.max_solver_failures})", file=sys.stderr)
            return EXIT_QUALITY
    if len(scenarios) == 2:
        gain = results["B"].fc - results["A"].fc
        print(f"economic gain (FC_B - FC_A): {gain:.2f} EUR/yr")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    app = data_io.load_config(args.config)
    seed = app.simulation.rng_seed if args.seed is None else args.seed
    if app.simulation.load_csv_paths:
        paths = [app.resolve(p.strip())
                 for p in app.simulation.load_csv_paths.split(",") if p.strip()]
        dataset = data_io.load_household_csv(paths)
    else:
        dataset = data_io.generate_synthetic_load(
            app.simulation.synthetic_load_kind,
            {"mean_kwh": app.simulation.synthetic_load_mean_kwh,
             "noise_std_kwh": 0.05, "n_series": 2},
            rng_seed=seed + 202)
    dense = tuple(int(u) for u in app.forecaster.dense_units.split(","))
    cfg = forecaster.TrainingConfig(
        batch_size=app.forecaster.batch_size,
        epochs=args.epochs or app.forecaster.epochs,
        learning_rate=app.forecaster.learning_rate,
        rng_seed=seed,
        hidden_units=app.forecaster.hidden_units,
        dense_units=dense)
    model = forecaster.train(dataset, cfg)
    forecaster.save_model(model, args.model)
    print(f"trained {cfg.epochs} epochs: loss {model.epoch_losses[0]:.6f} -> "
          f"{model.epoch_losses[-1]:.6f}; saved to {args.model}")
    return EXIT_OK


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _cmd_sweep(args: argparse.Namespace) -> int:
    app = data_io.load_config(args.config)
    base = engine.prepare_simulation(app, scenario="A", seed=args.seed,
                                     no_forecast=True)
    cells = engine.run_sweep(base, _parse_floats(args.gammas),
                             _parse_floats(args.capacities),
                             _parse_floats(args.load_multipliers),
                             max_workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    engine.write_sweep_csv(cells, out / "sweep.csv")
    print(f"{len(cells)} sweep cells -> {out / 'sweep.csv'}")
    if args.plot:
        _plot_sweep(cells, out / "sweep.png")
    return EXIT_OK


def _plot_sweep(cells: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    styles = {1.0: "-", 4.0: "--", 8.0: "-."}
    caps = sorted({c["capacity_kwh"] for c in cells})
    for cap in caps:
        for mult in sorted({c["load_multiplier"] for c in cells}):
            pts = sorted([(c["gamma"], c["gain"]) for c in cells
                          if c["capacity_kwh"] == cap
                          and c["load_multiplier"] == mult])
            if pts:
                ax.plot(*zip(*pts), styles.get(mult, "-"),
                        label=f"{cap:g} kWh x{mult:g}")
    ax.set_xlabel("price ratio")
    ax.set_ylabel("economic gain (EUR/yr)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    print(f"plot -> {path}")


def _cmd_verify(args: argparse.Namespace) -> int:
    oracle = verification.run_oracle_checks(
        n_cases=args.oracle_cases, seed=args.seed,
        upper_tol=args.tolerance)
    grads = verification.run_gradient_checks(
        n_points=args.gradient_points, seed=args.seed)
    report = {"oracle": oracle, "gradients": grads,
              "passed": oracle["passed"] and grads["passed"]}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "verify_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"oracle: {oracle['n_cases'] - oracle['n_failures']}/"
          f"{oracle['n_cases']} passed "
          f"(max upper gap {oracle['max_upper_gap']:.2e}, "
          f"max lower gap {oracle['max_lower_gap']:.2e})")
    print("gradient worst relative errors: "
          + ", ".join(f"{k}={v:.2e}"
                      for k, v in grads["worst_rel_error"].items()))
    return EXIT_OK if report["passed"] else EXIT_QUALITY


def _cmd_report(args: argparse.Namespace) -> int:
    import csv
    path = Path(args.ledger)
    if not path.exists():
        raise ValidationError(f"ledger not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: empty ledger")
    total = lambda col: sum(float(r[col]) for r in rows)
    print(f"hours: {len(rows)}")
    print(f"EC {total('ec'):12.2f} EUR   BC {total('bc'):9.2f} EUR   "
          f"FC {total('ec') + total('bc'):12.2f} EUR")
    print(f"G2V {total('e_g2v'):10.1f} kWh  G2H {total('e_g2h'):10.1f} kWh  "
          f"V2G {total('e_v2g'):10.1f} kWh  V2H {total('e_v2h'):10.1f} kWh")
    print(f"BD {total('bd_increment'):8.4f} %   slack {total('s'):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evhome",
        description="Vehicle-home-grid energy management simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one simulated year")
    sim.add_argument("--config", default=None, help="INI run configuration")
    sim.add_argument("--scenario", choices=["A", "B", "both"], default="A")
    sim.add_argument("--gamma", type=float, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", default="out")
    sim.add_argument("--model", default=None, help="forecaster weights file")
    sim.add_argument("--no-forecast", action="store_true",
                     help="use actual load as its own prediction")
    sim.add_argument("--capacity-kwh", type=float, default=None)
    sim.add_argument("--load-multiplier", type=float, default=None)
    sim.add_argument("--max-solver-failures", type=int, default=10)
    sim.set_defaults(func=_cmd_simulate)

    tr = sub.add_parser("train", help="train and save the load forecaster")
    tr.add_argument("--config", default=None)
    tr.add_argument("--model", required=True, help="output weights file (.npz)")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.set_defaults(func=_cmd_train)

    sw = sub.add_parser("sweep", help="scenario A/B parameter sweep")
    sw.add_argument("--config", default=None)
    sw.add_argument("--gammas", default="0,0.25,0.5,0.75,1")
    sw.add_argument("--capacities", default="41,61.5,82,102.5")
    sw.add_argument("--load-multipliers", default="1,4,8")
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--out", default="out")
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--plot", action="store_true")
    sw.set_defaults(func=_cmd_sweep)

    ver = sub.add_parser("verify", help="oracle and gradient quality suites")
    ver.add_argument("--oracle-cases", type=int, default=50)
    ver.add_argument("--gradient-points", type=int, default=100)
    ver.add_argument("--tolerance", type=float, default=1e-3)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--out", default="out")
    ver.set_defaults(func=_cmd_verify)

    rep = sub.add_parser("report", help="summarize a saved ledger")
    rep.add_argument("--ledger", required=True)
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SimulationFault as exc:
        print(f"simulation fault: {exc}", file=sys.stderr)
        return EXIT_QUALITY


if __name__ == "__main__":
    sys.exit(main())
