"""``resproxy`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure. Failures print one line ``<TAG>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import datagen, history, oracle, report, training, twin
from .fluid import FluidProperties
from .rates import read_rates_csv, write_rates_csv
from .reservoir import ModelFormatError, load_model, save_model
from .surrogate import ModelMissingError, Surrogate, simulate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class CLIError(Exception):
    def __init__(self, code: int, tag: str, message: str):
        super().__init__(message)
        self.code, self.tag = code, tag


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(EXIT_USAGE, "E_USAGE", message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="resproxy", description="Latent-ODE reservoir surrogate and history matching")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the twin base model, truth model and a scenario dataset")
    _common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--jobs", type=int, help="worker processes for scenario simulation")

    p = sub.add_parser("train", help="fit the surrogate on a dataset")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="model directory (weights.json, weights.f64)")

    p = sub.add_parser("simulate", help="roll a reservoir model forward")
    _common(p)
    p.add_argument("--reservoir", required=True, help="reservoir model directory")
    p.add_argument("--model", help="trained surrogate directory (surrogate engine)")
    p.add_argument("--engine", choices=("surrogate", "oracle"), help="override simulate.engine")
    p.add_argument("--steps", type=int, help="report steps (override simulate.steps)")
    p.add_argument("--out", required=True, help="output directory (states/, rates.csv)")

    p = sub.add_parser("history-match", help="adapt corrections to historical rates")
    _common(p)
    p.add_argument("--model", required=True, help="trained surrogate directory")
    p.add_argument("--reservoir", required=True, help="prior reservoir model directory")
    p.add_argument("--history", required=True, help="historical rates.csv (m3/day)")
    p.add_argument("--out", required=True, help="hm_result directory")

    p = sub.add_parser("report", help="plots and metrics from an hm_result directory")
    _common(p)
    p.add_argument("--hm", required=True, help="hm_result directory")
    p.add_argument("--out", required=True, help="report directory")
    return ap


def _load_surrogate(path) -> Surrogate:
    if path is None:
        raise CLIError(EXIT_DATA, "E_MODEL_MISSING", "no --model given for the surrogate engine")
    try:
        return Surrogate.load(path)
    except ModelMissingError as exc:
        raise CLIError(EXIT_DATA, "E_MODEL_MISSING", str(exc)) from None


def _load_reservoir(path):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise CLIError(EXIT_DATA, "E_DATA", f"reservoir model not found: {exc}") from None


def _fluid_for(*dirs: Path) -> FluidProperties:
    """First fluid found in ``fluid.json`` or a parent ``dataset.json``, else defaults."""
    for d in dirs:
        for cand in (d / "fluid.json", d.parent / "dataset.json"):
            if not cand.exists():
                continue
            data = json.loads(cand.read_text())
            return FluidProperties.from_dict(data.get("fluid", data))
    return FluidProperties()


def cmd_gen_data(args, cfg) -> None:
    out = Path(args.out)
    jobs = args.jobs if args.jobs is not None else cfg["gen.jobs"]
    gen = cfgmod.gen_config(cfg)
    fluid = FluidProperties()
    base = twin.base_model(seed=cfg["twin.seed"], schedule=gen.schedule,
                           injection_m3_day=cfg["twin.injection_m3_day"])
    datagen.build_dataset(base, fluid, cfg["gen.n_scenarios"], gen, cfg["seed"], out, jobs=jobs)
    truth = twin.truth_model(base)
    save_model(truth, out / "twin_truth")
    (out / "twin_truth" / "fluid.json").write_text(json.dumps(fluid.to_dict(), indent=1))
    res = oracle.run(truth, fluid, max_dt_days=gen.max_dt_days)
    write_rates_csv(out / "twin_truth" / "history-rates.csv", res.times, res.well_names, res.rates)
    logging.info("dataset written to %s", out)


def cmd_train(args, cfg) -> None:
    try:
        ds = datagen.load_dataset(args.data)
    except FileNotFoundError as exc:
        raise CLIError(EXIT_DATA, "E_DATA", str(exc)) from None
    res = training.fit(ds.scenarios, cfgmod.train_config(cfg), cfgmod.model_config(cfg), out_dir=args.out,
                       progress=lambda r: logging.info("epoch %(epoch)d train %(train_loss).5g "
                                                       "val %(val_loss).5g", r))
    (Path(args.out) / "fluid.json").write_text(json.dumps(ds.fluid.to_dict(), indent=1))
    (Path(args.out) / "train_config.json").write_text(json.dumps(
        {"train": cfgmod.train_config(cfg).to_dict(), "best_epoch": res.best_epoch,
         "train_ids": res.train_ids, "val_ids": res.val_ids, "seconds": res.seconds}, indent=1))


def cmd_simulate(args, cfg) -> None:
    engine = args.engine or cfg["simulate.engine"]
    steps = args.steps if args.steps is not None else cfg["simulate.steps"]
    res_dir = Path(args.reservoir)
    model = _load_reservoir(res_dir)
    out = Path(args.out)
    if engine == "surrogate":
        sg = _load_surrogate(args.model)
        fluid = _fluid_for(Path(args.model), res_dir)
        if tuple(sg.cfg.grid_shape) != tuple(model.grid.shape):
            raise CLIError(EXIT_DATA, "E_DATA", f"surrogate grid {tuple(sg.cfg.grid_shape)} does not match "
                                                f"reservoir grid {model.grid.shape}")
        res = simulate(sg, model, fluid, steps)
        states, times, rates, names = res.states, res.times[1:], res.rates, res.well_names
    else:
        fluid = _fluid_for(res_dir)
        if steps > len(model.schedule.times) - 1:
            raise CLIError(EXIT_DATA, "E_DATA", f"schedule covers {len(model.schedule.times) - 1} report "
                                                f"steps, {steps} requested")
        report_times = model.schedule.times[1:steps + 1]
        r = oracle.run(model, fluid, report_times=report_times)
        states = np.stack([model.initial_state.as_cube()] + [s.as_cube() for s in r.states])
        times, rates, names = r.times, r.rates, r.well_names
    (out / "states").mkdir(parents=True, exist_ok=True)
    for k, cube in enumerate(states):
        np.ascontiguousarray(cube, dtype="<f8").tofile(out / "states" / f"{k:04d}.f64")
    write_rates_csv(out / "rates.csv", times, names, rates)
    (out / "simulation.json").write_text(json.dumps(
        {"engine": engine, "steps": int(len(times)), "grid_shape": list(model.grid.shape),
         "state_channels": ["pressure_pa", "sat_water", "sat_oil"]}, indent=1))


def cmd_history_match(args, cfg) -> None:
    sg = _load_surrogate(args.model)
    model = _load_reservoir(Path(args.reservoir))
    fluid = _fluid_for(Path(args.model), Path(args.reservoir))
    try:
        times, wells, hist = read_rates_csv(args.history)
    except FileNotFoundError:
        raise CLIError(EXIT_DATA, "E_DATA", f"history file not found: {args.history}") from None
    names = [w.name for w in model.wells]
    if set(wells) != set(names):
        raise CLIError(EXIT_DATA, "E_DATA", f"history wells {wells} do not match model wells {names}")
    hist = hist[:, [wells.index(n) for n in names]]
    n_adapt, n_fc = cfg["hm.adapt_steps"], cfg["hm.forecast_steps"]
    if hist.shape[0] < n_adapt + n_fc:
        raise CLIError(EXIT_DATA, "E_DATA", f"history has {hist.shape[0]} report steps, need "
                                            f"{n_adapt + n_fc} (adaptation + forecast)")
    hmc = cfgmod.hm_config(cfg)
    res = history.adapt(sg, model, fluid, hist, n_adapt, hmc,
                        progress=lambda c: logging.info("iter %(iteration)d loss %(loss).5g", c))
    n = n_adapt + n_fc
    pred = history.corrected_rates(sg, model, fluid, res.corrections, n, hmc.factor)
    history.save_result(args.out, res, hmc, model, hist[:n], pred, n_adapt, times)


def cmd_report(args, cfg) -> None:
    hm = Path(args.hm)
    if not (hm / "summary.json").exists():
        raise CLIError(EXIT_DATA, "E_DATA", f"{hm} is not an hm_result directory (missing summary.json)")
    report.build_report(hm, args.out)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "simulate": cmd_simulate,
            "history-match": cmd_history_match, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CLIError(EXIT_USAGE, "E_USAGE", "missing command; see resproxy --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        try:
            cfg = cfgmod.load(args.config, args.set)
        except cfgmod.ConfigError as exc:
            raise CLIError(EXIT_USAGE, "E_USAGE", str(exc)) from None
        if args.print_config:
            print(cfgmod.dumps(cfg))
            return EXIT_OK
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except CLIError as exc:
        print(f"{exc.tag}: {exc}", file=sys.stderr)
        return exc.code
    except (FloatingPointError, oracle.SolverError, oracle.SaturationRangeError) as exc:
        print(f"E_NUMERIC: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ModelFormatError, FileNotFoundError, KeyError) as exc:
        print(f"E_DATA: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
