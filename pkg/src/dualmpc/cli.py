"""Command line entry point ``dualmpc``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .belief import BeliefState, GaussianBelief
from .config import read_benchmark
from .controller import ControllerState, RecedingHorizonController
from .model import ConfigurationError
from .simharness import SimulationLog, StatsBundle, monte_carlo
from .tree import expand


def _controllers(choice: str) -> tuple:
    return ("dmpc", "cempc") if choice == "both" else (choice,)


def cmd_simulate(args) -> int:
    bench = read_benchmark(args.config)
    out = Path(args.out)
    bundle = monte_carlo(bench, args.runs, _controllers(args.controller), args.seed, args.jobs, out)
    for kind, stats in bundle.controllers.items():
        print(f"{kind}: {stats.n_runs} runs, {len(stats.failures)} failed")
    if not args.no_plots and not bundle.empty:
        from .plotting import emit_plots

        emit_plots(bundle, out, bench.plot)
    return 0 if not any(s.failures for s in bundle.controllers.values()) else 1


def _read_state(path: Path, step: int, bench):
    text = path.read_text()
    if "step" in next(line for line in text.splitlines() if not line.startswith("#")):
        log = SimulationLog.from_csv(path)
        if not 0 <= step < log.states.shape[0]:
            raise ConfigurationError(f"step {step} outside the logged range 0..{log.states.shape[0] - 1}")
        params = tuple(
            GaussianBelief(log.param_means[m][step], np.diag(log.param_vars[m][step]))
            for m in range(len(log.param_means))
        )
        return log.states[step], BeliefState(log.mode_probs[step], params), step
    row = [v for v in text.replace("\n", ",").split(",") if v.strip()]
    return np.array([float(v) for v in row]), BeliefState.prior(bench.models), step


def cmd_dump_tree(args) -> int:
    bench = read_benchmark(args.config)
    x, belief, k = _read_state(Path(args.state), args.step, bench)
    if x.size != bench.models.state_dim:
        raise ConfigurationError(f"state has {x.size} entries, model expects {bench.models.state_dim}")
    ctrl = RecedingHorizonController(bench.models, bench.cost, bench.scenario, "dmpc", args.seed)
    state = ControllerState(belief, None, k)
    bank = ctrl.build_objective(state, x).bank  # the step below redraws the same bank
    u, new_state, diag = ctrl.step(state, x)
    plan = new_state.previous_plan
    tree = expand(x, belief, plan.stage_inputs, bench.models, ctrl.topology, bank, bench.scenario.caps)
    doc = tree.to_dict()
    doc["applied_input"] = u.tolist()
    doc["objective"] = diag.objective
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_plot(args) -> int:
    from .plotting import emit_plots

    bundle = StatsBundle.from_dir(args.stats)
    plot_cfg = read_benchmark(args.config).plot if args.config else {}
    for path in emit_plots(bundle, args.out or args.stats, plot_cfg):
        print(path)
    return 0


def cmd_validate(args) -> int:
    from .validation import run_checks

    return 0 if run_checks(verbose=True) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualmpc", description="Sampling-based dual MPC with structural and parametric uncertainty.")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings from the controller")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="closed-loop Monte Carlo of the benchmark")
    s.add_argument("--config", default=None, help="benchmark JSON (default: bundled aircraft benchmark)")
    s.add_argument("--controller", choices=("dmpc", "cempc", "both"), default="both")
    s.add_argument("--runs", type=int, default=20, help="number of paired noise seeds")
    s.add_argument("--seed", type=int, default=None, help="first seed (default: rng_seed of the config)")
    s.add_argument("--out", required=True, help="output directory for CSV logs, stats and plots")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="run the built-in oracle checks")
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("dump-tree", help="solve one step and print its scenario tree as JSON")
    d.add_argument("--config", default=None)
    d.add_argument("--state", required=True, help="simulation log CSV or a single comma-separated state row")
    d.add_argument("--step", type=int, default=0, help="row of the simulation log to use")
    d.add_argument("--seed", type=int, default=0, help="run seed of the sample bank")
    d.add_argument("--out", default=None, help="write JSON here instead of stdout")
    d.set_defaults(func=cmd_dump_tree)

    pl = sub.add_parser("plot", help="render SVG panels from stats_*.csv files")
    pl.add_argument("--stats", required=True, help="directory holding stats_<controller>.csv")
    pl.add_argument("--out", default=None, help="output directory (default: the stats directory)")
    pl.add_argument("--config", default=None, help="benchmark JSON for channel selection")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"dualmpc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
