"""Closed-loop simulation, Monte Carlo orchestration and run statistics.

Plant noise for run ``seed`` comes from its own stream, drawn in full before
the loop starts, so every controller run under the same seed sees exactly the
same disturbance sequence.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .belief import BeliefState, full_update
from .controller import RecedingHorizonController, ScenarioConfig, StepDiagnostics
from .model import ConfigurationError, CostSpec, ModelSet, psd_sqrt, step_truth

logger = logging.getLogger(__name__)

QUANTILES = (0.05, 0.5, 0.95)


@dataclass(frozen=True)
class TruthConfig:
    """Ground truth of one experiment.

    Attributes:
        run_length: number of closed-loop steps.
        x0: initial plant state.
        mode_schedule: ``(step, mode index, true gamma)`` entries; each holds
            from its step until the next entry.
        reference_schedule: ``(step, reference vector)`` entries, same rule.
        noise_cov: plant noise covariance; ``None`` uses the active mode's.
        noise_seed: mixed into every run's plant-noise stream.
    """

    run_length: int
    x0: np.ndarray
    mode_schedule: tuple
    reference_schedule: tuple
    noise_cov: Optional[np.ndarray] = None
    noise_seed: int = 0

    def __post_init__(self):
        if self.run_length < 1:
            raise ConfigurationError("run_length must be at least 1")
        for name, sched in (("mode_schedule", self.mode_schedule), ("reference_schedule", self.reference_schedule)):
            steps = [int(e[0]) for e in sched]
            if not steps or steps[0] != 0:
                raise ConfigurationError(f"{name} must start at step 0")
            if steps != sorted(steps) or len(set(steps)) != len(steps):
                raise ConfigurationError(f"{name} steps must be strictly increasing")
            if steps[-1] > self.run_length:
                raise ConfigurationError(f"{name} step {steps[-1]} beyond run length {self.run_length}")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(
            self, "mode_schedule", tuple((int(s), int(m), np.atleast_1d(np.asarray(g, dtype=float))) for s, m, g in self.mode_schedule)
        )
        object.__setattr__(
            self, "reference_schedule", tuple((int(s), np.asarray(r, dtype=float)) for s, r in self.reference_schedule)
        )

    @staticmethod
    def _lookup(sched, k):
        current = sched[0]
        for entry in sched:
            if entry[0] <= k:
                current = entry
        return current

    def active(self, k: int) -> tuple[int, np.ndarray]:
        _, mode, gamma = self._lookup(self.mode_schedule, k)
        return mode, gamma

    def reference(self, k: int) -> np.ndarray:
        return self._lookup(self.reference_schedule, k)[1]

    def reference_trajectory(self, length: int) -> np.ndarray:
        return np.array([self.reference(k) for k in range(length)])


def plant_noise(truth: TruthConfig, models: ModelSet, seed: int) -> np.ndarray:
    """All plant disturbances ``w_0 .. w_{run_length-1}`` of run ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0, int(truth.noise_seed)]))
    z = rng.standard_normal((truth.run_length, models.state_dim))
    w = np.empty_like(z)
    fixed = None if truth.noise_cov is None else psd_sqrt(np.asarray(truth.noise_cov, dtype=float))
    for k in range(truth.run_length):
        S = fixed if fixed is not None else models.modes[truth.active(k)[0]].noise_factor
        w[k] = S @ z[k]
    return w


@dataclass(eq=False)
class SimulationLog:
    kind: str
    seed: int
    config_hash: str
    states: np.ndarray  # (run_length + 1, n_x)
    inputs: np.ndarray  # (run_length, n_u)
    stage_costs: np.ndarray  # (run_length,)
    mode_probs: np.ndarray  # (run_length + 1, n_m)
    param_means: list  # per mode: (run_length + 1, n_gamma)
    param_vars: list  # per mode: (run_length + 1, n_gamma)
    diagnostics: list = field(default_factory=list)

    @property
    def run_length(self) -> int:
        return self.inputs.shape[0]

    def channels(self) -> dict:
        """Per-step series keyed by column name (states and beliefs span run_length + 1 steps)."""
        out = {}
        for i in range(self.states.shape[1]):
            out[f"x{i}"] = self.states[:, i]
        for i in range(self.inputs.shape[1]):
            out[f"u{i}"] = self.inputs[:, i]
        out["stage_cost"] = self.stage_costs
        for m in range(self.mode_probs.shape[1]):
            out[f"p{m}"] = self.mode_probs[:, m]
        for m, (mu, var) in enumerate(zip(self.param_means, self.param_vars)):
            for i in range(mu.shape[1]):
                out[f"mu{m}_{i}"] = mu[:, i]
            for i in range(var.shape[1]):
                out[f"var{m}_{i}"] = var[:, i]
        return out

    def columns(self) -> list:
        return ["step", *self.channels().keys(), "objective", "iterations", "kkt_residual", "converged", "failed"]

    def to_csv(self, path=None) -> str:
        """Write the log (floats as shortest round-trip decimals); returns the text."""
        buf = io.StringIO()
        buf.write(f"# controller={self.kind}\n# seed={self.seed}\n# config_hash={self.config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        ch = self.channels()
        for k in range(self.run_length + 1):
            row = [k]
            for series in ch.values():
                row.append(repr(float(series[k])) if k < series.shape[0] else "")
            if k < len(self.diagnostics):
                d = self.diagnostics[k]
                row += [repr(float(d.objective)), d.iterations, repr(float(d.kkt_residual)), int(d.converged), int(d.failed)]
            else:
                row += ["", "", "", "", ""]
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "SimulationLog":
        lines = Path(path).read_text().splitlines()
        meta = {}
        body = []
        for line in lines:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            else:
                body.append(line)
        rows = list(csv.reader(body))
        header, rows = rows[0], rows[1:]

        def col(name, n):
            i = header.index(name)
            return np.array([float(r[i]) for r in rows[:n]])

        n_steps = len(rows) - 1
        xs = sorted((c for c in header if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
        us = sorted((c for c in header if c.startswith("u") and c[1:].isdigit()), key=lambda c: int(c[1:]))
        ps = sorted((c for c in header if c.startswith("p") and c[1:].isdigit()), key=lambda c: int(c[1:]))
        means, variances = [], []
        for m in range(len(ps)):
            mu = [c for c in header if c.startswith(f"mu{m}_")]
            var = [c for c in header if c.startswith(f"var{m}_")]
            means.append(np.stack([col(c, n_steps + 1) for c in mu], axis=1))
            variances.append(np.stack([col(c, n_steps + 1) for c in var], axis=1))
        diags = []
        io_ = {name: header.index(name) for name in ("objective", "iterations", "kkt_residual", "converged", "failed")}
        for r in rows[:n_steps]:
            diags.append(
                StepDiagnostics(
                    objective=float(r[io_["objective"]]),
                    iterations=int(r[io_["iterations"]]),
                    kkt_residual=float(r[io_["kkt_residual"]]),
                    converged=bool(int(r[io_["converged"]])),
                    failed=bool(int(r[io_["failed"]])),
                )
            )
        return cls(
            kind=meta.get("controller", ""),
            seed=int(meta.get("seed", 0)),
            config_hash=meta.get("config_hash", ""),
            states=np.stack([col(c, n_steps + 1) for c in xs], axis=1),
            inputs=np.stack([col(c, n_steps) for c in us], axis=1),
            stage_costs=col("stage_cost", n_steps),
            mode_probs=np.stack([col(c, n_steps + 1) for c in ps], axis=1),
            param_means=means,
            param_vars=variances,
            diagnostics=diags,
        )


def _record(belief: BeliefState, probs, means, variances, k):
    probs[k] = belief.mode_probs
    for m, g in enumerate(belief.params):
        means[m][k] = g.mean
        variances[m][k] = np.diag(g.cov)


def run_closed_loop(
    models: ModelSet,
    cost: CostSpec,
    truth: TruthConfig,
    scenario: ScenarioConfig,
    kind: str = "dmpc",
    seed: int = 0,
    config_hash: str = "",
) -> SimulationLog:
    """Simulate one closed-loop run of ``kind`` under the noise stream of ``seed``."""
    ctrl = RecedingHorizonController(models, cost, scenario, kind, seed)
    n = truth.run_length
    n_x, n_u, n_m = models.state_dim, models.input_dim, models.n_modes
    w = plant_noise(truth, models, seed)
    xs = np.empty((n + 1, n_x))
    us = np.empty((n, n_u))
    costs = np.empty(n)
    probs = np.empty((n + 1, n_m))
    means = [np.empty((n + 1, m.n_gamma)) for m in models.modes]
    variances = [np.empty((n + 1, m.n_gamma)) for m in models.modes]
    diags = []

    x = truth.x0.copy()
    xs[0] = x
    state = ctrl.initial_state()
    for k in range(n):
        u, state, diag = ctrl.step(state, x)
        _record(state.belief, probs, means, variances, k)
        diags.append(diag)
        if diag.failed:
            logger.warning("%s seed %d step %d flagged: %s", kind, seed, k, diag.message)
        us[k] = u
        costs[k] = cost.stage(x, u, k)
        mode_index, gamma = truth.active(k)
        x = step_truth(models.modes[mode_index], gamma, x, u, w[k])
        xs[k + 1] = x
    final = full_update(state.belief, models, xs[n - 1], us[n - 1], xs[n], scenario.caps)
    _record(final, probs, means, variances, n)
    return SimulationLog(kind, int(seed), config_hash, xs, us, costs, probs, means, variances, diags)


def replay_beliefs(log: SimulationLog, models: ModelSet, caps) -> np.ndarray:
    """Mode probabilities recomputed offline from the logged ``(x, u)`` stream."""
    b = BeliefState.prior(models)
    out = [b.mode_probs]
    for k in range(log.run_length):
        b = full_update(b, models, log.states[k], log.inputs[k], log.states[k + 1], caps)
        out.append(b.mode_probs)
    return np.array(out)


@dataclass(eq=False)
class ControllerStats:
    """Per-step quantiles of every logged channel for one controller."""

    kind: str
    seeds: list
    quantiles: dict  # channel -> array (3, steps) of q05, median, q95
    failures: list = field(default_factory=list)

    @property
    def n_runs(self) -> int:
        return len(self.seeds)

    def median(self, channel: str) -> np.ndarray:
        return self.quantiles[channel][1]

    def band(self, channel: str) -> tuple[np.ndarray, np.ndarray]:
        q = self.quantiles[channel]
        return q[0], q[2]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# controller={self.kind}\n# runs={self.n_runs}\n# failures={len(self.failures)}\n")
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.quantiles)
        w.writerow(["step"] + [f"{c}_{s}" for c in names for s in ("q05", "median", "q95")])
        steps = max(q.shape[1] for q in self.quantiles.values())
        for k in range(steps):
            row = [k]
            for c in names:
                q = self.quantiles[c]
                row += [repr(float(v)) for v in q[:, k]] if k < q.shape[1] else ["", "", ""]
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "ControllerStats":
        lines = Path(path).read_text().splitlines()
        meta = {}
        body = []
        for line in lines:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            else:
                body.append(line)
        rows = list(csv.reader(body))
        header, rows = rows[0], rows[1:]
        quantiles = {}
        for i in range(1, len(header), 3):
            name = header[i].rsplit("_", 1)[0]
            vals = [[float(r[i + s]) for r in rows if r[i + s] != ""] for s in range(3)]
            quantiles[name] = np.array(vals)
        n = int(meta.get("runs", 0))
        return cls(meta.get("controller", ""), list(range(n)), quantiles)


@dataclass(eq=False)
class StatsBundle:
    controllers: dict  # kind -> ControllerStats
    logs: dict = field(default_factory=dict, repr=False)  # kind -> list of SimulationLog

    @property
    def empty(self) -> bool:
        return not any(s.n_runs for s in self.controllers.values())

    def write_csv(self, out_dir) -> list:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for kind, s in self.controllers.items():
            p = out / f"stats_{kind}.csv"
            s.to_csv(p)
            paths.append(p)
        return paths

    @classmethod
    def from_dir(cls, path) -> "StatsBundle":
        found = sorted(Path(path).glob("stats_*.csv"))
        return cls({p.stem[len("stats_") :]: ControllerStats.from_csv(p) for p in found})


def summarize(kind: str, logs: Sequence[SimulationLog], failures=()) -> ControllerStats:
    if not logs:
        return ControllerStats(kind, [], {}, list(failures))
    per_channel = {}
    for log in logs:
        for name, series in log.channels().items():
            per_channel.setdefault(name, []).append(series)
    quantiles = {name: np.quantile(np.array(runs), QUANTILES, axis=0) for name, runs in per_channel.items()}
    return ControllerStats(kind, [log.seed for log in logs], quantiles, list(failures))


def _run_from_dict(payload):
    from .config import benchmark_from_dict

    bench_dict, kind, seed = payload
    bench = benchmark_from_dict(bench_dict)
    return run_closed_loop(bench.models, bench.cost, bench.truth, bench.scenario, kind, seed, bench.config_hash)


def monte_carlo(
    bench,
    n_runs: int,
    controllers: Sequence[str] = ("dmpc", "cempc"),
    base_seed: Optional[int] = None,
    jobs: int = 1,
    out_dir=None,
) -> StatsBundle:
    """Paired runs of every controller over seeds ``base_seed .. base_seed + n_runs - 1``.

    ``bench`` is a :class:`dualmpc.config.Benchmark`. When ``out_dir`` is
    given each run writes ``{kind}_seed{seed}.csv`` there.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    start = bench.rng_seed if base_seed is None else int(base_seed)
    seeds = list(range(start, start + n_runs))
    tasks = [(kind, s) for kind in controllers for s in seeds]
    results = {}
    if jobs > 1:
        payloads = [(bench.to_dict(), kind, s) for kind, s in tasks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_from_dict, p) for p in payloads]
            for task, fut in zip(tasks, futures):
                try:
                    results[task] = fut.result()
                except Exception as exc:  # noqa: BLE001 - a failed run must not stop the batch
                    results[task] = exc
    else:
        for task in tasks:
            kind, s = task
            try:
                results[task] = run_closed_loop(
                    bench.models, bench.cost, bench.truth, bench.scenario, kind, s, bench.config_hash
                )
            except Exception as exc:  # noqa: BLE001
                results[task] = exc

    stats, logs = {}, {}
    for kind in controllers:
        ok, failed = [], []
        for s in seeds:
            r = results[(kind, s)]
            if isinstance(r, Exception):
                logger.error("%s seed %d failed: %s", kind, s, r)
                failed.append((s, repr(r)))
            else:
                ok.append(r)
                if out_dir is not None:
                    Path(out_dir).mkdir(parents=True, exist_ok=True)
                    r.to_csv(Path(out_dir) / f"{kind}_seed{s}.csv")
        stats[kind] = summarize(kind, ok, failed)
        logs[kind] = ok
    bundle = StatsBundle(stats, logs)
    if out_dir is not None:
        bundle.write_csv(out_dir)
    return bundle


def cumulative_tracking_cost(log: SimulationLog, cost: CostSpec, start: int, stop: int) -> float:
    """Sum of state-tracking terms ``e^T Q e`` for steps ``start .. stop`` (inclusive)."""
    total = 0.0
    for k in range(start, min(stop, log.run_length) + 1):
        e = log.states[k] - cost.reference_window(k, 1)[0]
        total += float(e @ cost.Q @ e)
    return total
