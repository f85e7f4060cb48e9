"""JSON benchmark files.

Real numbers are stored as decimal strings (plain JSON numbers are also
accepted) and matrices as row-major nested lists. The loader normalises the
document, so ``dump_benchmark(load_benchmark(p))`` then ``load_benchmark``
reproduces identical arrays. See the README for the full schema.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .belief import CapConfig
from .controller import ScenarioConfig
from .model import ConfigurationError, CostSpec, ModelSet, affine_mode, check_symmetric_psd, input_gain_mode, zoh_discretize
from .objective import ObjectiveConfig
from .optimizer import SolverConfig
from .simharness import TruthConfig

BUNDLED = "cessna_citation.json"


def bundled_path() -> Path:
    """Path of the packaged aircraft benchmark."""
    return Path(str(resources.files("dualmpc") / "data" / BUNDLED))


def _real(v, where: str) -> float:
    if isinstance(v, bool):
        raise ConfigurationError(f"{where}: expected a real number, got {v!r}")
    try:
        out = float(v)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: expected a real number, got {v!r}") from exc
    if not np.isfinite(out):
        raise ConfigurationError(f"{where}: non-finite value {v!r}")
    return out


def _vector(v, where: str) -> np.ndarray:
    if not isinstance(v, list):
        v = [v]
    return np.array([_real(e, f"{where}[{i}]") for i, e in enumerate(v)])


def _matrix(v, where: str) -> np.ndarray:
    if not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v):
        raise ConfigurationError(f"{where}: expected a row-major list of rows")
    if len({len(r) for r in v}) != 1:
        raise ConfigurationError(f"{where}: ragged rows")
    return np.array([[_real(e, f"{where}[{i}][{j}]") for j, e in enumerate(r)] for i, r in enumerate(v)])


def _get(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigurationError(f"{where}: missing key {key!r}")
    return d[key]


def _s(x: float) -> str:
    return repr(float(x))


def _smat(M) -> list:
    return [[_s(e) for e in row] for row in np.atleast_2d(M)]


def _svec(v) -> list:
    return [_s(e) for e in np.atleast_1d(v)]


@dataclass(eq=False)
class Benchmark:
    """Everything needed to run one experiment, plus its normalised document."""

    models: ModelSet
    cost: CostSpec
    scenario: ScenarioConfig
    truth: TruthConfig
    rng_seed: int
    document: dict = field(repr=False)
    plot: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.document)

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.document, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def unpack(self):
        return self.models, self.cost, self.scenario, self.truth


def _plant(doc: dict):
    plant = _get(doc, "plant", "config")
    Ts = _real(_get(plant, "Ts", "plant"), "plant.Ts")
    if Ts <= 0:
        raise ConfigurationError("plant.Ts must be positive")
    A_c = _matrix(_get(plant, "A_c", "plant"), "plant.A_c")
    B_c = _matrix(_get(plant, "B_c", "plant"), "plant.B_c")
    if A_c.shape[0] != A_c.shape[1] or B_c.shape[0] != A_c.shape[0]:
        raise ConfigurationError(f"plant: A_c {A_c.shape} and B_c {B_c.shape} disagree")
    A, B = zoh_discretize(A_c, B_c, Ts)
    norm = {"Ts": _s(Ts), "A_c": _smat(A_c), "B_c": _smat(B_c)}
    for extra in ("source", "states", "inputs"):
        if extra in plant:
            norm[extra] = plant[extra]
    return A, B, norm


def _mode(spec: dict, i: int, A_plant, B_plant, n_x: int):
    where = f"modes[{i}]"
    name = str(spec.get("name", f"mode{i}"))
    kind = spec.get("kind", "input_gain")
    prob = _real(_get(spec, "prior_prob", where), f"{where}.prior_prob")
    mean = _vector(_get(spec, "prior_mean", where), f"{where}.prior_mean")
    cov = _matrix(_get(spec, "prior_cov", where), f"{where}.prior_cov")
    noise = _matrix(_get(spec, "noise_cov", where), f"{where}.noise_cov")
    if noise.shape != (n_x, n_x):
        raise ConfigurationError(f"{where}.noise_cov: shape {noise.shape}, expected {(n_x, n_x)}")
    try:
        check_symmetric_psd("noise covariance", noise, strict=True)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{where}.noise_cov: {exc}") from exc
    norm = {
        "name": name,
        "kind": kind,
        "prior_prob": _s(prob),
        "prior_mean": _svec(mean),
        "prior_cov": _smat(cov),
        "noise_cov": _smat(noise),
    }
    kw = dict(prior_mean=mean, prior_cov=cov, noise_cov=noise, prior_prob=prob)
    if kind == "input_gain":
        A = _matrix(spec["A"], f"{where}.A") if "A" in spec else A_plant
        B = _matrix(spec["B"], f"{where}.B") if "B" in spec else B_plant
        for key, M in (("A", A), ("B", B)):
            if key in spec:
                norm[key] = _smat(M)
        mode = input_gain_mode(name, A, B, **kw)
    elif kind == "affine":
        A = _matrix(_get(spec, "A", where), f"{where}.A")
        B = _matrix(_get(spec, "B", where), f"{where}.B")
        n_g = mean.size
        Gx = [_matrix(g, f"{where}.Gx[{j}]") for j, g in enumerate(spec.get("Gx", []))] or None
        Gu = [_matrix(g, f"{where}.Gu[{j}]") for j, g in enumerate(spec.get("Gu", []))] or None
        for label, G in (("Gx", Gx), ("Gu", Gu)):
            if G is not None and len(G) != n_g:
                raise ConfigurationError(f"{where}.{label}: need {n_g} matrices, got {len(G)}")
        norm.update(A=_smat(A), B=_smat(B))
        if Gx is not None:
            norm["Gx"] = [_smat(g) for g in Gx]
        if Gu is not None:
            norm["Gu"] = [_smat(g) for g in Gu]
        mode = affine_mode(name, A, B, Gx, Gu, **kw)
    else:
        raise ConfigurationError(f"{where}.kind: unknown mode kind {kind!r}")
    return mode, norm


def _scenario(doc: dict, n_m: int):
    sc = _get(doc, "scenario", "config")
    norm = {}

    def integer(key, default):
        v = sc.get(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigurationError(f"scenario.{key}: expected an integer, got {v!r}")
        norm[key] = v
        return v

    N = integer("N", 20)
    L = integer("L", 1)
    N_s = integer("N_s", 2)
    schedule = sc.get("schedule")
    if schedule is not None:
        schedule = tuple(int(s) for s in schedule)
        norm["schedule"] = list(schedule)
    p_min = _real(sc.get("p_min", 0.0), "scenario.p_min")
    floors = tuple(_real(v, f"scenario.var_floor[{i}]") for i, v in enumerate(sc.get("var_floor", [])))
    norm["p_min"] = _s(p_min)
    norm["var_floor"] = [_s(v) for v in floors]
    caps = CapConfig(p_min, floors)
    try:
        caps.validate(n_m)
    except ValueError as exc:
        raise ConfigurationError(f"scenario.p_min: {exc}") from exc
    obj_keys = ("propagation", "cost_expectation", "exploitation_layout", "mode_weighting", "gradient")
    obj_kw = {k: sc[k] for k in obj_keys if k in sc}
    norm.update(obj_kw)
    objective = ObjectiveConfig(**obj_kw)
    solver_doc = sc.get("solver", {})
    solver_kw = {}
    for key, value in solver_doc.items():
        if key not in SolverConfig.__dataclass_fields__:
            raise ConfigurationError(f"scenario.solver: unknown key {key!r}")
        if key in ("max_iters", "memory"):
            solver_kw[key] = int(value)
        elif key == "reset_on_active_change":
            solver_kw[key] = bool(value)
        elif value is None:
            solver_kw[key] = None
        else:
            solver_kw[key] = _real(value, f"scenario.solver.{key}")
    try:
        solver = SolverConfig(**solver_kw)
    except ValueError as exc:
        raise ConfigurationError(f"scenario.solver: {exc}") from exc
    norm["solver"] = {k: (v if isinstance(v, (int, bool)) or v is None else _s(v)) for k, v in solver_kw.items()}
    warm = bool(sc.get("warm_start", True))
    norm["warm_start"] = warm
    weighting = sc.get("cempc_weighting", "posterior")
    if weighting not in ("posterior", "most_likely"):
        raise ConfigurationError(f"scenario.cempc_weighting: {weighting!r} not one of ('posterior', 'most_likely')")
    norm["cempc_weighting"] = weighting
    strategy = sc.get("strategy", "auto")
    norm["strategy"] = strategy
    config = ScenarioConfig(N, L, N_s, schedule, caps, objective, solver, warm, weighting, strategy)
    config.topology(n_m, "dmpc")  # validates L, N and the schedule
    return config, norm


def _truth(doc: dict, n_x: int, n_m: int):
    tr = _get(doc, "truth", "config")
    run_length = _get(tr, "run_length", "truth")
    if isinstance(run_length, bool) or not isinstance(run_length, int):
        raise ConfigurationError("truth.run_length: expected an integer")
    x0 = _vector(tr.get("x0", ["0"] * n_x), "truth.x0")
    if x0.size != n_x:
        raise ConfigurationError(f"truth.x0: {x0.size} entries for {n_x} states")
    modes = []
    for i, e in enumerate(_get(tr, "mode_schedule", "truth")):
        m = int(_get(e, "mode", f"truth.mode_schedule[{i}]"))
        if not 0 <= m < n_m:
            raise ConfigurationError(f"truth.mode_schedule[{i}].mode: index {m} out of range")
        modes.append((int(_get(e, "step", "truth.mode_schedule")), m, _vector(_get(e, "gamma", "truth"), "gamma")))
    refs = []
    for i, e in enumerate(_get(tr, "reference_schedule", "truth")):
        r = _vector(_get(e, "value", f"truth.reference_schedule[{i}]"), f"truth.reference_schedule[{i}].value")
        if r.size != n_x:
            raise ConfigurationError(f"truth.reference_schedule[{i}].value: {r.size} entries for {n_x} states")
        refs.append((int(_get(e, "step", "truth.reference_schedule")), r))
    noise = tr.get("noise_cov")
    noise = None if noise is None else _matrix(noise, "truth.noise_cov")
    truth = TruthConfig(run_length, x0, tuple(modes), tuple(refs), noise, int(tr.get("noise_seed", 0)))
    norm = {
        "run_length": run_length,
        "x0": _svec(x0),
        "mode_schedule": [{"step": s, "mode": m, "gamma": _svec(g)} for s, m, g in truth.mode_schedule],
        "reference_schedule": [{"step": s, "value": _svec(r)} for s, r in truth.reference_schedule],
        "noise_cov": None if noise is None else _smat(noise),
        "noise_seed": truth.noise_seed,
    }
    return truth, norm


def benchmark_from_dict(doc: dict) -> Benchmark:
    """Build a :class:`Benchmark` from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be an object")
    A, B, plant_norm = _plant(doc)
    n_x, n_u = B.shape
    bounds = _get(doc, "input_bounds", "config")
    lo = _vector(_get(bounds, "lower", "input_bounds"), "input_bounds.lower")
    hi = _vector(_get(bounds, "upper", "input_bounds"), "input_bounds.upper")
    mode_docs = _get(doc, "modes", "config")
    if not isinstance(mode_docs, list) or not mode_docs:
        raise ConfigurationError("modes: need a non-empty list")
    built = [_mode(m, i, A, B, n_x) for i, m in enumerate(mode_docs)]
    total = sum(m.prior_prob for m, _ in built)
    if abs(total - 1.0) > 1e-12:
        raise ConfigurationError(f"mode probabilities sum to {total:.12g}")
    models = ModelSet(tuple(m for m, _ in built), n_x, n_u, lo, hi)

    scenario, scenario_norm = _scenario(doc, models.n_modes)
    truth, truth_norm = _truth(doc, n_x, models.n_modes)

    cd = _get(doc, "cost", "config")
    Q = _matrix(_get(cd, "Q", "cost"), "cost.Q")
    R = _matrix(_get(cd, "R", "cost"), "cost.R")
    QN = _matrix(cd["QN"], "cost.QN") if "QN" in cd else Q
    const = _real(cd.get("stage_constant", 0.0), "cost.stage_constant")
    reference = truth.reference_trajectory(truth.run_length + scenario.N + 1)
    cost = CostSpec(Q, R, QN, reference, const)

    seed = doc.get("rng_seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigurationError("rng_seed: expected an integer")
    plot = dict(doc.get("plot", {}))
    norm = {
        "name": doc.get("name", ""),
        "rng_seed": seed,
        "plant": plant_norm,
        "input_bounds": {"lower": _svec(lo), "upper": _svec(hi)},
        "modes": [n for _, n in built],
        "cost": {"Q": _smat(Q), "R": _smat(R), "QN": _smat(QN), "stage_constant": _s(const)},
        "scenario": scenario_norm,
        "truth": truth_norm,
        "plot": plot,
    }
    return Benchmark(models, cost, scenario, truth, seed, norm, plot)


def read_benchmark(path=None) -> Benchmark:
    """Parse a benchmark file (the bundled aircraft benchmark by default)."""
    p = bundled_path() if path is None else Path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from exc
    return benchmark_from_dict(doc)


def load_benchmark(path=None) -> tuple[ModelSet, CostSpec, ScenarioConfig, TruthConfig]:
    return read_benchmark(path).unpack()


def dump_benchmark(bench: Benchmark, path=None) -> str:
    """Serialise the normalised document; writes it when ``path`` is given."""
    text = json.dumps(bench.document, indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def with_overrides(bench: Benchmark, **sections: Any) -> Benchmark:
    """Copy of ``bench`` with top-level sections shallow-merged (e.g. ``scenario={"L": 0}``)."""
    doc = bench.to_dict()
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key].update(value)
        else:
            doc[key] = value
    return benchmark_from_dict(doc)
