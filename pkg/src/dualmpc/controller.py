"""Receding-horizon dual MPC and its certainty-equivalence baseline.

At every step the controller first folds the newest measurement into its
belief, then draws a fresh sample bank, solves the merged problem from a
warm start and applies the root input. The baseline (``cempc``) solves the
same problem without a dual part: one open-loop sequence per horizon under
the current, frozen belief.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .belief import BeliefState, CapConfig, NumericalError, full_update
from .model import ConfigurationError, CostSpec, ModelSet
from .objective import FAILURE_VALUE, ControlPlan, DualObjective, ObjectiveConfig, PlanLayout
from .optimizer import ObjectiveFailure, SolveReport, SolverConfig, minimize, projected_gradient
from .tree import SampleBank, TreeTopology, build_topology

logger = logging.getLogger(__name__)

KINDS = ("dmpc", "cempc")
STRATEGIES = ("auto", "joint", "nested")


@dataclass(frozen=True)
class ScenarioConfig:
    N: int = 20
    L: int = 1
    N_s: int = 2
    schedule: Optional[tuple] = None
    caps: CapConfig = field(default_factory=CapConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    warm_start: bool = True
    cempc_weighting: str = "posterior"
    strategy: str = "auto"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy {self.strategy!r} not one of {STRATEGIES}")

    def topology(self, n_modes: int, kind: str) -> TreeTopology:
        if kind == "dmpc":
            return build_topology(self.L, self.N_s, n_modes, self.N, self.schedule)
        if kind == "cempc":
            return build_topology(0, 1, n_modes, self.N)
        raise ConfigurationError(f"unknown controller kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True, eq=False)
class ControllerState:
    belief: BeliefState
    previous_plan: Optional[ControlPlan] = None
    k: int = 0
    last_x: Optional[np.ndarray] = None
    last_u: Optional[np.ndarray] = None


@dataclass
class StepDiagnostics:
    objective: float = float("nan")
    iterations: int = 0
    kkt_residual: float = float("nan")
    converged: bool = False
    failed: bool = False
    n_evals: int = 0
    solve_time: float = 0.0
    message: str = ""


def bank_rng(seed: int, k: int) -> np.random.Generator:
    """Generator for the sample bank of step ``k`` of run ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1, int(k)]))


def _contiguous_schedule(topology: TreeTopology) -> bool:
    return topology.schedule == tuple(range(topology.L))


def warm_start(previous: Optional[ControlPlan], layout: PlanLayout, mode_star: int = 0) -> ControlPlan:
    """Shift the previous plan one step forward onto a fresh tree.

    The new root input averages the previous stage-1 inputs generated by
    ``mode_star``; deeper nodes inherit the inputs of the matching node in
    the subtree of the previous ``(mode_star, sample 0)`` child, and every
    exploitation sequence is shifted with its last input repeated.
    """
    if previous is None:
        return layout.constant(0.0)
    topo = layout.topology
    T, F, N_s = topo.T, topo.fanout, topo.N_s
    n_tail = layout.n_tail
    if not _contiguous_schedule(topo):
        return _warm_start_mean(previous, layout)

    def shifted(j, m):
        s = layout.branch_inputs(previous, j, m)
        return np.vstack([s[1:], s[-1:]])

    if T == 0:
        seqs = [shifted(0, m) for m in range(n_tail)]
        head = seqs[min(mode_star, n_tail - 1)][0][None, :]
        tail = np.stack([s[1:] for s in seqs])[None]
        return ControlPlan((), head, tail)

    def stage_input(k, j):
        return previous.stage_inputs[k][j] if k < T else previous.head[j]

    first = [mode_star * N_s + s for s in range(N_s)]
    stages = [np.mean([stage_input(1, c) for c in first], axis=0)[None, :]]
    base = mode_star * N_s
    for k in range(1, T):
        n = topo.count(k)
        stages.append(np.array([stage_input(k + 1, base * n + j) for j in range(n)]))
    nT = topo.count(T)
    prev_base = base * topo.count(T - 1)
    head = np.empty_like(previous.head)
    tail = np.empty_like(previous.tail)
    for j in range(nT):
        src = prev_base + j // F
        seqs = [shifted(src, m) for m in range(n_tail)]
        head[j] = seqs[min(mode_star, n_tail - 1)][0]
        for m in range(n_tail):
            tail[j, m] = seqs[m][1:]
    return ControlPlan(tuple(stages), head, tail)


def _warm_start_mean(previous: ControlPlan, layout: PlanLayout) -> ControlPlan:
    # time-indexed mean over all nodes, shifted; used for deferred schedules
    topo = layout.topology
    seq = [np.mean(s, axis=0) for s in previous.stage_inputs]
    seq.append(previous.head.mean(axis=0))
    seq.extend(previous.tail.mean(axis=(0, 1)))
    seq = np.array(seq[1:] + seq[-1:])
    stages = tuple(np.tile(seq[k], (topo.count(k), 1)) for k in range(topo.T))
    head = np.tile(seq[topo.T], (topo.count(topo.T), 1))
    tail = np.broadcast_to(seq[topo.T + 1 :], layout.tail_shape).copy()
    return ControlPlan(stages, head, tail)


def solve_nested(obj: DualObjective, v0: np.ndarray, cfg: SolverConfig) -> SolveReport:
    """Minimise ``obj`` with the dual-stage inputs outside and the exploitation QP inside.

    For fixed dual inputs the exploitation cost is a strictly convex box QP
    that is solved exactly per node, so the outer search only sees the
    dual-stage inputs (one per dual node). The result is a minimiser of the
    same joint problem; its reported residual is the joint projected
    gradient.
    """
    nd = obj.layout.n_dual
    lo, hi = obj.lower, obj.upper
    state = {"v": np.array(v0, dtype=float)}
    inner_solves = 0

    def reduced(u_dual):
        nonlocal inner_solves
        vec = state["v"].copy()
        vec[:nd] = u_dual
        try:
            with np.errstate(over="raise", invalid="raise"):
                dual, qp = obj.condensed(vec)
                vec = qp.solve(vec, lo, hi)
                f = dual + qp.value(vec)
        except (NumericalError, FloatingPointError, np.linalg.LinAlgError):
            return FAILURE_VALUE
        inner_solves += 1
        if not np.isfinite(f):
            return FAILURE_VALUE
        state["v"] = vec
        return f

    if nd == 0:
        f = reduced(np.zeros(0))
        if f >= FAILURE_VALUE:
            raise ObjectiveFailure("objective not finite at the initial plan")
        outer = SolveReport(np.zeros(0), f, 0, True, 0.0, 1, "exploitation QP solved")
    else:
        outer = minimize(reduced, v0[:nd], (lo[:nd], hi[:nd]), cfg)
        reduced(outer.x)  # leave the inner solution of the returned point in place
    x = state["v"]
    x[:nd] = outer.x
    f, g = obj.value_and_grad(x)
    kkt = float(np.max(np.abs(projected_gradient(x, g, lo, hi)), initial=0.0))
    return SolveReport(
        x,
        f,
        outer.iterations,
        kkt <= cfg.grad_tol * (1.0 + abs(f)),
        kkt,
        inner_solves,
        outer.message,
        outer.history,
    )


class RecedingHorizonController:
    """Dual MPC (``kind="dmpc"``) or certainty-equivalence MPC (``"cempc"``)."""

    def __init__(self, models: ModelSet, cost: CostSpec, config: ScenarioConfig, kind: str = "dmpc", seed: int = 0):
        self.models = models
        self.cost = cost
        self.config = config
        self.kind = kind
        self.seed = int(seed)
        self.topology = config.topology(models.n_modes, kind)
        obj = config.objective
        if kind == "cempc":
            obj = replace(obj, mode_weighting=config.cempc_weighting)
        self.objective_config = obj
        self.layout = PlanLayout(self.topology, models.input_dim, obj.exploitation_layout == "per_branch")
        config.caps.validate(models.n_modes)

    def initial_state(self, belief: Optional[BeliefState] = None) -> ControllerState:
        return ControllerState(BeliefState.prior(self.models) if belief is None else belief)

    def update_belief(self, state: ControllerState, x_prev, u_prev, x_new) -> ControllerState:
        """Closed-loop Bayesian update with the configured caps; advances ``k``."""
        belief = full_update(state.belief, self.models, x_prev, u_prev, x_new, self.config.caps)
        return replace(state, belief=belief, k=state.k + 1)

    def build_objective(self, state: ControllerState, x) -> DualObjective:
        bank = SampleBank.draw(self.topology, self.models, bank_rng(self.seed, state.k))
        return DualObjective(
            self.models,
            self.cost,
            self.topology,
            x,
            state.belief,
            bank,
            self.objective_config,
            self.config.caps,
            t0=state.k,
            fd_step=self.config.solver.fd_step,
        )

    def uses_nested(self, obj: DualObjective) -> bool:
        if self.config.strategy == "joint":
            return False
        if self.config.strategy == "nested" and not obj.supports_condensing:
            raise ConfigurationError("nested strategy needs affine modes without the trace term")
        return obj.supports_condensing

    def step(self, state: ControllerState, x_measured) -> tuple[np.ndarray, ControllerState, StepDiagnostics]:
        x = np.asarray(x_measured, dtype=float)
        if not np.all(np.isfinite(x)):
            raise NumericalError("non-finite measurement")
        diag = StepDiagnostics()
        if state.last_x is not None:
            try:
                state = self.update_belief(state, state.last_x, state.last_u, x)
            except NumericalError as exc:
                logger.warning("belief update skipped at k=%d: %s", state.k + 1, exc)
                state = replace(state, k=state.k + 1)
                diag.failed = True
                diag.message = f"belief update failed: {exc}"

        obj = self.build_objective(state, x)
        mode_star = int(np.argmax(state.belief.mode_probs))
        if self.config.warm_start:
            plan0 = warm_start(state.previous_plan, self.layout, mode_star)
        else:
            plan0 = self.layout.constant(0.0)
        v0 = np.clip(self.layout.flatten(plan0), obj.lower, obj.upper)

        started = time.perf_counter()
        try:
            if self.uses_nested(obj):
                rep = solve_nested(obj, v0, self.config.solver)
            else:
                rep = minimize(obj.value, v0, (obj.lower, obj.upper), self.config.solver, value_and_grad=obj.value_and_grad)
            plan = self.layout.unflatten(rep.x)
            diag.objective = rep.fun
            diag.iterations = rep.iterations
            diag.kkt_residual = rep.kkt_residual
            diag.converged = rep.converged
            diag.n_evals = rep.n_evals
            diag.message = diag.message or rep.message
        except ObjectiveFailure as exc:
            logger.warning("solver failure at k=%d: %s", state.k, exc)
            plan = self.layout.unflatten(v0)
            diag.failed = True
            diag.message = str(exc)
        diag.solve_time = time.perf_counter() - started

        u = self.models.clip(plan.first_input())
        new_state = replace(state, previous_plan=plan, last_x=x, last_u=u)
        return u, new_state, diag


def dmpc_step(controller: RecedingHorizonController, state: ControllerState, x_measured):
    if controller.kind != "dmpc":
        raise ConfigurationError("controller was not built as dmpc")
    return controller.step(state, x_measured)


def cempc_step(controller: RecedingHorizonController, state: ControllerState, x_measured):
    if controller.kind != "cempc":
        raise ConfigurationError("controller was not built as cempc")
    return controller.step(state, x_measured)
