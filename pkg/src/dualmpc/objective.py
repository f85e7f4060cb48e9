"""Merged dual-MPC objective over the whole prediction horizon.

The dual part contributes the probability-weighted sampled stage costs of
the scenario tree. Every node at the first exploitation stage ``T`` then
contributes a mode-mixture cost-to-go in which its information is frozen and
states are propagated at the parameter mean (certainty equivalence) or by
first-order moment propagation.

Decision variables (:class:`ControlPlan`):

* one input per node of every dual stage ``k < T``;
* ``head``: the stage-``T`` input of every stage-``T`` node, shared by all
  of its mode branches;
* ``tail``: inputs for stages ``T+1 .. N-1``, either one sequence per
  stage-``T`` node (``per_node``) or one per (node, mode) branch
  (``per_branch``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .belief import BeliefState, CapConfig, NumericalError
from .model import ConfigurationError, CostSpec, ModeModel, ModelSet
from .tree import SampleBank, ScenarioTree, TreeNode, TreeTopology, expand

FAILURE_VALUE = 1e12

PROPAGATIONS = ("certainty_equivalence", "taylor_moments")
EXPECTATIONS = ("mean_only", "mean_plus_trace")
LAYOUTS = ("per_node", "per_branch")
WEIGHTINGS = ("posterior", "most_likely")


@dataclass(frozen=True)
class ObjectiveConfig:
    propagation: str = "certainty_equivalence"
    cost_expectation: str = "mean_only"
    exploitation_layout: str = "per_node"
    mode_weighting: str = "posterior"
    gradient: str = "hybrid"  # or "fd"

    def __post_init__(self):
        for value, allowed in (
            (self.propagation, PROPAGATIONS),
            (self.cost_expectation, EXPECTATIONS),
            (self.exploitation_layout, LAYOUTS),
            (self.mode_weighting, WEIGHTINGS),
            (self.gradient, ("hybrid", "fd")),
        ):
            if value not in allowed:
                raise ConfigurationError(f"{value!r} not one of {allowed}")
        if self.cost_expectation == "mean_plus_trace" and self.propagation != "taylor_moments":
            raise ConfigurationError("mean_plus_trace requires taylor_moments propagation")

    @property
    def uses_trace(self) -> bool:
        return self.cost_expectation == "mean_plus_trace"


@dataclass(frozen=True, eq=False)
class ControlPlan:
    stage_inputs: tuple  # per dual stage k < T: (count(k), n_u)
    head: np.ndarray  # (count(T), n_u)
    tail: np.ndarray  # (count(T), n_tail, N - T - 1, n_u)

    def first_input(self) -> np.ndarray:
        if self.stage_inputs:
            return np.array(self.stage_inputs[0][0])
        return np.array(self.head[0])


@dataclass(frozen=True)
class PlanLayout:
    topology: TreeTopology
    n_u: int
    per_branch: bool = False

    @property
    def n_tail(self) -> int:
        return self.topology.n_m if self.per_branch else 1

    @property
    def tail_shape(self) -> tuple:
        t = self.topology
        return (t.count(t.T), self.n_tail, t.N - t.T - 1, self.n_u)

    @property
    def n_dual(self) -> int:
        t = self.topology
        return sum(t.count(k) for k in range(t.T)) * self.n_u

    @property
    def n_head(self) -> int:
        return self.topology.count(self.topology.T) * self.n_u

    @property
    def size(self) -> int:
        return self.n_dual + self.n_head + int(np.prod(self.tail_shape))

    def flatten(self, plan: ControlPlan) -> np.ndarray:
        parts = [np.asarray(s, dtype=float).ravel() for s in plan.stage_inputs]
        parts += [np.asarray(plan.head, dtype=float).ravel(), np.asarray(plan.tail, dtype=float).ravel()]
        vec = np.concatenate(parts) if parts else np.zeros(0)
        if vec.size != self.size:
            raise ConfigurationError(f"plan has {vec.size} entries, layout expects {self.size}")
        return vec

    def unflatten(self, vec) -> ControlPlan:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ConfigurationError(f"vector of shape {vec.shape}, layout expects ({self.size},)")
        t = self.topology
        pos = 0
        stages = []
        for k in range(t.T):
            n = t.count(k) * self.n_u
            stages.append(vec[pos : pos + n].reshape(t.count(k), self.n_u))
            pos += n
        head = vec[pos : pos + self.n_head].reshape(t.count(t.T), self.n_u)
        pos += self.n_head
        tail = vec[pos:].reshape(self.tail_shape)
        return ControlPlan(tuple(stages), head, tail)

    def constant(self, u) -> ControlPlan:
        u = np.broadcast_to(np.asarray(u, dtype=float), (self.n_u,))
        return self.unflatten(np.tile(u, self.size // self.n_u))

    def bounds(self, lower, upper) -> tuple[np.ndarray, np.ndarray]:
        reps = self.size // self.n_u
        return np.tile(lower, reps), np.tile(upper, reps)

    def branch_inputs(self, plan: ControlPlan, j: int, m: int) -> np.ndarray:
        """Full exploitation input sequence ``u_T .. u_{N-1}`` of branch ``(j, m)``."""
        tail = plan.tail[j, m if self.per_branch else 0]
        return np.vstack([plan.head[j][None, :], tail])


@dataclass(frozen=True, eq=False)
class MomentState:
    mean: np.ndarray  # (n_x + n_gamma,)
    cov: np.ndarray

    def state_mean(self, n_x: int) -> np.ndarray:
        return self.mean[:n_x]

    def state_cov(self, n_x: int) -> np.ndarray:
        return self.cov[:n_x, :n_x]


def ce_propagate(x_T, mode: ModeModel, gamma_mean, inputs) -> np.ndarray:
    """Mean states ``x_{T+1} .. x_N`` at the frozen parameter mean."""
    x = np.asarray(x_T, dtype=float)
    out = []
    for u in np.atleast_2d(inputs):
        x = mode.mean_step(x, u, gamma_mean)
        if not np.all(np.isfinite(x)):
            raise NumericalError("non-finite mean state")
        out.append(x)
    return np.array(out)


def taylor_propagate(x_T, mode: ModeModel, gamma_mean, gamma_cov, inputs) -> list:
    """First-order moment propagation of the parameter-augmented state.

    The state part starts deterministic at ``x_T`` and the parameter block at
    ``gamma_cov``; each step applies the Jacobian
    ``[[d/dx (g + Phi mu), Phi], [0, I]]``.
    """
    x = np.asarray(x_T, dtype=float)
    mu = np.asarray(gamma_mean, dtype=float)
    n_x, n_g = x.size, mu.size
    cov = np.zeros((n_x + n_g, n_x + n_g))
    cov[n_x:, n_x:] = gamma_cov
    noise = np.zeros_like(cov)
    noise[:n_x, :n_x] = mode.noise_cov
    Abar = np.eye(n_x + n_g)
    out = []
    for u in np.atleast_2d(inputs):
        Jx, _ = mode.jacobians(x, u, mu)
        Abar[:n_x, :n_x] = Jx
        Abar[:n_x, n_x:] = mode.basis(x, u)
        x = mode.mean_step(x, u, mu)
        cov = noise + Abar @ cov @ Abar.T
        out.append(MomentState(np.concatenate([x, mu]), 0.5 * (cov + cov.T)))
    return out


def _mode_weights(belief: BeliefState, cfg: ObjectiveConfig) -> np.ndarray:
    if cfg.mode_weighting == "most_likely":
        w = np.zeros(belief.n_modes)
        w[int(np.argmax(belief.mode_probs))] = 1.0
        return w
    return belief.mode_probs


def branch_cost(x_T, mode: ModeModel, gamma, inputs, cost: CostSpec, t_T: int, cfg: ObjectiveConfig) -> float:
    """Cost of one exploitation branch for stages ``T+1 .. N`` (excluding stage ``T``)."""
    inputs = np.atleast_2d(inputs)
    H = inputs.shape[0]
    n_x = np.asarray(x_T).size
    if cfg.propagation == "taylor_moments":
        moments = taylor_propagate(x_T, mode, gamma.mean, gamma.cov, inputs)
        means = np.array([m.state_mean(n_x) for m in moments])
    else:
        moments = None
        means = ce_propagate(x_T, mode, gamma.mean, inputs)
    total = 0.0
    for k in range(1, H):
        total += cost.stage(means[k - 1], inputs[k], t_T + k)
    total += cost.terminal(means[H - 1], t_T + H)
    if cfg.uses_trace:
        for k in range(1, H):
            total += float(np.trace(cost.Q @ moments[k - 1].state_cov(n_x)))
        total += float(np.trace(cost.QN @ moments[H - 1].state_cov(n_x)))
    return total


def exploitation_cost(
    node: TreeNode,
    head_input,
    branch_inputs: Sequence,
    models: ModelSet,
    cost: CostSpec,
    t_T: int,
    cfg: ObjectiveConfig = ObjectiveConfig(),
) -> float:
    """Mode-mixture cost-to-go of one stage-``T`` node with frozen information.

    ``branch_inputs[m]`` is the input sequence for stages ``T+1 .. N-1`` of
    mode branch ``m``.
    """
    own = cost.stage(node.state, head_input, t_T)
    weights = _mode_weights(node.belief, cfg)
    mix = 0.0
    for m, (mode, gamma) in enumerate(zip(models.modes, node.belief.params)):
        if weights[m] == 0.0:
            continue
        seq = np.vstack([np.atleast_2d(head_input), np.asarray(branch_inputs[m]).reshape(-1, models.input_dim)])
        mix += weights[m] * branch_cost(node.state, mode, gamma, seq, cost, t_T, cfg)
    return own + mix


@dataclass(frozen=True, eq=False)
class ExploitationQP:
    """Exploitation cost as a quadratic in the flat plan vector, dual inputs held fixed.

    ``blocks`` holds one ``(indices, H, b)`` triple per stage-``T`` node: the
    cost is ``sum_j (v_j^T H_j v_j / 2 + b_j^T v_j) + constant`` with
    ``v_j = vec[indices_j]``. Nodes do not couple, so each block is solved on
    its own.
    """

    blocks: tuple
    constant: float

    def value(self, vec) -> float:
        vec = np.asarray(vec, dtype=float)
        total = self.constant
        for idx, H, b in self.blocks:
            v = vec[idx]
            total += float(v @ (0.5 * (H @ v) + b))
        return total

    def gradient(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        g = np.zeros_like(vec)
        for idx, H, b in self.blocks:
            g[idx] = H @ vec[idx] + b
        return g

    def solve(self, vec0, lower, upper, tol: float = 1e-12) -> np.ndarray:
        """Copy of ``vec0`` with every node block replaced by its box-constrained minimiser."""
        from .optimizer import solve_box_qp

        out = np.array(vec0, dtype=float)
        for idx, H, b in self.blocks:
            out[idx] = solve_box_qp(H, b, lower[idx], upper[idx], out[idx], tol)
        return out


class DualObjective:
    """Objective of one receding-horizon problem with its sample bank fixed.

    ``value`` and ``value_and_grad`` act on flat decision vectors (see
    :class:`PlanLayout`). The gradient is adjoint-exact in the exploitation
    inputs and central-difference in the dual-stage inputs, whose effect runs
    through the in-tree Bayesian updates. ``gradient="fd"`` differentiates
    everything numerically.
    """

    def __init__(
        self,
        models: ModelSet,
        cost: CostSpec,
        topology: TreeTopology,
        root_state,
        root_belief: BeliefState,
        bank: SampleBank,
        cfg: ObjectiveConfig = ObjectiveConfig(),
        caps: Optional[CapConfig] = None,
        t0: int = 0,
        fd_step: float = 1e-6,
    ):
        if topology.n_m != models.n_modes:
            raise ConfigurationError("topology and model set disagree on the number of modes")
        self.models = models
        self.cost = cost
        self.topology = topology
        self.root_state = np.asarray(root_state, dtype=float)
        self.root_belief = root_belief
        self.bank = bank
        self.cfg = cfg
        self.caps = caps
        self.t0 = int(t0)
        self.fd_step = fd_step
        self.layout = PlanLayout(topology, models.input_dim, cfg.exploitation_layout == "per_branch")
        self.lower, self.upper = self.layout.bounds(models.input_lower, models.input_upper)
        self.n_evals = 0
        self.last_failed = False
        self._tree_key = None
        self._tree = None
        self._fast = models.all_affine and not cfg.uses_trace
        T = topology.T
        H = topology.N - T
        self._ref = cost.reference_window(self.t0 + T, H + 1)

    # -- tree -------------------------------------------------------------
    def tree(self, plan: ControlPlan) -> ScenarioTree:
        key = b"".join(np.ascontiguousarray(s).tobytes() for s in plan.stage_inputs)
        if self._tree is None or key != self._tree_key:
            self._tree = expand(
                self.root_state, self.root_belief, plan.stage_inputs, self.models, self.topology, self.bank, self.caps
            )
            self._tree_key = key
        return self._tree

    # -- cost pieces ------------------------------------------------------
    def _dual_cost(self, tree: ScenarioTree) -> float:
        topo = self.topology
        total = 0.0
        for k in range(topo.T):
            scale = 1.0 / topo.N_s ** topo.n_branchings_before(k)
            terms = [n.weight * self.cost.stage(n.state, u, self.t0 + k) for n, u in zip(tree.nodes[k], tree.inputs[k])]
            total += scale * float(np.sum(terms))
        return total

    def _node_scale(self) -> float:
        topo = self.topology
        return 1.0 / topo.N_s ** topo.n_branchings_before(topo.T)

    def _exploit_slow(self, tree: ScenarioTree, plan: ControlPlan) -> float:
        topo = self.topology
        t_T = self.t0 + topo.T
        terms = []
        for j, node in enumerate(tree.nodes[topo.T]):
            seqs = [self.layout.branch_inputs(plan, j, m)[1:] for m in range(topo.n_m)]
            terms.append(node.weight * exploitation_cost(node, plan.head[j], seqs, self.models, self.cost, t_T, self.cfg))
        return self._node_scale() * float(np.sum(terms))

    def _exploit_fast(self, tree: ScenarioTree, plan: ControlPlan, want_grad: bool):
        topo = self.topology
        n_m = topo.n_m
        nodes = tree.nodes[topo.T]
        nb = len(nodes) * n_m
        n_x = self.models.state_dim
        n_u = self.models.input_dim
        H = topo.N - topo.T
        A = np.empty((nb, n_x, n_x))
        B = np.empty((nb, n_x, n_u))
        x0 = np.empty((nb, n_x))
        U = np.empty((nb, H, n_u))
        w = np.empty(nb)
        scale = self._node_scale()
        for j, node in enumerate(nodes):
            mw = _mode_weights(node.belief, self.cfg)
            for m, mode in enumerate(self.models.modes):
                b = j * n_m + m
                A[b], B[b] = mode.affine.effective(node.belief.params[m].mean)
                x0[b] = node.state
                U[b, 0] = plan.head[j]
                U[b, 1:] = plan.tail[j, m if self.layout.per_branch else 0]
                w[b] = scale * node.weight * mw[m]
        costs, dU = kernels.rollout_cost_grad(A, B, x0, U, self._ref, self.cost.Q, self.cost.R, self.cost.QN, w)
        node_w = scale * np.array([n.weight for n in nodes])
        E = np.array([n.state for n in nodes]) - self._ref[0]
        own = (
            np.einsum("ji,ik,jk->j", E, self.cost.Q, E)
            + np.einsum("ji,ik,jk->j", plan.head, self.cost.R, plan.head)
            + self.cost.stage_constant
        )
        # every branch tail spans H-1 stages, each carrying the stage constant
        branch = costs + self.cost.stage_constant * (H - 1)
        value = float(np.dot(node_w, own) + np.dot(w, branch))
        if not want_grad:
            return value, None, None
        dU = dU.reshape(len(nodes), n_m, H, n_u)
        d_head = dU[:, :, 0].sum(axis=1) + 2.0 * node_w[:, None] * (plan.head @ self.cost.R.T)
        if self.layout.per_branch:
            d_tail = dU[:, :, 1:]
        else:
            d_tail = dU[:, :, 1:].sum(axis=1, keepdims=True)
        return value, d_head, d_tail

    @property
    def supports_condensing(self) -> bool:
        """Whether :meth:`condensed` is available (affine modes, no trace term)."""
        return self._fast

    def condensed(self, vec) -> tuple[float, ExploitationQP]:
        """Dual-part cost and exploitation QP for the dual inputs contained in ``vec``."""
        if not self._fast:
            raise ConfigurationError("condensing needs affine modes without the trace term")
        plan = self.layout.unflatten(vec)
        tree = self.tree(plan)
        topo = self.topology
        n_u = self.models.input_dim
        n_m = topo.n_m
        H = topo.N - topo.T
        n_tail = self.layout.n_tail
        nd, nh = self.layout.n_dual, self.layout.n_head
        tail_len = (H - 1) * n_u
        scale = self._node_scale()
        nodes = tree.nodes[topo.T]

        branches = []  # (node, mode, weight)
        for j, node in enumerate(nodes):
            mw = _mode_weights(node.belief, self.cfg)
            for m in range(n_m):
                W = scale * node.weight * mw[m]
                if W != 0.0:
                    branches.append((j, m, W))
        nb = len(branches)
        n_x = self.models.state_dim
        A = np.empty((nb, n_x, n_x))
        B = np.empty((nb, n_x, n_u))
        x0 = np.empty((nb, n_x))
        for b, (j, m, _) in enumerate(branches):
            A[b], B[b] = self.models.modes[m].affine.effective(nodes[j].belief.params[m].mean)
            x0[b] = nodes[j].state
        Hs, ls, cs = kernels.condense(A, B, x0, self._ref, self.cost.Q, self.cost.R, self.cost.QN)

        size = n_u + n_tail * tail_len
        Hj = np.zeros((len(nodes), size, size))
        bj = np.zeros((len(nodes), size))
        constant = 0.0
        for j, node in enumerate(nodes):
            W0 = scale * node.weight
            Hj[j, :n_u, :n_u] += 2.0 * W0 * self.cost.R
            e = node.state - self._ref[0]
            constant += W0 * (float(e @ self.cost.Q @ e) + self.cost.stage_constant)
        for b, (j, m, W) in enumerate(branches):
            slot = n_u + (m if self.layout.per_branch else 0) * tail_len
            sel = np.concatenate([np.arange(n_u), np.arange(slot, slot + tail_len)])
            Hj[j][np.ix_(sel, sel)] += W * Hs[b]
            bj[j, sel] += W * ls[b]
            constant += W * (cs[b] + self.cost.stage_constant * (H - 1))
        blocks = []
        for j in range(len(nodes)):
            idx = np.concatenate(
                [nd + j * n_u + np.arange(n_u), nd + nh + j * n_tail * tail_len + np.arange(n_tail * tail_len)]
            )
            blocks.append((idx, 0.5 * (Hj[j] + Hj[j].T), bj[j]))
        return self._dual_cost(tree), ExploitationQP(tuple(blocks), constant)

    # -- public -----------------------------------------------------------
    def evaluate_plan(self, plan: ControlPlan) -> float:
        tree = self.tree(plan)
        if self._fast:
            exploit, _, _ = self._exploit_fast(tree, plan, want_grad=False)
        else:
            exploit = self._exploit_slow(tree, plan)
        return self._dual_cost(tree) + exploit

    def value(self, vec) -> float:
        self.n_evals += 1
        try:
            with np.errstate(over="raise", invalid="raise"):
                f = self.evaluate_plan(self.layout.unflatten(vec))
        except (NumericalError, FloatingPointError, np.linalg.LinAlgError):
            f = np.inf
        if not np.isfinite(f):
            self.last_failed = True
            return FAILURE_VALUE
        self.last_failed = False
        return f

    def value_and_grad(self, vec) -> tuple[float, np.ndarray]:
        vec = np.asarray(vec, dtype=float)
        if self.cfg.gradient == "fd" or not self._fast:
            return self._value_and_fd_grad(vec, range(vec.size))
        self.n_evals += 1
        plan = self.layout.unflatten(vec)
        try:
            with np.errstate(over="raise", invalid="raise"):
                tree = self.tree(plan)
                exploit, d_head, d_tail = self._exploit_fast(tree, plan, want_grad=True)
                f = self._dual_cost(tree) + exploit
        except (NumericalError, FloatingPointError, np.linalg.LinAlgError):
            f = np.inf
        if not np.isfinite(f):
            self.last_failed = True
            return FAILURE_VALUE, np.zeros_like(vec)
        self.last_failed = False
        g = np.empty_like(vec)
        nd = self.layout.n_dual
        g[nd : nd + self.layout.n_head] = d_head.ravel()
        g[nd + self.layout.n_head :] = d_tail.ravel()
        if nd:
            g[:nd] = self._fd(vec, f, range(nd))
        return f, g

    def _value_and_fd_grad(self, vec, indices):
        f = self.value(vec)
        if self.last_failed:
            return f, np.zeros_like(vec)
        g = np.zeros_like(vec)
        g[list(indices)] = self._fd(vec, f, indices)
        return f, g

    def _fd(self, vec, f0, indices) -> np.ndarray:
        """Central differences, one-sided where a bound would be crossed."""
        out = []
        for i in indices:
            h = self.fd_step * (1.0 + abs(vec[i]))
            up = vec[i] + h <= self.upper[i]
            down = vec[i] - h >= self.lower[i]
            vp = vec.copy()
            vm = vec.copy()
            if up and down:
                vp[i] += h
                vm[i] -= h
                out.append((self.value(vp) - self.value(vm)) / (2.0 * h))
            elif up:
                vp[i] += h
                out.append((self.value(vp) - f0) / h)
            else:
                vm[i] -= h
                out.append((f0 - self.value(vm)) / h)
        return np.array(out)


def total_objective(
    plan: ControlPlan,
    root_state,
    root_belief: BeliefState,
    models: ModelSet,
    cost: CostSpec,
    topology: TreeTopology,
    bank: SampleBank,
    cfg: ObjectiveConfig = ObjectiveConfig(),
    caps: Optional[CapConfig] = None,
    t0: int = 0,
) -> float:
    """Merged objective of one plan; non-finite evaluations give ``FAILURE_VALUE``."""
    obj = DualObjective(models, cost, topology, root_state, root_belief, bank, cfg, caps, t0)
    return obj.value(obj.layout.flatten(plan))
