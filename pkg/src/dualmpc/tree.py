"""Scenario tree of the dual part of the prediction horizon.

Every branching stage splits a node into ``n_m`` mode branches and each of
those into ``N_s`` parameter/noise samples, so a branching stage multiplies
the node count by ``N_s * n_m``. Children of parent ``j`` occupy the
contiguous local indices ``j*F .. j*F + F - 1`` (``F = N_s * n_m``), mode
major: child ``c`` belongs to mode ``c // N_s`` and sample slot ``c % N_s``.

Stages listed in ``schedule`` branch; the remaining stages before the last
branching stage are carried forward along the mode-weighted mean with the
information frozen, which is how deferred dual steps are realised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .belief import BeliefState, CapConfig, NumericalError, full_update
from .model import ConfigurationError, ModelSet, psd_sqrt


@dataclass(frozen=True)
class TreeTopology:
    L: int
    N_s: int
    n_m: int
    N: int
    schedule: tuple = field(default=None)

    def __post_init__(self):
        if self.N_s < 1 or self.n_m < 1 or self.L < 0:
            raise ConfigurationError("need N_s >= 1, n_m >= 1, L >= 0")
        if self.L >= self.N:
            raise ConfigurationError(f"dual horizon L={self.L} must be shorter than N={self.N}")
        sched = tuple(range(self.L)) if self.schedule is None else tuple(sorted(set(self.schedule)))
        if len(sched) != self.L:
            raise ConfigurationError(f"schedule {sched} must list exactly L={self.L} stages")
        if sched and (sched[0] < 0 or sched[-1] >= self.N - 1):
            raise ConfigurationError(f"branching stages must lie in 0..{self.N - 2}")
        object.__setattr__(self, "schedule", sched)

    @property
    def fanout(self) -> int:
        return self.N_s * self.n_m

    @property
    def T(self) -> int:
        """First exploitation stage (one past the last branching stage)."""
        return self.schedule[-1] + 1 if self.schedule else 0

    def branches_at(self, k: int) -> bool:
        return k in self.schedule

    def n_branchings_before(self, k: int) -> int:
        return sum(1 for s in self.schedule if s < k)

    def count(self, k: int) -> int:
        return self.fanout ** self.n_branchings_before(k)

    @property
    def counts(self) -> tuple:
        return tuple(self.count(k) for k in range(self.T + 1))

    @property
    def stage_offsets(self) -> tuple:
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.counts)[:-1]]))

    @property
    def n_nodes(self) -> int:
        return sum(self.counts)

    def locate(self, g: int) -> tuple[int, int]:
        """Global node index -> ``(stage, local index)``."""
        for k, (off, c) in enumerate(zip(self.stage_offsets, self.counts)):
            if g < off + c:
                return k, g - off
        raise IndexError(g)

    def parent(self, g: int) -> Optional[int]:
        """Global index of the parent node, ``None`` for the root."""
        k, j = self.locate(g)
        if k == 0:
            return None
        pj = j // self.fanout if self.branches_at(k - 1) else j
        return self.stage_offsets[k - 1] + pj

    def mode_of(self, g: int) -> Optional[int]:
        """Mode branch that generated node ``g`` (``None`` if not branched)."""
        k, j = self.locate(g)
        if k == 0 or not self.branches_at(k - 1):
            return None
        return (j % self.fanout) // self.N_s


def build_topology(L: int, N_s: int, n_m: int, N: int, schedule: Optional[Sequence[int]] = None) -> TreeTopology:
    return TreeTopology(L, N_s, n_m, N, None if schedule is None else tuple(schedule))


@dataclass(frozen=True, eq=False)
class SampleBank:
    """Standard-normal base draws, one row per child of every branching stage.

    Row layout is ``[z_gamma (max n_gamma), z_w (n_x)]``.
    """

    z: tuple  # per stage k < T: array (count(k+1), n_g + n_x) or None
    n_gamma: int

    @classmethod
    def draw(cls, topology: TreeTopology, models: ModelSet, rng: np.random.Generator) -> "SampleBank":
        n_g = max(m.n_gamma for m in models.modes)
        width = n_g + models.state_dim
        z = tuple(
            rng.standard_normal((topology.count(k + 1), width)) if topology.branches_at(k) else None
            for k in range(topology.T)
        )
        return cls(z, n_g)


@dataclass(frozen=True, eq=False)
class TreeNode:
    state: np.ndarray
    belief: BeliefState
    weight: float
    param_sample: Optional[np.ndarray] = None
    noise_sample: Optional[np.ndarray] = None
    base_sample: Optional[np.ndarray] = None


def draw_param_sample(mean, cov, z) -> np.ndarray:
    """Affine map ``mean + sqrt(cov) z`` of a standard-normal draw."""
    mean = np.asarray(mean, dtype=float)
    return mean + psd_sqrt(np.asarray(cov, dtype=float)) @ np.asarray(z, dtype=float)[: mean.size]


def weight_recursion(parent_weight: float, parent_belief: BeliefState, mode_index: int) -> float:
    return float(parent_belief.mode_probs[mode_index]) * parent_weight


def propagate(
    parent: TreeNode,
    u_parent,
    mode_index: int,
    models: ModelSet,
    base_sample,
    n_gamma_max: int,
    caps: Optional[CapConfig] = None,
    param_factor: Optional[np.ndarray] = None,
) -> TreeNode:
    """Child node generated by ``mode_index`` from one base draw.

    ``param_factor`` may carry a precomputed square root of the parent's
    parameter covariance for this mode.
    """
    mode = models.modes[mode_index]
    g = parent.belief.params[mode_index]
    z = np.asarray(base_sample, dtype=float)
    F = psd_sqrt(g.cov) if param_factor is None else param_factor
    gamma = g.mean + F @ z[: mode.n_gamma]
    w = mode.noise_factor @ z[n_gamma_max:]
    x = parent.state
    u = np.asarray(u_parent, dtype=float)
    child = mode.drift(x, u) + mode.basis(x, u) @ gamma + w
    if not np.all(np.isfinite(child)):
        raise NumericalError("non-finite predicted state")
    belief = full_update(parent.belief, models, x, u, child, caps)
    return TreeNode(
        state=child,
        belief=belief,
        weight=weight_recursion(parent.weight, parent.belief, mode_index),
        param_sample=gamma,
        noise_sample=w,
        base_sample=z,
    )


@dataclass(eq=False)
class ScenarioTree:
    topology: TreeTopology
    nodes: list  # per stage: list of TreeNode
    inputs: list  # per stage k < T: array (count(k), n_u)

    def stage(self, k: int) -> list:
        return self.nodes[k]

    def states(self, k: int) -> np.ndarray:
        return np.array([n.state for n in self.nodes[k]])

    def weights(self, k: int) -> np.ndarray:
        return np.array([n.weight for n in self.nodes[k]])

    def to_dict(self) -> dict:
        topo = self.topology
        stages = []
        for k, nodes in enumerate(self.nodes):
            rows = []
            for j, n in enumerate(nodes):
                g = topo.stage_offsets[k] + j
                rows.append(
                    {
                        "index": g,
                        "parent": topo.parent(g),
                        "mode": topo.mode_of(g),
                        "state": n.state.tolist(),
                        "weight": n.weight,
                        "mode_probs": n.belief.mode_probs.tolist(),
                        "param_means": [p.mean.tolist() for p in n.belief.params],
                        "param_covs": [p.cov.tolist() for p in n.belief.params],
                        "input": self.inputs[k][j].tolist() if k < len(self.inputs) else None,
                        "param_sample": None if n.param_sample is None else n.param_sample.tolist(),
                        "noise_sample": None if n.noise_sample is None else n.noise_sample.tolist(),
                    }
                )
            stages.append(rows)
        return {
            "L": topo.L,
            "N_s": topo.N_s,
            "n_m": topo.n_m,
            "N": topo.N,
            "schedule": list(topo.schedule),
            "stages": stages,
        }


def expand(
    root_state,
    root_belief: BeliefState,
    stage_inputs: Sequence[np.ndarray],
    models: ModelSet,
    topology: TreeTopology,
    bank: SampleBank,
    caps: Optional[CapConfig] = None,
) -> ScenarioTree:
    """Populate every node of the dual part for the given stage inputs."""
    if len(stage_inputs) != topology.T:
        raise ConfigurationError(f"need inputs for {topology.T} stages, got {len(stage_inputs)}")
    root = TreeNode(np.asarray(root_state, dtype=float), root_belief, 1.0)
    nodes = [[root]]
    inputs = []
    for k in range(topology.T):
        U = np.asarray(stage_inputs[k], dtype=float)
        parents = nodes[k]
        if U.shape[0] != len(parents):
            raise ConfigurationError(f"stage {k}: {U.shape[0]} inputs for {len(parents)} nodes")
        inputs.append(U)
        children = []
        if topology.branches_at(k):
            Z = bank.z[k]
            for j, parent in enumerate(parents):
                for m in range(topology.n_m):
                    F = psd_sqrt(parent.belief.params[m].cov)
                    for s in range(topology.N_s):
                        c = (j * topology.n_m + m) * topology.N_s + s
                        children.append(propagate(parent, U[j], m, models, Z[c], bank.n_gamma, caps, F))
        else:
            for j, parent in enumerate(parents):
                children.append(_mean_step(parent, U[j], models))
        nodes.append(children)
    return ScenarioTree(topology, nodes, inputs)


def _mean_step(parent: TreeNode, u, models: ModelSet) -> TreeNode:
    b = parent.belief
    x = sum(
        p * mode.mean_step(parent.state, u, g.mean)
        for p, mode, g in zip(b.mode_probs, models.modes, b.params)
    )
    return TreeNode(np.asarray(x, dtype=float), b, parent.weight)
