"""Exact sum-product inference on a binary latent tree.

The unnormalized weight of a configuration z is
    exp(sum_k phi_k z_k + sum_{kl} phi_kl z_k z_l)
with z in {0,1}.  Messages are kept in log space, so saturated potentials
(|phi| ~ 50 and beyond) never overflow.  Every routine is batched over a
leading axis (usually time points): potentials are (B, N) and (B, E).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .model import (
    CltmModel,
    LatentTreeStructure,
    TimeSeriesDataset,
    UnknownNodeError,
    VariableKind,
    observed_edge_positions,
)


@dataclass(frozen=True)
class TreeIndex:
    """Rooted traversal order of a structure, in integer node positions."""

    n_nodes: int
    root: int
    order: tuple  # preorder, root first
    parent: tuple  # parent position, -1 at root
    parent_edge: tuple  # structure edge index joining node to parent, -1 at root
    edge_child: tuple  # for each edge, which endpoint is the child
    edge_u: tuple
    edge_v: tuple


@lru_cache(maxsize=256)
def tree_index(structure: LatentTreeStructure) -> TreeIndex:
    ids = structure.node_ids
    pos = {i: k for k, i in enumerate(ids)}
    N = len(ids)
    adj: list[list[tuple[int, int]]] = [[] for _ in range(N)]
    eu, ev = [], []
    for e, (u, v, _) in enumerate(structure.edges):
        a, b = pos[u], pos[v]
        adj[a].append((b, e))
        adj[b].append((a, e))
        eu.append(a)
        ev.append(b)
    # root is the lowest node id
    root = pos[min(ids)]
    parent = [-1] * N
    parent_edge = [-1] * N
    order = [root]
    seen = {root}
    stack = [root]
    while stack:
        x = stack.pop()
        for y, e in sorted(adj[x]):
            if y not in seen:
                seen.add(y)
                parent[y] = x
                parent_edge[y] = e
                order.append(y)
                stack.append(y)
    if len(order) != N:
        raise ValueError("structure is not connected")
    edge_child = [0] * len(eu)
    for k in range(N):
        if parent_edge[k] >= 0:
            edge_child[parent_edge[k]] = k
    return TreeIndex(N, root, tuple(order), tuple(parent), tuple(parent_edge), tuple(edge_child), tuple(eu), tuple(ev))


@dataclass(frozen=True)
class PotentialAssignment:
    """Node and edge potentials, batched: node (B, N), edge (B, E)."""

    node: np.ndarray
    edge: np.ndarray
    time_index: tuple = ()

    def __post_init__(self):
        node = np.atleast_2d(np.asarray(self.node, dtype=float))
        edge = np.asarray(self.edge, dtype=float)
        if edge.ndim == 1:
            edge = edge[None, :] if node.shape[0] == 1 else edge.reshape(node.shape[0], -1)
        object.__setattr__(self, "node", node)
        object.__setattr__(self, "edge", edge)
        if not (np.all(np.isfinite(node)) and np.all(np.isfinite(edge))):
            raise ValueError("potentials must be finite")

    @property
    def batch(self) -> int:
        return self.node.shape[0]

    def at(self, b: int) -> "PotentialAssignment":
        t = (self.time_index[b],) if self.time_index else ()
        return PotentialAssignment(self.node[b:b + 1], self.edge[b:b + 1], t)


@dataclass(frozen=True)
class BeliefState:
    """BP output. node_marginals (B, N) = P(z_k = 1); edge_marginals (B, E, 2, 2)
    indexed [z_u, z_v] in the structure's edge orientation; log_partition (B,)."""

    node_marginals: np.ndarray
    edge_marginals: np.ndarray
    log_partition: np.ndarray

    def to_dict(self) -> dict:
        return {
            "node_marginals": self.node_marginals.tolist(),
            "edge_marginals": self.edge_marginals.tolist(),
            "log_partition": self.log_partition.tolist(),
        }


# --- potentials -----------------------------------------------------------


def _covariate_columns(names: tuple, wanted: list[str], what: str) -> list[int]:
    missing = [w for w in wanted if w not in names]
    if missing:
        raise ValueError(f"schema mismatch: {what} covariates {missing} not in dataset")
    return [names.index(w) for w in wanted]


@dataclass(frozen=True)
class DesignTensors:
    """Covariates gathered into the layout the model's weights act on.

    X_node: (B, n_obs, K_n) for observed nodes in structure order.
    X_edge: (B, E_oo, K_e) for observed-observed structure edges.
    """

    X_node: np.ndarray
    X_edge: np.ndarray
    obs_positions: np.ndarray  # structure position of each observed node
    oo_edges: np.ndarray  # structure edge index of each observed-observed edge
    states: np.ndarray  # (B, n_obs) observed states, structure order
    times: tuple


def design_tensors(model: CltmModel, dataset: TimeSeriesDataset, times) -> DesignTensors:
    s = model.structure
    times = tuple(int(t) for t in np.atleast_1d(times))
    for t in times:
        if not 0 <= t < dataset.T:
            raise IndexError(f"time index {t} outside [0, {dataset.T})")
    col = {i: k for k, i in enumerate(dataset.node_ids)}
    obs = s.observed_ids
    missing = [i for i in obs if i not in col]
    if missing:
        raise ValueError(f"observed nodes {missing} not present in dataset")
    data_cols = np.array([col[i] for i in obs], dtype=int)
    pos = s.index()
    obs_positions = np.array([pos[i] for i in obs], dtype=int)
    tt = np.array(times, dtype=int)

    ncols = _covariate_columns(dataset.node_covariate_names, model.schema.node_names, "node")
    X_node = dataset.node_covariates[np.ix_(tt, data_cols, ncols)] if ncols else np.zeros((len(tt), len(obs), 0))

    oo = observed_edge_positions(s)
    ecols = _covariate_columns(dataset.edge_covariate_names, model.schema.edge_names, "edge")
    if ecols and oo:
        pidx = {}
        n = dataset.n
        for i in range(n):
            for j in range(i + 1, n):
                pidx[(i, j)] = len(pidx)
        prs = []
        for k in oo:
            u, v, _ = s.edges[k]
            a, b = sorted((col[u], col[v]))
            prs.append(pidx[(a, b)])
        X_edge = dataset.edge_covariates[np.ix_(tt, np.array(prs), ecols)]
    else:
        X_edge = np.zeros((len(tt), len(oo), len(ecols)))
    if np.isnan(X_node).any() or np.isnan(X_edge).any():
        raise ValueError("covariates undefined at requested times (inside burn-in?)")
    states = dataset.states[np.ix_(tt, data_cols)]
    return DesignTensors(X_node, X_edge, obs_positions, np.array(oo, dtype=int), states, times)


def potentials_from_design(model: CltmModel, design: DesignTensors, params=None) -> PotentialAssignment:
    p = model.parameters if params is None else params
    B = design.X_node.shape[0]
    node = np.broadcast_to(p.node_bias, (B, p.node_bias.size)).copy()
    if design.X_node.shape[2]:
        node[:, design.obs_positions] += np.einsum("bnk,nk->bn", design.X_node, p.node_coef)
    edge = np.broadcast_to(p.edge_bias, (B, p.edge_bias.size)).copy()
    if design.X_edge.shape[2] and design.oo_edges.size:
        edge[:, design.oo_edges] += np.einsum("bek,ek->be", design.X_edge, p.edge_coef)
    return PotentialAssignment(node, edge, design.times)


def compute_potentials(model: CltmModel, dataset: TimeSeriesDataset, t) -> PotentialAssignment:
    """Linear node/edge potentials at time(s) ``t``; hidden nodes and
    hidden-incident edges get their bias only."""
    return potentials_from_design(model, design_tensors(model, dataset, t))


# --- sum-product ------------------------------------------------------------


def _evidence_array(structure: LatentTreeStructure, evidence, batch: int) -> np.ndarray:
    """Normalize evidence to a (B, N) int array with -1 for free nodes."""
    N = len(structure.nodes)
    if evidence is None:
        return np.full((batch, N), -1, dtype=int)
    if isinstance(evidence, np.ndarray):
        ev = np.atleast_2d(evidence).astype(int)
        if ev.shape[1] != N:
            raise ValueError("evidence array must have one column per node")
        return np.broadcast_to(ev, (batch, N)) if ev.shape[0] == 1 else ev
    pos = structure.index()
    ev = np.full((batch, N), -1, dtype=int)
    for node, val in evidence.items():
        if node not in pos:
            raise UnknownNodeError(node)
        ev[:, pos[node]] = np.asarray(val, dtype=int)
    if not np.all(np.isin(ev, (-1, 0, 1))):
        raise ValueError("evidence values must be 0 or 1")
    return ev


def _upward(idx: TreeIndex, node_pot, edge_pot, ev):
    B, N = node_pot.shape
    up = np.zeros((B, N, 2))
    up[:, :, 1] = node_pot
    up[:, :, 0][ev == 1] = -np.inf
    up[:, :, 1][ev == 0] = -np.inf
    msg = np.zeros((B, N, 2))
    for k in reversed(idx.order[1:]):
        p = idx.parent[k]
        phi = edge_pot[:, idx.parent_edge[k]]
        u0, u1 = up[:, k, 0], up[:, k, 1]
        msg[:, k, 0] = np.logaddexp(u0, u1)
        msg[:, k, 1] = np.logaddexp(u0, u1 + phi)
        up[:, p] += msg[:, k]
    logz = np.logaddexp(up[:, idx.root, 0], up[:, idx.root, 1])
    return up, msg, logz


def log_partition(structure: LatentTreeStructure, potentials: PotentialAssignment, evidence=None) -> np.ndarray:
    """log Z restricted to evidence-consistent configurations (upward pass only)."""
    idx = tree_index(structure)
    ev = _evidence_array(structure, evidence, potentials.batch)
    return _upward(idx, potentials.node, potentials.edge, ev)[2]


def _beliefs(structure, potentials, evidence):
    idx = tree_index(structure)
    node_pot, edge_pot = potentials.node, potentials.edge
    ev = _evidence_array(structure, evidence, potentials.batch)
    up, msg, logz = _upward(idx, node_pot, edge_pot, ev)
    full = up.copy()
    cavity = np.zeros_like(up)  # parent's belief excluding the child's message
    for k in idx.order[1:]:
        p = idx.parent[k]
        phi = edge_pot[:, idx.parent_edge[k]]
        cav = full[:, p] - msg[:, k]
        cavity[:, k] = cav
        full[:, k, 0] += np.logaddexp(cav[:, 0], cav[:, 1])
        full[:, k, 1] += np.logaddexp(cav[:, 0], cav[:, 1] + phi)
    return idx, up, full, cavity, logz


def sum_product(structure: LatentTreeStructure, potentials: PotentialAssignment, evidence=None) -> BeliefState:
    """Exact node/edge marginals and log-partition by one upward and one
    downward pass.  ``evidence`` maps node id -> 0/1 (or arrays over the batch)."""
    idx, up, full, cavity, logz = _beliefs(structure, potentials, evidence)
    B, N = potentials.node.shape
    norm = np.logaddexp(full[:, :, 0], full[:, :, 1])
    node_marg = np.exp(full[:, :, 1] - norm)
    E = len(structure.edges)
    edge_marg = np.zeros((B, E, 2, 2))
    for e in range(E):
        c = idx.edge_child[e]
        phi = potentials.edge[:, e]
        # table[s_child, s_parent]
        tab = up[:, c, :, None] + cavity[:, c, None, :]
        tab[:, 1, 1] += phi
        tab = np.exp(tab - logz[:, None, None])
        if idx.edge_u[e] != c:
            tab = tab.transpose(0, 2, 1)
        edge_marg[:, e] = tab
    return BeliefState(node_marg, edge_marg, logz)


def infer_hidden(model: CltmModel, dataset: TimeSeriesDataset, t) -> dict[str, np.ndarray]:
    """Posterior P(h = 1 | y^(t), x^(t)) for each hidden node, observed nodes clamped."""
    design = design_tensors(model, dataset, t)
    pots = potentials_from_design(model, design)
    ev = np.full(pots.node.shape, -1, dtype=int)
    ev[:, design.obs_positions] = design.states.astype(int)
    belief = sum_product(model.structure, pots, ev)
    pos = model.structure.index()
    out = {h: belief.node_marginals[:, pos[h]] for h in model.structure.hidden_ids}
    if np.ndim(t) == 0:
        out = {h: float(v[0]) for h, v in out.items()}
    return out


def sample_configuration(structure: LatentTreeStructure, potentials: PotentialAssignment, evidence, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Exact ancestral samples, shape (size, N) in structure node order.

    ``potentials`` must hold a single batch row.  The root is drawn from its
    BP marginal and each child from P(z_child | z_parent), which only needs
    the child's upward belief and the edge potential.
    """
    if potentials.batch != 1:
        raise ValueError("sample_configuration expects potentials for a single time point")
    idx = tree_index(structure)
    ev = _evidence_array(structure, evidence, 1)
    up, _, logz = _upward(idx, potentials.node, potentials.edge, ev)
    up = up[0]
    out = np.zeros((size, idx.n_nodes), dtype=np.int8)
    u = rng.random((size, idx.n_nodes))
    r = idx.root
    p1 = np.exp(up[r, 1] - logz[0])
    out[:, r] = u[:, r] < p1
    for k in idx.order[1:]:
        p = idx.parent[k]
        phi = potentials.edge[0, idx.parent_edge[k]]
        # logit of P(z_k = 1 | z_p) = up1 - up0 + phi * z_p
        with np.errstate(invalid="ignore"):
            logit = up[k, 1] - up[k, 0] + phi * out[:, p]
        prob = np.where(np.isneginf(up[k, 1]), 0.0, np.where(np.isneginf(up[k, 0]), 1.0, _sigmoid(logit)))
        out[:, k] = u[:, k] < prob
    return out


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def enumerate_partition(structure: LatentTreeStructure, node_pot, edge_pot, evidence: Mapping[str, int] | None = None):
    """Brute-force oracle over all 2^N configurations (small trees only).

    Returns (log Z, node marginals (N,), edge marginals (E, 2, 2)).
    """
    N = len(structure.nodes)
    pos = structure.index()
    node_pot = np.asarray(node_pot, dtype=float)
    edge_pot = np.asarray(edge_pot, dtype=float)
    configs = ((np.arange(2 ** N)[:, None] >> np.arange(N)[None, :]) & 1).astype(float)
    if evidence:
        keep = np.ones(len(configs), dtype=bool)
        for node, val in evidence.items():
            keep &= configs[:, pos[node]] == val
        configs = configs[keep]
    eu = np.array([pos[u] for u, _, _ in structure.edges], dtype=int)
    evv = np.array([pos[v] for _, v, _ in structure.edges], dtype=int)
    logw = configs @ node_pot
    if len(eu):
        logw = logw + (configs[:, eu] * configs[:, evv]) @ edge_pot
    m = logw.max()
    w = np.exp(logw - m)
    Z = w.sum()
    logz = m + np.log(Z)
    p = w / Z
    node_marg = p @ configs
    edge_marg = np.zeros((len(eu), 2, 2))
    for e in range(len(eu)):
        for a in (0, 1):
            for b in (0, 1):
                edge_marg[e, a, b] = p[(configs[:, eu[e]] == a) & (configs[:, evv[e]] == b)].sum()
    return logz, node_marg, edge_marg


def hidden_kinds(structure: LatentTreeStructure) -> np.ndarray:
    return np.array([k is VariableKind.HIDDEN for _, k in structure.nodes])
