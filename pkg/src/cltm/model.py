"""Core domain types for conditional latent tree models.

A model is a tree over observed and hidden binary variables whose node and
edge potentials are linear in covariates.  Everything here is a value object;
arrays are treated as read-only once a type is constructed.
"""
from __future__ import annotations

import enum
import itertools
import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class VariableKind(str, enum.Enum):
    OBSERVED = "observed"
    HIDDEN = "hidden"


class VariableMode(str, enum.Enum):
    BINARY = "binary"
    GAUSSIAN = "gaussian"


class UnknownNodeError(KeyError):
    pass


@dataclass(frozen=True)
class LatentTreeStructure:
    """Undirected tree over observed and hidden nodes with additive lengths.

    ``nodes`` is a sequence of ``(node_id, VariableKind)`` and ``edges`` a
    sequence of ``(u, v, length)``.  Node order is significant: it fixes the
    layout of parameter arrays and the BP root (first id in sorted order).
    """

    nodes: tuple
    edges: tuple

    def __post_init__(self):
        nodes = tuple((str(i), VariableKind(k)) for i, k in self.nodes)
        edges = tuple((str(u), str(v), float(w)) for u, v, w in self.edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

    @property
    def node_ids(self) -> list[str]:
        return [i for i, _ in self.nodes]

    @property
    def observed_ids(self) -> list[str]:
        return [i for i, k in self.nodes if k is VariableKind.OBSERVED]

    @property
    def hidden_ids(self) -> list[str]:
        return [i for i, k in self.nodes if k is VariableKind.HIDDEN]

    def kind(self, node_id: str) -> VariableKind:
        for i, k in self.nodes:
            if i == node_id:
                return k
        raise UnknownNodeError(node_id)

    def index(self) -> dict[str, int]:
        return {i: n for n, (i, _) in enumerate(self.nodes)}

    def adjacency(self) -> dict[str, dict[str, float]]:
        adj: dict[str, dict[str, float]] = {i: {} for i in self.node_ids}
        for u, v, w in self.edges:
            adj.setdefault(u, {})[v] = w
            adj.setdefault(v, {})[u] = w
        return adj

    def degree(self, node_id: str) -> int:
        return sum(1 for u, v, _ in self.edges if node_id in (u, v))

    def is_hidden_edge(self, u: str, v: str) -> bool:
        return self.kind(u) is VariableKind.HIDDEN or self.kind(v) is VariableKind.HIDDEN

    def path(self, i: str, j: str) -> list[str]:
        """Node sequence of the unique i-j path."""
        adj = self.adjacency()
        for x in (i, j):
            if x not in adj:
                raise UnknownNodeError(x)
        prev = {i: None}
        queue = deque([i])
        while queue:
            x = queue.popleft()
            if x == j:
                break
            for y in adj[x]:
                if y not in prev:
                    prev[y] = x
                    queue.append(y)
        if j not in prev:
            raise ValueError(f"no path between {i!r} and {j!r}")
        out = [j]
        while out[-1] != i:
            out.append(prev[out[-1]])
        return out[::-1]


def path_distance(structure: LatentTreeStructure, i: str, j: str) -> float:
    """Sum of edge lengths along the unique path between ``i`` and ``j``."""
    nodes = structure.path(i, j)
    if len(nodes) == 1:
        return 0.0
    adj = structure.adjacency()
    return float(sum(adj[a][b] for a, b in zip(nodes, nodes[1:])))


def tree_distances(structure: LatentTreeStructure) -> dict[str, dict[str, float]]:
    """All-pairs path distances by one BFS per node."""
    adj = structure.adjacency()
    out = {}
    for src in adj:
        dist = {src: 0.0}
        queue = deque([src])
        while queue:
            x = queue.popleft()
            for y, w in adj[x].items():
                if y not in dist:
                    dist[y] = dist[x] + w
                    queue.append(y)
        out[src] = dist
    return out


@dataclass(frozen=True)
class Covariate:
    name: str
    domain: str = "real"  # "binary" or "real"


@dataclass(frozen=True)
class CovariateSchema:
    """Named node covariates (individual + global) and shared edge covariates."""

    node_covariates: tuple = ()
    edge_covariates: tuple = ()

    def __post_init__(self):
        def norm(cs):
            return tuple(c if isinstance(c, Covariate) else Covariate(*c) if isinstance(c, (tuple, list)) else Covariate(str(c)) for c in cs)

        object.__setattr__(self, "node_covariates", norm(self.node_covariates))
        object.__setattr__(self, "edge_covariates", norm(self.edge_covariates))

    @property
    def node_names(self) -> list[str]:
        return [c.name for c in self.node_covariates]

    @property
    def edge_names(self) -> list[str]:
        return [c.name for c in self.edge_covariates]

    @property
    def K_n(self) -> int:
        return len(self.node_covariates)

    @property
    def K_e(self) -> int:
        return len(self.edge_covariates)


def pair_index(n: int) -> dict[tuple[int, int], int]:
    """Position of each unordered pair (i < j) in the flattened pair axis."""
    return {p: k for k, p in enumerate(itertools.combinations(range(n), 2))}


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Node states over time with node/edge covariates and optional ties.

    states: (T, n); node_covariates: (T, n, K_n); edge_covariates:
    (T, n*(n-1)/2, K_e); edge_observations: (T, n*(n-1)/2) binary.  Pairs
    follow ``itertools.combinations(range(n), 2)`` order.  Rows before
    ``burn_in`` may carry undefined (NaN) lag covariates and are never used
    for fitting or scoring.
    """

    node_ids: tuple
    states: np.ndarray
    node_covariates: np.ndarray | None = None
    node_covariate_names: tuple = ()
    edge_covariates: np.ndarray | None = None
    edge_covariate_names: tuple = ()
    edge_observations: np.ndarray | None = None
    timestamps: tuple | None = None
    burn_in: int = 0
    mode: VariableMode = VariableMode.BINARY
    leakage_audited: bool = False

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2:
            raise ValueError("states must be a T x n array")
        T, n = states.shape
        if len(self.node_ids) != n:
            raise ValueError(f"{len(self.node_ids)} node ids for {n} state columns")
        object.__setattr__(self, "node_ids", tuple(str(i) for i in self.node_ids))
        object.__setattr__(self, "mode", VariableMode(self.mode))
        if self.mode is VariableMode.BINARY and not np.all(np.isin(states, (0.0, 1.0))):
            raise ValueError("binary-mode states must contain only 0/1")
        object.__setattr__(self, "states", states)

        X = self.node_covariates
        if X is None:
            X = np.zeros((T, n, 0))
        X = np.asarray(X, dtype=float)
        if X.shape[:2] != (T, n):
            raise ValueError(f"node covariates shape {X.shape} does not match T={T}, n={n}")
        if X.shape[2] != len(self.node_covariate_names):
            raise ValueError("node covariate names do not match covariate arity")
        object.__setattr__(self, "node_covariates", X)
        object.__setattr__(self, "node_covariate_names", tuple(self.node_covariate_names))

        P = n * (n - 1) // 2
        Xe = self.edge_covariates
        if Xe is None:
            Xe = np.zeros((T, P, 0))
        Xe = np.asarray(Xe, dtype=float)
        if Xe.shape[:2] != (T, P):
            raise ValueError(f"edge covariates shape {Xe.shape} does not match T={T}, pairs={P}")
        if Xe.shape[2] != len(self.edge_covariate_names):
            raise ValueError("edge covariate names do not match covariate arity")
        object.__setattr__(self, "edge_covariates", Xe)
        object.__setattr__(self, "edge_covariate_names", tuple(self.edge_covariate_names))

        if self.edge_observations is not None:
            W = np.asarray(self.edge_observations, dtype=float)
            if W.shape != (T, P):
                raise ValueError(f"edge observations shape {W.shape} != {(T, P)}")
            if not np.all(np.isin(W, (0.0, 1.0))):
                raise ValueError("edge observations must be 0/1")
            object.__setattr__(self, "edge_observations", W)
        if self.timestamps is not None:
            if len(self.timestamps) != T:
                raise ValueError("timestamps length != T")
            object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if not 0 <= self.burn_in <= T:
            raise ValueError("burn_in outside [0, T]")

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations(range(self.n), 2))

    def node_covariate(self, name: str) -> np.ndarray:
        return self.node_covariates[:, :, self.node_covariate_names.index(name)]

    def with_covariates(self, **changes) -> "TimeSeriesDataset":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class CltmParameters:
    """Linear potential weights laid out against a structure and schema.

    node_bias: (N,) intercept c_0 per node in structure order.
    node_coef: (n_obs, K_n) covariate weights per observed node, in the
        structure's observed-node order; hidden nodes are bias-only.
    edge_bias: (E,) intercept e_0 per structure edge.
    edge_coef: (E_oo, K_e) shared-covariate weights for observed-observed
        edges in structure edge order.
    """

    node_bias: np.ndarray
    node_coef: np.ndarray
    edge_bias: np.ndarray
    edge_coef: np.ndarray

    def __post_init__(self):
        for name in ("node_bias", "node_coef", "edge_bias", "edge_coef"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @classmethod
    def zeros(cls, structure: LatentTreeStructure, schema: CovariateSchema) -> "CltmParameters":
        N, E = len(structure.nodes), len(structure.edges)
        n_obs = len(structure.observed_ids)
        E_oo = len(observed_edge_positions(structure))
        return cls(np.zeros(N), np.zeros((n_obs, schema.K_n)), np.zeros(E), np.zeros((E_oo, schema.K_e)))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.node_bias, self.node_coef.ravel(), self.edge_bias, self.edge_coef.ravel()])

    def unflatten(self, theta: np.ndarray) -> "CltmParameters":
        shapes = [self.node_bias.shape, self.node_coef.shape, self.edge_bias.shape, self.edge_coef.shape]
        parts, pos = [], 0
        for shp in shapes:
            size = int(np.prod(shp))
            parts.append(np.asarray(theta[pos:pos + size], dtype=float).reshape(shp))
            pos += size
        if pos != len(theta):
            raise ValueError("parameter vector length mismatch")
        return CltmParameters(*parts)

    @property
    def size(self) -> int:
        return self.node_bias.size + self.node_coef.size + self.edge_bias.size + self.edge_coef.size


def observed_edge_positions(structure: LatentTreeStructure) -> list[int]:
    """Indices of structure edges whose endpoints are both observed."""
    obs = set(structure.observed_ids)
    return [k for k, (u, v, _) in enumerate(structure.edges) if u in obs and v in obs]


@dataclass(frozen=True)
class CltmModel:
    structure: LatentTreeStructure
    schema: CovariateSchema
    parameters: CltmParameters
    variable_mode: VariableMode = VariableMode.BINARY

    def node_weights(self, node_id: str) -> dict[str, float]:
        idx = self.structure.index()[node_id]
        out = {"bias": float(self.parameters.node_bias[idx])}
        if self.structure.kind(node_id) is VariableKind.OBSERVED:
            row = self.structure.observed_ids.index(node_id)
            for name, c in zip(self.schema.node_names, self.parameters.node_coef[row]):
                out[name] = float(c)
        return out

    def edge_weights(self, k: int) -> dict[str, float]:
        out = {"bias": float(self.parameters.edge_bias[k])}
        oo = observed_edge_positions(self.structure)
        if k in oo:
            row = oo.index(k)
            for name, e in zip(self.schema.edge_names, self.parameters.edge_coef[row]):
                out[name] = float(e)
        return out


# --- validation ---------------------------------------------------------


def validate_structure(structure: LatentTreeStructure) -> list[str]:
    report = []
    ids = structure.node_ids
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        report.append(f"duplicate node ids: {dup}")
    known = set(ids)
    for u, v, w in structure.edges:
        if u not in known or v not in known:
            report.append(f"edge ({u}, {v}) references unknown node")
        if u == v:
            report.append(f"self loop at {u}")
        if not np.isfinite(w) or w <= 0:
            report.append(f"edge ({u}, {v}) has non-positive or non-finite length {w}")
    if len(structure.edges) != len(ids) - 1:
        report.append(f"not a tree: {len(structure.edges)} edges for {len(ids)} nodes")
    # connectivity / cycles via union-find
    parent = {i: i for i in known}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v, _ in structure.edges:
        if u not in known or v not in known:
            continue
        ru, rv = find(u), find(v)
        if ru == rv:
            report.append(f"not a tree: edge ({u}, {v}) closes a cycle")
        else:
            parent[ru] = rv
    if known and len({find(i) for i in known}) > 1:
        report.append("not a tree: graph is disconnected")
    for h in structure.hidden_ids:
        deg = structure.degree(h)
        if deg <= 2:
            report.append(f"contractible hidden node {h} (degree {deg})")
    return report


def validate_model(model: CltmModel) -> list[str]:
    """List every violated invariant; an empty list means the model is valid."""
    report = validate_structure(model.structure)
    s, p = model.structure, model.parameters
    names = model.schema.node_names
    if len(set(names)) != len(names):
        report.append("duplicate node covariate names")
    enames = model.schema.edge_names
    if len(set(enames)) != len(enames):
        report.append("duplicate edge covariate names")
    for c in (*model.schema.node_covariates, *model.schema.edge_covariates):
        if c.domain not in ("binary", "real"):
            report.append(f"covariate {c.name} has unknown domain {c.domain!r}")
    N, E = len(s.nodes), len(s.edges)
    n_obs, E_oo = len(s.observed_ids), len(observed_edge_positions(s))
    if p.node_bias.shape != (N,):
        report.append(f"node bias shape {p.node_bias.shape} != ({N},)")
    if p.node_coef.shape != (n_obs, model.schema.K_n):
        report.append(f"node coefficient shape {p.node_coef.shape} != ({n_obs}, {model.schema.K_n})")
    if p.edge_bias.shape != (E,):
        report.append(f"edge bias shape {p.edge_bias.shape} != ({E},)")
    if p.edge_coef.shape != (E_oo, model.schema.K_e):
        report.append(f"edge coefficient shape {p.edge_coef.shape} != ({E_oo}, {model.schema.K_e})")
    for name in ("node_bias", "node_coef", "edge_bias", "edge_coef"):
        if not np.all(np.isfinite(getattr(p, name))):
            report.append(f"non-finite entries in {name}")
    return report


# --- JSON ---------------------------------------------------------------


def structure_to_dict(structure: LatentTreeStructure) -> dict:
    return {
        "nodes": [{"id": i, "kind": k.value} for i, k in structure.nodes],
        "edges": [{"u": u, "v": v, "length": w} for u, v, w in structure.edges],
    }


def structure_from_dict(d: dict) -> LatentTreeStructure:
    return LatentTreeStructure(
        tuple((n["id"], n["kind"]) for n in d["nodes"]),
        tuple((e["u"], e["v"], e["length"]) for e in d["edges"]),
    )


def model_to_dict(model: CltmModel) -> dict:
    s = model.structure
    return {
        "variable_mode": model.variable_mode.value,
        "structure": structure_to_dict(s),
        "schema": {
            "node_covariates": [{"name": c.name, "domain": c.domain} for c in model.schema.node_covariates],
            "edge_covariates": [{"name": c.name, "domain": c.domain} for c in model.schema.edge_covariates],
        },
        "parameters": {
            "node_weights": {i: model.node_weights(i) for i in s.node_ids},
            "edge_weights": [{"u": u, "v": v, "weights": model.edge_weights(k)} for k, (u, v, _) in enumerate(s.edges)],
        },
    }


def model_from_dict(d: dict) -> CltmModel:
    structure = structure_from_dict(d["structure"])
    schema = CovariateSchema(
        tuple(Covariate(c["name"], c.get("domain", "real")) for c in d["schema"]["node_covariates"]),
        tuple(Covariate(c["name"], c.get("domain", "real")) for c in d["schema"]["edge_covariates"]),
    )
    params = CltmParameters.zeros(structure, schema)
    nb, nc, eb, ec = (params.node_bias.copy(), params.node_coef.copy(), params.edge_bias.copy(), params.edge_coef.copy())
    nw = d["parameters"]["node_weights"]
    obs = structure.observed_ids
    for k, i in enumerate(structure.node_ids):
        nb[k] = nw[i]["bias"]
        if i in obs:
            nc[obs.index(i)] = [nw[i][name] for name in schema.node_names]
    oo = observed_edge_positions(structure)
    ew = d["parameters"]["edge_weights"]
    for k, (u, v, _) in enumerate(structure.edges):
        entry = ew[k]
        if {entry["u"], entry["v"]} != {u, v}:
            raise ValueError(f"edge weight entry {k} does not match edge ({u}, {v})")
        eb[k] = entry["weights"]["bias"]
        if k in oo:
            ec[oo.index(k)] = [entry["weights"][name] for name in schema.edge_names]
    return CltmModel(structure, schema, CltmParameters(nb, nc, eb, ec), VariableMode(d.get("variable_mode", "binary")))


def dumps_model(model: CltmModel) -> str:
    # json emits repr(float), the shortest string that round-trips exactly
    return json.dumps(model_to_dict(model), indent=2, sort_keys=True)


def loads_model(text: str) -> CltmModel:
    return model_from_dict(json.loads(text))


def star_structure(leaves: Sequence[str], hidden: str = "h0", length: float = 1.0) -> LatentTreeStructure:
    nodes = [(hidden, VariableKind.HIDDEN)] + [(x, VariableKind.OBSERVED) for x in leaves]
    return LatentTreeStructure(tuple(nodes), tuple((hidden, x, length) for x in leaves))


def chain_structure(ids: Iterable[str], lengths: Iterable[float]) -> LatentTreeStructure:
    ids = list(ids)
    lengths = list(lengths)
    return LatentTreeStructure(
        tuple((i, VariableKind.OBSERVED) for i in ids),
        tuple((a, b, w) for a, b, w in zip(ids, ids[1:], lengths)),
    )
