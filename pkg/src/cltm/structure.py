"""Latent tree reconstruction from an information-distance matrix.

Recursive grouping introduces hidden parents for sibling groups found with
the statistic phi_ijk = d_ik - d_jk; CLGrouping runs it locally on the
closed neighbourhoods of a minimum spanning tree over the observed nodes
and splices the local latent subtrees back in.
"""
from __future__ import annotations

import enum
import itertools
import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .model import LatentTreeStructure, VariableKind

log = logging.getLogger(__name__)

EPS_TEST = 0.1
EPS_MIN = 0.05


class InconsistentDistanceError(ValueError):
    """Distances admit no additive tree fit within tolerance."""


class Relation(str, enum.Enum):
    SIBLINGS = "siblings"
    I_PARENT_OF_J = "i_parent_of_j"
    J_PARENT_OF_I = "j_parent_of_i"
    SEPARATED = "separated"


@dataclass(frozen=True)
class GroupingTestResult:
    relation: Relation
    phi_mean: float
    phi_spread: float


@dataclass(frozen=True)
class StructureConfig:
    eps_test: float = EPS_TEST
    eps_min: float = EPS_MIN
    method: str = "clgrouping"  # or "rg" for global recursive grouping
    check_fit: bool = False


def phi_statistic(D, i: int, j: int, k: int) -> float:
    if len({i, j, k}) < 3:
        raise ValueError("phi needs three distinct nodes")
    n = len(D)
    for x in (i, j, k):
        if not 0 <= x < n:
            raise IndexError(f"node index {x} out of range")
    return float(D[i][k] - D[j][k])


def classify_pair(D, i: int, j: int, witnesses, eps_test: float = EPS_TEST) -> GroupingTestResult:
    """Sibling / parent test for the pair (i, j) against the witness set.

    phi_ijk == +d_ij for every witness k puts j on every path out of i, so j
    is i's parent; -d_ij makes i the parent of j.  A constant phi strictly
    inside (-d_ij, d_ij) means i and j hang off a common (possibly hidden)
    parent.
    """
    witnesses = [k for k in witnesses]
    if not witnesses:
        raise ValueError("empty witness set")
    if i in witnesses or j in witnesses:
        raise ValueError("witnesses must exclude i and j")
    phis = np.array([phi_statistic(D, i, j, k) for k in witnesses])
    mean = float(phis.mean())
    spread = float(phis.max() - phis.min())
    dij = float(D[i][j])
    if spread > eps_test:
        rel = Relation.SEPARATED
    else:
        to_j, to_i = abs(mean - dij), abs(mean + dij)
        if min(to_j, to_i) <= eps_test:
            rel = Relation.J_PARENT_OF_I if to_j <= to_i else Relation.I_PARENT_OF_J
        elif abs(mean) < dij - eps_test:
            rel = Relation.SIBLINGS
        else:
            rel = Relation.SEPARATED
    return GroupingTestResult(rel, mean, spread)


def hidden_id_source(prefix: str = "h", start: int = 0) -> Iterator[str]:
    return (f"{prefix}{k}" for k in itertools.count(start))


# --- recursive grouping ----------------------------------------------------


class _DistTable:
    """Symmetric distance lookup keyed by node label, extendable with hidden nodes."""

    def __init__(self):
        self.d: dict[tuple, float] = {}

    def __getitem__(self, key):
        a, b = key
        if a == b:
            return 0.0
        return self.d[(a, b)] if (a, b) in self.d else self.d[(b, a)]

    def __setitem__(self, key, val):
        self.d[key] = float(val)


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the earliest label as representative for determinism
            if str(ra) > str(rb):
                ra, rb = rb, ra
            self.parent[rb] = ra


def _sibling_lengths(dist: _DistTable, family: list, outside: list) -> np.ndarray:
    """Least-squares child-to-new-parent lengths for a sibling group.

    Uses l_i + l_j = d_ij within the group and l_i - l_j = phi_ijk for every
    outside witness k.
    """
    m = len(family)
    rows, rhs = [], []
    for a, b in itertools.combinations(range(m), 2):
        r = np.zeros(m)
        r[a] = r[b] = 1.0
        rows.append(r)
        rhs.append(dist[family[a], family[b]])
        for k in outside:
            r = np.zeros(m)
            r[a], r[b] = 1.0, -1.0
            rows.append(r)
            rhs.append(dist[family[a], k] - dist[family[b], k])
    sol, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    return sol


def _rg(labels: list, dist: _DistTable, eps_test: float, new_id: Callable[[], str], strict: bool):
    """Recursive grouping over ``labels``.  Returns (edges, hidden_ids) with
    edges as (u, v, length); ``dist`` is extended with new hidden nodes."""
    active = list(labels)
    edges: list[tuple] = []
    hidden: list[str] = []
    while len(active) > 2:
        pos = {x: k for k, x in enumerate(active)}
        Dm = [[dist[a, b] for b in active] for a in active]
        uf = _UnionFind(active)
        child_of: dict = {}
        best_sib = None
        for a, b in itertools.combinations(active, 2):
            i, j = pos[a], pos[b]
            wit = [pos[k] for k in active if k != a and k != b]
            res = classify_pair(Dm, i, j, wit, eps_test)
            if res.relation is Relation.SIBLINGS:
                uf.union(a, b)
            elif res.relation is Relation.J_PARENT_OF_I:
                uf.union(a, b)
                child_of.setdefault(a, []).append((abs(res.phi_mean - Dm[i][j]), b))
            elif res.relation is Relation.I_PARENT_OF_J:
                uf.union(a, b)
                child_of.setdefault(b, []).append((abs(res.phi_mean + Dm[i][j]), a))
            elif abs(res.phi_mean) < Dm[i][j]:
                key = (res.phi_spread, str(a), str(b))
                if best_sib is None or key < best_sib[0]:
                    best_sib = (key, a, b)
        groups: dict = {}
        for x in active:
            groups.setdefault(uf.find(x), []).append(x)
        families = sorted(groups.values(), key=lambda g: pos[g[0]])
        if all(len(f) == 1 for f in families):
            if strict or best_sib is None:
                raise InconsistentDistanceError(
                    f"recursive grouping made no progress on {len(active)} nodes; "
                    f"worst quartet {worst_quartet(np.array(Dm), active)}"
                )
            # noisy input: merge the most sibling-like pair
            _, a, b = best_sib
            uf.union(a, b)
            groups = {}
            for x in active:
                groups.setdefault(uf.find(x), []).append(x)
            families = sorted(groups.values(), key=lambda g: pos[g[0]])

        new_active = []
        new_hidden: dict[str, tuple[list, np.ndarray]] = {}
        for fam in families:
            if len(fam) == 1:
                new_active.append(fam[0])
                continue
            # parent candidate: the member most often named parent by others
            votes: dict = {}
            for c in fam:
                for err, p in child_of.get(c, []):
                    if p in fam:
                        n, e = votes.get(p, (0, 0.0))
                        votes[p] = (n + 1, e + err)
            if votes:
                parent = min(votes, key=lambda p: (-votes[p][0], votes[p][1], pos[p]))
                for c in fam:
                    if c != parent:
                        edges.append((parent, c, max(dist[parent, c], 0.0)))
                new_active.append(parent)
            else:
                outside = [k for k in active if k not in fam]
                lengths = _sibling_lengths(dist, fam, outside)
                h = new_id()
                hidden.append(h)
                new_hidden[h] = (fam, lengths)
                for c, ell in zip(fam, lengths):
                    dist[h, c] = ell
                    edges.append((h, c, max(float(ell), 0.0)))
                new_active.append(h)
        # distances from new hidden nodes to everything else still active
        for h, (fam, lengths) in new_hidden.items():
            for x in new_active:
                if x == h:
                    continue
                if x in new_hidden:
                    if (x, h) in dist.d:
                        continue
                    fam2, len2 = new_hidden[x]
                    vals = [dist[a, b] - la - lb for a, la in zip(fam, lengths) for b, lb in zip(fam2, len2)]
                else:
                    vals = [dist[a, x] - la for a, la in zip(fam, lengths)]
                dist[h, x] = float(np.mean(vals))
        active = new_active
    if len(active) == 2:
        a, b = active
        edges.append((a, b, max(dist[a, b], 0.0)))
    return edges, hidden


def worst_quartet(D: np.ndarray, labels) -> tuple | None:
    worst, arg = -1.0, None
    n = len(labels)
    for q in itertools.combinations(range(n), 4):
        a, b, c, d = q
        sums = sorted([D[a, b] + D[c, d], D[a, c] + D[b, d], D[a, d] + D[b, c]])
        v = sums[2] - sums[1]
        if v > worst:
            worst, arg = v, tuple(labels[x] for x in q)
    return None if arg is None else (arg, worst)


def _labels_for(D, labels):
    n = len(D)
    return [str(x) for x in (labels if labels is not None else range(n))]


def _check_fit(tree: LatentTreeStructure, D: np.ndarray, labels: list[str], eps_fit: float):
    from .model import tree_distances

    td = tree_distances(tree)
    worst = 0.0
    for a, b in itertools.combinations(range(len(labels)), 2):
        worst = max(worst, abs(td[labels[a]][labels[b]] - D[a, b]))
    if worst > eps_fit:
        q = worst_quartet(D, labels)
        raise InconsistentDistanceError(f"no additive fit within {eps_fit:g} (max error {worst:.4g}); worst-violating quartet {q}")


def recursive_grouping(D, eps_test: float = EPS_TEST, fresh_ids: Iterator[str] | None = None, labels=None, eps_min: float = EPS_MIN, check_fit: bool = True) -> LatentTreeStructure:
    """Latent tree over ``labels`` (default "0".."n-1") plus new hidden nodes."""
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1] or D.shape[0] < 2:
        raise ValueError("need a square distance matrix over at least 2 nodes")
    if not np.allclose(D, D.T) or np.any(np.diag(D) != 0):
        raise ValueError("distance matrix must be symmetric with zero diagonal")
    labels = _labels_for(D, labels)
    fresh_ids = fresh_ids or hidden_id_source()
    dist = _DistTable()
    for a, b in itertools.combinations(range(len(labels)), 2):
        dist[labels[a], labels[b]] = D[a, b]
    edges, hidden = _rg(labels, dist, eps_test, lambda: next(fresh_ids), strict=check_fit)
    nodes = [(x, VariableKind.OBSERVED) for x in labels] + [(h, VariableKind.HIDDEN) for h in hidden]
    tree = canonicalize(nodes, edges, eps_min)
    if check_fit:
        _check_fit(tree, D, labels, 3 * eps_test)
    return tree


# --- Chow-Liu skeleton -------------------------------------------------------


def chow_liu_skeleton(D, labels=None) -> list[tuple[str, str, float]]:
    """Minimum spanning tree of D (Kruskal); equal lengths are taken in
    lexicographic (min index, max index) order."""
    D = np.asarray(D, dtype=float)
    n = len(D)
    if n < 2:
        raise ValueError("need at least two nodes")
    labels = _labels_for(D, labels)
    cand = sorted((D[i, j], i, j) for i in range(n) for j in range(i + 1, n))
    uf = _UnionFind(range(n))
    out = []
    for w, i, j in cand:
        if uf.find(i) != uf.find(j):
            uf.union(i, j)
            out.append((labels[i], labels[j], float(w)))
            if len(out) == n - 1:
                break
    return out


# --- CLGrouping ---------------------------------------------------------------


class _WorkingTree:
    """Mutable adjacency used while splicing local latent subtrees."""

    def __init__(self, nodes, edges):
        self.adj: dict[str, dict[str, float]] = {x: {} for x in nodes}
        self.resolved: set[frozenset] = set()
        for u, v, w in edges:
            self.add(u, v, w)

    def add(self, u, v, w, resolved=False):
        self.adj.setdefault(u, {})[v] = w
        self.adj.setdefault(v, {})[u] = w
        if resolved:
            self.resolved.add(frozenset((u, v)))

    def remove(self, u, v):
        del self.adj[u][v]
        del self.adj[v][u]
        self.resolved.discard(frozenset((u, v)))

    def first_hop(self, u, v):
        prev = {v: None}
        queue = deque([v])
        while queue:
            x = queue.popleft()
            if x == u:
                return prev[u]
            for y in self.adj[x]:
                if y not in prev:
                    prev[y] = x
                    queue.append(y)
        raise ValueError("disconnected")


def _anchors(tree: _WorkingTree, u, toward, observed: set, limit: int = 3):
    """Nearest observed nodes behind ``u`` (away from neighbour ``toward``),
    reached through resolved edges only, with their path lengths to ``u``."""
    if u in observed:
        return [(u, 0.0)]
    found = []
    seen = {u, toward}
    frontier = [(0.0, u)]
    while frontier:
        frontier.sort(key=lambda p: (p[0], p[1]))
        d, x = frontier.pop(0)
        if x in observed:
            found.append((x, d))
            if len(found) >= limit:
                break
            continue
        for y, w in sorted(tree.adj[x].items()):
            if y in seen or frozenset((x, y)) not in tree.resolved:
                continue
            seen.add(y)
            frontier.append((d + w, y))
    return found


def _tree_distance_estimate(tree: _WorkingTree, D: dict, observed: set, u, v) -> float:
    if u in observed and v in observed:
        return D[u][v]
    au = _anchors(tree, u, tree.first_hop(u, v), observed)
    av = _anchors(tree, v, tree.first_hop(v, u), observed)
    if not au or not av:
        raise InconsistentDistanceError(f"no observed anchor for {u} or {v}")
    vals = [D[a][b] - la - lb for a, la in au for b, lb in av]
    return float(np.mean(vals))


def cl_grouping(D, eps_test: float = EPS_TEST, eps_min: float = EPS_MIN, labels=None, check_fit: bool = False, method: str = "clgrouping") -> LatentTreeStructure:
    """Latent tree from an observed-node distance matrix.

    Builds the minimum spanning tree, then for each internal node (in label
    order) replaces its closed neighbourhood by the recursive-grouping
    subtree over that neighbourhood.  Short edges and degree <= 2 hidden
    nodes are contracted at the end.
    """
    D = np.asarray(D, dtype=float)
    n = len(D)
    if n < 3:
        raise ValueError("cl_grouping needs at least 3 nodes")
    labels = _labels_for(D, labels)
    if method == "rg":
        return recursive_grouping(D, eps_test, labels=labels, eps_min=eps_min, check_fit=check_fit)
    if method != "clgrouping":
        raise ValueError(f"unknown structure method {method!r}")
    Dd = {a: {b: float(D[i, j]) for j, b in enumerate(labels)} for i, a in enumerate(labels)}
    observed = set(labels)
    mst = chow_liu_skeleton(D, labels)
    tree = _WorkingTree(labels, mst)
    fresh = hidden_id_source("g")
    order = {x: k for k, x in enumerate(labels)}
    internal = [x for x in labels if len(tree.adj[x]) >= 2]
    for i in internal:
        nbd = [i] + sorted(tree.adj[i], key=lambda x: (x not in observed, order.get(x, 0), x))
        dist = _DistTable()
        for a, b in itertools.combinations(nbd, 2):
            dist[a, b] = _tree_distance_estimate(tree, Dd, observed, a, b)
        edges, hidden = _rg(nbd, dist, eps_test, lambda: next(fresh), strict=check_fit)
        for x in list(tree.adj[i]):
            tree.remove(i, x)
        for u, v, w in edges:
            tree.add(u, v, w, resolved=True)
    nodes = [(x, VariableKind.OBSERVED) for x in labels]
    nodes += [(x, VariableKind.HIDDEN) for x in tree.adj if x not in observed]
    edges = []
    for u in tree.adj:
        for v, w in tree.adj[u].items():
            if (v, u) not in {(e[0], e[1]) for e in edges}:
                edges.append((u, v, w))
    out = canonicalize(nodes, edges, eps_min)
    if check_fit:
        _check_fit(out, D, labels, 3 * eps_test)
    return out


def canonicalize(nodes, edges, eps_min: float = EPS_MIN, prefix: str = "h") -> LatentTreeStructure:
    """Contract short hidden-incident edges and hidden nodes of degree <= 2,
    clamp remaining lengths to eps_min and renumber hidden nodes."""
    kind = {x: VariableKind(k) for x, k in nodes}
    adj: dict[str, dict[str, float]] = {x: {} for x in kind}
    for u, v, w in edges:
        adj[u][v] = w
        adj[v][u] = w
    order = {x: k for k, (x, _) in enumerate(nodes)}

    def merge(keep, drop):
        for y, w in list(adj[drop].items()):
            del adj[y][drop]
            if y != keep:
                adj[keep][y] = w
                adj[y][keep] = w
        del adj[drop]
        del kind[drop]

    changed = True
    while changed:
        changed = False
        for u in sorted(adj, key=order.get):
            if u not in adj:
                continue
            for v, w in sorted(adj[u].items(), key=lambda p: order[p[0]]):
                if w >= eps_min:
                    continue
                hu, hv = kind[u] is VariableKind.HIDDEN, kind[v] is VariableKind.HIDDEN
                if not (hu or hv):
                    continue
                if hu and hv:
                    keep, drop = (u, v) if order[u] < order[v] else (v, u)
                else:
                    keep, drop = (v, u) if hu else (u, v)
                merge(keep, drop)
                changed = True
                break
            if changed:
                break
        if changed:
            continue
        for h in sorted([x for x in adj if kind[x] is VariableKind.HIDDEN], key=order.get):
            deg = len(adj[h])
            if deg <= 1:
                for y in list(adj[h]):
                    del adj[y][h]
                del adj[h]
                del kind[h]
                changed = True
                break
            if deg == 2:
                (a, wa), (b, wb) = sorted(adj[h].items(), key=lambda p: order[p[0]])
                del adj[a][h]
                del adj[b][h]
                del adj[h]
                del kind[h]
                adj[a][b] = wa + wb
                adj[b][a] = wa + wb
                changed = True
                break

    kept = sorted(adj, key=order.get)
    rename, k = {}, 0
    for x in kept:
        if kind[x] is VariableKind.HIDDEN:
            rename[x] = f"{prefix}{k}"
            k += 1
        else:
            rename[x] = x
    out_nodes = [(rename[x], kind[x]) for x in kept]
    out_edges = []
    for u in kept:
        for v, w in sorted(adj[u].items(), key=lambda p: order[p[0]]):
            if order[u] < order[v]:
                out_edges.append((rename[u], rename[v], max(float(w), eps_min)))
    return LatentTreeStructure(tuple(out_nodes), tuple(out_edges))


# --- comparison, clustering, export ----------------------------------------------


def splits(tree: LatentTreeStructure) -> set[frozenset]:
    """Observed-node bipartitions induced by each edge, as the side without
    the smallest observed id."""
    obs = sorted(tree.observed_ids)
    anchor = obs[0]
    adj = tree.adjacency()
    out = set()
    for u, v, _ in tree.edges:
        # component of v after removing edge u-v
        seen = {v}
        stack = [v]
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if y not in seen and not (x == v and y == u):
                    seen.add(y)
                    stack.append(y)
        side = frozenset(x for x in seen if x in set(obs))
        if anchor in side:
            side = frozenset(set(obs) - side)
        out.add(side)
    return out


def robinson_foulds(a: LatentTreeStructure, b: LatentTreeStructure) -> int:
    """Size of the symmetric difference of observed-node splits.  Trivial
    splits are kept so an observed node's leaf/internal role counts."""
    if set(a.observed_ids) != set(b.observed_ids):
        raise ValueError("trees must share the same observed nodes")
    return len(splits(a) ^ splits(b))


def extract_clusters(tree: LatentTreeStructure, n_clusters: int) -> list[list[str]]:
    """Partition observed nodes by cutting the n_clusters - 1 longest edges.

    Equal lengths prefer hidden-hidden edges, then lexicographic order.
    Components without observed nodes contribute nothing to the partition.
    """
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    obs = tree.observed_ids
    if n_clusters > len(obs):
        raise ValueError("more clusters than observed nodes")
    hidden = set(tree.hidden_ids)

    def key(e):
        u, v, w = e
        hh = u in hidden and v in hidden
        return (-w, not hh, min(u, v), max(u, v))

    cut = {frozenset((u, v)) for u, v, _ in sorted(tree.edges, key=key)[: n_clusters - 1]}
    uf = _UnionFind(tree.node_ids)
    for u, v, _ in tree.edges:
        if frozenset((u, v)) not in cut:
            uf.union(u, v)
    groups: dict = {}
    for x in obs:
        groups.setdefault(uf.find(x), []).append(x)
    pos = {x: k for k, x in enumerate(obs)}
    return sorted((sorted(g, key=pos.get) for g in groups.values()), key=lambda g: pos[g[0]])


def to_dot(tree: LatentTreeStructure, name: str = "latent_tree") -> str:
    lines = [f"graph {name} {{"]
    for x, k in tree.nodes:
        shape = "box" if k is VariableKind.OBSERVED else "circle"
        lines.append(f'  "{x}" [shape={shape}];')
    for u, v, w in tree.edges:
        lines.append(f'  "{u}" -- "{v}" [label="{w:.4f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def additive_distances(tree: LatentTreeStructure, labels: Sequence[str] | None = None) -> np.ndarray:
    """Observed-node path-distance matrix of a tree (rows in ``labels`` order)."""
    from .model import tree_distances

    labels = list(labels) if labels is not None else tree.observed_ids
    td = tree_distances(tree)
    return np.array([[td[a][b] for b in labels] for a in labels])
