"""Synthetic latent trees, CLTM ground truths and sampled datasets."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .model import (
    CltmModel,
    CltmParameters,
    Covariate,
    CovariateSchema,
    LatentTreeStructure,
    TimeSeriesDataset,
    VariableKind,
    observed_edge_positions,
)


class InfeasibleSpecError(ValueError):
    pass


def random_tree_edges(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniform random labelled tree on n nodes via a Pruefer sequence."""
    if n == 1:
        return []
    if n == 2:
        return [(0, 1)]
    seq = rng.integers(0, n, size=n - 2)
    degree = np.ones(n, dtype=int)
    for x in seq:
        degree[x] += 1
    edges = []
    for x in seq:
        leaf = int(np.flatnonzero(degree == 1)[0])
        edges.append((leaf, int(x)))
        degree[leaf] -= 1
        degree[x] -= 1
    u, v = np.flatnonzero(degree == 1)
    edges.append((int(u), int(v)))
    return edges


def random_latent_tree(n_nodes: int, rng: np.random.Generator, length_range=(0.2, 2.0), hidden_fraction: float = 0.7) -> LatentTreeStructure:
    """Random tree whose hidden nodes are drawn among degree >= 3 nodes.

    Leaves and degree-2 nodes are always observed, so the result is in
    canonical form.  Observed ids are "y0".., hidden ids "h0"..
    """
    edges = random_tree_edges(n_nodes, rng)
    deg = np.zeros(n_nodes, dtype=int)
    for u, v in edges:
        deg[u] += 1
        deg[v] += 1
    is_hidden = (deg >= 3) & (rng.random(n_nodes) < hidden_fraction)
    names, no, nh = {}, 0, 0
    for k in range(n_nodes):
        if is_hidden[k]:
            names[k] = f"h{nh}"
            nh += 1
        else:
            names[k] = f"y{no}"
            no += 1
    nodes = [(names[k], VariableKind.HIDDEN if is_hidden[k] else VariableKind.OBSERVED) for k in range(n_nodes)]
    nodes.sort(key=lambda p: (p[1] is VariableKind.HIDDEN, int(p[0][1:])))
    lo, hi = length_range
    out_edges = [(names[u], names[v], float(rng.uniform(lo, hi))) for u, v in edges]
    return LatentTreeStructure(tuple(nodes), tuple(out_edges))


def random_leaf_latent_tree(n_observed: int, n_hidden: int, rng: np.random.Generator, length_range=(0.3, 0.8)) -> LatentTreeStructure:
    """Tree whose observed nodes are all leaves hanging off hidden nodes of
    degree >= 3 (or a plain random tree when n_hidden == 0)."""
    lo, hi = length_range
    obs = [f"y{i}" for i in range(n_observed)]
    if n_hidden == 0:
        if n_observed < 1:
            raise InfeasibleSpecError("need at least one observed node")
        edges = [(obs[u], obs[v], float(rng.uniform(lo, hi))) for u, v in random_tree_edges(n_observed, rng)]
        return LatentTreeStructure(tuple((x, VariableKind.OBSERVED) for x in obs), tuple(edges))
    hid = [f"h{j}" for j in range(n_hidden)]
    hedges = random_tree_edges(n_hidden, rng)
    hdeg = np.zeros(n_hidden, dtype=int)
    for u, v in hedges:
        hdeg[u] += 1
        hdeg[v] += 1
    need = np.maximum(0, 3 - hdeg)
    if need.sum() > n_observed:
        raise InfeasibleSpecError(f"{n_hidden} hidden nodes need at least {need.sum()} observed leaves, got {n_observed}")
    owner = [j for j in range(n_hidden) for _ in range(need[j])]
    owner += list(rng.integers(0, n_hidden, size=n_observed - len(owner)))
    owner = list(rng.permutation(owner))
    edges = [(hid[u], hid[v], float(rng.uniform(lo, hi))) for u, v in hedges]
    edges += [(hid[owner[i]], obs[i], float(rng.uniform(lo, hi))) for i in range(n_observed)]
    nodes = [(x, VariableKind.OBSERVED) for x in obs] + [(h, VariableKind.HIDDEN) for h in hid]
    return LatentTreeStructure(tuple(nodes), tuple(edges))


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    Tree couplings are phi_kl = 4 atanh(exp(-length)) unless
    ``coupling_range`` is given, in which case they are drawn uniformly from
    it.  Node biases are -sum(phi_kl)/2 over incident edges (the {0,1}
    image of a field-free +-1 Ising model), plus uniform noise of
    half-width ``bias_noise``.  Observed nodes get a lag-1 weight from
    ``lag_weight_range`` (bias shifted by minus half of it) and, when
    ``seasonal_range`` is set, a day-of-week weight per node and weekday.
    """

    n_observed: int = 6
    n_hidden: int = 2
    T: int = 1000
    seed: int = 0
    length_range: tuple = (0.3, 0.8)
    coupling_range: tuple | None = None
    bias_noise: float = 0.0
    lag_weight_range: tuple = (0.0, 0.0)
    seasonal_range: tuple | None = None
    start_date: str = "2024-01-01"
    with_edges: bool = False
    n_edge_covariates: int = 1
    edge_intercept: float = -1.0
    edge_weight_range: tuple = (-1.0, 1.0)
    hidden_edge_weight_range: tuple = (0.5, 1.5)

    def __post_init__(self):
        if self.n_observed < 1 or self.n_hidden < 0 or self.T < 1:
            raise InfeasibleSpecError("need n_observed >= 1, n_hidden >= 0, T >= 1")
        if self.with_edges and self.n_observed < 2:
            raise InfeasibleSpecError("edge generation needs at least two observed nodes")
        lo, hi = self.length_range
        if not 0 < lo <= hi:
            raise InfeasibleSpecError("edge lengths must be positive")


@dataclass(frozen=True)
class SyntheticData:
    model: CltmModel
    dataset: TimeSeriesDataset
    edge_model: object | None  # prediction.EdgeModel when edges were generated
    spec: SyntheticSpec


def _ising_coupling(length: float) -> float:
    return 4.0 * float(np.arctanh(np.exp(-length)))


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Draw a ground-truth CLTM and roll it forward for ``spec.T`` steps.

    Lag covariates are computed from the realized history, states at each t
    are exact samples from the tree, and ties (if requested) follow the
    logistic edge model on exogenous N(0, 1) pair covariates and the
    hidden-parent posteriors given y^(t).  Deterministic per seed.
    """
    from .covariates import build_covariates
    from .inference import PotentialAssignment, _sigmoid, sample_configuration, sum_product
    from .prediction import EdgeModel, hidden_parent_incidence

    rng = np.random.default_rng(spec.seed)
    structure = random_leaf_latent_tree(spec.n_observed, spec.n_hidden, rng, spec.length_range)
    pos = structure.index()
    N, E = len(structure.nodes), len(structure.edges)
    obs = structure.observed_ids
    obs_pos = np.array([pos[i] for i in obs])

    if spec.coupling_range is None:
        couplings = np.array([_ising_coupling(l) for _, _, l in structure.edges])
    else:
        couplings = rng.uniform(*spec.coupling_range, size=E)
    bias = np.zeros(N)
    for e, (u, v, _) in enumerate(structure.edges):
        bias[pos[u]] -= couplings[e] / 2
        bias[pos[v]] -= couplings[e] / 2
    if spec.bias_noise:
        bias += rng.uniform(-spec.bias_noise, spec.bias_noise, size=N)
    lag_w = rng.uniform(*spec.lag_weight_range, size=len(obs))
    bias[obs_pos] -= lag_w / 2
    seasonal = rng.uniform(*spec.seasonal_range, size=(len(obs), 7)) if spec.seasonal_range else None

    start = dt.date.fromisoformat(spec.start_date)
    dates = [start + dt.timedelta(days=t) for t in range(spec.T)]
    # observed columns of the dataset are in structure observed order
    states = np.zeros((spec.T, len(obs)), dtype=np.int8)
    node_pots = np.zeros((spec.T, N))
    weekday = np.array([d.weekday() for d in dates])
    if not np.any(lag_w):
        # no feedback from the past: draw every time point sharing a weekday at once
        groups = [np.flatnonzero(weekday == k) for k in range(7)] if seasonal is not None else [np.arange(spec.T)]
        for idx in groups:
            if idx.size == 0:
                continue
            phi = bias.copy()
            if seasonal is not None:
                phi[obs_pos] += seasonal[:, weekday[idx[0]]]
            node_pots[idx] = phi
            z = sample_configuration(structure, PotentialAssignment(phi[None, :], couplings[None, :]), None, rng, size=idx.size)
            states[idx] = z[:, obs_pos]
    else:
        prev = np.zeros(len(obs))
        for t in range(spec.T):
            phi = bias.copy()
            phi[obs_pos] += lag_w * prev
            if seasonal is not None:
                phi[obs_pos] += seasonal[:, weekday[t]]
            node_pots[t] = phi
            z = sample_configuration(structure, PotentialAssignment(phi[None, :], couplings[None, :]), None, rng)[0]
            states[t] = z[obs_pos]
            prev = states[t].astype(float)

    names = ["lag1"]
    coef = lag_w[:, None]
    builders = ["lag:1"]
    if seasonal is not None:
        from .covariates import DAY_NAMES

        names += [f"dow_{d}" for d in DAY_NAMES]
        coef = np.hstack([coef, seasonal])
        builders.append("dow")
    schema = CovariateSchema(tuple(Covariate(n, "binary") for n in names), ())
    params = CltmParameters(bias, coef, couplings, np.zeros((len(observed_edge_positions(structure)), 0)))
    model = CltmModel(structure, schema, params)

    timestamps = tuple(d.isoformat() for d in dates)
    edge_model = None
    edge_cov = None
    edge_names = ()
    W = None
    if spec.with_edges:
        n = len(obs)
        P = n * (n - 1) // 2
        K = spec.n_edge_covariates
        edge_cov = rng.standard_normal((spec.T, P, K))
        edge_names = tuple(f"exo{q}" for q in range(K))
        hidden, C = hidden_parent_incidence(model, obs)
        ev = np.full((spec.T, N), -1, dtype=int)
        ev[:, obs_pos] = states
        belief = sum_product(structure, PotentialAssignment(node_pots, np.broadcast_to(couplings, (spec.T, E))), ev)
        post = belief.node_marginals[:, [pos[h] for h in hidden]]
        F = C[None, :, :] * post[:, None, :]
        edge_model = EdgeModel(
            edge_names,
            hidden,
            spec.edge_intercept,
            rng.uniform(*spec.edge_weight_range, size=K),
            rng.uniform(*spec.hidden_edge_weight_range, size=len(hidden)),
        )
        prob = _sigmoid(edge_model.logits(edge_cov, F))
        W = (rng.random(prob.shape) < prob).astype(np.int8)

    dataset = TimeSeriesDataset(
        obs,
        states,
        edge_covariates=edge_cov,
        edge_covariate_names=edge_names,
        edge_observations=W,
        timestamps=timestamps,
    )
    dataset = build_covariates(dataset, builders)
    return SyntheticData(model, dataset, edge_model, spec)
