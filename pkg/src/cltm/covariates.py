"""Covariate builders.

Every feature at time t is computed from states/ties strictly before t or
from the calendar, so a one-step-ahead prediction never sees its target.
``leakage_audit`` checks this by recomputing features on truncated data.

Builder names accepted by ``build_covariates``:

node: ``lag:K`` previous state K steps back; ``dow`` day-of-week one-hot;
``regular[:W]`` activity rate over the previous W steps (all history if W
is omitted) at or above the cross-node median; ``triads`` triangles the node
was part of at t-1; ``clusters`` one-hot of a static node partition.

edge: ``edge_lag`` tie present at t-1; ``kcycle:K`` (K in 3, 4) number of
simple paths of length K-1 between the pair at t-1, i.e. K-cycles the pair
would close (K=3 counts common neighbours); ``present_prev`` number of
active nodes at t-1; ``regularity_pair[:W]`` one-hot of regular-regular /
regular-irregular / irregular-irregular.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .model import TimeSeriesDataset


class UnavailableInputError(ValueError):
    pass


@dataclass(frozen=True)
class BuiltFeatures:
    kind: str  # "node" or "edge"
    names: tuple
    values: np.ndarray  # (T, n, k) or (T, P, k)
    burn_in: int


@dataclass(frozen=True)
class BuildContext:
    states: np.ndarray  # (T, n)
    edges: np.ndarray | None  # (T, P)
    timestamps: tuple | None
    clusters: tuple | None = None  # one cluster label per node


def _adjacency(edges_t: np.ndarray, n: int) -> np.ndarray:
    A = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    A[iu] = edges_t
    return A + A.T


def _pairs_from_matrix(M: np.ndarray) -> np.ndarray:
    return M[np.triu_indices(M.shape[0], 1)]


def lag_feature(ctx: BuildContext, k: int = 1) -> BuiltFeatures:
    if k < 1:
        raise ValueError("lag must be >= 1")
    T, n = ctx.states.shape
    out = np.full((T, n, 1), np.nan)
    out[k:, :, 0] = ctx.states[:-k] if T > k else out[k:, :, 0]
    return BuiltFeatures("node", (f"lag{k}",), out, min(k, T))


def _as_date(x) -> dt.date:
    if isinstance(x, dt.datetime):
        return x.date()
    if isinstance(x, dt.date):
        return x
    return dt.date.fromisoformat(str(x)[:10])


DAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


def day_of_week(ctx: BuildContext) -> BuiltFeatures:
    if ctx.timestamps is None:
        raise UnavailableInputError("dow builder needs timestamps")
    T, n = ctx.states.shape
    out = np.zeros((T, n, 7))
    for t, ts in enumerate(ctx.timestamps):
        out[t, :, _as_date(ts).weekday()] = 1.0
    return BuiltFeatures("node", tuple(f"dow_{d}" for d in DAY_NAMES), out, 0)


def _regular_flags(states: np.ndarray, window: int | None) -> np.ndarray:
    T, n = states.shape
    flags = np.full((T, n), np.nan)
    csum = np.vstack([np.zeros((1, n)), np.cumsum(states, axis=0)])
    for t in range(1, T):
        lo = 0 if window is None else max(0, t - window)
        rate = (csum[t] - csum[lo]) / (t - lo)
        flags[t] = (rate >= np.median(rate)).astype(float)
    return flags


def regularity(ctx: BuildContext, window: int | None = None) -> BuiltFeatures:
    flags = _regular_flags(ctx.states, window)
    name = "regular" if window is None else f"regular{window}"
    return BuiltFeatures("node", (name,), flags[:, :, None], 1)


def node_triads(ctx: BuildContext) -> BuiltFeatures:
    if ctx.edges is None:
        raise UnavailableInputError("triads builder needs edge observations")
    T, n = ctx.states.shape
    out = np.full((T, n, 1), np.nan)
    for t in range(1, T):
        A = _adjacency(ctx.edges[t - 1], n)
        out[t, :, 0] = np.diag(A @ A @ A) / 2.0
    return BuiltFeatures("node", ("triads",), out, 1)


def cluster_onehot(ctx: BuildContext) -> BuiltFeatures:
    if ctx.clusters is None:
        raise UnavailableInputError("clusters builder needs a node partition")
    T, n = ctx.states.shape
    labels = sorted(set(ctx.clusters))
    out = np.zeros((T, n, len(labels)))
    for i, c in enumerate(ctx.clusters):
        out[:, i, labels.index(c)] = 1.0
    return BuiltFeatures("node", tuple(f"cluster_{c}" for c in labels), out, 0)


def edge_lag(ctx: BuildContext) -> BuiltFeatures:
    if ctx.edges is None:
        raise UnavailableInputError("edge_lag builder needs edge observations")
    T, P = ctx.edges.shape
    out = np.full((T, P, 1), np.nan)
    out[1:, :, 0] = ctx.edges[:-1]
    return BuiltFeatures("edge", ("edge_lag1",), out, 1)


def simple_path_counts(A: np.ndarray, length: int) -> np.ndarray:
    """Number of simple paths with ``length`` edges between every pair."""
    if length == 1:
        return A.copy()
    A2 = A @ A
    if length == 2:
        out = A2.copy()
        np.fill_diagonal(out, 0)
        return out
    if length == 3:
        deg = A.sum(axis=1)
        out = A2 @ A - A * (deg[:, None] + deg[None, :] - 1)
        np.fill_diagonal(out, 0)
        return out
    raise ValueError("path lengths above 3 (cycles above 4) are not supported")


def kcycle(ctx: BuildContext, k: int = 3) -> BuiltFeatures:
    if ctx.edges is None:
        raise UnavailableInputError("kcycle builder needs edge observations")
    if k not in (3, 4):
        raise ValueError("K-cycle counts are limited to K in {3, 4}")
    T, n = ctx.states.shape
    P = n * (n - 1) // 2
    out = np.full((T, P, 1), np.nan)
    for t in range(1, T):
        A = _adjacency(ctx.edges[t - 1], n)
        out[t, :, 0] = _pairs_from_matrix(simple_path_counts(A, k - 1))
    return BuiltFeatures("edge", (f"kcycle{k}",), out, 1)


def present_prev(ctx: BuildContext) -> BuiltFeatures:
    T, n = ctx.states.shape
    P = n * (n - 1) // 2
    out = np.full((T, P, 1), np.nan)
    out[1:, :, 0] = ctx.states[:-1].sum(axis=1)[:, None]
    return BuiltFeatures("edge", ("present_prev",), out, 1)


def regularity_pair(ctx: BuildContext, window: int | None = None) -> BuiltFeatures:
    flags = _regular_flags(ctx.states, window)
    T, n = ctx.states.shape
    iu, ju = np.triu_indices(n, 1)
    s = flags[:, iu] + flags[:, ju]  # 2 regular-regular, 1 mixed, 0 irregular pair
    out = np.stack([s == 2, s == 1, s == 0], axis=2).astype(float)
    out[0] = np.nan
    suffix = "" if window is None else str(window)
    return BuiltFeatures("edge", tuple(f"pair_{k}{suffix}" for k in ("rr", "ri", "ii")), out, 1)


def _parse(spec: str) -> tuple[str, Callable[[BuildContext], BuiltFeatures]]:
    name, _, arg = spec.partition(":")
    arg = arg or None
    table = {
        "lag": lambda c: lag_feature(c, int(arg or 1)),
        "dow": day_of_week,
        "regular": lambda c: regularity(c, int(arg) if arg else None),
        "triads": node_triads,
        "clusters": cluster_onehot,
        "edge_lag": edge_lag,
        "kcycle": lambda c: kcycle(c, int(arg or 3)),
        "present_prev": present_prev,
        "regularity_pair": lambda c: regularity_pair(c, int(arg) if arg else None),
    }
    if name not in table:
        raise ValueError(f"unknown covariate builder {spec!r}")
    return spec, table[name]


def run_builders(ctx: BuildContext, builders) -> list[BuiltFeatures]:
    return [_parse(b)[1](ctx) for b in builders]


def build_covariates(dataset: TimeSeriesDataset, builders, clusters=None, keep_existing: bool = True) -> TimeSeriesDataset:
    """Dataset with builder features appended to its covariate arrays and
    burn-in raised to cover every builder's undefined prefix."""
    ctx = BuildContext(dataset.states, dataset.edge_observations, dataset.timestamps, tuple(clusters) if clusters is not None else None)
    built = run_builders(ctx, builders)
    T, n = dataset.states.shape
    P = n * (n - 1) // 2
    node_parts = [dataset.node_covariates] if keep_existing else [np.zeros((T, n, 0))]
    node_names = list(dataset.node_covariate_names) if keep_existing else []
    edge_parts = [dataset.edge_covariates] if keep_existing else [np.zeros((T, P, 0))]
    edge_names = list(dataset.edge_covariate_names) if keep_existing else []
    burn = dataset.burn_in
    for f in built:
        if f.kind == "node":
            node_parts.append(f.values)
            node_names += list(f.names)
        else:
            edge_parts.append(f.values)
            edge_names += list(f.names)
        burn = max(burn, f.burn_in)
    if len(set(node_names)) != len(node_names) or len(set(edge_names)) != len(edge_names):
        raise ValueError("duplicate covariate names after building")
    return replace(
        dataset,
        node_covariates=np.concatenate(node_parts, axis=2),
        node_covariate_names=tuple(node_names),
        edge_covariates=np.concatenate(edge_parts, axis=2),
        edge_covariate_names=tuple(edge_names),
        burn_in=burn,
        leakage_audited=leakage_audit(ctx, builders),
    )


def _audit_times(T: int, max_points: int = 25):
    if T <= max_points:
        return range(T)
    return sorted(set(np.linspace(0, T - 1, max_points).astype(int).tolist()))


def leakage_audit(ctx: BuildContext, builders, times=None) -> bool:
    """True iff zeroing all data at >= t leaves every feature at t unchanged.

    Checks every t by default on short series, else an evenly spread subset.
    """
    full = run_builders(ctx, builders)
    T = ctx.states.shape[0]
    for t in (_audit_times(T) if times is None else times):
        states = ctx.states.copy()
        states[t:] = 0
        edges = None
        if ctx.edges is not None:
            edges = ctx.edges.copy()
            edges[t:] = 0
        cut = run_builders(replace(ctx, states=states, edges=edges), builders)
        for a, b in zip(full, cut):
            if not np.array_equal(a.values[t], b.values[t], equal_nan=True):
                return False
    return True
