"""Information distances between observed series.

Binary pairs use -log(|det J| / sqrt(det M_i det M_j)) on a 2x2 joint table;
Gaussian pairs use -log |corr|.  The conditional variant averages per-state
distances over the joint states of each node covariate, weighted by how
often each state occurs.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .model import TimeSeriesDataset, VariableMode

D_MAX = 25.0
DET_FLOOR = 1e-12
MIN_STATE_SAMPLES = 5


class DegenerateMarginalError(ValueError):
    pass


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class JointTable:
    """Normalized 2x2 joint of two binary series; rows index series i."""

    J: np.ndarray

    @property
    def marginal_i(self) -> np.ndarray:
        return self.J.sum(axis=1)

    @property
    def marginal_j(self) -> np.ndarray:
        return self.J.sum(axis=0)


@dataclass(frozen=True)
class ConditionalDistanceSpec:
    covariate_index: int
    states: tuple
    state_weights: np.ndarray
    state_distances: np.ndarray


@dataclass(frozen=True)
class DistanceConfig:
    mode: VariableMode = VariableMode.BINARY
    smoothing: float = 0.5
    conditional: bool = False
    # names of node covariates to condition on; None means every binary one
    covariates: tuple | None = None
    d_max: float = D_MAX
    det_floor: float = DET_FLOOR
    min_state_samples: int = MIN_STATE_SAMPLES

    def __post_init__(self):
        object.__setattr__(self, "mode", VariableMode(self.mode))


def empirical_joint(series_i, series_j, smoothing: float = 0.5) -> JointTable:
    a = np.asarray(series_i)
    b = np.asarray(series_j)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"series length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty series")
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    a = a.astype(int)
    b = b.astype(int)
    counts = np.zeros((2, 2))
    np.add.at(counts, (a, b), 1.0)
    J = (counts + smoothing) / (a.size + 4 * smoothing)
    return JointTable(J)


def discrete_distance(joint: JointTable, d_max: float = D_MAX, det_floor: float = DET_FLOOR) -> float:
    J = np.asarray(joint.J, dtype=float)
    mi, mj = J.sum(axis=1), J.sum(axis=0)
    if np.any(mi <= 0) or np.any(mj <= 0):
        raise DegenerateMarginalError(f"zero marginal entry: {mi}, {mj}")
    detJ = abs(J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0])
    if detJ <= det_floor:
        return d_max
    d = -np.log(detJ / np.sqrt(np.prod(mi) * np.prod(mj)))
    return float(min(max(d, 0.0), d_max))


def _correlation_distance(yi, yj, d_max, det_floor) -> float:
    yi = yi - yi.mean()
    yj = yj - yj.mean()
    vi, vj = np.dot(yi, yi), np.dot(yj, yj)
    if vi <= 0 or vj <= 0:
        raise ZeroVarianceError("series has zero sample variance")
    # |cov|: anti-correlated pairs are as informative as correlated ones
    r = abs(np.dot(yi, yj)) / np.sqrt(vi * vj)
    if r <= det_floor:
        return d_max
    return float(min(max(-np.log(r), 0.0), d_max))


def gaussian_distance(series_i, series_j, d_max: float = D_MAX, det_floor: float = DET_FLOOR) -> float:
    yi = np.asarray(series_i, dtype=float)
    yj = np.asarray(series_j, dtype=float)
    if yi.shape != yj.shape or yi.ndim != 1:
        raise ValueError("series length mismatch")
    if yi.size < 2:
        raise ValueError("need at least two time points")
    return _correlation_distance(yi, yj, d_max, det_floor)


def _pair_distance(yi, yj, mode: VariableMode, config: DistanceConfig) -> float:
    if mode is VariableMode.BINARY:
        return discrete_distance(empirical_joint(yi, yj, config.smoothing), config.d_max, config.det_floor)
    return gaussian_distance(yi, yj, config.d_max, config.det_floor)


def conditional_distance(series_i, series_j, covariate_series_i, covariate_series_j, mode=VariableMode.BINARY, config: DistanceConfig | None = None):
    """Covariate-conditioned distance and the per-covariate breakdown.

    ``covariate_series_*`` are (T,) or (T, K) arrays of covariate values for
    node i and node j.  For each covariate k the sample is split by the joint
    state (x_{k,i}, x_{k,j}); each state's distance is weighted by its
    empirical frequency, and the K weighted sums are averaged.  States with
    fewer than ``min_state_samples`` points keep their weight but use the
    unconditional distance.

    The binary per-state distance uses determinants of the conditional joint
    and marginal tables, the same form as the unconditional one.  The
    Gaussian per-state distance uses within-state central moments.
    """
    config = config or DistanceConfig(mode=mode)
    mode = VariableMode(mode)
    yi = np.asarray(series_i, dtype=float)
    yj = np.asarray(series_j, dtype=float)
    xi = np.asarray(covariate_series_i, dtype=float)
    xj = np.asarray(covariate_series_j, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    if xj.ndim == 1:
        xj = xj[:, None]
    T = yi.shape[0]
    if yj.shape[0] != T or xi.shape[0] != T or xj.shape[0] != T or xi.shape[1] != xj.shape[1]:
        raise ValueError("all series must share length T and covariate arity")
    global_d = _pair_distance(yi, yj, mode, config)
    K = xi.shape[1]
    if K == 0:
        return global_d, []
    specs = []
    total = 0.0
    for k in range(K):
        joint_state = np.stack([xi[:, k], xj[:, k]], axis=1)
        states, inverse = np.unique(joint_state, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        weights = np.bincount(inverse, minlength=len(states)) / T
        dists = np.empty(len(states))
        for s in range(len(states)):
            sel = inverse == s
            if sel.sum() < config.min_state_samples:
                dists[s] = global_d
                continue
            try:
                dists[s] = _pair_distance(yi[sel], yj[sel], mode, config)
            except (DegenerateMarginalError, ZeroVarianceError):
                dists[s] = global_d
        specs.append(ConditionalDistanceSpec(k, tuple(map(tuple, states)), weights, dists))
        total += float(np.dot(weights, dists))
    return total / K, specs


def _conditioning_columns(dataset: TimeSeriesDataset, config: DistanceConfig) -> list[int]:
    names = dataset.node_covariate_names
    if config.covariates is not None:
        missing = [c for c in config.covariates if c not in names]
        if missing:
            raise ValueError(f"conditioning covariates {missing} not in dataset")
        return [names.index(c) for c in config.covariates]
    X = dataset.node_covariates[dataset.burn_in:]
    return [k for k in range(len(names)) if np.all(np.isin(X[:, :, k], (0.0, 1.0)))]


def distance_matrix(dataset: TimeSeriesDataset, config: DistanceConfig | None = None, times=None) -> np.ndarray:
    """Symmetric n x n matrix of (conditional) information distances.

    ``times`` restricts the sample (default: every row from burn-in on).
    """
    config = config or DistanceConfig(mode=dataset.mode)
    n = dataset.n
    if n < 3:
        raise ValueError("distance_matrix needs at least 3 nodes")
    tt = np.arange(dataset.burn_in, dataset.T) if times is None else np.asarray(times, dtype=int)
    Y = dataset.states[tt]
    cols = _conditioning_columns(dataset, config) if config.conditional else []
    X = dataset.node_covariates[np.ix_(tt, np.arange(n), np.array(cols, dtype=int))] if cols else None
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            try:
                if X is None:
                    d = _pair_distance(Y[:, i], Y[:, j], config.mode, config)
                else:
                    d, _ = conditional_distance(Y[:, i], Y[:, j], X[:, i, :], X[:, j, :], config.mode, config)
            except ValueError as exc:
                raise type(exc)(f"pair ({dataset.node_ids[i]}, {dataset.node_ids[j]}): {exc}") from exc
            D[i, j] = D[j, i] = d
    return D


def distances_to_csv(D: np.ndarray, node_ids) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(node_ids))
    for i, row in zip(node_ids, D):
        w.writerow([i] + [f"{x:.17g}" for x in row])
    return buf.getvalue()


def distances_from_csv(text: str):
    rows = list(csv.reader(io.StringIO(text)))
    ids = rows[0][1:]
    D = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return D, ids


def four_point_violation(D: np.ndarray, quartet) -> float:
    """Gap between the two largest pairwise sums of a quartet (0 when additive)."""
    a, b, c, d = quartet
    sums = sorted([D[a, b] + D[c, d], D[a, c] + D[b, d], D[a, d] + D[b, c]])
    return float(sums[2] - sums[1])
