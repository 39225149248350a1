"""One-step-ahead prediction of node states and ties, plus scoring.

Node scores follow the literal normalization: for a batch of M samples over
n nodes,

    CP(t) = #{(k, i): yhat_ik = 1 and y_i = 1} / (n M)
    CA(t) = #{(k, i): yhat_ik = 0 and y_i = 0} / (n M)

so CP + CA = 1 only for perfect predictions.  Edge scores (EP, EA) sum over
pairs inside the predicted node set and divide by e M with e = n(n-1)/2.
``normalized=True`` divides by the number of active (or inactive) nodes or
ties instead; that variant is an alternative reading, not the default.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .inference import (
    PotentialAssignment,
    _sigmoid,
    compute_potentials,
    design_tensors,
    potentials_from_design,
    sample_configuration,
    sum_product,
)
from .model import CltmModel, TimeSeriesDataset
from .optim import ascend

NODE_THRESHOLD = 0.5
DEFAULT_SAMPLES = 100


class UndefinedMetricError(ValueError):
    pass


class MisalignedError(ValueError):
    pass


def time_rng(seed: int, t: int) -> np.random.Generator:
    """Independent stream per (seed, t) so predictions do not depend on the
    order in which time points are processed."""
    return np.random.default_rng([int(seed), int(t)])


# --- node prediction --------------------------------------------------------


@dataclass(frozen=True)
class PredictionBatch:
    t: int
    samples: np.ndarray  # (M, n) in dataset node order
    node_threshold: float = NODE_THRESHOLD

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.int8)
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError("samples must be an (M, n) array with M >= 1")
        object.__setattr__(self, "samples", s)

    @property
    def M(self) -> int:
        return self.samples.shape[0]

    @property
    def node_means(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def predicted_node_set(self) -> tuple:
        """Node positions whose sample mean reaches the threshold."""
        return tuple(int(i) for i in np.flatnonzero(self.node_means >= self.node_threshold))


def _sample_cltm(model: CltmModel, dataset: TimeSeriesDataset, t: int, M: int, rng) -> np.ndarray:
    pots = compute_potentials(model, dataset, t)
    full = sample_configuration(model.structure, pots, None, rng, size=M)
    pos = model.structure.index()
    return full[:, [pos[i] for i in dataset.node_ids]]


def predict_one_step(model, dataset: TimeSeriesDataset, t: int, M: int = DEFAULT_SAMPLES, rng=None, node_threshold: float = NODE_THRESHOLD) -> PredictionBatch:
    """M evidence-free samples of the observed nodes at t.

    ``model`` is a CltmModel or any object with ``sample_observed(dataset,
    t, M, rng)`` (the chain CRF baseline)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if t < dataset.burn_in:
        raise ValueError(f"t={t} is inside the burn-in ({dataset.burn_in}); covariates undefined")
    if rng is None:
        raise ValueError("a seeded rng is required")
    if hasattr(model, "sample_observed"):
        samples = model.sample_observed(dataset, t, M, rng)
    else:
        samples = _sample_cltm(model, dataset, t, M, rng)
    return PredictionBatch(int(t), samples, node_threshold)


def predict_range(model, dataset: TimeSeriesDataset, times, M: int, seed: int, node_threshold: float = NODE_THRESHOLD) -> list[PredictionBatch]:
    return [predict_one_step(model, dataset, int(t), M, time_rng(seed, t), node_threshold) for t in times]


# --- node scores ------------------------------------------------------------


@dataclass(frozen=True)
class NodeScore:
    t: int
    CP: float
    CA: float
    flags: tuple = ()


def _check_batch(b: PredictionBatch, dataset: TimeSeriesDataset):
    if not 0 <= b.t < dataset.T:
        raise MisalignedError(f"prediction at t={b.t} outside the dataset")
    if b.samples.shape[1] != dataset.n:
        raise MisalignedError(f"prediction has {b.samples.shape[1]} nodes, dataset has {dataset.n}")


def score_nodes(predictions, truth: TimeSeriesDataset, normalized: bool = False) -> list[NodeScore]:
    out = []
    for b in predictions:
        _check_batch(b, truth)
        y = truth.states[b.t].astype(bool)
        yhat = b.samples.astype(bool)
        M, n = yhat.shape
        hit1 = float(np.sum(yhat[:, y]))
        hit0 = float(np.sum(~yhat[:, ~y]))
        flags = []
        if not y.any():
            flags.append("no_active_nodes")
        if y.all():
            flags.append("no_inactive_nodes")
        if normalized:
            cp = hit1 / (M * y.sum()) if y.any() else 0.0
            ca = hit0 / (M * (~y).sum()) if (~y).any() else 0.0
        else:
            cp = hit1 / (n * M)
            ca = hit0 / (n * M)
        out.append(NodeScore(b.t, cp, ca, tuple(flags)))
    return out


# --- edge model -------------------------------------------------------------


def hidden_parent_incidence(model: CltmModel | None, node_ids) -> tuple[tuple, np.ndarray]:
    """(hidden ids, (P, H) matrix) counting, for each pair (i, j), how many of
    i and j are adjacent to each hidden node."""
    if model is None:
        return (), np.zeros((len(node_ids) * (len(node_ids) - 1) // 2, 0))
    s = model.structure
    hidden = s.hidden_ids
    adj = s.adjacency()
    node_ids = list(node_ids)
    C = np.zeros((len(node_ids) * (len(node_ids) - 1) // 2, len(hidden)))
    p = 0
    for a in range(len(node_ids)):
        for b in range(a + 1, len(node_ids)):
            for h_k, h in enumerate(hidden):
                C[p, h_k] = (h in adj[node_ids[a]]) + (h in adj[node_ids[b]])
            p += 1
    return tuple(hidden), C


def hidden_posteriors(model: CltmModel, dataset: TimeSeriesDataset, times, clamped: bool = True) -> np.ndarray:
    """(B, H) posterior P(h = 1) at each time, observed nodes clamped to the
    data when ``clamped`` else evidence-free."""
    design = design_tensors(model, dataset, times)
    pots = potentials_from_design(model, design)
    ev = np.full(pots.node.shape, -1, dtype=int)
    if clamped:
        ev[:, design.obs_positions] = design.states.astype(int)
    belief = sum_product(model.structure, pots, ev)
    pos = model.structure.index()
    return belief.node_marginals[:, [pos[h] for h in model.structure.hidden_ids]]


def hidden_posteriors_given(model: CltmModel, dataset: TimeSeriesDataset, t: int, samples: np.ndarray) -> np.ndarray:
    """(M, H) posterior of the hidden nodes at t for each sampled observed
    configuration (rows of ``samples`` in dataset node order)."""
    pots = compute_potentials(model, dataset, t)
    M = samples.shape[0]
    batch = PotentialAssignment(np.repeat(pots.node, M, axis=0), np.repeat(pots.edge, M, axis=0))
    pos = model.structure.index()
    ev = np.full(batch.node.shape, -1, dtype=int)
    ev[:, [pos[i] for i in dataset.node_ids]] = samples
    belief = sum_product(model.structure, batch, ev)
    return belief.node_marginals[:, [pos[h] for h in model.structure.hidden_ids]]


@dataclass(frozen=True)
class EdgeModel:
    """Logistic tie model xi = d0 + x_ij . d_edge + f_ij . d_hidden.

    f_ij[h] = (number of i, j adjacent to hidden node h) * P(h = 1)."""

    edge_covariate_names: tuple
    hidden_ids: tuple
    intercept: float
    edge_coef: np.ndarray
    hidden_coef: np.ndarray
    hard: bool = False

    def __post_init__(self):
        object.__setattr__(self, "edge_coef", np.asarray(self.edge_coef, dtype=float).reshape(-1))
        object.__setattr__(self, "hidden_coef", np.asarray(self.hidden_coef, dtype=float).reshape(-1))
        if self.edge_coef.size != len(self.edge_covariate_names):
            raise ValueError("edge coefficient count does not match the edge covariate schema")
        if self.hidden_coef.size != len(self.hidden_ids):
            raise ValueError("hidden coefficient count does not match the hidden-parent features")

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.edge_coef, self.hidden_coef])

    def logits(self, X_edge: np.ndarray, F_hidden: np.ndarray) -> np.ndarray:
        """X_edge (..., P, K_ec), F_hidden (..., P, H) -> (..., P)."""
        return self.intercept + X_edge @ self.edge_coef + F_hidden @ self.hidden_coef

    def to_dict(self) -> dict:
        return {
            "edge_covariate_names": list(self.edge_covariate_names),
            "hidden_ids": list(self.hidden_ids),
            "intercept": self.intercept,
            "edge_coef": self.edge_coef.tolist(),
            "hidden_coef": self.hidden_coef.tolist(),
            "hard": self.hard,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeModel":
        return cls(tuple(d["edge_covariate_names"]), tuple(d["hidden_ids"]), float(d["intercept"]),
                   np.array(d["edge_coef"], dtype=float), np.array(d["hidden_coef"], dtype=float), bool(d.get("hard", False)))


def _edge_covariates(dataset: TimeSeriesDataset, names, times) -> np.ndarray:
    cols = []
    for name in names:
        if name not in dataset.edge_covariate_names:
            raise ValueError(f"edge covariate {name!r} not in dataset")
        cols.append(dataset.edge_covariate_names.index(name))
    X = dataset.edge_covariates[np.asarray(times, dtype=int)][:, :, cols]
    if np.isnan(X).any():
        raise ValueError("edge covariates undefined at requested times (inside burn-in?)")
    return X


def hidden_features(node_model: CltmModel | None, dataset: TimeSeriesDataset, times, hard: bool = False) -> tuple[tuple, np.ndarray]:
    """Hidden-parent features at each time with observed nodes clamped:
    (hidden ids, (B, P, H))."""
    hidden, C = hidden_parent_incidence(node_model, dataset.node_ids)
    B = len(times)
    if not hidden:
        return hidden, np.zeros((B, C.shape[0], 0))
    post = hidden_posteriors(node_model, dataset, times, clamped=True)
    if hard:
        post = (post >= 0.5).astype(float)
    return hidden, C[None, :, :] * post[:, None, :]


def fit_edge_model(
    dataset: TimeSeriesDataset,
    node_model: CltmModel | None,
    edge_covariate_names=None,
    times=None,
    l2_strength: float = 1e-3,
    hard: bool = False,
    steps: int = 500,
    learning_rate: float = 1.0,
) -> EdgeModel:
    """Penalized logistic regression of observed ties on edge covariates and
    hidden-parent posteriors.

    Features are centered and scaled before the line-searched ascent, and
    the coefficients are mapped back to the raw feature scale afterwards;
    a constant feature therefore gets coefficient 0.  ``node_model=None``
    drops the hidden-parent block.
    """
    if dataset.edge_observations is None:
        raise ValueError("dataset has no edge observations")
    names = tuple(dataset.edge_covariate_names if edge_covariate_names is None else edge_covariate_names)
    if times is None:
        times = np.arange(dataset.burn_in, dataset.T)
    times = np.asarray(times, dtype=int)
    if times.size == 0:
        raise ValueError("no time points to fit")
    X = _edge_covariates(dataset, names, times)
    hidden, F = hidden_features(node_model, dataset, times, hard)
    feats = np.concatenate([X, F], axis=2).reshape(-1, X.shape[2] + F.shape[2])
    w = dataset.edge_observations[times].reshape(-1)
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    sd[sd == 0] = 1.0
    Z = np.hstack([np.ones((feats.shape[0], 1)), (feats - mu) / sd])
    N = Z.shape[0]

    def objective(beta):
        xi = Z @ beta
        return float(np.sum(w * xi - np.logaddexp(0.0, xi)) - l2_strength * np.dot(beta[1:], beta[1:]))

    def gradient(beta):
        g = Z.T @ (w - _sigmoid(Z @ beta))
        g[1:] -= 2.0 * l2_strength * beta[1:]
        return g

    res = ascend(objective, gradient, np.zeros(Z.shape[1]), steps, learning_rate, scale=N, gradient_tolerance=1e-9 * N)
    beta = res.theta
    coef = beta[1:] / sd
    intercept = float(beta[0] - np.dot(coef, mu))
    K = X.shape[2]
    return EdgeModel(names, hidden, intercept, coef[:K], coef[K:], hard)


@dataclass(frozen=True)
class EdgePrediction:
    t: int
    samples: np.ndarray  # (M, P) 0/1
    in_set: np.ndarray  # (P,) bool, both endpoints predicted present


def pair_mask(n: int, node_set) -> np.ndarray:
    member = np.zeros(n, dtype=bool)
    member[list(node_set)] = True
    iu, ju = np.triu_indices(n, 1)
    return member[iu] & member[ju]


def edge_probabilities(edge_model: EdgeModel, node_model: CltmModel | None, dataset: TimeSeriesDataset, t: int, node_samples=None) -> np.ndarray:
    """Tie probabilities at t, shape (S, P).  Hidden-parent features use the
    posterior given each sampled node configuration (S = M) or, without
    samples, the evidence-free marginals (S = 1)."""
    X = _edge_covariates(dataset, edge_model.edge_covariate_names, [t])[0]  # (P, K)
    if not edge_model.hidden_ids:
        return _sigmoid(edge_model.logits(X, np.zeros((X.shape[0], 0))))[None, :]
    hidden, C = hidden_parent_incidence(node_model, dataset.node_ids)
    if hidden != edge_model.hidden_ids:
        raise ValueError("edge model hidden nodes do not match the node model")
    if node_samples is None:
        post = hidden_posteriors(node_model, dataset, [t], clamped=False)
    else:
        post = hidden_posteriors_given(node_model, dataset, t, np.asarray(node_samples))
    if edge_model.hard:
        post = (post >= 0.5).astype(float)
    F = C[None, :, :] * post[:, None, :]
    return _sigmoid(edge_model.logits(X[None], F))


def predict_edges(edge_model: EdgeModel, dataset: TimeSeriesDataset, t: int, predicted_node_set, M: int, rng, node_model: CltmModel | None = None, node_samples=None) -> EdgePrediction:
    """M Bernoulli draws per pair inside the predicted node set; every other
    pair is predicted absent."""
    mask = pair_mask(dataset.n, predicted_node_set)
    prob = edge_probabilities(edge_model, node_model, dataset, t, node_samples)
    prob = np.broadcast_to(prob, (M, prob.shape[1]))
    draws = (rng.random(prob.shape) < prob) & mask[None, :]
    return EdgePrediction(int(t), draws.astype(np.int8), mask)


@dataclass(frozen=True)
class EdgeScore:
    t: int
    EP: float
    EA: float
    flags: tuple = ()


def score_edges(edge_predictions, truth: TimeSeriesDataset, normalized: bool = False) -> list[EdgeScore]:
    if truth.edge_observations is None:
        raise MisalignedError("truth has no edge observations")
    out = []
    P = truth.n * (truth.n - 1) // 2
    for ep in edge_predictions:
        if not 0 <= ep.t < truth.T or ep.samples.shape[1] != P:
            raise MisalignedError(f"edge prediction at t={ep.t} does not align with the truth")
        w = truth.edge_observations[ep.t].astype(bool)
        what = ep.samples.astype(bool)
        M = what.shape[0]
        s = ep.in_set
        hit1 = float(np.sum(what[:, s & w]))
        hit0 = float(np.sum(~what[:, s & ~w]))
        flags = []
        if not w.any():
            flags.append("no_true_edges")
        if normalized:
            ep_v = hit1 / (M * w.sum()) if w.any() else 0.0
            ea_v = hit0 / (M * (~w).sum()) if (~w).any() else 0.0
        else:
            ep_v = hit1 / (P * M) if P else 0.0
            ea_v = hit0 / (P * M) if P else 0.0
        out.append(EdgeScore(ep.t, ep_v, ea_v, tuple(flags)))
    return out


# --- summaries --------------------------------------------------------------


def relative_differences(model_series, baseline_series) -> tuple[float, float]:
    """(RDA, RDM): relative difference of the sums and of the medians."""
    a = np.asarray(model_series, dtype=float)
    b = np.asarray(baseline_series, dtype=float)
    if a.shape != b.shape:
        raise MisalignedError("series cover different time ranges")
    sb, mb = float(np.sum(b)), float(np.median(b))
    if sb == 0 or mb == 0:
        raise UndefinedMetricError("baseline sum or median is zero")
    return (float(np.sum(a)) - sb) / sb, (float(np.median(a)) - mb) / mb


@dataclass
class MetricsReport:
    t: list
    CP: list
    CA: list
    EP: list | None = None
    EA: list | None = None
    flags: dict = field(default_factory=dict)  # t -> list of flags
    summary: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, node_scores, edge_scores=None) -> "MetricsReport":
        flags = {}
        for s in node_scores:
            if s.flags:
                flags.setdefault(str(s.t), []).extend(s.flags)
        rep = cls([s.t for s in node_scores], [s.CP for s in node_scores], [s.CA for s in node_scores], flags=flags)
        if edge_scores is not None:
            if [e.t for e in edge_scores] != rep.t:
                raise MisalignedError("node and edge scores cover different times")
            rep.EP = [e.EP for e in edge_scores]
            rep.EA = [e.EA for e in edge_scores]
            for e in edge_scores:
                if e.flags:
                    flags.setdefault(str(e.t), []).extend(e.flags)
        return rep

    def compare(self, baseline: "MetricsReport") -> dict:
        out = {}
        for key in ("CP", "EP"):
            mine, theirs = getattr(self, key), getattr(baseline, key)
            if mine is None or theirs is None:
                continue
            try:
                rda, rdm = relative_differences(mine, theirs)
            except UndefinedMetricError:
                rda = rdm = None
            out[f"RDA_{key}"] = rda
            out[f"RDM_{key}"] = rdm
        return out

    def to_dict(self) -> dict:
        return {"t": self.t, "CP": self.CP, "CA": self.CA, "EP": self.EP, "EA": self.EA, "flags": self.flags, "summary": self.summary}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "CP", "CA", "EP", "EA"])
        for k, t in enumerate(self.t):
            ep = "" if self.EP is None else repr(self.EP[k])
            ea = "" if self.EA is None else repr(self.EA[k])
            wr.writerow([t, repr(self.CP[k]), repr(self.CA[k]), ep, ea])
        return buf.getvalue()
