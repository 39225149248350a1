"""Maximum-likelihood fitting of a binary CLTM by EM.

The E-step runs BP with the observed nodes clamped to y^(t) and collects
E[z_k] and E[z_k z_l].  The M-step takes line-searched gradient steps on the
expected complete-data log-likelihood

    Q(theta) = sum_t [ sum_k phi_k(t) E[z_k] + sum_kl phi_kl(t) E[z_k z_l] - A_t(theta) ]

minus an L2 penalty.  Q is concave in theta because the potentials are
linear in it, and every accepted step raises the penalized observed
log-likelihood.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .inference import (
    DesignTensors,
    _upward,
    design_tensors,
    potentials_from_design,
    sum_product,
    tree_index,
)
from .model import (
    CltmModel,
    CltmParameters,
    CovariateSchema,
    LatentTreeStructure,
    TimeSeriesDataset,
    VariableMode,
    validate_structure,
)
from .optim import ascend

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmConfig:
    max_iterations: int = 200
    likelihood_tolerance: float = 1e-5
    gradient_steps_per_m_step: int = 25
    learning_rate: float = 0.1
    l2_strength: float = 1e-3
    init_scale: float = 0.1
    seed: int = 0
    restarts: int = 3

    def __post_init__(self):
        for name in ("max_iterations", "gradient_steps_per_m_step", "restarts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("likelihood_tolerance", "learning_rate", "init_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.l2_strength < 0:
            raise ValueError("l2_strength must be nonnegative")


@dataclass(frozen=True)
class SufficientStats:
    """Posterior expectations per time point: node (T, N) and edge (T, E)."""

    node_expectations: np.ndarray
    edge_expectations: np.ndarray
    log_partition_clamped: np.ndarray


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    log_likelihood: float
    objective: float  # log-likelihood minus the L2 penalty; EM never lowers it
    gradient_norm: float


def _train_times(dataset: TimeSeriesDataset, times) -> np.ndarray:
    if times is None:
        times = np.arange(dataset.burn_in, dataset.T)
    times = np.asarray(times, dtype=int)
    if times.size == 0:
        raise ValueError("empty dataset (no time points to fit)")
    return times


class _Problem:
    """A model's structure and design over a fixed set of time points."""

    def __init__(self, model: CltmModel, dataset: TimeSeriesDataset, times=None):
        if model.variable_mode is not VariableMode.BINARY or dataset.mode is not VariableMode.BINARY:
            raise ValueError("EM supports binary mode only")
        self.model = model
        self.structure = model.structure
        self.times = _train_times(dataset, times)
        self.design: DesignTensors = design_tensors(model, dataset, self.times)
        self.idx = tree_index(self.structure)
        B = len(self.times)
        N = len(self.structure.nodes)
        self.evidence = np.full((B, N), -1, dtype=int)
        self.evidence[:, self.design.obs_positions] = self.design.states.astype(int)
        self.free = np.full((B, N), -1, dtype=int)
        self.template = model.parameters

    def params(self, theta) -> CltmParameters:
        return self.template.unflatten(theta)

    def potentials(self, theta):
        return potentials_from_design(self.model, self.design, self.params(theta))

    def log_partition(self, theta, clamped: bool) -> np.ndarray:
        pots = self.potentials(theta)
        ev = self.evidence if clamped else self.free
        return _upward(self.idx, pots.node, pots.edge, ev)[2]

    def log_likelihood(self, theta) -> float:
        pots = self.potentials(theta)
        a_c = _upward(self.idx, pots.node, pots.edge, self.evidence)[2]
        a_f = _upward(self.idx, pots.node, pots.edge, self.free)[2]
        return float(np.sum(a_c - a_f))

    def expectations(self, theta, clamped: bool):
        pots = self.potentials(theta)
        belief = sum_product(self.structure, pots, self.evidence if clamped else self.free)
        return belief.node_marginals, belief.edge_marginals[:, :, 1, 1], belief.log_partition

    def q_value(self, theta, stats: SufficientStats, l2: float) -> float:
        pots = self.potentials(theta)
        a_f = _upward(self.idx, pots.node, pots.edge, self.free)[2]
        lin = np.sum(pots.node * stats.node_expectations) + np.sum(pots.edge * stats.edge_expectations)
        return float(lin - np.sum(a_f) - l2 * np.dot(theta, theta))

    def gradient(self, theta, stats: SufficientStats, l2: float) -> np.ndarray:
        node_free, edge_free, _ = self.expectations(theta, clamped=False)
        return self.gradient_from(theta, stats, node_free, edge_free, l2)

    def gradient_from(self, theta, stats, node_free, edge_free, l2) -> np.ndarray:
        r_node = stats.node_expectations - node_free
        r_edge = stats.edge_expectations - edge_free
        d = self.design
        g_nb = r_node.sum(axis=0)
        g_nc = np.einsum("bnk,bn->nk", d.X_node, r_node[:, d.obs_positions])
        g_eb = r_edge.sum(axis=0)
        if d.oo_edges.size:
            g_ec = np.einsum("bek,be->ek", d.X_edge, r_edge[:, d.oo_edges])
        else:
            g_ec = np.zeros(self.template.edge_coef.shape)
        g = np.concatenate([g_nb, g_nc.ravel(), g_eb, g_ec.ravel()])
        return g - 2.0 * l2 * theta

    def stats(self, theta) -> SufficientStats:
        node, edge, logz = self.expectations(theta, clamped=True)
        return SufficientStats(node, edge, logz)


def observed_log_likelihood(model: CltmModel, dataset: TimeSeriesDataset, times=None) -> float:
    """sum_t log Pr(y^(t) | x^(t), theta) = sum_t [A(clamped) - A(free)]."""
    prob = _Problem(model, dataset, times)
    return prob.log_likelihood(model.parameters.flatten())


def e_step(model: CltmModel, dataset: TimeSeriesDataset, times=None) -> SufficientStats:
    prob = _Problem(model, dataset, times)
    return prob.stats(model.parameters.flatten())


def marginal_gradient(model: CltmModel, dataset: TimeSeriesDataset, stats: SufficientStats, l2_strength: float = 0.0, times=None) -> CltmParameters:
    """Gradient of the (penalized) log-likelihood in the parameter layout.

    With ``stats`` from ``e_step`` at the same parameters this is the exact
    gradient of the observed log-likelihood."""
    prob = _Problem(model, dataset, times)
    theta = model.parameters.flatten()
    return prob.params(prob.gradient(theta, stats, l2_strength))


@dataclass
class MStepResult:
    parameters: CltmParameters
    objective_before: float
    objective_after: float
    warnings: list


def m_step(model: CltmModel, dataset: TimeSeriesDataset, stats: SufficientStats, config: EmConfig, times=None, _problem: _Problem | None = None) -> MStepResult:
    prob = _problem or _Problem(model, dataset, times)
    theta = model.parameters.flatten()
    l2 = config.l2_strength
    before = prob.q_value(theta, stats, l2)
    res = ascend(
        lambda th: prob.q_value(th, stats, l2),
        lambda th: prob.gradient(th, stats, l2),
        theta,
        config.gradient_steps_per_m_step,
        config.learning_rate,
        scale=len(prob.times),
    )
    return MStepResult(prob.params(res.theta), before, res.value, res.warnings)


def em_run(model: CltmModel, dataset: TimeSeriesDataset, config: EmConfig, times=None) -> tuple[CltmModel, list[TraceRow]]:
    """EM from the model's current parameters until the penalized
    log-likelihood gains less than the tolerance."""
    prob = _Problem(model, dataset, times)
    l2 = config.l2_strength
    theta = model.parameters.flatten()
    trace: list[TraceRow] = []
    prev = None
    for it in range(config.max_iterations + 1):
        stats = prob.stats(theta)
        ll = float(np.sum(stats.log_partition_clamped - prob.log_partition(theta, clamped=False)))
        obj = ll - l2 * float(np.dot(theta, theta))
        gnorm = float(np.linalg.norm(prob.gradient(theta, stats, l2)))
        trace.append(TraceRow(it, ll, obj, gnorm))
        if prev is not None and obj - prev < config.likelihood_tolerance:
            break
        if it == config.max_iterations:
            break
        prev = obj
        current = replace(model, parameters=prob.params(theta))
        res = m_step(current, dataset, stats, config, _problem=prob)
        theta = res.parameters.flatten()
    return replace(model, parameters=prob.params(theta)), trace


def fit_em(structure: LatentTreeStructure, dataset: TimeSeriesDataset, schema: CovariateSchema, config: EmConfig = EmConfig(), times=None) -> tuple[CltmModel, list[TraceRow]]:
    """Fit weights by EM with ``config.restarts`` random initializations and
    keep the run with the best final penalized log-likelihood."""
    if dataset.T == 0:
        raise ValueError("empty dataset")
    problems = validate_structure(structure)
    if problems:
        raise ValueError(f"invalid structure: {problems}")
    if set(structure.observed_ids) != set(dataset.node_ids):
        raise ValueError("structure observed nodes do not match dataset nodes")
    rng = np.random.default_rng(config.seed)
    template = CltmParameters.zeros(structure, schema)
    best = None
    for r in range(config.restarts):
        theta0 = rng.uniform(-config.init_scale, config.init_scale, size=template.size)
        model = CltmModel(structure, schema, template.unflatten(theta0))
        fitted, trace = em_run(model, dataset, config, times)
        log.info("restart %d: %d iterations, objective %.6f", r, len(trace) - 1, trace[-1].objective)
        if best is None or trace[-1].objective > best[1][-1].objective:
            best = (fitted, trace)
    return best


def trace_to_csv(trace: list[TraceRow]) -> str:
    lines = ["iteration,log_likelihood,objective,gradient_norm"]
    for row in trace:
        lines.append(f"{row.iteration},{row.log_likelihood:.17g},{row.objective:.17g},{row.gradient_norm:.17g}")
    return "\n".join(lines) + "\n"
