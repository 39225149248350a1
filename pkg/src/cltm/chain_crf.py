"""Per-node temporal chain CRF, the comparison model for CLTM predictions.

Each node's sequence y_1..y_T is an independent chain with

    Pr(y | x) ∝ exp( sum_t (c0 + x_t . c) y_t + w sum_{t>1} y_{t-1} y_t )

fitted by maximizing the exact log-likelihood (forward-backward gives the
gradient).  A one-step-ahead prediction at the end of a known history is
Pr(y_t = 1 | y_{t-1}, x_t) = sigmoid(c0 + x_t . c + w y_{t-1}).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .inference import _sigmoid
from .model import TimeSeriesDataset, VariableMode


@dataclass(frozen=True)
class ChainCrfConfig:
    l2_strength: float = 1e-3
    max_iterations: int = 500
    tolerance: float = 1e-9
    zero_coupling: bool = False  # force w = 0: independent logistic regressions


@dataclass(frozen=True)
class ChainCrfModel:
    node_ids: tuple
    covariate_names: tuple
    bias: np.ndarray  # (n,)
    coef: np.ndarray  # (n, K)
    coupling: np.ndarray  # (n,)

    def probabilities(self, dataset: TimeSeriesDataset, t: int) -> np.ndarray:
        if t < 1:
            raise ValueError("chain prediction needs the previous time point")
        X = _covariates(dataset, self.covariate_names, [t])[0]
        cols = _columns(dataset, self.node_ids)
        logit = self.bias + np.einsum("nk,nk->n", X[cols], self.coef) + self.coupling * dataset.states[t - 1, cols]
        out = np.zeros(dataset.n)
        out[cols] = _sigmoid(logit)
        return out

    def sample_observed(self, dataset: TimeSeriesDataset, t: int, M: int, rng) -> np.ndarray:
        p = self.probabilities(dataset, t)
        return (rng.random((M, dataset.n)) < p[None, :]).astype(np.int8)

    def to_dict(self) -> dict:
        return {
            "node_ids": list(self.node_ids),
            "covariate_names": list(self.covariate_names),
            "bias": self.bias.tolist(),
            "coef": self.coef.tolist(),
            "coupling": self.coupling.tolist(),
        }


def _columns(dataset: TimeSeriesDataset, node_ids) -> list[int]:
    return [dataset.node_ids.index(i) for i in node_ids]


def _covariates(dataset: TimeSeriesDataset, names, times) -> np.ndarray:
    cols = [dataset.node_covariate_names.index(c) for c in names]
    X = dataset.node_covariates[np.asarray(times, dtype=int)][:, :, cols]
    if np.isnan(X).any():
        raise ValueError("covariates undefined at requested times (inside burn-in?)")
    return X


def chain_log_likelihood(phi: np.ndarray, w: np.ndarray, y: np.ndarray):
    """Exact log-likelihood of independent binary chains and its gradient.

    phi, y: (T, n) unary potentials and states; w: (n,) couplings.
    Returns (loglik (n,), P(y_t = 1) (T, n), P(y_{t-1} = 1, y_t = 1) (T-1, n)).
    """
    T, n = phi.shape
    # alpha[t, s] = log sum over y_1..y_{t-1} with y_t = s
    alpha = np.zeros((T, n, 2))
    alpha[0, :, 1] = phi[0]
    for t in range(1, T):
        a0, a1 = alpha[t - 1, :, 0], alpha[t - 1, :, 1]
        alpha[t, :, 0] = np.logaddexp(a0, a1)
        alpha[t, :, 1] = phi[t] + np.logaddexp(a0, a1 + w)
    beta = np.zeros((T, n, 2))
    for t in range(T - 2, -1, -1):
        b0 = beta[t + 1, :, 0]
        b1 = beta[t + 1, :, 1] + phi[t + 1]
        beta[t, :, 0] = np.logaddexp(b0, b1)
        beta[t, :, 1] = np.logaddexp(b0, b1 + w)
    logz = np.logaddexp(alpha[-1, :, 0], alpha[-1, :, 1])
    p1 = np.exp(alpha[:, :, 1] + beta[:, :, 1] - logz[None, :])
    pair = np.exp(alpha[:-1, :, 1] + w[None, :] + phi[1:] + beta[1:, :, 1] - logz[None, :])
    score = np.sum(phi * y, axis=0) + w * np.sum(y[:-1] * y[1:], axis=0)
    return score - logz, p1, pair


def chain_enumerate(phi: np.ndarray, w: float, y: np.ndarray) -> float:
    """Brute-force log-likelihood of one chain (T small)."""
    T = len(phi)
    paths = ((np.arange(2 ** T)[:, None] >> np.arange(T)[None, :]) & 1).astype(float)
    logw = paths @ phi + w * np.sum(paths[:, :-1] * paths[:, 1:], axis=1)
    m = logw.max()
    logz = m + np.log(np.sum(np.exp(logw - m)))
    return float(phi @ y + w * np.sum(y[:-1] * y[1:]) - logz)


def fit_chain_crf(dataset: TimeSeriesDataset, config: ChainCrfConfig = ChainCrfConfig(), times=None, covariate_names=None) -> ChainCrfModel:
    """Fit one chain per node over the contiguous range ``times``."""
    if dataset.mode is not VariableMode.BINARY:
        raise ValueError("chain CRF supports binary mode only")
    if times is None:
        times = np.arange(dataset.burn_in, dataset.T)
    times = np.asarray(times, dtype=int)
    if times.size == 0:
        raise ValueError("empty dataset (no time points to fit)")
    if times.size > 1 and np.any(np.diff(times) != 1):
        raise ValueError("chain CRF needs a contiguous time range")
    names = tuple(dataset.node_covariate_names if covariate_names is None else covariate_names)
    X = _covariates(dataset, names, times)  # (T, n, K)
    y = dataset.states[times]
    T, n, K = X.shape
    l2 = config.l2_strength
    n_w = 0 if config.zero_coupling else n

    def unpack(theta):
        b = theta[:n]
        c = theta[n:n + n * K].reshape(n, K)
        w = theta[n + n * K:] if n_w else np.zeros(n)
        return b, c, w

    def negloglik(theta):
        b, c, w = unpack(theta)
        phi = b[None, :] + np.einsum("tnk,nk->tn", X, c)
        ll, p1, pair = chain_log_likelihood(phi, w, y)
        r = y - p1
        g_b = r.sum(axis=0)
        g_c = np.einsum("tnk,tn->nk", X, r)
        parts = [g_b, g_c.ravel()]
        if n_w:
            parts.append(np.sum(y[:-1] * y[1:] - pair, axis=0))
        g = np.concatenate(parts) - 2.0 * l2 * theta
        f = float(np.sum(ll)) - l2 * float(theta @ theta)
        return -f, -g

    theta0 = np.zeros(n + n * K + n_w)
    res = minimize(negloglik, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": config.max_iterations, "ftol": config.tolerance, "gtol": 1e-8})
    b, c, w = unpack(res.x)
    return ChainCrfModel(dataset.node_ids, names, b.copy(), c.copy(), np.array(w, dtype=float))
