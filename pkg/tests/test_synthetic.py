import numpy as np
import pytest

from cltm.inference import compute_potentials
from cltm.synthetic import InfeasibleSpecError, SyntheticSpec, generate_synthetic


def test_zero_couplings_give_fair_coins():
    data = generate_synthetic(SyntheticSpec(n_observed=5, n_hidden=0, T=5000, seed=0, coupling_range=(0.0, 0.0)))
    assert np.all(np.abs(data.dataset.states.mean(axis=0) - 0.5) < 0.02)


def test_deterministic_per_seed():
    spec = SyntheticSpec(n_observed=5, n_hidden=2, T=200, seed=4, lag_weight_range=(0.5, 1.0), with_edges=True)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.dataset.states, b.dataset.states)
    assert np.array_equal(a.dataset.edge_observations, b.dataset.edge_observations)
    c = generate_synthetic(SyntheticSpec(n_observed=5, n_hidden=2, T=200, seed=5))
    assert not np.array_equal(a.dataset.states, c.dataset.states)


def test_structure_shape():
    data = generate_synthetic(SyntheticSpec(n_observed=6, n_hidden=2, T=10, seed=1))
    s = data.model.structure
    assert len(s.observed_ids) == 6 and len(s.hidden_ids) == 2
    assert all(s.degree(h) >= 3 for h in s.hidden_ids)
    assert data.dataset.node_ids == tuple(s.observed_ids)


def test_compute_potentials_agrees_with_generator():
    spec = SyntheticSpec(n_observed=4, n_hidden=1, T=50, seed=3, lag_weight_range=(1.0, 2.0))
    data = generate_synthetic(spec)
    ds = data.dataset
    p = data.model.parameters
    for t in (1, 20, 49):
        pot = compute_potentials(data.model, ds, t)
        lag = ds.node_covariates[t, :, 0]
        obs = np.array([data.model.structure.index()[i] for i in ds.node_ids])
        expected = p.node_bias[obs] + p.node_coef[obs, 0] * lag
        assert np.allclose(pot.node[0, obs], expected)


def test_infeasible_specs():
    with pytest.raises(InfeasibleSpecError):
        SyntheticSpec(n_observed=0)
    with pytest.raises(InfeasibleSpecError):
        SyntheticSpec(n_observed=1, with_edges=True)
    with pytest.raises(InfeasibleSpecError):
        SyntheticSpec(length_range=(0.0, 1.0))
