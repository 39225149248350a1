import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_structure
from cltm.inference import (
    PotentialAssignment,
    compute_potentials,
    enumerate_partition,
    infer_hidden,
    log_partition,
    sample_configuration,
    sum_product,
)
from cltm.model import (
    CltmModel,
    CltmParameters,
    Covariate,
    CovariateSchema,
    LatentTreeStructure,
    TimeSeriesDataset,
    UnknownNodeError,
    VariableKind,
    star_structure,
)

O, H = VariableKind.OBSERVED, VariableKind.HIDDEN


def test_single_node():
    s = LatentTreeStructure((("a", O),), ())
    b = sum_product(s, PotentialAssignment(np.zeros((1, 1)), np.zeros((1, 0))))
    assert b.node_marginals[0, 0] == pytest.approx(0.5)
    assert b.log_partition[0] == pytest.approx(math.log(2))


def test_ln2_pair(ln2_pair):
    s, pots = ln2_pair
    b = sum_product(s, pots)
    assert b.log_partition[0] == pytest.approx(math.log(5), abs=1e-14)
    assert b.node_marginals[0] == pytest.approx([0.6, 0.6], abs=1e-14)
    assert b.edge_marginals[0, 0, 1, 1] == pytest.approx(0.4, abs=1e-14)
    assert b.edge_marginals[0, 0].sum() == pytest.approx(1.0, abs=1e-14)


def test_ln2_pair_with_evidence(ln2_pair):
    s, pots = ln2_pair
    b = sum_product(s, pots, {"b": 1})
    assert b.node_marginals[0, 0] == pytest.approx(2 / 3, abs=1e-14)
    assert b.node_marginals[0, 1] == 1.0
    assert b.log_partition[0] == pytest.approx(math.log(3), abs=1e-14)


def test_unknown_evidence_node(ln2_pair):
    s, pots = ln2_pair
    with pytest.raises(UnknownNodeError):
        sum_product(s, pots, {"zz": 1})


def _rel(a, b):
    if np.size(b) == 0:
        return 0.0
    return np.max(np.abs(np.asarray(a) - np.asarray(b)) / np.maximum(1.0, np.abs(np.asarray(b))))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 100_000), st.booleans())
def test_bp_matches_enumeration(n, seed, with_evidence):
    rng = np.random.default_rng(seed)
    s = random_structure(rng, n)
    node = rng.normal(0, 2, n)
    edge = rng.normal(0, 2, n - 1)
    ev = None
    if with_evidence:
        picks = rng.choice(n, size=rng.integers(0, n + 1), replace=False)
        ev = {s.node_ids[k]: int(rng.integers(0, 2)) for k in picks}
    b = sum_product(s, PotentialAssignment(node[None], edge[None]), ev)
    logz, nm, em = enumerate_partition(s, node, edge, ev)
    assert _rel(b.log_partition[0], logz) < 1e-10
    assert _rel(b.node_marginals[0], nm) < 1e-10
    assert _rel(b.edge_marginals[0], em) < 1e-10
    # edge tables agree with incident node marginals
    pos = s.index()
    for e, (u, v, _) in enumerate(s.edges):
        assert b.edge_marginals[0, e].sum(axis=1)[1] == pytest.approx(b.node_marginals[0, pos[u]], abs=1e-10)
        assert b.edge_marginals[0, e].sum(axis=0)[1] == pytest.approx(b.node_marginals[0, pos[v]], abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 100_000))
def test_clamping_never_raises_log_partition(n, seed):
    rng = np.random.default_rng(seed)
    s = random_structure(rng, n)
    pots = PotentialAssignment(rng.normal(0, 3, (1, n)), rng.normal(0, 3, (1, n - 1)))
    free = log_partition(s, pots)[0]
    k = s.node_ids[int(rng.integers(n))]
    for val in (0, 1):
        assert log_partition(s, pots, {k: val})[0] <= free + 1e-12


def test_root_invariance():
    """Relabelling nodes moves the root; marginals must not change."""
    rng = np.random.default_rng(5)
    s = random_structure(rng, 9)
    node = rng.normal(size=9)
    edge = rng.normal(size=8)
    b1 = sum_product(s, PotentialAssignment(node[None], edge[None]))
    rename = {x: f"z{99 - k}" for k, x in enumerate(s.node_ids)}
    s2 = LatentTreeStructure(tuple((rename[i], k) for i, k in s.nodes), tuple((rename[u], rename[v], w) for u, v, w in s.edges))
    b2 = sum_product(s2, PotentialAssignment(node[None], edge[None]))
    assert np.allclose(b1.node_marginals, b2.node_marginals, atol=1e-13)
    assert np.allclose(b1.log_partition, b2.log_partition, atol=1e-12)


def test_saturated_potentials_do_not_overflow():
    s = star_structure(["a", "b", "c"])
    pots = PotentialAssignment(np.array([[800.0, -900.0, 50.0, 0.0]]), np.array([[700.0, -700.0, 30.0]]))
    b = sum_product(s, pots)
    assert np.all(np.isfinite(b.node_marginals)) and np.isfinite(b.log_partition[0])
    logz, nm, _ = enumerate_partition(s, pots.node[0], pots.edge[0])
    assert b.log_partition[0] == pytest.approx(logz, rel=1e-12)


def _star_model(bias_h=0.3):
    s = star_structure(["a", "b", "c"])
    schema = CovariateSchema((Covariate("x"),))
    # node order: h0, a, b, c
    p = CltmParameters(np.array([bias_h, 0.5, 0.0, 0.0]), np.array([[1.0], [0.0], [0.0]]), np.zeros(3), np.zeros((0, 1)))
    ds = TimeSeriesDataset(("a", "b", "c"), np.ones((2, 3)), node_covariates=np.ones((2, 3, 1)), node_covariate_names=("x",))
    return CltmModel(s, schema, p), ds


def test_compute_potentials_linear_and_hidden_bias_only():
    m, ds = _star_model()
    pots = compute_potentials(m, ds, 0)
    pos = m.structure.index()
    assert pots.node[0, pos["a"]] == pytest.approx(1.5)
    assert pots.node[0, pos["h0"]] == pytest.approx(0.3)
    zero = CltmModel(m.structure, m.schema, CltmParameters.zeros(m.structure, m.schema))
    assert not compute_potentials(zero, ds, 1).node.any()


def test_compute_potentials_schema_mismatch():
    m, ds = _star_model()
    ds2 = TimeSeriesDataset(ds.node_ids, ds.states)
    with pytest.raises(ValueError, match="schema mismatch"):
        compute_potentials(m, ds2, 0)


def test_infer_hidden():
    s = star_structure(["a", "b", "c"])
    schema = CovariateSchema()
    ds = TimeSeriesDataset(("a", "b", "c"), np.ones((1, 3)))
    p = CltmParameters(np.array([-1.5, -0.5, -0.5, -0.5]), np.zeros((3, 0)), np.full(3, 1.0), np.zeros((0, 0)))
    m = CltmModel(s, schema, p)
    post = infer_hidden(m, ds, 0)["h0"]
    _, nm, _ = enumerate_partition(s, p.node_bias, p.edge_bias, {"a": 1, "b": 1, "c": 1})
    assert post == pytest.approx(nm[0], abs=1e-12)
    assert post > 0.5
    zero = CltmModel(s, schema, CltmParameters.zeros(s, schema))
    assert infer_hidden(zero, ds, 0)["h0"] == 0.5


def test_sampling_saturated_and_clamped(ln2_pair):
    s, _ = ln2_pair
    pots = PotentialAssignment(np.array([[50.0, 0.0]]), np.array([[0.0]]))
    for seed in range(5):
        z = sample_configuration(s, pots, None, np.random.default_rng(seed), size=20)
        assert np.all(z[:, 0] == 1)
    z = sample_configuration(s, pots, {"b": 0}, np.random.default_rng(0), size=200)
    assert np.all(z[:, 1] == 0)


def test_sampling_frequency_matches_enumeration(ln2_pair):
    s, pots = ln2_pair
    z = sample_configuration(s, pots, None, np.random.default_rng(11), size=100_000)
    both = np.mean(z[:, 0] & z[:, 1])
    assert abs(both - 0.4) < 0.01


def test_sampling_converges_to_marginals():
    rng = np.random.default_rng(2)
    s = random_structure(rng, 8)
    pots = PotentialAssignment(rng.normal(size=(1, 8)), rng.normal(size=(1, 7)))
    N = 40_000
    z = sample_configuration(s, pots, {s.node_ids[3]: 1}, np.random.default_rng(3), size=N)
    p = sum_product(s, pots, {s.node_ids[3]: 1}).node_marginals[0]
    tol = 4 * np.sqrt(p * (1 - p) / N) + 1e-12
    assert np.all(np.abs(z.mean(axis=0) - p) <= tol)


def test_sampling_deterministic_given_seed(ln2_pair):
    s, pots = ln2_pair
    a = sample_configuration(s, pots, None, np.random.default_rng(4), size=50)
    b = sample_configuration(s, pots, None, np.random.default_rng(4), size=50)
    assert np.array_equal(a, b)
