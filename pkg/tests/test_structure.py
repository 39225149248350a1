import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cltm.model import LatentTreeStructure, VariableKind, chain_structure, validate_structure
from cltm.structure import (
    InconsistentDistanceError,
    Relation,
    additive_distances,
    chow_liu_skeleton,
    cl_grouping,
    classify_pair,
    extract_clusters,
    phi_statistic,
    recursive_grouping,
    robinson_foulds,
    to_dot,
)
from cltm.synthetic import random_latent_tree

O, H = VariableKind.OBSERVED, VariableKind.HIDDEN

LINE = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)
STAR = np.array([[0, 2, 2], [2, 0, 2], [2, 2, 0]], dtype=float)
QUARTET = np.array([[0, 2, 3, 3], [2, 0, 3, 3], [3, 3, 0, 2], [3, 3, 2, 0]], dtype=float)
Q_LABELS = ["1", "2", "3", "4"]


def quartet_tree():
    O_, H_ = O, H
    return LatentTreeStructure(
        (("1", O_), ("2", O_), ("3", O_), ("4", O_), ("h1", H_), ("h2", H_)),
        (("h1", "1", 1.0), ("h1", "2", 1.0), ("h2", "3", 1.0), ("h2", "4", 1.0), ("h1", "h2", 1.0)),
    )


def test_phi_examples():
    assert phi_statistic(LINE, 0, 1, 2) == 1.0
    assert phi_statistic(STAR, 0, 1, 2) == 0.0
    assert phi_statistic(QUARTET, 0, 1, 2) == 0.0 and phi_statistic(QUARTET, 0, 1, 3) == 0.0
    with pytest.raises(ValueError):
        phi_statistic(LINE, 0, 0, 1)
    with pytest.raises(IndexError):
        phi_statistic(LINE, 0, 1, 5)


def test_classify_examples():
    # node index 1 is the middle of the line: it lies on every path out of node 0
    r = classify_pair(LINE, 0, 1, [2])
    assert r.relation is Relation.J_PARENT_OF_I and r.phi_mean == 1.0
    assert classify_pair(LINE, 1, 0, [2]).relation is Relation.I_PARENT_OF_J
    assert classify_pair(STAR, 0, 1, [2]).relation is Relation.SIBLINGS
    q = classify_pair(QUARTET, 0, 2, [1, 3])
    assert q.relation is Relation.SEPARATED and q.phi_spread == 2.0
    with pytest.raises(ValueError):
        classify_pair(LINE, 0, 1, [])


def test_rg_star():
    t = recursive_grouping(STAR)
    assert list(t.hidden_ids) == ["h0"]
    assert sorted(w for _, _, w in t.edges) == pytest.approx([1.0, 1.0, 1.0], abs=1e-12)


def test_rg_quartet():
    t = recursive_grouping(QUARTET, labels=Q_LABELS)
    assert len(t.hidden_ids) == 2
    assert robinson_foulds(t, quartet_tree()) == 0
    assert np.allclose(additive_distances(t, Q_LABELS), QUARTET)
    assert all(w == pytest.approx(1.0) for _, _, w in t.edges)


def test_rg_two_leaves():
    t = recursive_grouping(np.array([[0, 1.5], [1.5, 0]]), labels=["a", "b"])
    assert not t.hidden_ids and list(t.edges) == [("a", "b", 1.5)]


def test_rg_inconsistent_reports_quartet():
    rng = np.random.default_rng(0)
    D = rng.uniform(1, 5, (6, 6))
    D = D + D.T
    np.fill_diagonal(D, 0)
    with pytest.raises(InconsistentDistanceError, match="quartet"):
        recursive_grouping(D)


def test_chow_liu_examples():
    assert chow_liu_skeleton(LINE, ["1", "2", "3"]) == [("1", "2", 1.0), ("2", "3", 1.0)]
    assert chow_liu_skeleton(STAR, ["1", "2", "3"]) == [("1", "2", 2.0), ("1", "3", 2.0)]
    e = chow_liu_skeleton(QUARTET, Q_LABELS)
    assert ("1", "2", 2.0) in e and ("3", "4", 2.0) in e and len(e) == 3


def test_cl_grouping_examples():
    assert robinson_foulds(cl_grouping(QUARTET, labels=Q_LABELS), quartet_tree()) == 0
    chain = chain_structure(["a", "b", "c", "d", "e"], [0.5, 1.0, 0.7, 1.2])
    out = cl_grouping(additive_distances(chain), labels=chain.observed_ids)
    assert not out.hidden_ids and robinson_foulds(out, chain) == 0
    # three stacked hidden nodes, five leaves
    cascade = LatentTreeStructure(
        tuple((x, O) for x in "abcde") + (("h0", H), ("h1", H), ("h2", H)),
        (("h0", "a", 0.5), ("h0", "b", 0.6), ("h0", "h1", 0.7), ("h1", "c", 0.4), ("h1", "h2", 0.8), ("h2", "d", 0.5), ("h2", "e", 0.9)),
    )
    out = cl_grouping(additive_distances(cascade), labels=cascade.observed_ids)
    assert robinson_foulds(out, cascade) == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 30), st.integers(0, 1_000_000))
def test_exact_recovery_property(n, seed):
    truth = random_latent_tree(n, np.random.default_rng(seed))
    if len(truth.observed_ids) < 3:
        return
    D = additive_distances(truth)
    out = cl_grouping(D, labels=truth.observed_ids)
    assert robinson_foulds(out, truth) == 0
    assert validate_structure(out) == []
    assert np.allclose(additive_distances(out, truth.observed_ids), D, atol=0.3)
    # deterministic, stable ids
    assert cl_grouping(D, labels=truth.observed_ids) == out


def test_global_rg_method():
    truth = random_latent_tree(15, np.random.default_rng(8))
    D = additive_distances(truth)
    out = cl_grouping(D, labels=truth.observed_ids, method="rg")
    assert robinson_foulds(out, truth) == 0


def test_short_edges_contracted():
    # a 0.01-long hidden edge between two groups is below eps_min
    t = LatentTreeStructure(
        tuple((x, O) for x in "abcd") + (("h0", H), ("h1", H)),
        (("h0", "a", 1.0), ("h0", "b", 1.0), ("h1", "c", 1.0), ("h1", "d", 1.0), ("h0", "h1", 0.01)),
    )
    out = cl_grouping(additive_distances(t), labels=list("abcd"))
    assert len(out.hidden_ids) == 1
    assert all(d >= 3 for d in (out.degree(h) for h in out.hidden_ids))


def test_extract_clusters_examples():
    assert extract_clusters(quartet_tree(), 2) == [["1", "2"], ["3", "4"]]
    assert extract_clusters(quartet_tree(), 1) == [["1", "2", "3", "4"]]
    chain = chain_structure(["1", "2", "3"], [1.0, 5.0])
    assert extract_clusters(chain, 2) == [["1", "2"], ["3"]]
    with pytest.raises(ValueError):
        extract_clusters(chain, 0)


def test_to_dot():
    dot = to_dot(quartet_tree())
    assert '"1" [shape=box]' in dot and '"h1" [shape=circle]' in dot
    assert 'label="1.0000"' in dot


def test_robinson_foulds_detects_difference():
    other = LatentTreeStructure(
        (("1", O), ("2", O), ("3", O), ("4", O), ("h1", H), ("h2", H)),
        (("h1", "1", 1.0), ("h1", "3", 1.0), ("h2", "2", 1.0), ("h2", "4", 1.0), ("h1", "h2", 1.0)),
    )
    assert robinson_foulds(other, quartet_tree()) == 2
