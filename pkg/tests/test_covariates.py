import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cltm.covariates import (
    BuildContext,
    UnavailableInputError,
    build_covariates,
    leakage_audit,
    simple_path_counts,
)
from cltm.model import TimeSeriesDataset


def _ds(states, edges=None, stamps=None):
    states = np.asarray(states)
    n = states.shape[1]
    return TimeSeriesDataset(tuple(f"n{i}" for i in range(n)), states, edge_observations=edges, timestamps=stamps)


def test_lag_feature():
    ds = build_covariates(_ds([[1], [0], [1], [1]]), ["lag:1"])
    assert ds.burn_in == 1
    assert np.isnan(ds.node_covariates[0, 0, 0])
    assert ds.node_covariates[1:, 0, 0].tolist() == [1, 0, 1]
    ds2 = build_covariates(_ds([[1], [0], [1], [1]]), ["lag:2"])
    assert ds2.burn_in == 2 and ds2.node_covariates[2:, 0, 0].tolist() == [1, 0]


def test_day_of_week_monday():
    ds = build_covariates(_ds([[0], [1]], stamps=("2024-01-01", "2024-01-02")), ["dow"])
    assert ds.node_covariate_names[0] == "dow_mon"
    assert ds.node_covariates[0, 0].tolist() == [1, 0, 0, 0, 0, 0, 0]
    assert ds.node_covariates[1, 0].tolist() == [0, 1, 0, 0, 0, 0, 0]


def _triangle_edges():
    # pairs of 3 nodes: (0,1), (0,2), (1,2)
    return np.array([[1, 1, 1], [0, 0, 0]])


def test_triads_and_three_cycles_on_complete_graph():
    ds = build_covariates(_ds(np.ones((2, 3)), _triangle_edges()), ["triads", "kcycle:3"])
    assert ds.node_covariates[1, :, 0].tolist() == [1, 1, 1]
    assert ds.edge_covariates[1, :, 0].tolist() == [1, 1, 1]


def _brute_paths(A, length):
    n = A.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            for mid in itertools.permutations([k for k in range(n) if k not in (i, j)], length - 1):
                walk = (i, *mid, j)
                if all(A[a, b] for a, b in zip(walk, walk[1:])):
                    out[i, j] += 1
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 7), st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]))
def test_simple_path_counts_match_brute_force(n, seed, length):
    rng = np.random.default_rng(seed)
    A = np.triu((rng.random((n, n)) < 0.5).astype(float), 1)
    A = A + A.T
    assert np.array_equal(simple_path_counts(A, length), _brute_paths(A, length))


def test_four_cycle_on_square():
    # square 0-1-2-3-0 at t=0: the pair (0,2) closes no 4-cycle, (0,1) closes one through 3-2
    n = 4
    iu = list(zip(*np.triu_indices(n, 1)))
    E = np.zeros((2, len(iu)))
    for a, b in [(0, 1), (1, 2), (2, 3), (0, 3)]:
        E[0, iu.index((a, b))] = 1
    ds = build_covariates(_ds(np.ones((2, n)), E), ["kcycle:4"])
    vals = dict(zip(iu, ds.edge_covariates[1, :, 0]))
    assert vals[(0, 1)] == 1 and vals[(0, 2)] == 0


def test_unavailable_inputs():
    for b in ("triads", "kcycle:3", "edge_lag"):
        with pytest.raises(UnavailableInputError):
            build_covariates(_ds(np.ones((3, 3))), [b])
    with pytest.raises(UnavailableInputError):
        build_covariates(_ds(np.ones((3, 3))), ["dow"])
    with pytest.raises(UnavailableInputError):
        build_covariates(_ds(np.ones((3, 3))), ["clusters"])
    with pytest.raises(ValueError):
        build_covariates(_ds(np.ones((3, 3))), ["kcycle:5"])
    with pytest.raises(ValueError):
        build_covariates(_ds(np.ones((3, 3))), ["nonsense"])


def test_duplicate_names_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        build_covariates(_ds(np.ones((3, 2))), ["lag:1", "lag:1"])


def test_clusters_onehot():
    ds = build_covariates(_ds(np.ones((2, 3))), ["clusters"], clusters=["b", "a", "b"])
    assert ds.node_covariate_names == ("cluster_a", "cluster_b")
    assert ds.node_covariates[0].tolist() == [[0, 1], [1, 0], [0, 1]]


ALL = ["lag:1", "lag:3", "regular", "regular:4", "triads", "edge_lag", "kcycle:3", "kcycle:4", "present_prev", "regularity_pair:5", "dow"]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_no_builder_reads_the_future(seed):
    rng = np.random.default_rng(seed)
    T, n = 12, 4
    states = rng.integers(0, 2, (T, n))
    edges = rng.integers(0, 2, (T, n * (n - 1) // 2))
    stamps = tuple(f"2024-01-{d:02d}" for d in range(1, T + 1))
    ctx = BuildContext(states, edges, stamps)
    assert leakage_audit(ctx, ALL)
    assert build_covariates(_ds(states, edges, stamps), ALL).leakage_audited


def test_audit_catches_a_leaky_feature(monkeypatch):
    from cltm import covariates as cv

    def leaky(ctx):
        return cv.BuiltFeatures("node", ("now",), ctx.states[:, :, None].astype(float), 0)

    real = cv._parse
    monkeypatch.setattr(cv, "_parse", lambda s: (s, leaky) if s == "now" else real(s))
    ctx = BuildContext(np.array([[0], [1], [1]]), None, None)
    assert not leakage_audit(ctx, ["now"])
