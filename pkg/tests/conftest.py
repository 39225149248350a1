import math

import numpy as np
import pytest

from cltm.inference import PotentialAssignment
from cltm.model import (
    CltmModel,
    CltmParameters,
    CovariateSchema,
    LatentTreeStructure,
    VariableKind,
)

O = VariableKind.OBSERVED
H = VariableKind.HIDDEN


def pair_structure():
    return LatentTreeStructure((("a", O), ("b", O)), (("a", "b", 1.0),))


@pytest.fixture
def ln2_pair():
    """Two observed nodes, zero node potentials, edge potential ln 2."""
    s = pair_structure()
    return s, PotentialAssignment(np.zeros((1, 2)), np.array([[math.log(2)]]))


@pytest.fixture
def ln2_model():
    s = pair_structure()
    params = CltmParameters(np.zeros(2), np.zeros((2, 0)), np.array([math.log(2)]), np.zeros((1, 0)))
    return CltmModel(s, CovariateSchema(), params)


def random_structure(rng, n_nodes, hidden_fraction=0.5):
    """Random tree on n_nodes with arbitrary (not necessarily canonical)
    hidden labels; fine for inference checks."""
    from cltm.synthetic import random_tree_edges

    edges = random_tree_edges(n_nodes, rng)
    hidden = rng.random(n_nodes) < hidden_fraction
    hidden[0] = False
    ids = [f"{'h' if hidden[k] else 'y'}{k:02d}" for k in range(n_nodes)]
    nodes = tuple((ids[k], H if hidden[k] else O) for k in range(n_nodes))
    return LatentTreeStructure(nodes, tuple((ids[u], ids[v], 1.0) for u, v in edges))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
