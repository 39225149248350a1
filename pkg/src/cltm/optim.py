"""Backtracking gradient ascent shared by the M-step and the edge model."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

MAX_HALVINGS = 30


@dataclass
class AscentResult:
    theta: np.ndarray
    value: float
    steps_taken: int
    warnings: list = field(default_factory=list)


def ascend(
    objective: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    steps: int,
    learning_rate: float,
    scale: float = 1.0,
    grow: float = 2.0,
    gradient_tolerance: float = 0.0,
) -> AscentResult:
    """Full-batch ascent along ``gradient / scale``.

    Each step starts from the last accepted step size (times ``grow``) and
    halves it until the objective does not decrease; after MAX_HALVINGS
    failed halvings the step is rejected and the weights are left unchanged.
    """
    theta = np.array(theta, dtype=float)
    value = objective(theta)
    step = learning_rate
    warnings = []
    taken = 0
    for _ in range(steps):
        g = gradient(theta)
        if not np.any(g):
            break
        if gradient_tolerance and np.max(np.abs(g)) < gradient_tolerance:
            break
        direction = g / scale
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + step * direction
            val = objective(cand)
            if val >= value:
                break
            step *= 0.5
        else:
            msg = f"line search failed after {MAX_HALVINGS} halvings; step rejected"
            log.warning(msg)
            warnings.append(msg)
            break
        if np.array_equal(cand, theta):
            break
        theta, value = cand, val
        taken += 1
        step *= grow
    return AscentResult(theta, value, taken, warnings)
