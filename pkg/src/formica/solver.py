"""Exact global allocation for small instances.

Maximize ``sum_j max_i b_ij x_ij`` with at most one robot per task and
``sum_j b_ij x_ij <= C_i`` per robot.  ``solve_exact`` is a depth-first
branch and bound; ``solve_exhaustive`` enumerates every assignment and is
kept as an independent check.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .allocator import resolve
from .core import Allocation, Scenario, compute_bid_matrix

__all__ = ["ExactConfig", "ExactResult", "solve_exact", "solve_exhaustive", "assignment_to_allocation"]

EXHAUSTIVE_LIMIT = 10 ** 7


@dataclass(frozen=True)
class ExactConfig:
    time_limit: float = 60.0
    node_limit: int = 10 ** 7
    gap_tolerance: float = 0.0

    def __post_init__(self):
        if not (self.time_limit > 0 and self.node_limit > 0):
            raise ValueError("time_limit and node_limit must be positive")
        if self.gap_tolerance < 0:
            raise ValueError("gap_tolerance must be non-negative")


@dataclass
class ExactResult:
    allocation: Allocation
    assignment: np.ndarray  # robot per task, -1 for none
    objective: float
    bound: float
    status: str  # "optimal" or "feasible"
    nodes: int
    ms: float

    @property
    def gap(self) -> float:
        return 0.0 if self.bound <= 0 else max(0.0, (self.bound - self.objective) / self.bound)


def _objective(raw: np.ndarray, assignment: np.ndarray) -> float:
    cols = np.flatnonzero(assignment >= 0)
    return math.fsum(raw[assignment[cols], cols])


def assignment_to_allocation(scenario: Scenario, assignment, bids=None) -> Allocation:
    assignment = np.asarray(assignment)
    selections = [np.flatnonzero(assignment == i) for i in range(scenario.n_robots)]
    return resolve(scenario, selections, bids)


def solve_exact(scenario: Scenario, cfg: ExactConfig | None = None) -> ExactResult:
    cfg = cfg or ExactConfig()
    t0 = time.perf_counter()
    bm = compute_bid_matrix(scenario)
    raw = bm.raw
    N, T = raw.shape
    cap0 = scenario.capacity.astype(np.float64)
    # tasks with the largest attainable bid first
    affordable = np.where(raw <= cap0[:, None], raw, 0.0)
    order = np.argsort(-affordable.max(axis=0), kind="stable") if T else np.zeros(0, dtype=np.intp)

    def bound_rest(depth, caps):
        rest = order[depth:]
        if rest.size == 0:
            return 0.0
        sub = raw[:, rest]
        ok = sub <= caps[:, None]
        return float(np.where(ok, sub, 0.0).max(axis=0).sum())

    best_assign = np.full(T, -1, dtype=np.intp)
    best_val = 0.0
    nodes = 0
    status = "optimal"
    root_bound = bound_rest(0, cap0)
    # stack entries: (depth, partial objective, caps, assignment, node bound)
    stack = [(0, 0.0, cap0, best_assign.copy(), root_bound)]
    while stack:
        if nodes >= cfg.node_limit or time.perf_counter() - t0 > cfg.time_limit:
            status = "feasible"
            break
        depth, value, caps, assign, node_bound = stack.pop()
        nodes += 1
        if node_bound <= best_val * (1.0 + cfg.gap_tolerance):
            continue
        if depth == T:
            if value > best_val:
                best_val, best_assign = value, assign
            continue
        j = order[depth]
        children = []
        # "none" is pushed first so it is explored last
        children.append((value, caps, -1))
        for i in np.argsort(raw[:, j], kind="stable"):
            if raw[i, j] <= caps[i]:
                new_caps = caps.copy()
                new_caps[i] -= raw[i, j]
                children.append((value + raw[i, j], new_caps, int(i)))
        for child_value, child_caps, robot in children:
            b = child_value + bound_rest(depth + 1, child_caps)
            if b <= best_val * (1.0 + cfg.gap_tolerance):
                continue
            child_assign = assign.copy()
            child_assign[j] = robot
            stack.append((depth + 1, child_value, child_caps, child_assign, b))

    objective = _objective(raw, best_assign)
    if status == "optimal":
        bound = objective
    else:
        bound = max([objective] + [entry[4] for entry in stack])
    return ExactResult(
        allocation=assignment_to_allocation(scenario, best_assign, bm),
        assignment=best_assign,
        objective=objective,
        bound=bound,
        status=status,
        nodes=nodes,
        ms=1e3 * (time.perf_counter() - t0),
    )


def solve_exhaustive(scenario: Scenario) -> tuple[Allocation, float]:
    """Best capacity-feasible assignment by full enumeration.

    Ties go to the lexicographically smallest assignment vector, with
    "none" encoded as 0 and robot ``i`` as ``i + 1``.
    """
    bm = compute_bid_matrix(scenario)
    raw = bm.raw
    N, T = raw.shape
    if (N + 1) ** T > EXHAUSTIVE_LIMIT:
        raise ValueError(f"instance too large to enumerate: {(N + 1) ** T} assignments")
    if T == 0:
        empty = np.zeros(0, dtype=np.intp)
        return assignment_to_allocation(scenario, empty, bm), 0.0
    codes = np.array(list(itertools.product(range(N + 1), repeat=T)), dtype=np.intp)
    padded = np.vstack([np.zeros((1, T)), raw])  # row 0 is "none"
    gains = padded[codes, np.arange(T)]
    feasible = np.ones(codes.shape[0], dtype=bool)
    for i in range(N):
        usage = np.where(codes == i + 1, raw[i], 0.0).sum(axis=1)
        feasible &= usage <= scenario.capacity[i]
    totals = np.where(feasible, gains.sum(axis=1), -np.inf)
    best = totals.max()
    # re-score near-ties exactly so summation order cannot decide the winner
    near = np.flatnonzero(totals >= best - 1e-9 * max(1.0, abs(best)))
    exact = [math.fsum(gains[r]) for r in near]
    top = max(exact)
    pick = near[exact.index(top)]
    assignment = codes[pick] - 1
    return assignment_to_allocation(scenario, assignment, bm), _objective(raw, assignment)
