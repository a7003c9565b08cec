"""Domain types, the geometric bid model, bid binning and global metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Workspace",
    "Task",
    "Robot",
    "Scenario",
    "BidMatrix",
    "BinGrid",
    "Allocation",
    "bid",
    "characteristic_length",
    "compute_bid_matrix",
    "histogram_density",
    "histogram_densities",
    "global_objective",
    "coverage",
    "scenario_to_dict",
    "scenario_from_dict",
    "dumps_scenario",
    "loads_scenario",
    "save_scenario",
    "load_scenario",
]


@dataclass(frozen=True)
class Workspace:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"workspace dimensions must be positive, got {self.width}x{self.height}")

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class Task:
    pos: tuple[float, float]
    reward: float


@dataclass(frozen=True)
class Robot:
    pos: tuple[float, float]
    capacity: float


@dataclass(frozen=True, eq=False)
class Scenario:
    """World state: robots and tasks in a rectangular workspace.

    Positions are stored as ``(n, 2)`` float64 arrays. ``robots`` and ``tasks``
    give per-object views for callers that prefer them.
    """

    workspace: Workspace
    robot_pos: np.ndarray
    capacity: np.ndarray
    task_pos: np.ndarray
    rewards: np.ndarray
    epsilon: float
    seed: int = 0

    def __post_init__(self):
        rp = np.asarray(self.robot_pos, dtype=np.float64).reshape(-1, 2)
        cap = np.asarray(self.capacity, dtype=np.float64).reshape(-1)
        tp = np.asarray(self.task_pos, dtype=np.float64).reshape(-1, 2)
        rw = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        if rp.shape[0] < 1:
            raise ValueError("a scenario needs at least one robot")
        if cap.shape[0] != rp.shape[0]:
            raise ValueError("capacity must have one entry per robot")
        if rw.shape[0] != tp.shape[0]:
            raise ValueError("rewards must have one entry per task")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if np.any(cap <= 0):
            raise ValueError("robot capacities must be positive")
        if np.any(rw <= 0):
            raise ValueError("task rewards must be positive")
        W, H = self.workspace.width, self.workspace.height
        for name, p in (("robot", rp), ("task", tp)):
            if np.any(p < 0) or np.any(p[:, 0] > W) or np.any(p[:, 1] > H):
                raise ValueError(f"{name} position outside the workspace")
        for name, arr in (("robot_pos", rp), ("capacity", cap), ("task_pos", tp), ("rewards", rw)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n_robots(self) -> int:
        return self.robot_pos.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.task_pos.shape[0]

    @property
    def robots(self) -> list[Robot]:
        return [Robot((float(x), float(y)), float(c)) for (x, y), c in zip(self.robot_pos, self.capacity)]

    @property
    def tasks(self) -> list[Task]:
        return [Task((float(x), float(y)), float(r)) for (x, y), r in zip(self.task_pos, self.rewards)]

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return scenario_to_dict(self) == scenario_to_dict(other)


@dataclass(frozen=True)
class BidMatrix:
    raw: np.ndarray  # (N, T)
    length: float  # characteristic length
    normalized: np.ndarray  # raw * length


@dataclass(frozen=True)
class BinGrid:
    """Geometrically spaced bins over normalized bids."""

    n_bins: int = 64
    lo: float = 0.02
    hi: float = 64.0
    edges: np.ndarray = field(init=False, repr=False)
    centers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if not 0 < self.lo < self.hi:
            raise ValueError("need 0 < lo < hi")
        # exp of evenly spaced logs gives ratio (hi/lo)^(1/B) between neighbours
        edges = self.lo * (self.hi / self.lo) ** (np.arange(self.n_bins + 1) / self.n_bins)
        edges[0], edges[-1] = self.lo, self.hi
        centers = np.sqrt(edges[:-1] * edges[1:])
        edges.setflags(write=False)
        centers.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "centers", centers)

    def bin_index(self, values) -> np.ndarray:
        """Bin of each value; out-of-range values clamp to the extreme bins."""
        idx = np.searchsorted(self.edges, np.asarray(values, dtype=np.float64), side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)


@dataclass
class Allocation:
    """Per-robot selections plus the conflict-resolved assignment.

    ``winner[j]`` is the robot credited with task ``j`` or -1, ``credited[j]``
    the raw bid it is credited with (0 for uncovered tasks).
    """

    selections: list[np.ndarray]
    winner: np.ndarray
    credited: np.ndarray

    @property
    def n_tasks(self) -> int:
        return self.winner.shape[0]


def bid(robot_pos, task: Task, epsilon: float) -> float:
    """Raw bid ``R / (distance + epsilon)``."""
    dist = float(np.hypot(robot_pos[0] - task.pos[0], robot_pos[1] - task.pos[1]))
    return task.reward / (dist + epsilon)


def characteristic_length(scenario: Scenario) -> float:
    return float(np.sqrt(scenario.workspace.area / scenario.n_robots))


def compute_bid_matrix(scenario: Scenario) -> BidMatrix:
    diff = scenario.robot_pos[:, None, :] - scenario.task_pos[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    raw = scenario.rewards[None, :] / (dist + scenario.epsilon)
    ell = characteristic_length(scenario)
    return BidMatrix(raw=raw, length=ell, normalized=raw * ell)


def histogram_density(normalized_bids, grid: BinGrid) -> np.ndarray:
    values = np.asarray(normalized_bids, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("cannot build a density from zero bids")
    counts = np.bincount(grid.bin_index(values), minlength=grid.n_bins).astype(np.float64)
    return counts / values.size


def histogram_densities(normalized: np.ndarray, grid: BinGrid) -> np.ndarray:
    """Per-task empirical densities (T, B) from an (N, T) normalized bid matrix."""
    normalized = np.asarray(normalized, dtype=np.float64)
    n, t = normalized.shape
    if n == 0:
        raise ValueError("cannot build a density from zero bids")
    idx = grid.bin_index(normalized)
    flat = idx + grid.n_bins * np.arange(t)[None, :]
    counts = np.bincount(flat.ravel(), minlength=t * grid.n_bins).reshape(t, grid.n_bins)
    return counts / float(n)


def global_objective(scenario: Scenario, alloc: Allocation) -> float:
    # max-crediting happens in resolve(); fsum keeps the sum order-independent
    return math.fsum(alloc.credited)


def coverage(alloc: Allocation, n_tasks: int | None = None) -> float:
    t = alloc.n_tasks if n_tasks is None else n_tasks
    if t == 0:
        return 0.0
    return float(np.count_nonzero(alloc.winner >= 0)) / t


# --- serialization -------------------------------------------------------

def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "seed": scenario.seed,
        "W": float(scenario.workspace.width),
        "H": float(scenario.workspace.height),
        "epsilon": scenario.epsilon,
        "robots": [
            {"x": float(x), "y": float(y), "capacity": float(c)}
            for (x, y), c in zip(scenario.robot_pos, scenario.capacity)
        ],
        "tasks": [
            {"x": float(x), "y": float(y), "reward": float(r)}
            for (x, y), r in zip(scenario.task_pos, scenario.rewards)
        ],
    }


def scenario_from_dict(data: dict) -> Scenario:
    try:
        robots = data["robots"]
        tasks = data["tasks"]
        return Scenario(
            workspace=Workspace(float(data["W"]), float(data["H"])),
            robot_pos=np.array([[r["x"], r["y"]] for r in robots], dtype=np.float64).reshape(-1, 2),
            capacity=np.array([r["capacity"] for r in robots], dtype=np.float64),
            task_pos=np.array([[t["x"], t["y"]] for t in tasks], dtype=np.float64).reshape(-1, 2),
            rewards=np.array([t["reward"] for t in tasks], dtype=np.float64),
            epsilon=float(data["epsilon"]),
            seed=int(data["seed"]),
        )
    except KeyError as exc:
        raise ValueError(f"scenario document missing field {exc}") from None


def dumps_scenario(scenario: Scenario) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(scenario_to_dict(scenario), indent=1) + "\n"


def loads_scenario(text: str) -> Scenario:
    return scenario_from_dict(json.loads(text))


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(scenario))


def load_scenario(path) -> Scenario:
    return loads_scenario(Path(path).read_text())
