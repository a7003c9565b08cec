"""Seeded scenario generators for the training and large-scale distributions.

Every scenario draws from its own ``numpy.random.Generator(PCG64(seed))``
stream, so a seed fully determines the output on any platform.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .core import Scenario, Workspace

__all__ = ["GenConfig", "generate", "generate_batch", "make_rng", "PRESETS", "preset"]


def make_rng(*seed) -> np.random.Generator:
    """PCG64 generator seeded through ``SeedSequence`` (ints or int tuples)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed) if len(seed) > 1 else seed[0])))


@dataclass(frozen=True)
class GenConfig:
    n_robots: int = 16
    n_tasks: int = 64
    width: float = 300.0
    height: float = 200.0
    distribution: str = "clustered"
    n_clusters: int = 6
    cluster_sigma_factor: float = 0.15
    reward_lo: float = 6.0
    reward_hi: float = 24.0
    capacity: float = 0.5
    epsilon: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_robots < 1:
            raise ValueError("n_robots must be >= 1")
        if self.n_tasks <= self.n_robots:
            raise ValueError("need more tasks than robots (n_tasks > n_robots)")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("workspace dimensions must be positive")
        if self.distribution not in ("uniform", "clustered"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "clustered" and self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1 for clustered scenarios")
        if self.cluster_sigma_factor < 0:
            raise ValueError("cluster_sigma_factor must be non-negative")
        if not 0 < self.reward_lo < self.reward_hi:
            raise ValueError("need 0 < reward_lo < reward_hi")
        if not (self.capacity > 0 and self.epsilon > 0):
            raise ValueError("capacity and epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "training": GenConfig(),
    "large": GenConfig(n_robots=256, n_tasks=4096, width=3000.0, height=2000.0),
    # shrunk preset for exact-solver comparisons: same robot density as training
    "small": GenConfig(n_robots=4, n_tasks=12, width=150.0, height=100.0),
}


def preset(name: str, **overrides) -> GenConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def generate(config: GenConfig) -> Scenario:
    config.validate()
    rng = make_rng(config.seed)
    W, H = config.width, config.height
    scale = np.array([W, H])

    robot_pos = rng.random((config.n_robots, 2)) * scale
    if config.distribution == "uniform":
        task_pos = rng.random((config.n_tasks, 2)) * scale
    else:
        centers = rng.random((config.n_clusters, 2)) * scale
        which = rng.integers(0, config.n_clusters, size=config.n_tasks)
        sigma = config.cluster_sigma_factor * min(W, H)
        task_pos = centers[which] + sigma * rng.standard_normal((config.n_tasks, 2))
        task_pos = np.clip(task_pos, 0.0, scale)
    rewards = rng.uniform(config.reward_lo, config.reward_hi, size=config.n_tasks)

    return Scenario(
        workspace=Workspace(W, H),
        robot_pos=robot_pos,
        capacity=np.full(config.n_robots, config.capacity),
        task_pos=task_pos,
        rewards=rewards,
        epsilon=config.epsilon,
        seed=config.seed,
    )


def generate_batch(config: GenConfig, count: int, base_seed: int) -> list[Scenario]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate(replace(config, seed=base_seed + k)) for k in range(count)]
