"""Closed-form mean-field bid density for a uniformly spread swarm.

For a task with reward ``R`` and a robot at distance ``r`` the bid is
``b = R / (r + eps)``, so the set of positions bidding ``b`` is a circle of
radius ``r(b) = R/b - eps``.  The fraction of a uniform swarm on that circle,
converted from distance to bid units, is

    rho(b) = 2 pi R / (|Omega| b^2) * (R/b - eps)

Circles larger than ``r_cut`` (half the workspace diagonal by default) are
treated as empty.  Mass is not renormalized, so ``total_mass`` can differ from 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BinGrid, Scenario, Task, Workspace, characteristic_length

__all__ = [
    "AmfDensity",
    "amf_density_at",
    "amf_density_values",
    "default_cutoff",
    "binned_density",
    "binned_densities",
    "amf_binned",
    "amf_binned_all",
    "amf_pipeline",
]

SUBSAMPLES = 32
# points used across the open-ended top bin, which runs up to R/eps
TOP_SUBSAMPLES = 512


@dataclass(frozen=True)
class AmfDensity:
    mass: np.ndarray  # (B,)
    total_mass: float
    support: tuple[float, float]  # normalized-bid interval with non-zero density


def default_cutoff(workspace: Workspace) -> float:
    return 0.5 * float(np.hypot(workspace.width, workspace.height))


def amf_density_values(b, reward, area, epsilon, r_cut):
    """Vectorized density in raw-bid units; zero outside ``(R/(r_cut+eps), R/eps)``."""
    b = np.asarray(b, dtype=np.float64)
    if np.any(b <= 0):
        raise ValueError("bids must be positive")
    radius = reward / b - epsilon
    rho = 2.0 * np.pi * reward / (area * b * b) * radius
    return np.where((radius > 0) & (radius <= r_cut), rho, 0.0)


def amf_density_at(b: float, task: Task, workspace: Workspace, epsilon: float, r_cut: float | None = None) -> float:
    if b <= 0:
        raise ValueError("bid must be positive")
    cut = default_cutoff(workspace) if r_cut is None else r_cut
    return float(amf_density_values(b, task.reward, workspace.area, epsilon, cut))


def binned_densities(rewards, area: float, epsilon: float, length: float, grid: BinGrid,
                     r_cut: float) -> np.ndarray:
    """Integrate the closed-form density over each normalized-bid bin, per task.

    Bin ``k`` covers raw bids ``[edges[k], edges[k+1]] / length``; the bottom bin
    extends down to the support start and the top bin up to ``R/eps`` so that
    out-of-range bids clamp the same way histograms do.  Trapezoid rule on
    geometrically spaced sub-samples.  Returns shape ``(T, B)``.
    """
    if not np.isfinite(r_cut) or r_cut <= 0:
        raise ValueError("r_cut must be finite and positive")
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1, 1)
    b_max = rewards / epsilon
    b_min = rewards / (r_cut + epsilon)
    edges = grid.edges / length
    lo = np.broadcast_to(edges[:-1], (rewards.shape[0], grid.n_bins)).copy()
    hi = np.broadcast_to(edges[1:], lo.shape).copy()
    lo[:, 0] = np.minimum(lo[:, 0], b_min[:, 0])
    hi[:, -1] = np.maximum(hi[:, -1], b_max[:, 0])
    lo = np.maximum(lo, b_min)
    hi = np.minimum(hi, b_max)
    empty = hi <= lo
    hi = np.where(empty, lo, hi)

    mass = np.zeros(lo.shape)
    body = slice(0, grid.n_bins - 1)
    mass[:, body] = _trapezoid_geometric(lo[:, body], hi[:, body], SUBSAMPLES, rewards, area, epsilon)
    mass[:, -1:] = _trapezoid_geometric(lo[:, -1:], hi[:, -1:], TOP_SUBSAMPLES, rewards, area, epsilon)
    mass[empty] = 0.0
    return mass


def _trapezoid_geometric(lo, hi, n_sub, rewards, area, epsilon):
    u = np.linspace(0.0, 1.0, n_sub + 1)
    xs = lo[..., None] * (hi / lo)[..., None] ** u
    radius = rewards[..., None] / xs - epsilon
    vals = 2.0 * np.pi * rewards[..., None] / (area * xs * xs) * np.maximum(radius, 0.0)
    return np.trapezoid(vals, xs, axis=-1)


def binned_density(reward: float, area: float, epsilon: float, length: float, grid: BinGrid,
                   r_cut: float) -> AmfDensity:
    mass = binned_densities([reward], area, epsilon, length, grid, r_cut)[0]
    support = (reward / (r_cut + epsilon) * length, reward / epsilon * length)
    return AmfDensity(mass=mass, total_mass=float(mass.sum()), support=support)


def amf_binned(task: Task, scenario: Scenario, grid: BinGrid) -> AmfDensity:
    return binned_density(
        task.reward,
        scenario.workspace.area,
        scenario.epsilon,
        characteristic_length(scenario),
        grid,
        default_cutoff(scenario.workspace),
    )


def amf_binned_all(scenario: Scenario, grid: BinGrid) -> np.ndarray:
    """Un-normalized AMF bin masses for every task, shape (T, B)."""
    return binned_densities(
        scenario.rewards,
        scenario.workspace.area,
        scenario.epsilon,
        characteristic_length(scenario),
        grid,
        default_cutoff(scenario.workspace),
    )


def amf_pipeline(scenario: Scenario, grid: BinGrid, alloc_params):
    """Per-task threshold ``h`` and per-robot coverage ``q`` from AMF densities.

    Uses the same estimate_h / coverage_prob path as the learned estimator.
    Returns ``(h, q)`` with shapes ``(T,)`` and ``(N, T)``.
    """
    from .allocator import mean_field_inputs

    return mean_field_inputs(scenario, amf_binned_all(scenario, grid), grid, alloc_params)
