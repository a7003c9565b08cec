"""Two-phase training of the density network, and the two-robot TAR toy problem.

Phase 1 fits the network to empirical bid histograms by cross-entropy.
Phase 2 refines it on task-allocation regret for one sampled robot per
step; the gradient flows through the thresholds ``h`` only, coverage
probabilities are treated as constants.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import network
from .allocator import (
    AllocParams,
    coverage_prob,
    estimate_h,
    soft_knapsack,
    soft_quantile,
    soft_quantile_vjp,
    tar_grad_wrt_h,
    tar_loss,
)
from .core import BinGrid, compute_bid_matrix, histogram_densities
from .network import NetParams
from .scenario import GenConfig, generate, make_rng

__all__ = [
    "TrainConfig",
    "TrainReport",
    "scenario_seed",
    "default_sampler",
    "phase1",
    "phase2",
    "phase2_step_grad",
    "train",
    "TwoRobotInstance",
    "saf2",
    "tar2_loss",
    "tar2_grad",
    "tar2_primal_dual_step",
    "random_two_robot_instance",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    p1: int = 400
    p2: int = 1200
    alpha: float = 3e-3
    beta: float = 3.5
    q_h: float = 0.70
    delta_b: float = 1.6
    gamma: float = 0.08  # accepted and logged, not used by any update
    eta: float = 1e-3
    seed: int = 0
    scenario: GenConfig = field(default_factory=GenConfig)
    n_bins: int = 64
    bin_lo: float = 0.02
    bin_hi: float = 64.0

    def validate(self) -> None:
        if self.p1 < 0 or self.p2 < 0:
            raise ValueError("step counts must be non-negative")
        if not (self.alpha > 0 and self.eta > 0):
            raise ValueError("alpha and eta must be positive")
        self.alloc_params()
        self.scenario.validate()

    @property
    def grid(self) -> BinGrid:
        return BinGrid(self.n_bins, self.bin_lo, self.bin_hi)

    def alloc_params(self, lam: float = 0.0) -> AllocParams:
        return AllocParams(beta=self.beta, q_h=self.q_h, delta_b=self.delta_b, lam=lam)


@dataclass
class TrainReport:
    ce_loss: list = field(default_factory=list)
    ce_ms: list = field(default_factory=list)
    tar_loss: list = field(default_factory=list)
    tar_ms: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    capacity_residual: list = field(default_factory=list)
    wall_seconds: float = 0.0
    final_lam: float = 0.0

    def rows(self):
        """``(step, phase, loss, lam, wall_ms)`` rows for the CSV report."""
        for i, (loss, ms) in enumerate(zip(self.ce_loss, self.ce_ms)):
            yield i, 1, loss, 0.0, ms
        for i, (loss, lam, ms) in enumerate(zip(self.tar_loss, self.lam, self.tar_ms)):
            yield i, 2, loss, lam, ms


def scenario_seed(seed: int, phase: int, step: int) -> int:
    """Scenario seed for a training step; disjoint in practice from small evaluation seeds."""
    state = np.random.SeedSequence([seed, phase, step]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def _check_finite(value: float, phase: int, step: int) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss in phase {phase} at step {step}")


def default_sampler(cfg: TrainConfig):
    """Fresh scenario per (phase, step) from the configured generator."""
    def sample(phase: int, step: int):
        return generate(replace(cfg.scenario, seed=scenario_seed(cfg.seed, phase, step)))
    return sample


def phase1(params: NetParams, cfg: TrainConfig, report: TrainReport | None = None, sampler=None) -> NetParams:
    grid = cfg.grid
    sample = sampler or default_sampler(cfg)
    for step in range(cfg.p1):
        t0 = time.perf_counter()
        scen = sample(1, step)
        target = histogram_densities(compute_bid_matrix(scen).normalized, grid)
        rho, trace = network.forward(params, network.featurize(scen))
        loss = network.cross_entropy(rho, target)
        _check_finite(loss, 1, step)
        params = params.axpy(-cfg.alpha, network.backward_ce(params, trace, target))
        if report is not None:
            report.ce_loss.append(loss)
            report.ce_ms.append(1e3 * (time.perf_counter() - t0))
    return params


def phase2_step_grad(params: NetParams, scen, k: int, grid: BinGrid, alloc: AllocParams):
    """TAR loss for robot ``k`` and its gradient through ``h`` (``q`` frozen).

    Returns ``(loss, grad, soft_allocation, bids_norm)``.
    """
    bm = compute_bid_matrix(scen)
    b_norm = bm.normalized[k]
    rho, trace = network.forward(params, network.featurize(scen))
    quant = soft_quantile(rho, grid, alloc.q_h)
    h = estimate_h(rho, grid, alloc.q_h, alloc.delta_b)
    q = coverage_prob(rho, grid, b_norm, scen.n_robots)
    soft = soft_knapsack(b_norm, h, alloc, scen.capacity[k], bm.length)
    loss = tar_loss(scen.rewards, soft.fraction, q)
    dh = tar_grad_wrt_h(scen.rewards, soft, q, b_norm, alloc)
    dh = np.where(quant - alloc.delta_b > grid.lo, dh, 0.0)  # floor passes no gradient
    upstream = soft_quantile_vjp(rho, grid, alloc.q_h, dh)
    return loss, network.backward_vjp(params, trace, upstream), soft, b_norm


def phase2(params: NetParams, cfg: TrainConfig, report: TrainReport | None = None,
           sampler=None) -> tuple[NetParams, float]:
    grid = cfg.grid
    sample = sampler or default_sampler(cfg)
    robot_rng = make_rng(cfg.seed, 2)
    lam = 0.0
    for step in range(cfg.p2):
        t0 = time.perf_counter()
        scen = sample(2, step)
        k = int(robot_rng.integers(scen.n_robots))
        loss, grad, soft, b_norm = phase2_step_grad(params, scen, k, grid, cfg.alloc_params(lam))
        _check_finite(loss, 2, step)
        params = params.axpy(-cfg.alpha, grad)
        # capacity usage of the clamped allocation; the unclamped one meets C' exactly
        residual = float(np.dot(b_norm, soft.fraction * soft.capacity) - soft.normalized_capacity)
        lam = max(0.0, lam + cfg.eta * residual)
        if report is not None:
            report.tar_loss.append(loss)
            report.lam.append(lam)
            report.capacity_residual.append(residual)
            report.tar_ms.append(1e3 * (time.perf_counter() - t0))
    params.lam = lam
    return params, lam


def train(cfg: TrainConfig, sampler=None) -> tuple[NetParams, TrainReport]:
    """``init(seed)``, then both phases; deterministic per ``cfg.seed``.

    ``sampler(phase, step)`` overrides where training scenarios come from.
    """
    cfg.validate()
    logger.info("training: p1=%d p2=%d alpha=%g gamma=%g (unused)", cfg.p1, cfg.p2, cfg.alpha, cfg.gamma)
    report = TrainReport()
    t0 = time.perf_counter()
    params = network.init(cfg.seed, cfg.n_bins)
    params = phase1(params, cfg, report, sampler)
    params, lam = phase2(params, cfg, report, sampler)
    report.wall_seconds = time.perf_counter() - t0
    report.final_lam = lam
    return params, report


# --- two-robot case ------------------------------------------------------

@dataclass
class TwoRobotInstance:
    """Two robots, each directly parameterized by its estimate of the other's bids."""

    bids: np.ndarray  # (2, T)
    estimates: np.ndarray  # (2, T); row k is robot k's estimate of the other robot
    values: np.ndarray  # (T,) task values weighting the regret
    lam: np.ndarray = field(default_factory=lambda: np.zeros(2))
    capacity: np.ndarray = field(default_factory=lambda: np.ones(2))
    beta: float = 3.5

    def copy(self) -> "TwoRobotInstance":
        return TwoRobotInstance(self.bids.copy(), self.estimates.copy(), self.values.copy(),
                                self.lam.copy(), self.capacity.copy(), self.beta)


def saf2(bids, estimate, lam: float, beta: float, capacity: float):
    """Soft allocation ``x`` with ``sum(bids * x) == capacity``, and clamped fractions ``x/C``."""
    bids = np.asarray(bids, dtype=np.float64)
    z = beta * (bids - estimate - lam * bids)
    s = np.exp(z - z.max())
    s /= s.sum()
    x = s * (capacity / np.dot(bids, s))
    return x, np.clip(x / capacity, 0.0, 1.0)


def _allocs(inst: TwoRobotInstance):
    return [saf2(inst.bids[k], inst.estimates[k], inst.lam[k], inst.beta, inst.capacity[k]) for k in (0, 1)]


def tar2_loss(inst: TwoRobotInstance) -> float:
    (_, f1), (_, f2) = _allocs(inst)
    return float(np.sum(inst.values * (1.0 - f1) * (1.0 - f2)))


def tar2_grad(inst: TwoRobotInstance) -> np.ndarray:
    """Analytic gradient of tar2_loss with respect to both estimate vectors, shape (2, T)."""
    allocs = _allocs(inst)
    grad = np.zeros_like(inst.estimates, dtype=np.float64)
    for k in (0, 1):
        x, frac = allocs[k]
        other = allocs[1 - k][1]
        cap = inst.capacity[k]
        b = inst.bids[k]
        # dL/dx_k, with (1 - x_other/C_other) playing the role of the coverage term
        g = np.where(frac < 1.0, -inst.values * (1.0 - other) / cap, 0.0)
        dz = x * (g - b * np.dot(g, x) / cap)
        grad[k] = -inst.beta * dz
    return grad


def tar2_primal_dual_step(inst: TwoRobotInstance, lr: float = 0.05, eta: float = 0.01) -> TwoRobotInstance:
    """One primal step on both estimate vectors, then the approximate dual step on ``lam``."""
    out = inst.copy()
    out.estimates = inst.estimates - lr * tar2_grad(inst)
    for k, (x, frac) in enumerate(_allocs(out)):
        residual = float(np.dot(out.bids[k], frac * out.capacity[k]) - out.capacity[k])
        out.lam[k] = max(0.0, out.lam[k] + eta * residual)
    return out


def random_two_robot_instance(rng: np.random.Generator, n_tasks: int, beta: float = 3.5) -> TwoRobotInstance:
    """Bids ``U[0.1, 1]`` with capacity 1; a task's value is its best bid."""
    bids = rng.uniform(0.1, 1.0, size=(2, n_tasks))
    estimates = rng.uniform(0.1, 1.0, size=(2, n_tasks))
    return TwoRobotInstance(bids=bids, estimates=estimates, values=bids.max(axis=0),
                            capacity=np.ones(2), beta=beta)
