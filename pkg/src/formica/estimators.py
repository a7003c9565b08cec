"""Scikit-learn style wrappers: density estimators and allocation policies.

``fit`` trains (or does nothing for the analytical model), ``predict_density``
returns per-task densities over the bin grid, and ``predict`` runs the full
decentralized allocation for a scenario.  Hyperparameters follow the
``get_params`` / ``set_params`` contract, so the estimators clone and grid
search like any other.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import network
from .allocator import AllocParams, allocate
from .amf import amf_binned_all
from .core import Allocation, BinGrid, Scenario, compute_bid_matrix, coverage, global_objective
from .scenario import GenConfig
from .solver import ExactConfig, solve_exact
from .training import TrainConfig, train

__all__ = [
    "check_scenario",
    "check_scenarios",
    "FormicaEstimator",
    "AmfEstimator",
    "ExactAllocator",
    "evaluate",
]


def check_scenario(X) -> Scenario:
    if not isinstance(X, Scenario):
        raise TypeError(f"expected a Scenario, got {type(X).__name__}")
    if X.n_tasks < 1:
        raise ValueError("scenario has no tasks")
    return X


def check_scenarios(X) -> list[Scenario]:
    if isinstance(X, Scenario):
        return [X]
    scenarios = list(X)
    if not scenarios:
        raise ValueError("need at least one scenario")
    return [check_scenario(s) for s in scenarios]


class _MeanFieldPolicy(BaseEstimator):
    """Shared decode path: densities -> thresholds -> greedy decode -> resolve."""

    def _grid(self) -> BinGrid:
        return BinGrid(self.n_bins, self.bin_lo, self.bin_hi)

    def _alloc_params(self) -> AllocParams:
        return AllocParams(beta=self.beta, q_h=self.q_h, delta_b=self.delta_b)

    def predict(self, X: Scenario, bids=None) -> Allocation:
        scen = check_scenario(X)
        return allocate(scen, self.predict_density(scen), self._grid(), self._alloc_params(),
                        bids if bids is not None else compute_bid_matrix(scen), self.decode_lam)

    def score(self, X, y=None) -> float:
        """Mean global objective over one or more scenarios."""
        scenarios = check_scenarios(X)
        return float(np.mean([global_objective(s, self.predict(s)) for s in scenarios]))


class FormicaEstimator(_MeanFieldPolicy):
    """Learned bid-density estimator trained on allocation regret.

    ``fit()`` with no data samples training scenarios from ``scenario_config``;
    ``fit(X)`` cycles through the given scenarios instead.
    """

    def __init__(self, n_phase1=400, n_phase2=1200, learning_rate=3e-3, beta=3.5, q_h=0.70,
                 delta_b=1.6, gamma=0.08, eta=1e-3, n_bins=64, bin_lo=0.02, bin_hi=64.0,
                 scenario_config=None, decode_lam=0.0, random_state=0):
        self.n_phase1 = n_phase1
        self.n_phase2 = n_phase2
        self.learning_rate = learning_rate
        self.beta = beta
        self.q_h = q_h
        self.delta_b = delta_b
        self.gamma = gamma
        self.eta = eta
        self.n_bins = n_bins
        self.bin_lo = bin_lo
        self.bin_hi = bin_hi
        self.scenario_config = scenario_config
        self.decode_lam = decode_lam
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            p1=self.n_phase1, p2=self.n_phase2, alpha=self.learning_rate, beta=self.beta,
            q_h=self.q_h, delta_b=self.delta_b, gamma=self.gamma, eta=self.eta,
            seed=int(self.random_state), scenario=self.scenario_config or GenConfig(),
            n_bins=self.n_bins, bin_lo=self.bin_lo, bin_hi=self.bin_hi,
        )

    def fit(self, X=None, y=None):
        cfg = self.train_config()
        sampler = None
        if X is not None:
            pool = check_scenarios(X)
            sampler = lambda phase, step: pool[step % len(pool)]  # noqa: E731
        self.params_, self.report_ = train(cfg, sampler)
        self.lam_ = self.report_.final_lam
        return self

    @classmethod
    def from_checkpoint(cls, path, **kwargs) -> "FormicaEstimator":
        params = network.load(path)
        est = cls(n_bins=params.n_bins, **kwargs)
        est.params_ = params
        est.lam_ = params.lam
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        network.save(self.params_, path)

    def predict_density(self, X: Scenario) -> np.ndarray:
        check_is_fitted(self, "params_")
        scen = check_scenario(X)
        if self.params_.n_bins != self.n_bins:
            raise ValueError(f"checkpoint has {self.params_.n_bins} bins, estimator expects {self.n_bins}")
        rho, _ = network.forward(self.params_, network.featurize(scen))
        return rho


class AmfEstimator(_MeanFieldPolicy):
    """Closed-form uniform-swarm density; nothing to fit."""

    def __init__(self, beta=3.5, q_h=0.70, delta_b=1.6, n_bins=64, bin_lo=0.02, bin_hi=64.0, decode_lam=0.0):
        self.beta = beta
        self.q_h = q_h
        self.delta_b = delta_b
        self.n_bins = n_bins
        self.bin_lo = bin_lo
        self.bin_hi = bin_hi
        self.decode_lam = decode_lam

    def fit(self, X=None, y=None):
        self.grid_ = self._grid()
        return self

    def predict_density(self, X: Scenario) -> np.ndarray:
        check_is_fitted(self, "grid_")
        return amf_binned_all(check_scenario(X), self.grid_)


class ExactAllocator(BaseEstimator):
    """Branch-and-bound global optimum; ``predict`` returns the optimal allocation."""

    def __init__(self, time_limit=60.0, node_limit=10 ** 7, gap_tolerance=0.0):
        self.time_limit = time_limit
        self.node_limit = node_limit
        self.gap_tolerance = gap_tolerance

    def fit(self, X=None, y=None):
        self.config_ = ExactConfig(self.time_limit, self.node_limit, self.gap_tolerance)
        return self

    def solve(self, X: Scenario):
        check_is_fitted(self, "config_")
        return solve_exact(check_scenario(X), self.config_)

    def predict(self, X: Scenario, bids=None) -> Allocation:
        return self.solve(X).allocation

    def score(self, X, y=None) -> float:
        return float(np.mean([global_objective(s, self.predict(s)) for s in check_scenarios(X)]))


def evaluate(estimator, scenario: Scenario) -> tuple[float, float]:
    """``(objective, coverage)`` of an estimator's allocation on one scenario."""
    alloc = estimator.predict(scenario)
    return global_objective(scenario, alloc), coverage(alloc, scenario.n_tasks)

