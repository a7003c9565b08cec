"""Experiment orchestration, paired statistics and CSV artifacts."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import special

from . import network
from .allocator import AllocParams, allocate
from .amf import amf_binned_all
from .core import (
    BinGrid,
    compute_bid_matrix,
    coverage,
    dumps_scenario,
    global_objective,
    load_scenario,
    loads_scenario,
)
from .scenario import generate, preset
from .solver import ExactConfig, solve_exact

__all__ = [
    "METHODS",
    "ExperimentConfig",
    "ExperimentResult",
    "PairedStats",
    "paired_stats",
    "paired_table",
    "run_experiment",
    "summarize",
    "ratio_histograms",
    "write_csv",
    "write_experiment",
    "load_json_config",
]

logger = logging.getLogger(__name__)

METHODS = ("formica", "amf", "exact")


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "training"
    scenario_overrides: dict = field(default_factory=dict)
    methods: tuple = ("formica", "amf")
    n_scenarios: int = 100
    base_seed: int = 1000
    checkpoint: str | None = None
    beta: float = 3.5
    q_h: float = 0.70
    delta_b: float = 1.6
    decode_lam: float = 0.0
    n_bins: int = 64
    bin_lo: float = 0.02
    bin_hi: float = 64.0
    exact_time_limit: float = 60.0
    exact_node_limit: int = 10 ** 7
    scenario_dir: str | None = None
    output_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))

    def validate(self) -> None:
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be >= 1")
        if not self.methods:
            raise ValueError("need at least one method")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must not repeat")
        if ("formica" in self.methods) != (self.checkpoint is not None):
            raise ValueError("a checkpoint is required exactly when 'formica' is evaluated")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.alloc_params()
        self.gen_config()

    def gen_config(self):
        return preset(self.preset, **self.scenario_overrides)

    def alloc_params(self) -> AllocParams:
        return AllocParams(beta=self.beta, q_h=self.q_h, delta_b=self.delta_b)

    @property
    def grid(self) -> BinGrid:
        return BinGrid(self.n_bins, self.bin_lo, self.bin_hi)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown experiment config fields {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = list(self.methods)
        return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list  # one dict per scenario, deterministic fields only
    timings: list  # one dict per scenario, wall-clock per method
    failures: list  # (scenario index, method, message)

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


@dataclass(frozen=True)
class PairedStats:
    n: int
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float
    mean_ratio: float
    win_rate: float
    t: float
    p: float
    degenerate: bool = False  # zero-variance differences with a non-zero mean

    def as_row(self) -> dict:
        return asdict(self)


def _std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def paired_stats(a, b) -> PairedStats:
    """Paired t-test on ``a - b`` with a two-sided Student-t p-value.

    ``p = I_{dof/(dof+t^2)}(dof/2, 1/2)``, the regularized incomplete beta form
    of the two-sided tail.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired statistics need at least two pairs")
    d = a - b
    mean_d = float(d.mean())
    sd = _std(d)
    degenerate = False
    if sd == 0.0:
        if mean_d == 0.0:
            t, p = 0.0, 1.0
        else:
            t, p, degenerate = math.copysign(math.inf, mean_d), 0.0, True
    else:
        t = mean_d / (sd / math.sqrt(n))
        dof = n - 1
        p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = a / b
    return PairedStats(
        n=n,
        mean_a=float(a.mean()),
        std_a=_std(a),
        mean_b=float(b.mean()),
        std_b=_std(b),
        mean_ratio=float(np.mean(ratios)),
        win_rate=float(np.count_nonzero(d > 0)) / n,
        t=float(t),
        p=p,
        degenerate=degenerate,
    )


# --- per-scenario evaluation --------------------------------------------

_WORKER_PARAMS: dict = {}


def _load_params(path):
    if path not in _WORKER_PARAMS:
        _WORKER_PARAMS[path] = network.load(path)
    return _WORKER_PARAMS[path]


def _evaluate_one(job):
    index, text, cfg_dict = job
    cfg = ExperimentConfig.from_dict(cfg_dict)
    scen = loads_scenario(text)
    bm = compute_bid_matrix(scen)
    grid, params = cfg.grid, cfg.alloc_params()
    row = {"index": index, "seed": scen.seed, "n_robots": scen.n_robots, "n_tasks": scen.n_tasks}
    times = {"index": index}
    failures = []
    for method in cfg.methods:
        t0 = time.perf_counter()
        try:
            if method == "formica":
                rho, _ = network.forward(_load_params(cfg.checkpoint), network.featurize(scen))
                alloc = allocate(scen, rho, grid, params, bm, cfg.decode_lam)
            elif method == "amf":
                alloc = allocate(scen, amf_binned_all(scen, grid), grid, params, bm, cfg.decode_lam)
            else:
                res = solve_exact(scen, ExactConfig(cfg.exact_time_limit, cfg.exact_node_limit))
                alloc = res.allocation
                row.update(exact_status=res.status, exact_bound=res.bound, exact_gap=res.gap,
                           exact_nodes=res.nodes)
            row[f"{method}_objective"] = global_objective(scen, alloc)
            row[f"{method}_coverage"] = coverage(alloc, scen.n_tasks)
        except Exception as exc:  # recorded, the scenario drops out of paired stats
            failures.append((index, method, f"{type(exc).__name__}: {exc}"))
            row[f"{method}_objective"] = math.nan
            row[f"{method}_coverage"] = math.nan
        times[f"{method}_ms"] = 1e3 * (time.perf_counter() - t0)

    if "exact" in cfg.methods and row.get("exact_status") == "optimal":
        best_other = max((row[f"{m}_objective"] for m in cfg.methods if m != "exact"), default=-math.inf)
        if best_other > row["exact_objective"] * (1 + 1e-12):
            failures.append((index, "exact", f"heuristic objective {best_other} exceeds proven optimum"))
    for a, b in itertools.combinations(cfg.methods, 2):
        oa, ob = row[f"{a}_objective"], row[f"{b}_objective"]
        row[f"ratio_{a}_{b}"] = oa / ob if ob else math.nan
    return row, times, failures


def _scenario_texts(cfg: ExperimentConfig) -> list[str]:
    if cfg.scenario_dir is not None:
        paths = sorted(Path(cfg.scenario_dir).glob("*.json"))[: cfg.n_scenarios]
        if not paths:
            raise ValueError(f"no scenario files in {cfg.scenario_dir}")
        return [dumps_scenario(load_scenario(p)) for p in paths]
    gen = cfg.gen_config()
    return [dumps_scenario(generate(replace(gen, seed=cfg.base_seed + k))) for k in range(cfg.n_scenarios)]


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Evaluate every method on the same serialized scenarios.

    Rows come back in scenario order whatever the worker count.
    """
    cfg.validate()
    texts = _scenario_texts(cfg)
    if cfg.output_dir is not None:
        sdir = Path(cfg.output_dir) / "scenarios"
        sdir.mkdir(parents=True, exist_ok=True)
        for k, text in enumerate(texts):
            (sdir / f"scenario_{k:05d}.json").write_text(text)
    jobs = [(k, text, cfg.to_dict()) for k, text in enumerate(texts)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_evaluate_one, jobs))
    else:
        results = [_evaluate_one(job) for job in jobs]
    records, timings, failures = [], [], []
    for row, times, fails in results:
        records.append(row)
        timings.append(times)
        failures.extend(fails)
    for index, method, msg in failures:
        logger.warning("scenario %d, method %s failed: %s", index, method, msg)
    return ExperimentResult(cfg, records, timings, failures)


# --- summaries -----------------------------------------------------------

def _clean_pairs(records, a, b):
    pairs = [(r[f"{a}_objective"], r[f"{b}_objective"]) for r in records]
    pairs = [(x, y) for x, y in pairs if np.isfinite(x) and np.isfinite(y)]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def summarize(records, methods) -> list[dict]:
    """Per-method means and spreads, then one row per ordered method pair."""
    if not records:
        raise ValueError("no records to summarize")
    rows = []
    for m in methods:
        obj = np.array([r[f"{m}_objective"] for r in records], dtype=np.float64)
        cov = np.array([r[f"{m}_coverage"] for r in records], dtype=np.float64)
        ok = np.isfinite(obj)
        rows.append({
            "kind": "method", "name": m, "n": int(ok.sum()),
            "objective_mean": float(obj[ok].mean()) if ok.any() else math.nan,
            "objective_std": _std(obj[ok]),
            "coverage_mean": float(cov[ok].mean()) if ok.any() else math.nan,
            "coverage_std": _std(cov[ok]),
        })
    for a, b in itertools.combinations(methods, 2):
        ratios = np.array([r[f"ratio_{a}_{b}"] for r in records], dtype=np.float64)
        ratios = ratios[np.isfinite(ratios)]
        rows.append({
            "kind": "ratio", "name": f"{a}/{b}", "n": int(ratios.size),
            "objective_mean": float(ratios.mean()) if ratios.size else math.nan,
            "objective_std": _std(ratios),
            "coverage_mean": math.nan, "coverage_std": math.nan,
        })
    return rows


def ratio_histograms(records, methods, bins: int = 20) -> list[dict]:
    rows = []
    for a, b in itertools.combinations(methods, 2):
        ratios = np.array([r[f"ratio_{a}_{b}"] for r in records], dtype=np.float64)
        ratios = ratios[np.isfinite(ratios)]
        if ratios.size == 0:
            continue
        counts, edges = np.histogram(ratios, bins=bins)
        for k, c in enumerate(counts):
            rows.append({"pair": f"{a}/{b}", "bin": k, "lo": float(edges[k]), "hi": float(edges[k + 1]),
                         "count": int(c)})
    return rows


def paired_table(records, methods) -> list[dict]:
    rows = []
    for a, b in itertools.combinations(methods, 2):
        xa, xb = _clean_pairs(records, a, b)
        if xa.size >= 2:
            rows.append({"a": a, "b": b, **paired_stats(xa, xb).as_row()})
    return rows


# --- output --------------------------------------------------------------

def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path, rows, columns=None) -> None:
    rows = list(rows)
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})


def write_experiment(result: ExperimentResult, out_dir, compare: bool = False) -> list[Path]:
    """Write records, summary and timings; with ``compare`` also paired stats and ratio histograms."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = result.config.methods
    written = []

    def emit(name, rows):
        path = out / name
        write_csv(path, rows)
        written.append(path)

    emit("records.csv", result.records)
    emit("summary.csv", summarize(result.records, methods))
    emit("timings.csv", result.timings)
    if result.failures:
        emit("failures.csv", [{"index": i, "method": m, "error": e} for i, m, e in result.failures])
    if compare:
        emit("paired_stats.csv", paired_table(result.records, methods))
        emit("ratio_histogram.csv", ratio_histograms(result.records, methods))
    return written


def load_json_config(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data

