"""Mean-field allocation: thresholds, coverage, soft knapsack, TAR loss, hard decode.

Units: thresholds ``h``, margins, ``beta``, ``delta_b`` and ``lam`` act on
normalized bids.  Soft operations use the normalized capacity ``C * ell``;
the hard decoder checks capacity on raw bids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Allocation, BinGrid, Scenario, compute_bid_matrix

__all__ = [
    "AllocParams",
    "SoftAllocation",
    "soft_quantile",
    "soft_quantile_vjp",
    "estimate_h",
    "coverage_prob",
    "tail_mass",
    "soft_knapsack",
    "tar_loss",
    "tar_grad_wrt_h",
    "hard_decode",
    "decode_all",
    "resolve",
    "mean_field_inputs",
    "allocate",
]

# bins with less mass than this are treated as empty by the soft quantile
_OCCUPIED = 1e-300


@dataclass(frozen=True)
class AllocParams:
    beta: float = 3.5
    q_h: float = 0.70
    delta_b: float = 1.6
    lam: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < self.q_h < 1:
            raise ValueError("q_h must lie in (0, 1)")
        if self.delta_b < 0:
            raise ValueError("delta_b must be non-negative")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


@dataclass(frozen=True)
class SoftAllocation:
    x: np.ndarray  # pre-clamp soft allocation, sum(b' * x) == capacity'
    fraction: np.ndarray  # clip(x / C, 0, 1), the selection probabilities
    capacity: float  # raw capacity C
    normalized_capacity: float  # C * ell


# --- soft quantile -------------------------------------------------------

def _quantile_brackets(rho, q):
    """Bracketing occupied bins around ``q`` on the mid-bin CDF knots.

    Knot ``k`` sits at cumulative mass ``sum(rho[:k]) + rho[k]/2`` and value
    ``centers[k]``; only bins holding mass carry a knot.
    """
    rho = np.atleast_2d(rho)
    occ = rho > _OCCUPIED
    knots = np.cumsum(rho, axis=1) - 0.5 * rho
    B = rho.shape[1]
    below = occ & (knots <= q)
    above = occ & (knots > q)
    has_below = below.any(axis=1)
    has_above = above.any(axis=1)
    a = np.where(has_below, B - 1 - np.argmax(below[:, ::-1], axis=1), -1)
    b = np.where(has_above, np.argmax(above, axis=1), -1)
    return knots, a, b, has_below, has_above


def soft_quantile(rho, grid: BinGrid, q: float):
    """Piecewise-linear inverse CDF at level ``q`` over bin centers.

    Accepts one density ``(B,)`` or a stack ``(T, B)``; each row must sum to 1.
    Levels outside the first/last knot clamp to that knot's center.
    """
    rho = np.asarray(rho, dtype=np.float64)
    single = rho.ndim == 1
    knots, a, b, has_below, has_above = _quantile_brackets(rho, q)
    c = grid.centers
    rows = np.arange(knots.shape[0])
    out = np.empty(knots.shape[0])
    inner = has_below & has_above
    ai, bi = a[inner], b[inner]
    ka, kb = knots[rows[inner], ai], knots[rows[inner], bi]
    t = (q - ka) / (kb - ka)
    out[inner] = c[ai] + t * (c[bi] - c[ai])
    out[~has_below] = c[b[~has_below]]
    only_below = has_below & ~has_above
    out[only_below] = c[a[only_below]]
    return float(out[0]) if single else out


def soft_quantile_vjp(rho, grid: BinGrid, q: float, cotangent) -> np.ndarray:
    """Pull a per-row cotangent on the quantile back onto the bin masses.

    Derivative is zero in the clamped regions and one-sided at knots.
    """
    rho = np.atleast_2d(np.asarray(rho, dtype=np.float64))
    cot = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    knots, a, b, has_below, has_above = _quantile_brackets(rho, q)
    T, B = rho.shape
    grad = np.zeros((T, B))
    c = grid.centers
    for j in np.flatnonzero(has_below & has_above):
        ai, bi = a[j], b[j]
        gap = knots[j, bi] - knots[j, ai]
        t = (q - knots[j, ai]) / gap
        scale = -cot[j] * (c[bi] - c[ai]) / gap
        # d knot_k / d rho_i = 1 for i < k, 1/2 for i == k
        dka = np.zeros(B)
        dka[:ai] = 1.0
        dka[ai] = 0.5
        dkb = np.zeros(B)
        dkb[:bi] = 1.0
        dkb[bi] = 0.5
        grad[j] = scale * ((1.0 - t) * dka + t * dkb)
    return grad


def estimate_h(rho, grid: BinGrid, q_h: float, delta_b: float):
    """Estimated highest competing normalized bid: tempered quantile, floored at ``grid.lo``."""
    value = np.asarray(soft_quantile(rho, grid, q_h)) - delta_b
    out = np.maximum(value, grid.lo)
    return float(out) if out.ndim == 0 else out


# --- coverage ------------------------------------------------------------

def tail_mass(rho, grid: BinGrid, bids) -> np.ndarray:
    """Mass strictly above each normalized bid, linear within the containing bin.

    ``rho`` is ``(T, B)``; ``bids`` is ``(T,)`` or ``(N, T)``.
    """
    rho = np.atleast_2d(np.asarray(rho, dtype=np.float64))
    bids = np.asarray(bids, dtype=np.float64)
    e = grid.edges
    # above[j, k] = mass of bins k+1 .. B-1
    above = np.cumsum(rho[:, ::-1], axis=1)[:, ::-1] - rho
    k = grid.bin_index(bids)
    tasks = np.arange(rho.shape[0])
    frac = np.clip((e[k + 1] - bids) / (e[k + 1] - e[k]), 0.0, 1.0)
    p = above[tasks, k] + rho[tasks, k] * frac
    total = rho.sum(axis=1)
    p = np.where(bids < grid.lo, np.broadcast_to(total, p.shape), p)
    return np.where(bids >= grid.hi, 0.0, p)


def coverage_prob(rho, grid: BinGrid, bids, n_robots: int):
    """Probability that none of the other ``N - 1`` robots outbids ``bids``."""
    if n_robots < 1:
        raise ValueError("n_robots must be >= 1")
    p = tail_mass(rho, grid, bids)
    out = np.exp(-(n_robots - 1) * p)
    return float(out) if out.ndim == 0 else out


# --- soft knapsack and TAR -----------------------------------------------

def soft_knapsack(bids_norm, h, params: AllocParams, capacity: float, length: float) -> SoftAllocation:
    """Softmax over margins ``beta (b' - h - lam b')``, rescaled so ``sum(b' x) = C * ell``."""
    bids_norm = np.asarray(bids_norm, dtype=np.float64)
    if not np.any(bids_norm != 0):
        raise ValueError("soft knapsack needs at least one non-zero bid")
    cap_norm = capacity * length
    z = params.beta * (bids_norm - np.asarray(h) - params.lam * bids_norm)
    s = np.exp(z - z.max())
    s /= s.sum()
    x = s * (cap_norm / np.dot(bids_norm, s))
    frac = np.clip(x / capacity, 0.0, 1.0)
    return SoftAllocation(x=x, fraction=frac, capacity=float(capacity), normalized_capacity=float(cap_norm))


def tar_loss(rewards, fraction, q) -> float:
    """Expected reward left on the table: ``sum R (1 - x/C) q`` with clamped ``x/C``."""
    return float(np.sum(np.asarray(rewards) * (1.0 - np.asarray(fraction)) * np.asarray(q)))


def tar_grad_wrt_h(rewards, soft: SoftAllocation, q, bids_norm, params: AllocParams) -> np.ndarray:
    """Exact d tar_loss / d h with ``q`` held fixed.

    Includes the coupling through the capacity rescale; entries whose
    fraction is clamped at 1 pass no gradient.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    bids_norm = np.asarray(bids_norm, dtype=np.float64)
    x = soft.x
    active = (x / soft.capacity) < 1.0
    g = np.where(active, -rewards * np.asarray(q) / soft.capacity, 0.0)  # dL/dx
    gx = np.dot(g, x)
    dz = x * (g - bids_norm * gx / soft.normalized_capacity)
    return -params.beta * dz


# --- hard decode and conflict resolution ---------------------------------

def hard_decode(bids_raw, bids_norm, h, capacity: float, lam: float = 0.0) -> np.ndarray:
    """Greedy knapsack on positive margins, best margin-per-bid first.

    Margins are ``b' - h - lam * b'``; capacity is checked on raw bids.
    Returns selected task indices in the order they were taken.
    """
    bids_raw = np.asarray(bids_raw, dtype=np.float64)
    bids_norm = np.asarray(bids_norm, dtype=np.float64)
    margins = bids_norm - np.asarray(h, dtype=np.float64) - lam * bids_norm
    cand = np.flatnonzero(margins > 0)
    if cand.size == 0:
        return cand
    ratio = margins[cand] / bids_norm[cand]
    order = cand[np.argsort(-ratio, kind="stable")]
    picked = []
    used = 0.0
    for j in order:
        if used + bids_raw[j] <= capacity:
            picked.append(j)
            used += bids_raw[j]
    return np.array(picked, dtype=np.intp)


def decode_all(scenario: Scenario, h, bids=None, lam: float = 0.0) -> list[np.ndarray]:
    """Hard-decode every robot against shared per-task thresholds ``h`` (T,) or (N, T)."""
    bm = compute_bid_matrix(scenario) if bids is None else bids
    h = np.asarray(h, dtype=np.float64)
    h_rows = np.broadcast_to(h, bm.raw.shape)
    return [
        hard_decode(bm.raw[i], bm.normalized[i], h_rows[i], scenario.capacity[i], lam)
        for i in range(scenario.n_robots)
    ]


def resolve(scenario: Scenario, selections, bids=None) -> Allocation:
    """Max-bid claimant wins each task; ties go to the lowest robot index."""
    raw = (compute_bid_matrix(scenario) if bids is None else bids).raw
    N, T = raw.shape
    claimed = np.zeros((N, T), dtype=bool)
    for i, sel in enumerate(selections):
        claimed[i, np.asarray(sel, dtype=np.intp)] = True
    masked = np.where(claimed, raw, -np.inf)
    best = np.argmax(masked, axis=0) if N else np.zeros(T, dtype=np.intp)
    covered = claimed.any(axis=0)
    winner = np.where(covered, best, -1)
    credited = np.where(covered, masked[best, np.arange(T)], 0.0)
    return Allocation(selections=[np.asarray(s, dtype=np.intp) for s in selections], winner=winner, credited=credited)


# --- shared mean-field path ---------------------------------------------

def mean_field_inputs(scenario: Scenario, densities, grid: BinGrid, params: AllocParams, bids=None):
    """Thresholds ``h`` (T,) and coverage ``q`` (N, T) from per-task densities.

    Densities need not sum to one: the quantile uses the normalized shape,
    the coverage probability the raw mass.
    """
    densities = np.asarray(densities, dtype=np.float64)
    totals = densities.sum(axis=1, keepdims=True)
    shape = np.divide(densities, totals, out=np.zeros_like(densities), where=totals > 0)
    h = estimate_h(shape, grid, params.q_h, params.delta_b)
    bm = compute_bid_matrix(scenario) if bids is None else bids
    q = coverage_prob(densities, grid, bm.normalized, scenario.n_robots)
    return np.atleast_1d(h), np.atleast_2d(q)


def allocate(scenario: Scenario, densities, grid: BinGrid, params: AllocParams, bids=None,
             decode_lam: float = 0.0) -> Allocation:
    """Full decentralized allocation: thresholds from densities, hard decode, resolve.

    ``params.lam`` (the training dual) is not used by the decoder; pass
    ``decode_lam`` to charge an opportunity cost at deployment.
    """
    bm = compute_bid_matrix(scenario) if bids is None else bids
    h, _ = mean_field_inputs(scenario, densities, grid, params, bm)
    return resolve(scenario, decode_all(scenario, h, bm, decode_lam), bm)
