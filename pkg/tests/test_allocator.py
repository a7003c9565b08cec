import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from formica import network
from formica.allocator import (
    AllocParams,
    allocate,
    coverage_prob,
    decode_all,
    estimate_h,
    hard_decode,
    mean_field_inputs,
    resolve,
    soft_knapsack,
    soft_quantile,
    soft_quantile_vjp,
    tail_mass,
    tar_grad_wrt_h,
    tar_loss,
)
from formica.core import BidMatrix, BinGrid, compute_bid_matrix, global_objective
from formica.scenario import generate, make_rng, preset

from conftest import make_scenario
from gradcheck import central_difference, probe_params, rel_error

G = BinGrid()
positive_density = arrays(np.float64, 64, elements=st.floats(1e-3, 1.0)).map(lambda a: a / a.sum())


def random_density(rng, B=64, sparsity=0.0):
    rho = rng.random(B) * (rng.random(B) >= sparsity)
    rho[rng.integers(B)] += 0.1
    return rho / rho.sum()


class TestParams:
    @pytest.mark.parametrize("kw", [dict(beta=0), dict(q_h=1.0), dict(q_h=0.0), dict(delta_b=-1), dict(lam=-0.1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AllocParams(**kw)

    def test_defaults(self):
        p = AllocParams()
        assert (p.beta, p.q_h, p.delta_b, p.lam) == (3.5, 0.70, 1.6, 0.0)


class TestSoftQuantile:
    def test_point_mass(self):
        rho = np.zeros(64)
        rho[17] = 1.0
        for q in (0.01, 0.5, 0.99):
            assert soft_quantile(rho, G, q) == G.centers[17]

    def test_uniform_median(self):
        val = soft_quantile(np.full(64, 1 / 64), G, 0.5)
        assert G.centers[31] < val < G.centers[32]
        # knots at (k + 1/2)/64: level 0.5 sits halfway between knots 31 and 32
        assert val == pytest.approx(0.5 * (G.centers[31] + G.centers[32]), rel=1e-12)

    def test_upper_limit(self):
        rho = np.zeros(64)
        rho[[3, 20, 40]] = [0.5, 0.3, 0.2]
        assert soft_quantile(rho, G, 0.999) == G.centers[40]

    @settings(max_examples=50)
    @given(positive_density, st.floats(0.01, 0.99))
    def test_matches_interp_oracle(self, rho, q):
        knots = np.cumsum(rho) - rho / 2
        assert soft_quantile(rho, G, q) == pytest.approx(np.interp(q, knots, G.centers), rel=1e-12)

    def test_batched(self):
        rng = make_rng(0)
        rho = np.stack([random_density(rng, sparsity=0.5) for _ in range(10)])
        out = soft_quantile(rho, G, 0.7)
        np.testing.assert_allclose(out, [soft_quantile(r, G, 0.7) for r in rho], rtol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_vjp_finite_difference(self, seed):
        rng = make_rng(seed)
        rho = np.stack([random_density(rng, sparsity=0.3) for _ in range(4)])
        cot = rng.standard_normal(4)
        grad = soft_quantile_vjp(rho, G, 0.7, cot)
        idx = rng.choice(rho.size, 20, replace=False)
        # the quantile is evaluated on the raw masses, so perturbations need no renormalization
        num = central_difference(lambda r: float(np.dot(cot, soft_quantile(r, G, 0.7))), rho, idx, 1e-7)
        occupied = rho.flat[idx] > 0
        assert rel_error(grad.flat[idx][occupied], num[occupied]).max() < 1e-4


class TestEstimateH:
    def test_no_temper(self):
        rng = make_rng(1)
        rho = random_density(rng)
        assert estimate_h(rho, G, 0.7, 0.0) == soft_quantile(rho, G, 0.7)

    def test_subtraction_and_floor(self):
        # single-bin grids on [0.02, hi] put the only center at sqrt(0.02 * hi)
        assert estimate_h(np.ones(1), BinGrid(1, 0.02, 200.0), 0.7, 1.6) == pytest.approx(0.4)
        assert estimate_h(np.ones(1), BinGrid(1, 0.02, 50.0), 0.7, 1.6) == 0.02


class TestCoverage:
    def test_above_hi(self):
        rho = random_density(make_rng(2))
        assert coverage_prob(rho[None], G, [100.0], 16) == 1.0

    def test_hand_value(self):
        rho = np.zeros(64)
        rho[10], rho[30] = 0.9, 0.1
        p = tail_mass(rho[None], G, [G.edges[30]])
        assert p[0] == pytest.approx(0.1)
        assert coverage_prob(rho[None], G, [G.edges[30]], 17) == pytest.approx(math.exp(-1.6))
        assert math.exp(-1.6) == pytest.approx(0.2019, abs=5e-5)

    def test_single_robot(self):
        rho = random_density(make_rng(3))
        assert coverage_prob(rho[None], G, [0.5], 1) == 1.0

    def test_linear_within_bin(self):
        rho = np.zeros(64)
        rho[20] = 1.0
        mid = 0.5 * (G.edges[20] + G.edges[21])
        assert tail_mass(rho[None], G, [mid])[0] == pytest.approx(0.5)
        assert tail_mass(rho[None], G, [1e-9])[0] == 1.0

    @settings(max_examples=50)
    @given(positive_density, st.floats(1e-3, 100), st.floats(1e-3, 100), st.integers(1, 50), st.integers(1, 50))
    def test_monotone(self, rho, b1, b2, n1, n2):
        b1, b2 = sorted((b1, b2))
        n1, n2 = sorted((n1, n2))
        assert coverage_prob(rho[None], G, [b1], n1) <= coverage_prob(rho[None], G, [b2], n1)
        assert coverage_prob(rho[None], G, [b1], n2) <= coverage_prob(rho[None], G, [b1], n1)

    def test_matrix_bids(self):
        rng = make_rng(4)
        rho = np.stack([random_density(rng) for _ in range(3)])
        bids = rng.uniform(0.01, 80, size=(5, 3))
        full = coverage_prob(rho, G, bids, 9)
        for i in range(5):
            np.testing.assert_allclose(full[i], coverage_prob(rho, G, bids[i], 9), rtol=1e-15)


class TestSoftKnapsack:
    def test_symmetric(self):
        s = soft_knapsack([2.0, 2.0], [1.0, 1.0], AllocParams(), 0.5, 10.0)
        assert s.x[0] == s.x[1]

    def test_concentrates(self):
        s = soft_knapsack([5.0, 2.0, 1.0], [0.0, 0.0, 0.0], AllocParams(beta=200.0), 0.5, 10.0)
        assert s.x[0] * 5.0 / 5.0 == pytest.approx(1.0, rel=1e-9)
        assert s.x[1] < 1e-100

    def test_single_task(self):
        s = soft_knapsack([2.0], [0.3], AllocParams(), 0.5, 2.0)
        assert s.x[0] == pytest.approx(0.5)
        assert s.normalized_capacity == 1.0
        assert s.fraction[0] == 1.0

    def test_zero_bids(self):
        with pytest.raises(ValueError):
            soft_knapsack([0.0, 0.0], [0.0, 0.0], AllocParams(), 0.5, 1.0)

    @settings(max_examples=50)
    @given(arrays(np.float64, 8, elements=st.floats(0.05, 40)), arrays(np.float64, 8, elements=st.floats(0, 30)),
           st.floats(0.5, 8), st.floats(0, 0.9), st.floats(-5, 5))
    def test_capacity_identity_and_shift(self, b, h, beta, lam, shift):
        p = AllocParams(beta=beta, lam=lam)
        s = soft_knapsack(b, h, p, 0.5, 61.2)
        assert np.all(s.x >= 0)
        assert np.dot(b, s.x) == pytest.approx(0.5 * 61.2, rel=1e-9)
        assert np.all((s.fraction >= 0) & (s.fraction <= 1))
        shifted = soft_knapsack(b, h + shift, p, 0.5, 61.2)
        np.testing.assert_allclose(shifted.x, s.x, rtol=1e-9, atol=1e-300)

    @settings(max_examples=50)
    @given(arrays(np.float64, 6, elements=st.floats(0.5, 10)), arrays(np.float64, 6, elements=st.floats(0, 5)),
           st.integers(0, 5), st.floats(0.01, 1.0))
    def test_monotone_in_h(self, b, h, j, dh):
        p = AllocParams(beta=1.0)
        s0 = soft_knapsack(b, h, p, 0.5, 10.0)
        h1 = h.copy()
        h1[j] += dh
        s1 = soft_knapsack(b, h1, p, 0.5, 10.0)
        assume(s0.x[j] > 1e-200)
        assert s1.x[j] < s0.x[j]
        others = np.arange(6) != j
        assert np.all(s1.x[others] >= s0.x[others] * (1 - 1e-12))


class TestTar:
    def test_values(self):
        assert tar_loss([10.0], [0.3], [0.5]) == pytest.approx(3.5)
        assert tar_loss([1.0, 2.0], [0.2, 0.4], [0.0, 0.0]) == 0.0
        assert tar_loss([1.0, 2.0], [1.0, 1.0], [0.3, 0.9]) == 0.0

    @given(arrays(np.float64, 5, elements=st.floats(0.1, 30)), arrays(np.float64, 5, elements=st.floats(0, 1)),
           arrays(np.float64, 5, elements=st.floats(0, 1)), st.integers(0, 4), st.floats(0.0, 1.0))
    def test_decreases_with_q(self, r, f, q, j, frac):
        q2 = q.copy()
        q2[j] *= frac
        assert tar_loss(r, f, q2) <= tar_loss(r, f, q) + 1e-12

    def _case(self, seed, T=10):
        rng = make_rng(seed)
        # narrow ranges keep the softmax spread, so every gradient entry is well above round-off
        b = rng.uniform(0.5, 2, T)
        h = rng.uniform(0, 1, T)
        q = rng.uniform(0, 1, T)
        r = rng.uniform(6, 24, T)
        return b, h, q, r

    def test_zero_q(self):
        b, h, _, r = self._case(0)
        p = AllocParams()
        s = soft_knapsack(b, h, p, 0.5, 2.0)
        assert not np.any(tar_grad_wrt_h(r, s, np.zeros(10), b, p))

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_difference_on_h(self, seed):
        b, h, q, r = self._case(seed)
        p = AllocParams()
        cap, ell = 0.5, 2.0

        def loss(hh):
            return tar_loss(r, soft_knapsack(b, hh, p, cap, ell).fraction, q)

        s = soft_knapsack(b, h, p, cap, ell)
        # keep away from the clamp at x/C = 1, where the loss has a kink
        assume_ok = np.all(np.abs(s.x / cap - 1.0) > 1e-4)
        assert assume_ok
        grad = tar_grad_wrt_h(r, s, q, b, p)
        num = central_difference(loss, h, range(10), 1e-6)
        assert rel_error(grad, num).max() < 1e-4

    def test_magnitude_peaks_at_half(self):
        # task 0 carries all the weight and has raw bid 1, so its share of capacity equals x/C
        ell, cap = 10.0, 0.5
        b = np.array([ell, 3.0])
        r, q = np.array([12.0, 12.0]), np.array([0.8, 0.0])
        p = AllocParams()
        fracs, mags = [], []
        for h0 in np.linspace(-10, 20, 3001):
            s = soft_knapsack(b, np.array([h0, 0.0]), p, cap, ell)
            fracs.append(s.x[0] / cap)
            mags.append(abs(tar_grad_wrt_h(r, s, q, b, p)[0]))
        fracs, mags = np.array(fracs), np.array(mags)
        assert fracs.min() < 0.05 and fracs.max() > 0.95
        assert fracs[np.argmax(mags)] == pytest.approx(0.5, abs=0.01)
        np.testing.assert_allclose(mags, p.beta * 12 * 0.8 * fracs * (1 - fracs), rtol=1e-9, atol=1e-12)


def chain_case(seed):
    from test_network import perturbed

    scen = generate(preset("training", seed=seed, reward_lo=0.5, reward_hi=2.0))
    p = perturbed(seed)
    return scen, p


def chain_errors(seed, n_probes=25):
    """Full density -> threshold -> soft allocation -> loss chain, coverage frozen."""
    scen, params = chain_case(seed)
    ap = AllocParams(delta_b=0.1)
    bm = compute_bid_matrix(scen)
    k = seed % scen.n_robots
    feats = network.featurize(scen)
    rho, trace = network.forward(params, feats)
    q = coverage_prob(rho, G, bm.normalized[k], scen.n_robots)

    def loss(pp):
        r, _ = network.forward(pp, feats)
        s = soft_knapsack(bm.normalized[k], estimate_h(r, G, ap.q_h, ap.delta_b), ap, scen.capacity[k], bm.length)
        return tar_loss(scen.rewards, s.fraction, q)

    h = estimate_h(rho, G, ap.q_h, ap.delta_b)
    assert np.all(h > G.lo)
    s = soft_knapsack(bm.normalized[k], h, ap, scen.capacity[k], bm.length)
    dh = tar_grad_wrt_h(scen.rewards, s, q, bm.normalized[k], ap)
    grad = network.backward_vjp(params, trace, soft_quantile_vjp(rho, G, ap.q_h, dh)).flat()
    err, analytic, _ = probe_params(params, loss, grad, n_probes, make_rng(seed, 11))
    return err, analytic


@pytest.mark.parametrize("seed", [1, 3])
def test_end_to_end_chain_gradient(seed):
    err, analytic = chain_errors(seed)
    assert np.median(np.abs(analytic)) > 1e-6
    assert err.max() < 1e-3


class TestHardDecode:
    def test_no_positive_margin(self):
        assert hard_decode([0.1, 0.2], [1.0, 2.0], [1.0, 3.0], 0.5).size == 0

    def test_one_task(self):
        np.testing.assert_array_equal(hard_decode([0.2, 0.1], [2.0, 1.0], [1.0, 5.0], 0.5), [0])

    def test_tie_first_index(self):
        np.testing.assert_array_equal(hard_decode([0.3, 0.3], [3.0, 3.0], [0.0, 0.0], 0.5), [0])

    def test_skips_unaffordable(self):
        sel = hard_decode([0.6, 0.2, 0.25], [6.0, 2.0, 2.5], [0.0, 1.0, 1.5], 0.5)
        np.testing.assert_array_equal(sel, [1, 2])

    @settings(max_examples=100)
    @given(arrays(np.float64, 12, elements=st.floats(0.01, 1.0)), arrays(np.float64, 12, elements=st.floats(0, 40)),
           st.floats(0.1, 10), st.floats(0.1, 2.0))
    def test_capacity_and_scale_invariance(self, raw, h, scale, cap):
        norm = raw * 61.2
        ratio = np.sort((norm - h) / norm)
        assume(np.all(np.diff(ratio) > 1e-9) and np.all(np.abs(ratio) > 1e-9))  # rounding would break exact ties
        sel = hard_decode(raw, norm, h, cap)
        assert raw[sel].sum() <= cap
        # h' = b' - scale * (b' - h) multiplies every margin by the same positive factor
        np.testing.assert_array_equal(hard_decode(raw, norm, norm - scale * (norm - h), cap), sel)

    def test_lambda_charges_margin(self):
        assert hard_decode([0.1], [1.0], [0.5], 0.5, lam=0.6).size == 0
        assert hard_decode([0.1], [1.0], [0.5], 0.5, lam=0.4).size == 1


class TestResolve:
    def _bids(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        return BidMatrix(raw, 1.0, raw)

    def test_disjoint(self):
        scen = make_scenario([[0, 0], [1, 1]], [[1, 1], [2, 2]], [1.0, 1.0])
        a = resolve(scen, [[0], [1]], self._bids([[0.2, 0.1], [0.1, 0.3]]))
        np.testing.assert_array_equal(a.winner, [0, 1])
        np.testing.assert_allclose(a.credited, [0.2, 0.3])

    def test_max_bid_wins(self):
        scen = make_scenario([[0, 0], [1, 1]], [[1, 1]], [1.0])
        a = resolve(scen, [[0], [0]], self._bids([[1.0], [3.0]]))
        assert a.winner[0] == 1 and a.credited[0] == 3.0

    def test_tie_lowest_index(self):
        scen = make_scenario([[0, 0], [1, 1], [2, 2]], [[1, 1]], [1.0])
        a = resolve(scen, [[], [0], [0]], self._bids([[2.0], [2.0], [2.0]]))
        assert a.winner[0] == 1

    def test_no_claims(self):
        scen = make_scenario([[0, 0]], [[1, 1]], [1.0])
        a = resolve(scen, [[]])
        assert a.winner[0] == -1
        assert global_objective(scen, a) == 0.0


class TestAllocate:
    def test_capacity_respected(self, training_scenario):
        rho = np.full((64, 64), 1 / 64)
        a = allocate(training_scenario, rho, G, AllocParams())
        raw = compute_bid_matrix(training_scenario).raw
        for i, sel in enumerate(a.selections):
            assert raw[i, sel].sum() <= training_scenario.capacity[i]

    def test_shared_thresholds(self, training_scenario):
        rho = np.full((64, 64), 1 / 64)
        h, q = mean_field_inputs(training_scenario, rho, G, AllocParams())
        assert q.shape == (16, 64)
        sel = decode_all(training_scenario, h)
        a = allocate(training_scenario, rho, G, AllocParams())
        for s1, s2 in zip(sel, a.selections):
            np.testing.assert_array_equal(s1, s2)

    def test_unnormalized_density_shape_only_for_h(self, training_scenario):
        rho = np.random.default_rng(0).random((64, 64))
        rho /= rho.sum(axis=1, keepdims=True)
        h1, q1 = mean_field_inputs(training_scenario, rho, G, AllocParams())
        h2, q2 = mean_field_inputs(training_scenario, 1.7 * rho, G, AllocParams())
        np.testing.assert_allclose(h1, h2, rtol=1e-12)
        assert np.all(q2 <= q1)
