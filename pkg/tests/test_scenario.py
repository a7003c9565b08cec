from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from formica.core import dumps_scenario
from formica.scenario import GenConfig, generate, generate_batch, make_rng, preset


def test_training_preset():
    c = preset("training")
    assert (c.n_robots, c.n_tasks, c.width, c.height) == (16, 64, 300.0, 200.0)
    assert (c.distribution, c.n_clusters, c.cluster_sigma_factor) == ("clustered", 6, 0.15)
    assert (c.reward_lo, c.reward_hi, c.capacity, c.epsilon) == (6.0, 24.0, 0.5, 0.5)


def test_large_preset():
    c = preset("large")
    assert (c.n_robots, c.n_tasks, c.width, c.height) == (256, 4096, 3000.0, 2000.0)
    assert c.distribution == "clustered"


def test_small_preset_density_matches_training():
    small, train = preset("small"), preset("training")
    assert (small.n_robots, small.n_tasks) == (4, 12)
    assert small.width * small.height / small.n_robots == train.width * train.height / train.n_robots


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset("nope")


def test_deterministic():
    c = preset("training", seed=11)
    assert dumps_scenario(generate(c)) == dumps_scenario(generate(c))


def test_pinned_generator():
    # guards against a silent change of the underlying bit generator
    assert type(make_rng(0).bit_generator).__name__ == "PCG64"
    first = generate(preset("small", seed=0))
    assert first.rewards[0] == generate(preset("small", seed=0)).rewards[0]


@pytest.mark.parametrize("kw", [
    dict(n_tasks=16),
    dict(reward_lo=24.0, reward_hi=6.0),
    dict(n_clusters=0),
    dict(distribution="ring"),
    dict(epsilon=0.0),
])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        generate(replace(GenConfig(), **kw))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32), st.sampled_from(["uniform", "clustered"]))
def test_bounds(seed, dist):
    c = preset("training", seed=seed, distribution=dist)
    s = generate(c)
    for pos in (s.robot_pos, s.task_pos):
        assert np.all(pos >= 0) and np.all(pos[:, 0] <= c.width) and np.all(pos[:, 1] <= c.height)
    assert np.all((s.rewards >= c.reward_lo) & (s.rewards <= c.reward_hi))
    assert s.n_robots == 16 and s.n_tasks == 64


def test_uniform_quadrants():
    n = 100_000
    s = generate(GenConfig(n_robots=1, n_tasks=n, distribution="uniform", seed=5))
    x = s.task_pos[:, 0] < 150
    y = s.task_pos[:, 1] < 100
    counts = np.array([np.sum(x & y), np.sum(x & ~y), np.sum(~x & y), np.sum(~x & ~y)])
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) < 3 * sigma)


def test_clusters_are_tighter_than_uniform():
    c = generate(preset("training", seed=2, n_tasks=2000))
    u = generate(preset("training", seed=2, n_tasks=2000, distribution="uniform"))

    def nn_dist(p):
        d = np.hypot(*(p[:, None, :] - p[None, :, :]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        return d.min(axis=1).mean()

    assert nn_dist(c.task_pos) < nn_dist(u.task_pos)


def test_batch_seeds():
    batch = generate_batch(preset("small"), 100, 1000)
    assert [s.seed for s in batch] == list(range(1000, 1100))
    single = generate_batch(preset("small"), 1, 42)
    assert single == [generate(preset("small", seed=42))]
    with pytest.raises(ValueError):
        generate_batch(preset("small"), 0, 0)


def test_disjoint_ranges_differ():
    a = {dumps_scenario(s).split("\n", 2)[2] for s in generate_batch(preset("small"), 20, 0)}
    b = {dumps_scenario(s).split("\n", 2)[2] for s in generate_batch(preset("small"), 20, 20)}
    assert not a & b
