"""Cournot benchmark generator, demand oracle, and probe utilities."""

import numpy as np
import pytest

from gnes.blockvec import AgentPartition
from gnes.cournot import (
    DEFAULT_PARTICIPATION,
    CournotConfig,
    CournotDemandOracle,
    estimate_lipschitz,
    generate,
    monotonicity_probe,
)
from gnes.errors import ConfigurationError
from gnes.instances import load_document
from gnes.stochastic import AgentStreams, PHASE_XI


def two_firm_config(**overrides):
    """One shared market, deterministic costs/caps/budget."""
    base = dict(
        num_firms=2,
        num_markets=1,
        participation=((0,), (0,)),
        cost_sd=0.0,
        cap_sd=0.0,
        budget_lo=5.0,
        budget_hi=5.0,
        lipschitz_pairs=50,
        seed=0,
    )
    base.update(overrides)
    return CournotConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        CournotConfig(demand_exponent=1.0)
    with pytest.raises(ConfigurationError):
        CournotConfig(demand_exponent=3.5)
    with pytest.raises(ConfigurationError):
        CournotConfig(demand_sign=0.5)
    with pytest.raises(ConfigurationError) as info:
        CournotConfig(demand_sign=1.0)
    assert "allow_nonmonotone" in str(info.value)
    with pytest.raises(ConfigurationError):
        CournotConfig(demand_slope=0.0)
    with pytest.raises(ConfigurationError):
        CournotConfig(demand_sd=-0.1)
    with pytest.raises(ConfigurationError):
        CournotConfig(budget_lo=0.0)
    with pytest.raises(ConfigurationError):
        CournotConfig(budget_lo=3.0, budget_hi=2.0)
    with pytest.raises(ConfigurationError):
        CournotConfig(lipschitz_pairs=0)
    # any non-default shape needs an explicit participation map
    with pytest.raises(ConfigurationError):
        CournotConfig(num_firms=4, num_markets=2)
    with pytest.raises(ConfigurationError):
        CournotConfig(num_firms=2, num_markets=1, participation=((0,),))
    with pytest.raises(ConfigurationError):
        CournotConfig(num_firms=2, num_markets=1, participation=((0,), ()))
    with pytest.raises(ConfigurationError):
        CournotConfig(num_firms=2, num_markets=2, participation=((1, 0), (0, 1)))
    with pytest.raises(ConfigurationError):
        CournotConfig(num_firms=2, num_markets=2, participation=((0,), (2,)))
    with pytest.raises(ConfigurationError) as info:
        CournotConfig(num_firms=2, num_markets=3, participation=((0,), (2,)))
    assert "[1]" in str(info.value)


def test_default_benchmark_shape():
    problem, oracle, graph = generate()
    part = problem.partition
    assert part.num_agents == 10
    assert part.dims == (2, 1, 3, 2, 2, 1, 2, 4, 2, 3)
    assert part.total_dim == 22
    assert part.constraint_dim == 7
    assert part.dual_dim == 70
    assert part.state_dim == 162
    assert graph.num_agents == 10
    counts = [0] * 7
    for row in DEFAULT_PARTICIPATION:
        for j in row:
            counts[j] += 1
    assert counts == [4, 2, 4, 3, 3, 3, 3]
    assert all(oracle.dim(i) == part.dims[i] for i in range(10))


def test_generate_is_deterministic():
    p1, o1, g1 = generate(CournotConfig(seed=3))
    p2, o2, g2 = generate(CournotConfig(seed=3))
    assert p1.lipschitz_ell == p2.lipschitz_ell
    for a, b in zip(p1.b, p2.b):
        assert np.array_equal(a, b)
    for a, b in zip(p1.box_hi, p2.box_hi):
        assert np.array_equal(a, b)
    assert np.array_equal(g1.weights, g2.weights)
    p3, _, _ = generate(CournotConfig(seed=4))
    assert p3.lipschitz_ell != p1.lipschitz_ell


def test_reference_lipschitz_estimate():
    problem, _, _ = generate(CournotConfig(seed=0))
    assert problem.lipschitz_ell == pytest.approx(0.37141243268790286, rel=1e-12)


def test_gradient_closed_form():
    cfg = two_firm_config()
    problem, _, _ = generate(cfg)
    u = np.array([100.0, 50.0])
    s = u.sum()
    e = cfg.demand_exponent
    for i in range(2):
        expected = (
            cfg.cost_mean
            - cfg.demand_q
            - cfg.demand_sign * cfg.demand_slope * s ** (e - 1.0) * (s + e * u[i])
        )
        assert problem.gradient(i, u)[0] == pytest.approx(expected, rel=1e-10)
    # an empty market leaves only the cost-demand offset
    zero = np.zeros(2)
    for i in range(2):
        assert problem.gradient(i, zero)[0] == cfg.cost_mean - cfg.demand_q


def test_budget_split_across_firms():
    cfg = two_firm_config()
    problem, _, _ = generate(cfg)
    total = np.zeros(1)
    for bi in problem.b:
        assert np.array_equal(bi, np.array([2.5]))
        total += bi
    assert total[0] == pytest.approx(5.0, abs=1e-15)
    assert np.array_equal(problem.box_hi[0], np.array([250.0]))
    assert np.array_equal(problem.box_lo[0], np.array([0.0]))


def test_default_game_is_monotone():
    problem, _, _ = generate(CournotConfig(seed=0))
    assert monotonicity_probe(problem, trials=300) > -1e-8


def test_increasing_price_needs_opt_in():
    cfg = two_firm_config(demand_sign=1.0, allow_nonmonotone=True)
    problem, _, _ = generate(cfg)
    u = np.array([100.0, 50.0])
    assert problem.gradient(0, u)[0] < two_firm_config().cost_mean - cfg.demand_q


def test_sample_mean_matches_batch_average():
    cfg = two_firm_config(demand_sd=0.01)
    problem, oracle, _ = generate(cfg)
    u = np.array([100.0, 50.0])
    for agent in range(2):
        batch = oracle.sample_gradient_batch(agent, u, 64, np.random.default_rng(9))
        mean = oracle.sample_mean(agent, u, 64, np.random.default_rng(9))
        assert np.allclose(batch.mean(axis=0), mean, atol=1e-10)


def test_slope_noise_is_truncated():
    cfg = two_firm_config(demand_sd=0.5)
    problem, oracle, _ = generate(cfg)
    u = np.array([100.0, 50.0])
    s = u.sum()
    factor = s ** (cfg.demand_exponent - 1.0) * (s + cfg.demand_exponent * u[0])
    base = cfg.cost_mean - cfg.demand_q
    batch = oracle.sample_gradient_batch(0, u, 20_000, np.random.default_rng(0))
    slopes = (batch[:, 0] - base) / (-cfg.demand_sign * factor)
    eps = slopes - cfg.demand_slope
    assert np.max(np.abs(eps)) <= 3.0 * cfg.demand_sd + 1e-12
    # the cut actually binds at this deviation level
    assert np.max(np.abs(eps)) > 2.9 * cfg.demand_sd
    assert np.std(eps) > 0.1 * cfg.demand_sd


def test_row_evaluation_matches_single_points():
    problem, oracle, _ = generate(CournotConfig(seed=1))
    layout = oracle._layout
    rng = np.random.default_rng(4)
    pts = rng.uniform(0.0, 300.0, size=(16, problem.partition.total_dim))
    e = 1.2
    for i in range(problem.partition.num_agents):
        own_rows, factor_rows = layout.firm_terms_many(i, pts, e)
        for t in range(pts.shape[0]):
            own, factor = layout.firm_terms(i, pts[t], e)
            assert np.array_equal(own, own_rows[t])
            assert np.array_equal(factor, factor_rows[t])


def test_lipschitz_probe_row_path_matches_loop():
    problem, _, _ = generate(CournotConfig(seed=0, lipschitz_pairs=64))
    part = problem.partition

    def gradient_many(pts):
        out = np.empty_like(pts)
        for t in range(pts.shape[0]):
            for i in range(part.num_agents):
                out[t, part.primal_slice(i)] = problem.gradient(i, pts[t])
        return out

    fast = estimate_lipschitz(problem, seed=0, pairs=64, gradient_many=gradient_many)
    slow = estimate_lipschitz(problem, seed=0, pairs=64)
    assert fast == slow
    assert problem.lipschitz_ell == pytest.approx(slow, rel=1e-12)


def test_lipschitz_probe_rejects_constant_gradient():
    from gnes.operators import GameProblem

    part = AgentPartition((1,), 1)
    flat = GameProblem(
        partition=part,
        grad_f=(lambda u: np.array([0.5]),),
        D=(np.array([[1.0]]),),
        b=(np.array([1.0]),),
        box_lo=(np.zeros(1),),
        box_hi=(np.ones(1),),
        lipschitz_ell=1.0,
    )
    with pytest.raises(ConfigurationError):
        estimate_lipschitz(flat, seed=0, pairs=10)


def test_stacked_sampling_matches_per_firm_path():
    cfg = CournotConfig(seed=0, demand_sd=0.01)
    problem, oracle, _ = generate(cfg)
    part = problem.partition
    u = np.random.default_rng(1).uniform(0.0, 200.0, part.total_dim)
    out = np.empty(part.total_dim)
    oracle.sample_mean_stack(u, 8, AgentStreams(42), 5, PHASE_XI, out, part)
    streams = AgentStreams(42)
    for i in range(part.num_agents):
        block = oracle.sample_mean(i, u, 8, streams.generator(i, 5, PHASE_XI))
        assert np.array_equal(out[part.primal_slice(i)], block)


def test_document_roundtrip():
    doc = {"kind": "cournot", "config": {"seed": 0, "lipschitz_pairs": 100}}
    problem, graph, oracle = load_document(doc)
    direct, direct_oracle, direct_graph = generate(
        CournotConfig(seed=0, lipschitz_pairs=100)
    )
    assert isinstance(oracle, CournotDemandOracle)
    assert problem.lipschitz_ell == direct.lipschitz_ell
    for a, b in zip(problem.b, direct.b):
        assert np.array_equal(a, b)
    assert np.array_equal(graph.weights, direct_graph.weights)
    with pytest.raises(ConfigurationError):
        load_document({"kind": "cournot", "config": {"seed": 0, "bogus": 1}})
    with pytest.raises(ConfigurationError):
        load_document({"kind": "cournot", "config": [1, 2]})
