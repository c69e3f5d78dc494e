import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nashnet import exact_eval as ee
from nashnet.game import GarnetSpec, TurnBasedGarnet, generate_garnet

from conftest import enumerate_nash, random_game, random_strategy, value_iteration


def test_deterministic_strategy_gives_zero_one_kernel(small_garnet):
    rng = np.random.default_rng(0)
    pi = ee.deterministic_strategy(small_garnet, rng.integers(0, 3, 12))
    P = ee.induced_kernel(small_garnet, pi)
    assert set(np.unique(P)) <= {0.0, 1.0}
    assert np.all(P.sum(axis=1) == 1.0)


def test_uniform_strategy_splits_mass():
    spec = GarnetSpec(n_players=1, n_states=3, n_actions=2, seed=0)
    g = TurnBasedGarnet(spec, np.zeros(3, int), np.array([[1, 2], [0, 0], [2, 2]]),
                        np.zeros((1, 3, 2)), np.zeros(1, int))
    P = ee.induced_kernel(g, ee.uniform_strategy(g))
    assert P[0].tolist() == [0.0, 0.5, 0.5]
    assert P[1].tolist() == [1.0, 0.0, 0.0]


def test_g2_kernel_and_reward(g2, g2_nash):
    assert ee.induced_kernel(g2, g2_nash).tolist() == [[1, 0], [0, 1]]
    assert ee.induced_reward(g2, g2_nash, 0).tolist() == [1, 0]


def test_g2_joint_values(g2, g2_nash):
    assert np.allclose(ee.joint_value(g2, g2_nash, 0), [2, 0], atol=1e-12)
    assert np.allclose(ee.joint_value(g2, g2_nash, 1), [0, 2], atol=1e-12)


def test_joint_value_no_discount(small_garnet):
    g = small_garnet.with_gamma(0.0)
    pi = ee.uniform_strategy(g)
    assert np.allclose(ee.joint_value(g, pi, 1), ee.induced_reward(g, pi, 1))


def test_joint_value_geometric_series():
    spec = GarnetSpec(n_players=1, n_states=2, n_actions=1, gamma=0.9, seed=0)
    g = TurnBasedGarnet(spec, np.zeros(2, int), np.array([[0], [1]]),
                        np.ones((1, 2, 1)), np.zeros(1, int))
    assert np.allclose(ee.joint_value(g, np.ones((2, 1)), 0), 10.0)


def test_joint_value_solves_linear_system(small_garnet):
    pi = random_strategy(np.random.default_rng(3), 12, 3)
    for i in range(2):
        v = ee.joint_value(small_garnet, pi, i)
        P = ee.induced_kernel(small_garnet, pi)
        r = ee.induced_reward(small_garnet, pi, i)
        assert np.max(np.abs((np.eye(12) - 0.9 * P) @ v - r)) <= 1e-9


def test_best_response_single_player_matches_value_iteration():
    g = generate_garnet(GarnetSpec(n_players=1, n_states=40, n_actions=4, seed=8))
    v_star, pi_star = ee.best_response_value(g, ee.uniform_strategy(g), 0)
    assert np.allclose(v_star, value_iteration(g), atol=1e-8)
    assert np.all(pi_star.max(axis=1) == 1.0)


def test_g2_best_response_at_nash(g2, g2_nash):
    v_star, _ = ee.best_response_value(g2, g2_nash, 0)
    assert np.allclose(v_star, [2, 0], atol=1e-12)


def test_g2_best_response_improves_on_bb(g2):
    pi = ee.deterministic_strategy(g2, [1, 1])
    v_star, pi_star = ee.best_response_value(g2, pi, 0)
    assert np.allclose(v_star, [2, 0], atol=1e-12)
    assert np.allclose(ee.joint_value(g2, pi, 0), [0, 0], atol=1e-12)
    assert pi_star[0].tolist() == [1.0, 0.0]
    # the other player's row is untouched
    assert pi_star[1].tolist() == [0.0, 1.0]


def test_g2_brute_force_nash_set(g2, g2_nash):
    found = enumerate_nash(g2)
    assert any(np.array_equal(pi, g2_nash) for pi in found)
    assert not any(np.array_equal(pi, ee.deterministic_strategy(g2, [1, 1])) for pi in found)


@pytest.mark.parametrize("seed", range(12))
def test_policy_iteration_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = random_game(rng, n_players=int(rng.integers(1, 4)), n_states=int(rng.integers(2, 7)),
                    n_actions=int(rng.integers(1, 4)), gamma=0.8)
    pi = random_strategy(rng, g.n_states, g.n_actions)
    for i in range(g.n_players):
        v_star, _ = ee.best_response_value(g, pi, i)
        assert np.allclose(v_star, ee.brute_force_best_response(g, pi, i), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_best_response_dominates_joint_value(seed):
    rng = np.random.default_rng(seed)
    g = random_game(rng, n_players=3, n_states=8, n_actions=3)
    pi = random_strategy(rng, 8, 3)
    for i in range(3):
        v_star, pi_star = ee.best_response_value(g, pi, i)
        assert np.all(v_star >= ee.joint_value(g, pi, i) - 1e-9)
        # optimal Bellman equation of the induced MDP
        assert np.max(np.abs(ee.apply_T_star(g, v_star, pi, i) - v_star)) <= 1e-9


def test_error_vs_best_response_zero_at_nash(g2, g2_nash):
    assert np.allclose(ee.error_vs_best_response(g2, g2_nash), 0.0, atol=1e-12)


def test_error_vs_best_response_g2_bb(g2):
    err = ee.error_vs_best_response(g2, ee.deterministic_strategy(g2, [1, 1]))
    assert err[0] == pytest.approx(1.0)


def test_error_undefined_for_zero_best_response():
    spec = GarnetSpec(n_players=2, n_states=2, n_actions=2, gamma=0.5, seed=0)
    reward = np.zeros((2, 2, 2))
    reward[1, 0, 0] = 1.0
    g = TurnBasedGarnet(spec, np.array([0, 1]), np.array([[0, 1], [0, 1]]), reward, np.zeros(2, int))
    err = ee.error_vs_best_response(g, ee.uniform_strategy(g))
    assert np.isnan(err[0])
    assert np.isfinite(err[1])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 100.0))
def test_error_invariant_to_reward_scaling(seed, scale):
    rng = np.random.default_rng(seed)
    g = random_game(rng, n_players=2, n_states=6, n_actions=3)
    pi = random_strategy(rng, 6, 3)
    reward = g.reward.copy()
    reward[1] *= scale
    before = ee.error_vs_best_response(g, pi)
    after = ee.error_vs_best_response(g.with_reward(reward), pi)
    assert np.allclose(before, after, rtol=1e-7)


def test_operators_fixed_points(small_garnet):
    pi = random_strategy(np.random.default_rng(1), 12, 3)
    for i in range(2):
        v = ee.joint_value(small_garnet, pi, i)
        assert np.allclose(ee.apply_T_joint(small_garnet, v, pi, i), v, atol=1e-12)
        v_star, _ = ee.best_response_value(small_garnet, pi, i)
        assert np.allclose(ee.apply_T_star(small_garnet, v_star, pi, i), v_star, atol=1e-9)


def test_T_joint_without_discount(small_garnet):
    g = small_garnet.with_gamma(0.0)
    pi = ee.uniform_strategy(g)
    v = np.random.default_rng(0).normal(size=12)
    assert np.allclose(ee.apply_T_joint(g, v, pi, 0), ee.induced_reward(g, pi, 0))


def test_T_star_dominates_T_joint(small_garnet):
    rng = np.random.default_rng(2)
    pi = random_strategy(rng, 12, 3)
    v = rng.normal(size=12)
    for i in range(2):
        assert np.all(ee.apply_T_star(small_garnet, v, pi, i)
                      >= ee.apply_T_joint(small_garnet, v, pi, i) - 1e-12)


def test_loss_zero_at_nash(g2, g2_nash):
    V = ee.joint_values(g2, g2_nash)
    assert ee.loss_value_space(g2, V, g2_nash, ee.MeasureSet.uniform(g2)) <= 1e-12


def test_loss_shifted_fixed_point():
    g = generate_garnet(GarnetSpec(n_players=1, n_states=10, n_actions=3, gamma=0.9, seed=2))
    v_star, pi_star = ee.best_response_value(g, ee.uniform_strategy(g), 0)
    m = ee.MeasureSet.uniform(g, p=2.0)
    star, joint = ee.residual_norms(g, v_star + 1.0, pi_star, 0, m.nu, 2.0)
    assert joint == pytest.approx(0.01)
    assert star == pytest.approx(0.01)
    assert ee.loss_value_space(g, (v_star + 1.0)[None], pi_star, m) == pytest.approx(0.02)


def test_loss_nonnegative(small_garnet):
    rng = np.random.default_rng(5)
    m = ee.MeasureSet.uniform(small_garnet)
    for _ in range(20):
        assert ee.loss_value_space(small_garnet, rng.normal(size=(2, 12)),
                                   random_strategy(rng, 12, 3), m) >= 0.0


def test_measure_validation():
    with pytest.raises(ValueError):
        ee.MeasureSet(np.array([0.5, 0.5]), np.array([1.0, 0.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        ee.MeasureSet(np.array([0.5, 0.6]), np.array([0.5, 0.5]), np.array([1.0]))
    with pytest.raises(ValueError):
        ee.MeasureSet(np.array([0.5, 0.5]), np.array([0.5, 0.5]), np.array([1.0]), p=1.0)
    assert ee.MeasureSet(np.array([0.5, 0.5]), np.array([0.5, 0.5]), np.array([1.0]), p=3.0).p_prime \
        == pytest.approx(1.5)


def test_concentrability_identity_kernel(g2, g2_nash):
    u = np.full(2, 0.5)
    assert ee.concentrability(g2, g2_nash, u, u) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_concentrability_at_least_one_for_equal_uniform(seed):
    rng = np.random.default_rng(seed)
    g = random_game(rng, n_states=7, n_actions=3)
    u = np.full(7, 1 / 7)
    assert ee.concentrability(g, random_strategy(rng, 7, 3), u, u) >= 1.0 - 1e-12


def test_concentrability_infinite_when_nu_misses_occupancy(g2):
    pi = ee.deterministic_strategy(g2, [1, 1])  # state 0 flows into 1
    assert ee.concentrability(g2, pi, np.array([1.0, 0.0]), np.array([1.0, 0.0])) == np.inf


def test_lemma1_tight_at_nash(g2, g2_nash):
    V = ee.joint_values(g2, g2_nash)
    rep = ee.check_lemma1(g2, V, g2_nash, ee.MeasureSet.uniform(g2))
    assert rep.holds
    assert np.allclose(rep.lhs, 0.0) and np.allclose(rep.rhs, 0.0)


def test_lemma1_g2_random_v(g2):
    rng = np.random.default_rng(0)
    m = ee.MeasureSet.uniform(g2, p=2.0)
    for _ in range(50):
        rep = ee.check_lemma1(g2, rng.normal(size=(2, 2)) * 3, random_strategy(rng, 2, 2), m)
        assert rep.holds


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.sampled_from([1.5, 2.0, 3.0]))
def test_lemma1_random_instances(seed, p):
    rng = np.random.default_rng(seed)
    g = random_game(rng, n_players=2, n_states=5, n_actions=2, gamma=float(rng.uniform(0.1, 0.95)))
    mu = rng.dirichlet(np.ones(5))
    nu = rng.dirichlet(np.ones(5))
    m = ee.MeasureSet(mu, nu, np.full(2, 0.5), p)
    rep = ee.check_lemma1(g, rng.normal(size=(2, 5)) * 2, random_strategy(rng, 5, 2), m)
    assert rep.holds, (rep.lhs, rep.rhs)


def test_lemma1_flags_infinite_coefficient(g2):
    m = ee.MeasureSet(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    rep = ee.check_lemma1(g2, np.zeros((2, 2)), ee.deterministic_strategy(g2, [1, 1]), m)
    assert rep.holds and rep.infinite.any()


def test_definition_equivalence_g2(g2, g2_nash):
    assert ee.check_definition_equivalence(g2, g2_nash) is True
    rep = ee.definition_sides(g2, g2_nash)
    assert rep.value_side and rep.operator_side
    bb = ee.deterministic_strategy(g2, [1, 1])
    assert ee.check_definition_equivalence(g2, bb) is False
    rep = ee.definition_sides(g2, bb)
    assert not rep.value_side and not rep.operator_side


def test_definition_equivalence_single_player_optimal():
    g = generate_garnet(GarnetSpec(n_players=1, n_states=20, n_actions=3, seed=4))
    _, pi_star = ee.best_response_value(g, ee.uniform_strategy(g), 0)
    assert ee.check_definition_equivalence(g, pi_star)


@pytest.mark.parametrize("seed", range(10))
def test_definition_equivalence_random_tiny(seed):
    rng = np.random.default_rng(100 + seed)
    g = random_game(rng, n_players=2, n_states=3, n_actions=2, gamma=0.7)
    for pi in enumerate_nash(g):
        assert ee.check_definition_equivalence(g, pi)
    assert ee.definition_sides(g, random_strategy(rng, 3, 2)).agree


def test_zero_loss_implies_zero_error(g2, g2_nash):
    V = ee.joint_values(g2, g2_nash)
    assert ee.loss_value_space(g2, V, g2_nash, ee.MeasureSet.uniform(g2)) == 0.0
    assert np.all(ee.error_vs_best_response(g2, g2_nash) <= 1e-6)


def test_strategy_validation(g2):
    with pytest.raises(ValueError):
        ee.joint_value(g2, np.array([[0.5, 0.6], [1.0, 0.0]]), 0)
    with pytest.raises(ValueError):
        ee.joint_value(g2, np.ones((3, 2)) / 2, 0)
