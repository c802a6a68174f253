import numpy as np
import pytest

from jpsro.games import build_game
from jpsro.metagame import (PayoffTensor, TensorCapError, deserialize_tensor,
                            evaluate_payoff_tensor, exact_expected_payoff,
                            serialize_tensor)
from jpsro.policies import (JointPolicyProfile, random_deterministic_policy,
                            uniform_policy)

from oracles import mc_payoff, walk_expected_payoff


def test_rps_pure_profiles(rps, rps_pures):
    rock, paper = rps_pures[0][0], rps_pures[1][1]
    assert np.array_equal(
        exact_expected_payoff(rps, JointPolicyProfile((rock, paper))), [-1, 1])
    uniform = JointPolicyProfile((uniform_policy(rps, 0), uniform_policy(rps, 1)))
    assert np.allclose(exact_expected_payoff(rps, uniform), [0, 0])


def test_kuhn_uniform_matches_monte_carlo(kuhn2):
    profile = [uniform_policy(kuhn2, 0), uniform_policy(kuhn2, 1)]
    exact = exact_expected_payoff(kuhn2, JointPolicyProfile(tuple(profile)))
    mean, stderr = mc_payoff(kuhn2, profile, episodes=10 ** 6, seed=123)
    assert np.all(np.abs(exact - mean) <= 3 * stderr + 1e-12)


def test_exact_matches_naive_walk():
    rng = np.random.default_rng(11)
    for spec in ("kuhn_poker(players=3)", "goofspiel(num_cards=3)",
                 "trade_comm(num_items=3)"):
        game = build_game(spec)
        policies = []
        for p in range(game.num_players):
            pol = uniform_policy(game, p)
            for i, k in enumerate(pol.action_counts):
                row = rng.random(k) + 0.05
                pol.probs[i, :k] = row / row.sum()
            policies.append(pol)
        fast = exact_expected_payoff(game, JointPolicyProfile(tuple(policies)))
        slow = walk_expected_payoff(game, policies)
        assert np.allclose(fast, slow, atol=1e-12)


def test_tensor_shape():
    game = build_game("kuhn_poker(players=3)")
    rng = np.random.default_rng(5)
    policies = [
        [uniform_policy(game, 0), random_deterministic_policy(game, 0, rng)],
        [uniform_policy(game, 1), random_deterministic_policy(game, 1, rng),
         random_deterministic_policy(game, 1, rng)],
        [uniform_policy(game, 2), random_deterministic_policy(game, 2, rng),
         random_deterministic_policy(game, 2, rng),
         random_deterministic_policy(game, 2, rng)],
    ]
    tensor = evaluate_payoff_tensor(game, policies)
    assert tensor.sizes == (2, 3, 4)
    assert tensor.values.shape == (2, 3, 4, 3)
    assert int(np.prod(tensor.sizes)) == 24


def test_rps_full_tensor(rps, rps_pures):
    tensor = evaluate_payoff_tensor(rps, rps_pures)
    classic = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=float)
    assert np.array_equal(tensor.player_view(0), classic)
    assert np.array_equal(tensor.player_view(1), -classic)
    assert tensor.provenance == "exact"


def test_incremental_extension_only_new_cells(rps, rps_pures):
    small = [pl[:2] for pl in rps_pures]
    prev = evaluate_payoff_tensor(rps, small)
    # Poison the old block: incremental evaluation must keep it verbatim,
    # proving only the 5 new joint cells are evaluated.
    poisoned = PayoffTensor(prev.values + 100.0, prev.provenance)
    ext = evaluate_payoff_tensor(rps, rps_pures, prev=poisoned)
    assert np.array_equal(ext.values[:2, :2], poisoned.values)
    fresh = evaluate_payoff_tensor(rps, rps_pures)
    assert np.array_equal(ext.values[2:, :], fresh.values[2:, :])
    assert np.array_equal(ext.values[:, 2:], fresh.values[:, 2:])
    # And the honest incremental path agrees with from-scratch exactly.
    honest = evaluate_payoff_tensor(rps, rps_pures, prev=prev)
    assert np.array_equal(honest.values, fresh.values)


def test_zero_sum_invariant_exact(kuhn2):
    rng = np.random.default_rng(2)
    policies = [[uniform_policy(kuhn2, p),
                 random_deterministic_policy(kuhn2, p, rng)] for p in range(2)]
    tensor = evaluate_payoff_tensor(kuhn2, policies)
    sums = tensor.values.sum(axis=-1)
    assert np.abs(sums).max() < 1e-9


def test_simulated_mode_deterministic(rps, rps_pures):
    mixed = [[uniform_policy(rps, 0), rps_pures[0][0]],
             [uniform_policy(rps, 1), rps_pures[1][2]]]
    a = evaluate_payoff_tensor(rps, mixed, mode="simulated",
                               episodes=500, seed=9)
    b = evaluate_payoff_tensor(rps, mixed, mode="simulated",
                               episodes=500, seed=9)
    assert np.array_equal(a.values, b.values)
    assert a.provenance == "simulated(500)"
    c = evaluate_payoff_tensor(rps, mixed, mode="simulated",
                               episodes=500, seed=10)
    assert not np.array_equal(a.values, c.values)
    # Monte-Carlo estimates approach the exact values.
    exact = evaluate_payoff_tensor(rps, mixed)
    big = evaluate_payoff_tensor(rps, mixed, mode="simulated",
                                 episodes=20000, seed=9)
    assert np.abs(big.values - exact.values).max() < 0.05


def test_contract_matches_weighted_profiles(rps, rps_pures):
    tensor = evaluate_payoff_tensor(rps, rps_pures)
    rng = np.random.default_rng(4)
    sigma = rng.random((3, 3))
    sigma /= sigma.sum()
    expected = np.zeros(2)
    for i in range(3):
        for j in range(3):
            profile = JointPolicyProfile((rps_pures[0][i], rps_pures[1][j]))
            expected += sigma[i, j] * exact_expected_payoff(rps, profile)
    assert np.allclose(tensor.contract(sigma), expected, atol=1e-9)


def test_cell_cap(rps, rps_pures):
    with pytest.raises(TensorCapError):
        evaluate_payoff_tensor(rps, rps_pures, cell_cap=8)


def test_tensor_serialization_roundtrip(rps, rps_pures):
    tensor = evaluate_payoff_tensor(rps, rps_pures)
    back = deserialize_tensor(serialize_tensor(tensor))
    assert np.array_equal(back.values, tensor.values)
    assert back.provenance == tensor.provenance
