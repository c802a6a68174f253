import numpy as np
import pytest

from jpsro.best_response import (CoPlayerMixture, cce_gap, deviation_gain,
                                 exact_maxent_best_response,
                                 mixture_from_marginal, point_mass_mixture)
from jpsro.cce_solver import JointDistribution
from jpsro.games import build_game
from jpsro.metagame import evaluate_payoff_tensor, exact_expected_payoff
from jpsro.policies import (JointPolicyProfile, policy_from_table,
                            random_deterministic_policy, uniform_policy)

from oracles import (best_deterministic_value, literal_best_deterministic_value,
                     mixture_entries_for_oracle)


def test_br_vs_always_rock(rps, rps_pures):
    mixture = point_mass_mixture(rps, 0, {1: rps_pures[1][0]})
    result = exact_maxent_best_response(rps, mixture)
    assert np.array_equal(result.policy.probs[0], [0, 1, 0])  # always paper
    assert result.value == 1.0


def test_br_vs_uniform_mixture_of_pures(rps, rps_pures):
    mixture = CoPlayerMixture(0, (1,), {1: rps_pures[1]},
                              [((a,), 1 / 3) for a in range(3)])
    result = exact_maxent_best_response(rps, mixture)
    assert np.allclose(result.policy.probs[0], 1 / 3)
    assert abs(result.value) < 1e-12


def test_avoid_direction_maxent_tiebreak(avoid):
    always_l = policy_from_table(avoid, 0, {"declare": np.array([1.0, 0, 0])})
    mixture = point_mass_mixture(avoid, 1, {0: always_l})
    result = exact_maxent_best_response(avoid, mixture)
    table = result.policy.as_dict()
    assert np.array_equal(table["after_L"], [0.0, 0.5, 0.5])
    # Unreached declarations: every action is value-indifferent, so the
    # unique stochastic mapping assigns uniform.
    assert np.allclose(table["after_M"], 1 / 3)
    assert np.allclose(table["after_R"], 1 / 3)


def test_br_bit_identical_repeats(kuhn2):
    rng = np.random.default_rng(0)
    policies = [[uniform_policy(kuhn2, p),
                 random_deterministic_policy(kuhn2, p, rng)] for p in range(2)]
    weights = rng.random(2)
    weights /= weights.sum()
    mixture = CoPlayerMixture(0, (1,), {1: policies[1]},
                              [((0,), weights[0]), ((1,), weights[1])])
    first = exact_maxent_best_response(kuhn2, mixture)
    for _ in range(20):
        again = exact_maxent_best_response(kuhn2, mixture)
        assert np.array_equal(again.policy.probs, first.policy.probs)
        assert again.value == first.value


def test_br_dominates_random_alternatives(kuhn2):
    rng = np.random.default_rng(1)
    policies = [[uniform_policy(kuhn2, p),
                 random_deterministic_policy(kuhn2, p, rng)] for p in range(2)]
    mixture = CoPlayerMixture(0, (1,), {1: policies[1]},
                              [((0,), 0.3), ((1,), 0.7)])
    result = exact_maxent_best_response(kuhn2, mixture)
    for _ in range(50):
        alt = uniform_policy(kuhn2, 0)
        for i, k in enumerate(alt.action_counts):
            row = rng.random(k)
            alt.probs[i, :k] = row / row.sum()
        value = 0.0
        for (idx,), prob in mixture.entries:
            profile = JointPolicyProfile((alt, policies[1][idx]))
            value += prob * exact_expected_payoff(kuhn2, profile)[0]
        assert result.value >= value - 1e-9


@pytest.mark.parametrize("spec", ["rock_paper_scissors", "avoid_direction",
                                  "kuhn_poker(players=2)"])
def test_br_matches_literal_enumeration(spec):
    game = build_game(spec)
    rng = np.random.default_rng(13)
    for focal in range(game.num_players):
        coplayers = [p for p in range(game.num_players) if p != focal]
        lists = {q: [uniform_policy(game, q),
                     random_deterministic_policy(game, q, rng)]
                 for q in coplayers}
        mixture = CoPlayerMixture(focal, tuple(coplayers), lists,
                                  [(tuple(0 for _ in coplayers), 0.25),
                                   (tuple(1 for _ in coplayers), 0.75)])
        result = exact_maxent_best_response(game, mixture)
        entries = mixture_entries_for_oracle(mixture)
        literal = literal_best_deterministic_value(game, focal, entries)
        reduced = best_deterministic_value(game, focal, entries)
        assert abs(result.value - literal) < 1e-9
        assert abs(result.value - reduced) < 1e-9


def test_deviation_gain_rps_point_mass(rps, rps_pures):
    restricted = [[rps_pures[0][0]], [rps_pures[1][0]]]  # just Rock each
    sigma = JointDistribution(np.ones((1, 1)), 0.0)
    assert abs(deviation_gain(rps, restricted, sigma, 0) - 1.0) < 1e-12
    assert abs(deviation_gain(rps, restricted, sigma, 1) - 1.0) < 1e-12


def test_deviation_gain_uniform_ne(rps, rps_pures):
    sigma = JointDistribution(np.full((3, 3), 1 / 9), 0.0)
    for p in range(2):
        assert deviation_gain(rps, rps_pures, sigma, p) <= 1e-12


def test_cce_gap_examples(rps, rps_pures):
    point = np.zeros((3, 3))
    point[0, 0] = 1.0
    assert abs(cce_gap(rps, rps_pures, JointDistribution(point, 0.0)) - 2.0) < 1e-9
    uniform = JointDistribution(np.full((3, 3), 1 / 9), 0.0)
    assert cce_gap(rps, rps_pures, uniform) < 1e-9


def test_deviation_gain_consistency_with_tensor(kuhn2):
    rng = np.random.default_rng(3)
    policies = [[uniform_policy(kuhn2, p),
                 random_deterministic_policy(kuhn2, p, rng)] for p in range(2)]
    tensor = evaluate_payoff_tensor(kuhn2, policies)
    probs = rng.random((2, 2))
    probs /= probs.sum()
    sigma = JointDistribution(probs, 0.0)
    for p in range(2):
        with_tensor = deviation_gain(kuhn2, policies, sigma, p, payoff_tensor=tensor)
        without = deviation_gain(kuhn2, policies, sigma, p)
        assert abs(with_tensor - without) < 1e-9
        baseline = float(tensor.contract(sigma.probabilities)[p])
        mixture = mixture_from_marginal(kuhn2, policies, sigma.probabilities, p)
        br = exact_maxent_best_response(kuhn2, mixture)
        assert abs(with_tensor - max(br.value - baseline, 0.0)) < 1e-9


def test_mixture_validation(rps, rps_pures):
    with pytest.raises(ValueError):
        exact_maxent_best_response(
            rps, CoPlayerMixture(0, (1,), {1: rps_pures[1]}, []))
    with pytest.raises(ValueError):
        exact_maxent_best_response(
            rps, CoPlayerMixture(0, (1,), {1: rps_pures[1]}, [((0,), 0.5)]))
    with pytest.raises(ValueError):
        exact_maxent_best_response(
            rps, CoPlayerMixture(0, (1,), {1: rps_pures[1]}, [((7,), 1.0)]))
