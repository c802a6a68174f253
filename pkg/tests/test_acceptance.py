"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. The exact-loop runs
use a zero solver relaxation: with a positive relaxation the deviation
gains settle at the slack value and the termination test can never fire
(see README, "Solver relaxation versus termination").
"""

import time

import numpy as np
import pytest

from jpsro.best_response import (CoPlayerMixture, cce_gap, deviation_gain,
                                 exact_maxent_best_response,
                                 mixture_from_marginal)
from jpsro.cce_solver import (JointDistribution, certificate_violation,
                              solve_cce)
from jpsro.driver import RunConfig, evaluate_trace, jpsro_run
from jpsro.games import build_game
from jpsro.metagame import evaluate_payoff_tensor
from jpsro.neupl import (EmbeddingSets, PayoffEstimator, aggregate_assignment,
                         counterexample_demo, encode_coplayers,
                         neupl_jpsro_run, player_slot_classes)
from jpsro.policies import (deterministic_policy_count_bound,
                            random_deterministic_policy, uniform_policy)

from oracles import (best_deterministic_value, mixture_entries_for_oracle,
                     walk_expected_payoff)

CRITERION3_GAMES = (
    "rps",
    "kuhn_poker(players=2)",
    "kuhn_poker(players=3)",
    "goofspiel(num_cards=4)",
    "trade_comm(num_items=3)",
)
SEEDS = tuple(range(5))
TERM_EPS = 1e-3


def _ok(line: str) -> None:
    print(f"\n[PASS] {line}")


@pytest.fixture(scope="session")
def exact_runs():
    results = {}
    start = time.perf_counter()
    for game in CRITERION3_GAMES:
        results[game] = {}
        for seed in SEEDS:
            config = RunConfig(game=game, algo="jpsro", solver_epsilon=0.0,
                               termination_epsilon=TERM_EPS,
                               max_iterations=60, seed=seed)
            results[game][seed] = jpsro_run(config)
    return results, time.perf_counter() - start


@pytest.fixture(scope="session")
def tabular_runs():
    results = {}
    for game in CRITERION3_GAMES:
        results[game] = {}
        for seed in SEEDS:
            config = RunConfig(game=game, algo="neupl-tabular",
                               solver_epsilon=0.0,
                               termination_epsilon=TERM_EPS,
                               max_iterations=60, seed=seed)
            results[game][seed] = neupl_jpsro_run(config)
    return results


@pytest.fixture(scope="session")
def parametric_runs():
    results = {}
    start = time.perf_counter()
    for seed in SEEDS:
        config = RunConfig(game="kuhn_poker(players=2)",
                           algo="neupl-parametric", solver_epsilon=0.0,
                           termination_epsilon=TERM_EPS,
                           max_iterations=40, seed=seed)
        results[seed] = neupl_jpsro_run(config)
    return results, time.perf_counter() - start


def _small_populations(game, seed_base=100):
    policies = []
    for p in range(game.num_players):
        rng = np.random.default_rng(seed_base + p)
        policies.append([
            uniform_policy(game, p),
            random_deterministic_policy(game, p, rng),
            random_deterministic_policy(game, p, rng),
        ])
    return policies


def test_criterion_01_deviation_gain_matches_enumeration():
    games = ("rps", "avoid_direction", "kuhn_poker(players=2)",
             "kuhn_poker(players=3)", "goofspiel(num_cards=3)",
             "goofspiel(num_cards=4)", "trade_comm(num_items=3)")
    start = time.perf_counter()
    checked = 0
    for spec in games:
        game = build_game(spec)
        policies = _small_populations(game)
        sizes = tuple(len(pl) for pl in policies)
        rng = np.random.default_rng(7)
        probs = rng.random(sizes)
        probs /= probs.sum()
        sigma = JointDistribution(probs, 0.0)
        baseline = np.zeros(game.num_players)
        for cell in np.ndindex(*sizes):
            w = probs[cell]
            profile = [policies[p][cell[p]] for p in range(game.num_players)]
            baseline += w * walk_expected_payoff(game, profile)
        for player in range(game.num_players):
            got = deviation_gain(game, policies, sigma, player)
            mixture = mixture_from_marginal(game, policies, probs, player)
            entries = mixture_entries_for_oracle(mixture)
            best = best_deterministic_value(game, player, entries)
            want = max(best - baseline[player], 0.0)
            assert abs(got - want) < 1e-9, (spec, player, got, want)
            checked += 1
    elapsed = time.perf_counter() - start
    assert elapsed <= 60.0, f"criterion 1 took {elapsed:.1f}s"
    _ok(f"criterion 1: deviation gains match exhaustive enumeration on "
        f"{len(games)} games ({checked} player checks) in {elapsed:.1f}s")


def test_criterion_02_gap_oracles(rps, rps_pures):
    uniform = JointDistribution(np.full((3, 3), 1 / 9), 0.0)
    gap_uniform = cce_gap(rps, rps_pures, uniform)
    assert abs(gap_uniform) < 1e-9
    point = np.zeros((3, 3))
    point[0, 0] = 1.0
    gap_point = cce_gap(rps, rps_pures, JointDistribution(point, 0.0))
    assert abs(gap_point - 2.0) < 1e-9
    _ok("criterion 2: gap certificate 0 at the uniform profile and 2 at "
        "the (Rock, Rock) point mass")


def test_criterion_03_exact_convergence(exact_runs):
    results, elapsed = exact_runs
    for game_spec, by_seed in results.items():
        n = build_game(game_spec).num_players
        for seed, run in by_seed.items():
            assert run.terminated, f"{game_spec} seed {seed} hit the cap"
            assert len(run.records) <= 60
            final = run.records[-1]
            assert final.cce_gap < n * TERM_EPS, (game_spec, seed, final.cce_gap)
            # Independent re-evaluation of the terminal certificate.
            re = evaluate_trace(run.game, [run.populations], [run.sigma])
            assert re[0].cce_gap < n * TERM_EPS
            if run.game.payoff_structure == "zero_sum":
                for record in run.records:
                    assert abs(sum(record.cce_values)) < 1e-9
    assert elapsed <= 1800, f"criterion 3 runs took {elapsed:.0f}s"
    iters = {g: len(results[g][0].records) for g in results}
    _ok(f"criterion 3: exact loop terminated on all 5 games x 5 seeds "
        f"within {iters} iterations, {elapsed:.0f}s total")


def test_criterion_04_tabular_equivalence(exact_runs, tabular_runs):
    exact, _ = exact_runs
    for game_spec in CRITERION3_GAMES:
        for seed in SEEDS:
            a = exact[game_spec][seed]
            b = tabular_runs[game_spec][seed]
            assert len(a.records) == len(b.records), (game_spec, seed)
            for ra, rb in zip(a.records, b.records):
                assert np.array_equal(ra.sigma.probabilities,
                                      rb.sigma.probabilities)
                assert ra.deviation_gains == rb.deviation_gains
                assert ra.population_sizes == rb.population_sizes
            for p in range(len(a.populations)):
                assert len(a.populations[p]) == len(b.populations[p])
                for pa, pb in zip(a.populations[p], b.populations[p]):
                    assert np.array_equal(pa.probs, pb.probs)
    _ok("criterion 4: tabular-exact continual runs are bit-identical to "
        "the exact driver on all games, iterations and seeds")


def test_criterion_05_maxent_uniqueness(kuhn2):
    rng = np.random.default_rng(11)
    policies = [[uniform_policy(kuhn2, p),
                 random_deterministic_policy(kuhn2, p, rng),
                 random_deterministic_policy(kuhn2, p, rng)]
                for p in range(2)]
    weights = rng.random(3)
    weights /= weights.sum()
    mixture = CoPlayerMixture(0, (1,), {1: policies[1]},
                              [((a,), float(weights[a])) for a in range(3)])
    reference = exact_maxent_best_response(kuhn2, mixture)
    for _ in range(99):
        again = exact_maxent_best_response(kuhn2, mixture)
        assert np.array_equal(again.policy.probs, reference.policy.probs)
        assert again.value == reference.value
    for k in range(1, 21):
        assert deterministic_policy_count_bound(k) == 2 ** k - 1
    _ok("criterion 5: 100 repeated best responses bit-identical; "
        "2^k - 1 bound exact for k <= 20")


def test_criterion_06_solver_self_certificate(exact_runs, rps, rps_pures):
    results, _ = exact_runs
    checked = 0
    for game_spec, by_seed in results.items():
        game = build_game(game_spec)
        for seed, run in by_seed.items():
            tensor = None
            populations = [list(pl) for pl in run.populations]
            for record in run.records:
                prefix = [populations[p][:record.population_sizes[p]]
                          for p in range(game.num_players)]
                tensor = evaluate_payoff_tensor(game, prefix, prev=tensor)
                viol = certificate_violation(tensor, record.sigma)
                assert viol <= 1e-6, (game_spec, seed, record.iteration, viol)
                checked += 1
    tensor = evaluate_payoff_tensor(rps, rps_pures)
    sigma = solve_cce(tensor, "max_gini", 0.0)
    assert np.abs(sigma.probabilities - 1 / 9).max() < 1e-6
    _ok(f"criterion 6: {checked} solver outputs re-verified against the "
        f"epsilon-CCE certificate; Max-Gini on the full RPS tensor is uniform")


def test_criterion_07_encoder_properties():
    game = build_game("goofspiel(num_cards=4)")
    rng = np.random.default_rng(5)
    shared = [rng.standard_normal(8) for _ in range(4)]
    V = EmbeddingSets([[v.copy() for v in shared], [v.copy() for v in shared]],
                      8, player_slot_classes(game))
    probs = rng.random((4, 4))
    probs /= probs.sum()
    sigma = JointDistribution(probs, 0.0)
    # Lossless when K covers the support.
    g16 = encode_coplayers(V, sigma, 0, K=16)
    g96 = encode_coplayers(V, sigma, 0, K=96)
    assert np.array_equal(g16, g96)
    expected = np.zeros_like(g16)
    for cell in np.ndindex(4, 4):
        expected += probs[cell] * aggregate_assignment(V, cell, 0)
    assert np.allclose(g96, expected, atol=1e-12)
    # Symmetry pooling: swapping the symmetric players is a no-op.
    assert np.array_equal(
        encode_coplayers(V, JointDistribution(probs, 0.0), 0, K=96),
        encode_coplayers(V, JointDistribution(probs.T, 0.0), 1, K=96))
    assert np.array_equal(aggregate_assignment(V, (1, 3), 0),
                          aggregate_assignment(V, (3, 1), 1))
    # Default K.
    import inspect
    assert inspect.signature(encode_coplayers).parameters["K"].default == 96
    assert RunConfig(game="rps").topk == 96
    _ok("criterion 7: top-K encoding lossless at K >= support, symmetric "
        "swap invariance exact, default K = 96")


def test_criterion_08_payoff_estimator(rps, rps_pures):
    start = time.perf_counter()
    tensor = evaluate_payoff_tensor(rps, rps_pures)
    rng = np.random.default_rng(7)
    V = EmbeddingSets([[rng.standard_normal(8) for _ in range(3)]
                       for _ in range(2)], 8, player_slot_classes(rps))
    estimator = PayoffEstimator(V, seed=3)
    experience = [((i, j), tensor.values[i, j])
                  for i in range(3) for j in range(3)]
    estimator.train(experience, steps=1500)
    max_err = max(
        float(np.abs(estimator.predict((i, j)) - tensor.values[i, j]).max())
        for i in range(3) for j in range(3))
    elapsed = time.perf_counter() - start
    assert max_err <= 0.05, max_err
    assert elapsed <= 60.0
    _ok(f"criterion 8: payoff estimator max abs error {max_err:.2e} <= 0.05 "
        f"in {elapsed:.1f}s")


def test_criterion_09_parametric_convergence(parametric_runs):
    results, elapsed = parametric_runs
    hits = 0
    gaps = {}
    for seed, run in results.items():
        best = min(r.cce_gap for r in run.records)
        gaps[seed] = round(best, 5)
        if best < 0.05 and len(run.records) <= 40:
            hits += 1
    assert hits >= 4, gaps
    assert elapsed <= 3600
    _ok(f"criterion 9: shared-parametric runs reached gap < 0.05 within 40 "
        f"iterations on {hits}/5 seeds (best gaps {gaps}), {elapsed:.0f}s")


def test_criterion_10_counterexample():
    report = counterexample_demo(seed=0, iterations=10)
    b_rows = report["regimes"]["B"]
    assert len(b_rows) == 10
    for row in b_rows:
        assert row["max_drift_visited"] <= 0.05, row
    for row in report["regimes"]["B-tabular"]:
        assert row["max_drift_all"] == 0.0, row
    a_drift = max(r["max_drift_all"] for r in report["regimes"]["A"])
    _ok(f"criterion 10: regularised drift <= 0.05 on visited states every "
        f"iteration, tabular drift exactly 0; unregularised drift reached "
        f"KL {a_drift:.2f} (reported, unconstrained)")


def test_criterion_11_last_mover_advantage(exact_runs):
    results, _ = exact_runs
    wins = 0
    values = {}
    for seed, run in results["kuhn_poker(players=3)"].items():
        v = run.records[-1].cce_values
        values[seed] = tuple(round(x, 4) for x in v)
        if v[2] >= v[0] and v[2] >= v[1]:
            wins += 1
    assert wins >= 4, values
    _ok(f"criterion 11: last mover's value is the largest on {wins}/5 seeds "
        f"(values {values[0]})")
