"""Exact outer loop: best response, population growth, payoffs, re-solve.

Each iteration computes one exact max-entropy best response per player
against the previous joint distribution's marginals, appends it to the
population, and terminates once no player can improve by more than the
termination epsilon. Every iteration records an exact certificate (the
per-player deviation gains and the full-game gap of the previous
distribution), which `evaluate_trace` can recompute from stored policies
alone.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .best_response import (exact_maxent_best_response,
                            expected_value_under_sigma, mixture_from_marginal)
from .cce_solver import JointDistribution, solve_cce
from .games import ExtensiveGame, build_game
from .metagame import PayoffTensor, evaluate_payoff_tensor
from .policies import TabularPolicy, random_deterministic_policy, uniform_policy

TRACE_SCHEMA_VERSION = 1
SUPPORT_THRESHOLDS = (1e-3, 5e-3, 1e-2)

ALGOS = ("jpsro", "neupl-tabular", "neupl-parametric")


@dataclass
class RunConfig:
    game: str
    algo: str = "jpsro"
    objective: str = "max_gini"
    solver_epsilon: float = 0.01
    termination_epsilon: float = 1e-3
    max_iterations: int = 60
    seed: int = 0
    payoff_mode: str = "exact"      # exact | simulated | estimator
    simulation_episodes: int = 1000
    topk: int = 96
    # Population-model settings (parametric mode).
    embedding_dim: int = 8
    feature_buckets: int | None = None
    episodes_per_round: int = 192
    rounds_per_iteration: int = 8
    opt_steps: int = 60
    learning_rate: float = 0.2
    distill_weight: float = 1.0
    regularize_weight: float = 1.0
    tau_recency: float = 0.5
    sample_coplayer_priors: bool = False

    def __post_init__(self):
        if self.termination_epsilon <= 0:
            raise ValueError("termination epsilon must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max iterations must be >= 1")
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}")
        if self.payoff_mode not in ("exact", "simulated", "estimator"):
            raise ValueError("payoff_mode must be exact, simulated or estimator")


@dataclass
class IterationRecord:
    """Exact per-iteration certificate for the pre-extension distribution."""

    iteration: int
    mode: str
    population_sizes: tuple[int, ...]
    deviation_gains: tuple[float, ...]
    cce_gap: float
    cce_values: tuple[float, ...]
    sigma: JointDistribution
    support_counts: dict[str, int]
    topk_mass_loss: float
    wall_time_s: float = 0.0


@dataclass
class RunResult:
    config: RunConfig
    populations: list[list[TabularPolicy]]
    sigma: JointDistribution
    records: list[IterationRecord]
    terminated: bool
    game: ExtensiveGame = field(repr=False, default=None)


def initial_policies(game: ExtensiveGame, seed: int) -> list[list[TabularPolicy]]:
    """Starting population: uniform everywhere, except trade_comm which is
    seeded with a random deterministic policy per player (a uniform start
    makes no best-response progress there)."""
    if game.name.startswith("trade_comm"):
        rng = np.random.default_rng(seed)
        return [[random_deterministic_policy(game, p, rng)]
                for p in range(game.num_players)]
    return [[uniform_policy(game, p)] for p in range(game.num_players)]


def support_counts(sigma: JointDistribution) -> dict[str, int]:
    return {f"{t:g}": sigma.support_count(t) for t in SUPPORT_THRESHOLDS}


def topk_mass_loss(sigma: JointDistribution, k: int) -> float:
    """Probability mass outside the k highest-probability joint actions."""
    flat = np.sort(sigma.probabilities.reshape(-1))[::-1]
    return float(max(0.0, flat[k:].sum()))


def _evaluate_tensor(game, policies, config: RunConfig,
                     prev: PayoffTensor | None) -> PayoffTensor:
    if config.payoff_mode == "simulated":
        return evaluate_payoff_tensor(
            game, policies, mode="simulated",
            episodes=config.simulation_episodes, seed=config.seed, prev=prev)
    return evaluate_payoff_tensor(game, policies, mode="exact", prev=prev)


def jpsro_run(config: RunConfig,
              initial: list[list[TabularPolicy]] | None = None) -> RunResult:
    """Runs the exact loop until the termination epsilon or the iteration cap.

    Deterministic given the config. On termination the returned population
    and distribution are the pre-extension ones certified by the final
    record; hitting the cap returns the partial trace with
    ``terminated=False``. ``initial`` overrides the default starting
    population (one policy per player).
    """
    game = build_game(config.game)
    if config.solver_epsilon >= config.termination_epsilon:
        warnings.warn(
            "solver epsilon >= termination epsilon: deviation gains can "
            "settle at the solver slack, so the loop may never terminate",
            RuntimeWarning, stacklevel=2)
    policies = initial if initial is not None else initial_policies(game, config.seed)
    policies = [list(pl) for pl in policies]
    tensor = _evaluate_tensor(game, policies, config, prev=None)
    sigma = solve_cce(tensor, config.objective, config.solver_epsilon)

    records: list[IterationRecord] = []
    for t in range(1, config.max_iterations + 1):
        start = time.perf_counter()
        values = tensor.contract(sigma.probabilities)
        new_policies: list[TabularPolicy] = []
        gains: list[float] = []
        for p in range(game.num_players):
            mixture = mixture_from_marginal(game, policies, sigma.probabilities, p)
            result = exact_maxent_best_response(game, mixture,
                                                baseline=float(values[p]))
            new_policies.append(result.policy)
            gains.append(float(result.deviation_gain))

        records.append(IterationRecord(
            iteration=t,
            mode=config.algo,
            population_sizes=tuple(len(pl) for pl in policies),
            deviation_gains=tuple(gains),
            cce_gap=float(sum(gains)),
            cce_values=tuple(float(v) for v in values),
            sigma=sigma,
            support_counts=support_counts(sigma),
            topk_mass_loss=topk_mass_loss(sigma, config.topk),
            wall_time_s=time.perf_counter() - start,
        ))

        if max(gains) < config.termination_epsilon:
            return RunResult(config, policies, sigma, records, terminated=True,
                             game=game)

        for p in range(game.num_players):
            policies[p].append(new_policies[p])
        tensor = _evaluate_tensor(game, policies, config, prev=tensor)
        sigma = solve_cce(tensor, config.objective, config.solver_epsilon)
        records[-1].wall_time_s = time.perf_counter() - start

    return RunResult(config, policies, sigma, records, terminated=False,
                     game=game)


def evaluate_trace(game: ExtensiveGame,
                   population_snapshots: list[list[list[TabularPolicy]]],
                   sigma_snapshots: list[JointDistribution],
                   mode: str = "reeval") -> list[IterationRecord]:
    """Recomputes gap and value certificates from stored policies alone.

    Shares no state with the driver: payoffs are re-evaluated per support
    cell and deviation gains recomputed through fresh best responses.
    """
    if len(population_snapshots) != len(sigma_snapshots):
        raise ValueError("snapshot lists differ in length")
    records = []
    for i, (policies, sigma) in enumerate(zip(population_snapshots, sigma_snapshots)):
        sizes = tuple(len(pl) for pl in policies)
        if sigma.probabilities.shape != sizes:
            raise ValueError(
                f"snapshot {i}: sigma shape {sigma.probabilities.shape} != {sizes}")
        values = expected_value_under_sigma(game, policies, sigma.probabilities)
        gains = []
        for p in range(game.num_players):
            mixture = mixture_from_marginal(game, policies, sigma.probabilities, p)
            result = exact_maxent_best_response(game, mixture,
                                                baseline=float(values[p]))
            gains.append(float(result.deviation_gain))
        records.append(IterationRecord(
            iteration=i + 1,
            mode=mode,
            population_sizes=sizes,
            deviation_gains=tuple(gains),
            cce_gap=float(sum(gains)),
            cce_values=tuple(float(v) for v in values),
            sigma=sigma,
            support_counts=support_counts(sigma),
            topk_mass_loss=0.0,
        ))
    return records


def prefix_snapshots(result: RunResult) -> list[list[list[TabularPolicy]]]:
    """Reconstructs per-iteration population prefixes from a finished run."""
    snapshots = []
    for record in result.records:
        snapshots.append([
            result.populations[p][:record.population_sizes[p]]
            for p in range(len(result.populations))
        ])
    return snapshots


# ---------------------------------------------------------------------------
# Trace serialization (JSON lines). Wall time is deliberately not part of
# the trace so identical configs produce byte-identical files; timings are
# reported separately.
# ---------------------------------------------------------------------------


def record_to_json(record: IterationRecord) -> str:
    flat = record.sigma.probabilities.reshape(-1)
    payload = {
        "schema": TRACE_SCHEMA_VERSION,
        "iteration": record.iteration,
        "mode": record.mode,
        "population_sizes": list(record.population_sizes),
        "deviation_gains": list(record.deviation_gains),
        "cce_gap": record.cce_gap,
        "cce_values": list(record.cce_values),
        "support_counts": record.support_counts,
        "topk_mass_loss": record.topk_mass_loss,
        "sigma": {
            "shape": list(record.sigma.shape),
            "solver_epsilon": record.sigma.solver_epsilon,
            "entries": [[int(i), float(flat[i])] for i in np.flatnonzero(flat)],
        },
    }
    return json.dumps(payload, sort_keys=True)


def record_from_json(line: str) -> IterationRecord:
    payload = json.loads(line)
    if payload["schema"] != TRACE_SCHEMA_VERSION:
        raise ValueError(f"unsupported trace schema {payload['schema']}")
    sig = payload["sigma"]
    probs = np.zeros(int(np.prod(sig["shape"])))
    for idx, p in sig["entries"]:
        probs[idx] = p
    sigma = JointDistribution(probs.reshape(tuple(sig["shape"])),
                              sig["solver_epsilon"])
    return IterationRecord(
        iteration=payload["iteration"],
        mode=payload["mode"],
        population_sizes=tuple(payload["population_sizes"]),
        deviation_gains=tuple(payload["deviation_gains"]),
        cce_gap=payload["cce_gap"],
        cce_values=tuple(payload["cce_values"]),
        sigma=sigma,
        support_counts=payload["support_counts"],
        topk_mass_loss=payload["topk_mass_loss"],
    )
