"""Exact maximum-entropy best response and deviation-gain certification.

The best response against a mixture over co-player joint policies is
computed by backward induction over the focal player's infosets, using
co-player-reach-weighted action values. Ties (within an absolute 1e-12
of the maximum) are broken by mixing uniformly over the argmax set, so
the operator is a total, unique stochastic policy mapping: infosets the
mixture never reaches get the uniform distribution because every action
value aggregates to exactly zero there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .games import CHANCE, TERMINAL, ExtensiveGame
from .metagame import PayoffTensor, expected_payoffs_batch, stack_policies
from .policies import TabularPolicy

TIE_TOL = 1e-12
_MIXTURE_TOL = 1e-9


@dataclass
class CoPlayerMixture:
    """A distribution over joint co-player policy assignments.

    ``entries`` pairs an index tuple (one policy index per co-player, in
    ``coplayers`` order, referencing ``policy_lists``) with a probability.
    """

    focal_player: int
    coplayers: tuple[int, ...]
    policy_lists: dict[int, list[TabularPolicy]]
    entries: list[tuple[tuple[int, ...], float]]

    def validate(self, game: ExtensiveGame) -> None:
        game._check_player(self.focal_player)
        expected = tuple(p for p in range(game.num_players) if p != self.focal_player)
        if self.coplayers != expected:
            raise ValueError(f"coplayers {self.coplayers} != expected {expected}")
        if not self.entries:
            raise ValueError("empty co-player mixture")
        total = 0.0
        for assignment, prob in self.entries:
            if prob < 0:
                raise ValueError("negative mixture probability")
            total += prob
            for q, idx in zip(self.coplayers, assignment):
                if not 0 <= idx < len(self.policy_lists[q]):
                    raise ValueError(f"assignment references missing policy {idx} of player {q}")
        if abs(total - 1.0) > _MIXTURE_TOL:
            raise ValueError(f"mixture probabilities sum to {total}")


def point_mass_mixture(game: ExtensiveGame, focal_player: int,
                       coplayer_policies: dict[int, TabularPolicy]) -> CoPlayerMixture:
    """Mixture placing all mass on a single co-player joint policy."""
    coplayers = tuple(p for p in range(game.num_players) if p != focal_player)
    return CoPlayerMixture(
        focal_player=focal_player,
        coplayers=coplayers,
        policy_lists={q: [coplayer_policies[q]] for q in coplayers},
        entries=[(tuple(0 for _ in coplayers), 1.0)],
    )


def mixture_from_marginal(game: ExtensiveGame,
                          policies: list[list[TabularPolicy]],
                          sigma_probs: np.ndarray,
                          player: int) -> CoPlayerMixture:
    """Builds the co-player mixture sigma_{-p} by marginalising sigma over
    the focal player's own axis. Zero-probability assignments are dropped;
    entry order is the deterministic flat order of the co-player shape."""
    game._check_player(player)
    sizes = tuple(len(pl) for pl in policies)
    if sigma_probs.shape != sizes:
        raise ValueError(f"sigma shape {sigma_probs.shape} != populations {sizes}")
    marg = sigma_probs.sum(axis=player)
    coplayers = tuple(p for p in range(game.num_players) if p != player)
    entries = []
    for flat, prob in enumerate(marg.reshape(-1)):
        if prob > 0.0:
            assignment = np.unravel_index(flat, marg.shape)
            entries.append((tuple(int(a) for a in assignment), float(prob)))
    return CoPlayerMixture(
        focal_player=player,
        coplayers=coplayers,
        policy_lists={q: policies[q] for q in coplayers},
        entries=entries,
    )


@dataclass
class BestResponseResult:
    """A max-entropy best response, its value against the mixture, and the
    clipped deviation gain relative to ``baseline`` when one was supplied."""

    policy: TabularPolicy
    value: float
    deviation_gain: float | None = None


def exact_maxent_best_response(game: ExtensiveGame,
                               mixture: CoPlayerMixture,
                               baseline: float | None = None) -> BestResponseResult:
    """Exact best response of the focal player to a co-player mixture.

    Deterministic: repeated calls with equal inputs return bit-identical
    policies. When ``baseline`` (the focal player's expected payoff under
    the joint distribution) is given, the result carries the clipped
    deviation gain max(value - baseline, 0).
    """
    mixture.validate(game)
    focal = mixture.focal_player
    num_entries = len(mixture.entries)
    entry_probs = np.array([prob for _, prob in mixture.entries])
    entry_idx = {
        q: np.array([assignment[qi] for assignment, _ in mixture.entries], dtype=np.int64)
        for qi, q in enumerate(mixture.coplayers)
    }
    stacks = {q: stack_policies(game, mixture.policy_lists[q], q)
              for q in mixture.coplayers}

    kind = game.node_kind
    num_nodes = game.num_nodes

    # Forward pass: chance & co-player reach per mixture entry, weighted by
    # the entry probability. The focal player's own actions contribute
    # reach 1 (counterfactual weighting).
    reach = np.zeros((num_nodes, num_entries))
    reach[0] = entry_probs
    for i in range(num_nodes):
        if kind[i] == TERMINAL:
            continue
        kids = game.children(i)
        if kind[i] == CHANCE:
            w = game.chance_probs[game.child_start[i]:game.child_end[i]]
            reach[kids] = reach[i] * w[:, None]
        else:
            p = game.node_player[i]
            if p == focal:
                reach[kids] = reach[i]
            else:
                probs = stacks[p][entry_idx[p], game.node_infoset[i], :len(kids)]
                reach[kids] = probs.T * reach[i]

    depths = game.infoset_depth[focal]
    counts = game.num_actions(focal)
    max_a = game.max_actions(focal)
    br = np.zeros((len(counts), max_a))
    decided = np.zeros(len(counts), dtype=bool)

    focal_nodes_by_depth: dict[int, list[int]] = {}
    for i in range(num_nodes):
        if kind[i] == 1 and game.node_player[i] == focal:
            focal_nodes_by_depth.setdefault(int(depths[game.node_infoset[i]]), []).append(i)

    def backward_values() -> np.ndarray:
        """Per-entry focal values; decided focal infosets play ``br``,
        undecided ones yield zeros (never read above their own depth)."""
        v = np.zeros((num_nodes, num_entries))
        for i in range(num_nodes - 1, -1, -1):
            if kind[i] == TERMINAL:
                v[i] = game.node_payoffs[i, focal]
                continue
            kids = game.children(i)
            if kind[i] == CHANCE:
                w = game.chance_probs[game.child_start[i]:game.child_end[i]]
                v[i] = w @ v[kids]
            else:
                p = game.node_player[i]
                if p == focal:
                    iset = game.node_infoset[i]
                    if decided[iset]:
                        v[i] = br[iset, :len(kids)] @ v[kids]
                else:
                    probs = stacks[p][entry_idx[p], game.node_infoset[i], :len(kids)]
                    v[i] = np.einsum("ek,ke->e", probs, v[kids])
        return v

    for depth in sorted(focal_nodes_by_depth, reverse=True):
        v = backward_values()
        q_values = np.zeros((len(counts), max_a))
        for i in focal_nodes_by_depth[depth]:
            iset = game.node_infoset[i]
            kids = game.children(i)
            q_values[iset, :len(kids)] += v[kids] @ reach[i]
        for i in focal_nodes_by_depth[depth]:
            iset = game.node_infoset[i]
            if decided[iset]:
                continue
            k = counts[iset]
            q = q_values[iset, :k]
            ties = q >= q.max() - TIE_TOL
            br[iset, :k] = ties / ties.sum()
            decided[iset] = True

    # Infosets absent from the tree walk cannot occur; mark any remaining
    # (there are none for well-formed games) as uniform for totality.
    for iset in np.flatnonzero(~decided):
        k = counts[iset]
        br[iset, :k] = 1.0 / k
        decided[iset] = True

    v = backward_values()
    value = float(entry_probs @ v[0])
    policy = TabularPolicy(focal, br, game.infoset_ids[focal], counts)
    gain = None if baseline is None else max(value - baseline, 0.0)
    return BestResponseResult(policy=policy, value=value, deviation_gain=gain)


def _sigma_array(sigma) -> np.ndarray:
    return np.asarray(getattr(sigma, "probabilities", sigma), dtype=np.float64)


def expected_value_under_sigma(game: ExtensiveGame,
                               policies: list[list[TabularPolicy]],
                               sigma_probs: np.ndarray) -> np.ndarray:
    """E_{a ~ sigma}[G(a)] by per-profile tree evaluation over the support."""
    sizes = tuple(len(pl) for pl in policies)
    if sigma_probs.shape != sizes:
        raise ValueError(f"sigma shape {sigma_probs.shape} != populations {sizes}")
    flat = sigma_probs.reshape(-1)
    support = np.flatnonzero(flat > 0.0)
    cells = np.stack(np.unravel_index(support, sizes), axis=1)
    stacks = [stack_policies(game, policies[p], p) for p in range(game.num_players)]
    payoffs = expected_payoffs_batch(game, stacks, cells)
    return flat[support] @ payoffs


def deviation_gain(game: ExtensiveGame,
                   policies: list[list[TabularPolicy]],
                   sigma,
                   player: int,
                   payoff_tensor: PayoffTensor | None = None) -> float:
    """The focal player's clipped maximum deviation gain against sigma,
    with the max taken over the full policy space via the exact
    max-entropy best response."""
    sigma_probs = _sigma_array(sigma)
    if payoff_tensor is not None:
        baseline = float(payoff_tensor.contract(sigma_probs)[player])
    else:
        baseline = float(expected_value_under_sigma(game, policies, sigma_probs)[player])
    mixture = mixture_from_marginal(game, policies, sigma_probs, player)
    result = exact_maxent_best_response(game, mixture, baseline=baseline)
    return float(result.deviation_gain)


def cce_gap(game: ExtensiveGame,
            policies: list[list[TabularPolicy]],
            sigma,
            payoff_tensor: PayoffTensor | None = None) -> float:
    """Sum over players of deviation gains; zero exactly at a CCE."""
    return float(sum(
        deviation_gain(game, policies, sigma, p, payoff_tensor=payoff_tensor)
        for p in range(game.num_players)))
