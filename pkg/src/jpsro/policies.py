"""Tabular behaviour policies and the operations distillation relies on."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .games import ExtensiveGame


class SupportMismatchError(ValueError):
    """KL divergence is undefined: p puts mass where q has none."""


_DIST_TOL = 1e-12


@dataclass
class TabularPolicy:
    """One player's behaviour policy as a dense (infoset, action) array.

    ``probs[i, :k]`` is the distribution over the ``k`` legal actions of
    the player's i-th infoset (in the game's enumeration order); padding
    columns are zero. Value semantics: copies may be mutated freely.
    """

    player: int
    probs: np.ndarray
    infoset_ids: tuple[str, ...]
    action_counts: np.ndarray

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.player, self.probs.copy(),
                             self.infoset_ids, self.action_counts)

    def action_probabilities(self, infoset_id: str) -> np.ndarray:
        i = self.infoset_ids.index(infoset_id)
        return self.probs[i, :self.action_counts[i]]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {sid: self.probs[i, :self.action_counts[i]]
                for i, sid in enumerate(self.infoset_ids)}

    def validate(self) -> None:
        for i in range(len(self.infoset_ids)):
            row = self.probs[i, :self.action_counts[i]]
            if row.min() < 0 or abs(row.sum() - 1.0) > _DIST_TOL:
                raise ValueError(
                    f"policy row for {self.infoset_ids[i]!r} is not a distribution: {row}")
            pad = self.probs[i, self.action_counts[i]:]
            if pad.size and np.any(pad != 0.0):
                raise ValueError("policy padding columns must stay zero")

    def __eq__(self, other) -> bool:
        return (isinstance(other, TabularPolicy)
                and self.player == other.player
                and self.infoset_ids == other.infoset_ids
                and np.array_equal(self.probs, other.probs))


@dataclass(frozen=True)
class JointPolicyProfile:
    """One TabularPolicy per player, indexed by player."""

    policies: tuple[TabularPolicy, ...]

    def __post_init__(self):
        players = [p.player for p in self.policies]
        if players != list(range(len(players))):
            raise ValueError(f"profile must cover players 0..n-1 in order, got {players}")

    def __getitem__(self, player: int) -> TabularPolicy:
        return self.policies[player]

    def __len__(self) -> int:
        return len(self.policies)


def _empty_policy(game: ExtensiveGame, player: int) -> TabularPolicy:
    game._check_player(player)
    counts = game.num_actions(player)
    probs = np.zeros((len(counts), game.max_actions(player)), dtype=np.float64)
    return TabularPolicy(player, probs, game.infoset_ids[player], counts)


def uniform_policy(game: ExtensiveGame, player: int) -> TabularPolicy:
    """Uniform over legal actions at every infoset."""
    pol = _empty_policy(game, player)
    for i, k in enumerate(pol.action_counts):
        pol.probs[i, :k] = 1.0 / k
    return pol


def random_deterministic_policy(game: ExtensiveGame, player: int,
                                rng: np.random.Generator) -> TabularPolicy:
    """A pure policy with one uniformly drawn action per infoset."""
    pol = _empty_policy(game, player)
    for i, k in enumerate(pol.action_counts):
        pol.probs[i, int(rng.integers(k))] = 1.0
    return pol


def policy_from_table(game: ExtensiveGame, player: int,
                      table: dict[str, np.ndarray]) -> TabularPolicy:
    """Builds a total policy from an id -> distribution mapping."""
    pol = _empty_policy(game, player)
    missing = [sid for sid in pol.infoset_ids if sid not in table]
    if missing:
        raise ValueError(f"table does not cover infosets {missing[:3]}...")
    for i, sid in enumerate(pol.infoset_ids):
        row = np.asarray(table[sid], dtype=np.float64)
        if row.shape != (pol.action_counts[i],):
            raise ValueError(f"row for {sid!r} has wrong length")
        pol.probs[i, :pol.action_counts[i]] = row
    pol.validate()
    return pol


def kl_divergence(p: TabularPolicy, q: TabularPolicy,
                  weights: dict[str, float] | None = None) -> float:
    """Weighted sum over infosets of KL(p(.|s) || q(.|s)).

    Weights default to 1 per infoset. Raises SupportMismatchError when p
    is positive somewhere q is zero.
    """
    if p.player != q.player or p.infoset_ids != q.infoset_ids:
        raise ValueError("policies cover different infoset sets")
    total = 0.0
    for i, sid in enumerate(p.infoset_ids):
        w = 1.0 if weights is None else float(weights.get(sid, 0.0))
        if w == 0.0:
            continue
        k = p.action_counts[i]
        pi, qi = p.probs[i, :k], q.probs[i, :k]
        mask = pi > 0
        if np.any(qi[mask] == 0):
            raise SupportMismatchError(
                f"p has support at {sid!r} where q is zero")
        total += w * float(np.sum(pi[mask] * (np.log(pi[mask]) - np.log(qi[mask]))))
    return max(total, 0.0)


def deterministic_policy_count_bound(num_det: int) -> int:
    """Upper bound, 2**num_det - 1, on stochastic policies reachable by a
    unique stochastic policy mapping over num_det deterministic policies."""
    if num_det < 1:
        raise ValueError("num_det must be >= 1")
    return 2 ** num_det - 1


# ---------------------------------------------------------------------------
# Serialization: one line per infoset, 17 significant digits.
# ---------------------------------------------------------------------------


def serialize_policy(policy: TabularPolicy) -> str:
    lines = [f"player\t{policy.player}"]
    for i, sid in enumerate(policy.infoset_ids):
        row = policy.probs[i, :policy.action_counts[i]]
        lines.append(sid + "\t" + " ".join(f"{x:.17g}" for x in row))
    return "\n".join(lines) + "\n"


def deserialize_policy(game: ExtensiveGame, text: str) -> TabularPolicy:
    lines = [ln for ln in text.splitlines() if ln]
    head = lines[0].split("\t")
    if head[0] != "player":
        raise ValueError("malformed policy file: missing player header")
    player = int(head[1])
    table: dict[str, np.ndarray] = {}
    for ln in lines[1:]:
        sid, values = ln.split("\t")
        table[sid] = np.array([float(v) for v in values.split()])
    return policy_from_table(game, player, table)
