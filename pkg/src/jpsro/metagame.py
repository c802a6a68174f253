"""Restricted normal-form metagame: exact and simulated payoff tensors.

The metagame's actions are whole extensive-form policies. A payoff
tensor holds, for every joint assignment of one policy per player, the
per-player expected return of playing the assignment out in the game.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from itertools import product

import numpy as np

from .games import CHANCE, DECISION, ExtensiveGame
from .policies import JointPolicyProfile, TabularPolicy

DEFAULT_CELL_CAP = 10 ** 6
_BATCH = 256


class TensorCapError(RuntimeError):
    """The joint-strategy space exceeds the configured evaluation cap."""


@dataclass
class PayoffTensor:
    """Per-player expected payoffs over the restricted joint-strategy space.

    ``values`` has shape ``(*sizes, num_players)``; ``values[a] `` is the
    payoff vector of joint assignment ``a``.
    """

    values: np.ndarray
    provenance: str  # "exact" | "simulated(<episodes>)" | "estimated"

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.values.shape[:-1]

    @property
    def num_players(self) -> int:
        return self.values.shape[-1]

    def player_view(self, player: int) -> np.ndarray:
        return self.values[..., player]

    def contract(self, probabilities: np.ndarray) -> np.ndarray:
        """E_{a ~ sigma}[G(a)] as a length-n vector."""
        if probabilities.shape != self.sizes:
            raise ValueError(f"sigma shape {probabilities.shape} != tensor {self.sizes}")
        flat = self.values.reshape(-1, self.num_players)
        return probabilities.reshape(-1) @ flat


def stack_policies(game: ExtensiveGame, policies: list[TabularPolicy],
                   player: int) -> np.ndarray:
    """Stacks a player's policies into one (num_policies, infosets, actions) array."""
    if not policies:
        raise ValueError("empty policy list")
    for pol in policies:
        if pol.player != player:
            raise ValueError(f"policy for player {pol.player} in player {player}'s list")
        if pol.infoset_ids != game.infoset_ids[player]:
            raise ValueError("policy does not match the game's infoset enumeration")
    return np.stack([pol.probs for pol in policies])


def expected_payoffs_batch(game: ExtensiveGame,
                           policy_stacks: list[np.ndarray],
                           cells: np.ndarray) -> np.ndarray:
    """Expected payoff vectors for many joint assignments in one sweep.

    Args:
      game: the game tree.
      policy_stacks: per player, an array (num_policies, infosets, actions).
      cells: integer array (C, num_players) of policy indices.

    Returns:
      Array (C, num_players) of expected payoffs, exact up to float
      arithmetic. One reverse-preorder pass over the node arrays; values
      are carried for all C assignments simultaneously.
    """
    cells = np.atleast_2d(np.asarray(cells, dtype=np.int64))
    n = game.num_players
    num_cells = cells.shape[0]
    out = np.empty((num_cells, n))
    for lo in range(0, num_cells, _BATCH):
        chunk = cells[lo:lo + _BATCH]
        c = chunk.shape[0]
        v = np.zeros((game.num_nodes, c, n))
        kind = game.node_kind
        for i in range(game.num_nodes - 1, -1, -1):
            if kind[i] == 2:  # TERMINAL
                v[i] = game.node_payoffs[i]
                continue
            kids = game.children(i)
            if kind[i] == CHANCE:
                w = game.chance_probs[game.child_start[i]:game.child_end[i]]
                v[i] = np.tensordot(w, v[kids], axes=(0, 0))
            else:
                p = game.node_player[i]
                probs = policy_stacks[p][chunk[:, p], game.node_infoset[i], :len(kids)]
                v[i] = np.einsum("ck,kcn->cn", probs, v[kids])
        out[lo:lo + _BATCH] = v[0]
    return out


def exact_expected_payoff(game: ExtensiveGame,
                          profile: JointPolicyProfile) -> np.ndarray:
    """Exact per-player expected payoff of a joint policy profile."""
    if len(profile) != game.num_players:
        raise ValueError("profile size does not match player count")
    stacks = [stack_policies(game, [profile[p]], p) for p in range(game.num_players)]
    return expected_payoffs_batch(game, stacks, np.zeros((1, game.num_players)))[0]


def simulate_episode(game: ExtensiveGame,
                     policy_stacks: list[np.ndarray],
                     assignment: tuple[int, ...],
                     rng: random.Random,
                     visits: list[list[int]] | None = None) -> np.ndarray:
    """Plays one episode under the assignment; returns the payoff vector.

    When ``visits`` is given, appends each visited infoset index to
    ``visits[player]``.
    """
    node = 0
    while game.node_kind[node] != 2:
        kids = game.children(node)
        if game.node_kind[node] == CHANCE:
            probs = game.chance_probs[game.child_start[node]:game.child_end[node]]
        else:
            p = game.node_player[node]
            iset = game.node_infoset[node]
            if visits is not None:
                visits[p].append(int(iset))
            probs = policy_stacks[p][assignment[p], iset, :len(kids)]
        r = rng.random()
        acc = 0.0
        choice = len(kids) - 1
        for j, w in enumerate(probs):
            acc += w
            if r < acc:
                choice = j
                break
        node = kids[choice]
    return game.node_payoffs[node]


def evaluate_payoff_tensor(game: ExtensiveGame,
                           policies: list[list[TabularPolicy]],
                           mode: str = "exact",
                           episodes: int = 1000,
                           seed: int = 0,
                           prev: PayoffTensor | None = None,
                           cell_cap: int = DEFAULT_CELL_CAP) -> PayoffTensor:
    """Evaluates the payoff tensor over all joint policy assignments.

    ``mode`` is "exact" (deterministic tree evaluation) or "simulated"
    (per-cell episode averages, deterministic given ``seed``). Passing
    ``prev`` reuses an earlier tensor over list prefixes so only the new
    slices are evaluated.
    """
    if len(policies) != game.num_players or any(not pl for pl in policies):
        raise ValueError("need one nonempty policy list per player")
    if mode not in ("exact", "simulated"):
        raise ValueError(f"unknown mode {mode!r}")
    sizes = tuple(len(pl) for pl in policies)
    n = game.num_players
    total = int(np.prod(sizes))
    if total > cell_cap:
        raise TensorCapError(
            f"joint-strategy count {total} exceeds cap {cell_cap}; "
            "switch to the payoff-estimator path")

    values = np.zeros(sizes + (n,))
    todo = []
    if prev is not None:
        old = prev.sizes
        if len(old) != n or any(o > s for o, s in zip(old, sizes)):
            raise ValueError(f"previous tensor shape {old} does not prefix {sizes}")
        values[tuple(slice(0, o) for o in old)] = prev.values
        for cell in product(*(range(s) for s in sizes)):
            if any(c >= o for c, o in zip(cell, old)):
                todo.append(cell)
    else:
        todo = list(product(*(range(s) for s in sizes)))

    if todo:
        cells = np.array(todo, dtype=np.int64)
        if mode == "exact":
            stacks = [stack_policies(game, policies[p], p) for p in range(n)]
            results = expected_payoffs_batch(game, stacks, cells)
            for cell, res in zip(todo, results):
                values[cell] = res
        else:
            stacks = [stack_policies(game, policies[p], p) for p in range(n)]
            for cell in todo:
                flat = int(np.ravel_multi_index(cell, sizes))
                rng = random.Random((seed * 0x9E3779B1 + flat) & 0xFFFFFFFF)
                acc = np.zeros(n)
                for _ in range(episodes):
                    acc += simulate_episode(game, stacks, cell, rng)
                values[cell] = acc / episodes

    provenance = "exact" if mode == "exact" else f"simulated({episodes})"
    return PayoffTensor(values=values, provenance=provenance)


def serialize_tensor(tensor: PayoffTensor) -> str:
    payload = {
        "shape": list(tensor.sizes),
        "num_players": tensor.num_players,
        "provenance": tensor.provenance,
        "values": tensor.values.reshape(-1, tensor.num_players).tolist(),
    }
    return json.dumps(payload)


def deserialize_tensor(text: str) -> PayoffTensor:
    payload = json.loads(text)
    shape = tuple(payload["shape"]) + (payload["num_players"],)
    values = np.array(payload["values"], dtype=np.float64).reshape(shape)
    return PayoffTensor(values=values, provenance=payload["provenance"])
