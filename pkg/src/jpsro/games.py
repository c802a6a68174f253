"""Extensive-form game trees and the built-in game set.

Games are represented as explicit, immutable trees stored in flat numpy
arrays (preorder, so every parent index is smaller than its children's).
This layout lets payoff evaluation and best-response computation run as
vectorised sweeps over the node arrays instead of per-node recursion.

Built-in games:
  rock_paper_scissors()                     two-player, zero-sum
  kuhn_poker(players=2|3)                   zero-sum poker
  goofspiel(num_cards=3|4|5)                two-player bidding, zero-sum
  trade_comm(num_items=3)                   two-player, common-payoff
  avoid_direction()                         two-player, zero-sum toy game

Simultaneous-move games are encoded turn-based: the second mover's
information-set key omits the first mover's pending action.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

CHANCE = 0
DECISION = 1
TERMINAL = 2

ZERO_SUM = "zero_sum"
GENERAL_SUM = "general_sum"
COMMON_PAYOFF = "common_payoff"

_CHANCE_TOL = 1e-12
_PAYOFF_TOL = 1e-12


class GameValidationError(ValueError):
    """A constructed tree violates a structural invariant."""


class UnknownGameError(ValueError):
    """The game spec does not name a registered builder."""


@dataclass(frozen=True)
class GameSpec:
    """A parsed game request: builder name plus keyword parameters."""

    name: str
    parameters: dict = field(default_factory=dict)

    def canonical(self) -> str:
        if not self.parameters:
            return self.name
        inner = ",".join(f"{k}={self.parameters[k]}" for k in sorted(self.parameters))
        return f"{self.name}({inner})"


_SPEC_RE = re.compile(r"^\s*([a-z_][a-z0-9_]*)\s*(?:\(\s*(.*?)\s*\))?\s*$")

_ALIASES = {"rps": "rock_paper_scissors"}


def parse_game_spec(text: str) -> GameSpec:
    """Parses a ``name(k=v,...)`` string into a GameSpec."""
    m = _SPEC_RE.match(text)
    if m is None:
        raise UnknownGameError(f"cannot parse game spec: {text!r}")
    name, args = m.group(1), m.group(2)
    name = _ALIASES.get(name, name)
    params: dict = {}
    if args:
        for part in args.split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise UnknownGameError(f"malformed parameter {part!r} in {text!r}")
            key, value = (s.strip() for s in part.split("=", 1))
            try:
                params[key] = int(value)
            except ValueError:
                params[key] = value
    return GameSpec(name, params)


class _TreeBuilder:
    """Accumulates nodes during recursive construction, then freezes them."""

    def __init__(self, num_players: int):
        self.num_players = num_players
        self.kind: list[int] = []
        self.player: list[int] = []
        self.infoset: list[int] = []
        self.payoffs: list[np.ndarray] = []
        self.children: list[list[int]] = []
        self.chance_probs: list[list[float]] = []
        # Per player: infoset key -> index, plus per-infoset metadata.
        self.infoset_ids: list[list[str]] = [[] for _ in range(num_players)]
        self.infoset_actions: list[list[list[str]]] = [[] for _ in range(num_players)]
        self.infoset_own_seq: list[list[tuple]] = [[] for _ in range(num_players)]
        self._index: list[dict[str, int]] = [{} for _ in range(num_players)]

    def _new_node(self, kind: int) -> int:
        idx = len(self.kind)
        self.kind.append(kind)
        self.player.append(-1)
        self.infoset.append(-1)
        self.payoffs.append(np.zeros(self.num_players))
        self.children.append([])
        self.chance_probs.append([])
        return idx

    def chance(self, probs: list[float]) -> int:
        idx = self._new_node(CHANCE)
        self.chance_probs[idx] = list(probs)
        return idx

    def decision(self, player: int, infoset_key: str, actions: list[str],
                 own_seq: tuple) -> int:
        idx = self._new_node(DECISION)
        self.player[idx] = player
        table = self._index[player]
        if infoset_key in table:
            iset = table[infoset_key]
            if self.infoset_actions[player][iset] != list(actions):
                raise GameValidationError(
                    f"infoset {infoset_key!r} exposes inconsistent action lists")
            if self.infoset_own_seq[player][iset] != own_seq:
                raise GameValidationError(
                    f"infoset {infoset_key!r} merges histories with different "
                    f"own-action sequences (perfect recall violated)")
        else:
            iset = len(self.infoset_ids[player])
            table[infoset_key] = iset
            self.infoset_ids[player].append(infoset_key)
            self.infoset_actions[player].append(list(actions))
            self.infoset_own_seq[player].append(own_seq)
        self.infoset[idx] = iset
        return idx

    def terminal(self, payoff: list[float]) -> int:
        idx = self._new_node(TERMINAL)
        self.payoffs[idx] = np.asarray(payoff, dtype=np.float64)
        return idx

    def attach(self, parent: int, child: int) -> None:
        self.children[parent].append(child)


@dataclass(frozen=True)
class ExtensiveGame:
    """Immutable extensive-form game tree.

    Node arrays are preorder: ``node_kind[i]`` is CHANCE, DECISION or
    TERMINAL; decision nodes carry ``node_player`` and ``node_infoset``
    (an index into that player's infoset list). Children of node ``i``
    occupy ``child_index[child_start[i]:child_end[i]]``, ordered by
    action (or chance outcome) index. ``chance_probs`` aligns with
    ``child_index`` and is only meaningful under chance nodes.
    """

    name: str
    num_players: int
    payoff_structure: str
    symmetric_player_groups: tuple[tuple[int, ...], ...]
    spec: GameSpec

    node_kind: np.ndarray
    node_player: np.ndarray
    node_infoset: np.ndarray
    node_payoffs: np.ndarray          # (num_nodes, num_players), terminals only
    child_start: np.ndarray
    child_end: np.ndarray
    child_index: np.ndarray
    chance_probs: np.ndarray          # aligned with child_index

    infoset_ids: tuple[tuple[str, ...], ...]            # per player
    infoset_actions: tuple[tuple[tuple[str, ...], ...], ...]
    infoset_depth: tuple[np.ndarray, ...]               # own-sequence length

    @property
    def num_nodes(self) -> int:
        return len(self.node_kind)

    def num_infosets(self, player: int) -> int:
        self._check_player(player)
        return len(self.infoset_ids[player])

    def num_actions(self, player: int) -> np.ndarray:
        """Legal-action count per infoset of ``player``."""
        self._check_player(player)
        return np.array([len(a) for a in self.infoset_actions[player]], dtype=np.int64)

    def max_actions(self, player: int) -> int:
        self._check_player(player)
        return max((len(a) for a in self.infoset_actions[player]), default=0)

    def children(self, node: int) -> np.ndarray:
        return self.child_index[self.child_start[node]:self.child_end[node]]

    def _check_player(self, player: int) -> None:
        if not 0 <= player < self.num_players:
            raise ValueError(f"player {player} out of range for {self.num_players}-player game")

    def max_return(self) -> float:
        """Largest absolute terminal payoff, a natural payoff scale."""
        return float(np.abs(self.node_payoffs).max())


def enumerate_infosets(game: ExtensiveGame, player: int) -> list[str]:
    """Returns the player's infoset ids in deterministic (first-encounter) order."""
    game._check_player(player)
    return list(game.infoset_ids[player])


def _freeze(builder: _TreeBuilder, name: str, structure: str,
            symmetric_groups: tuple[tuple[int, ...], ...],
            spec: GameSpec) -> ExtensiveGame:
    n_nodes = len(builder.kind)
    child_start = np.zeros(n_nodes, dtype=np.int64)
    child_end = np.zeros(n_nodes, dtype=np.int64)
    child_index: list[int] = []
    chance_probs: list[float] = []
    for i in range(n_nodes):
        child_start[i] = len(child_index)
        child_index.extend(builder.children[i])
        if builder.kind[i] == CHANCE:
            chance_probs.extend(builder.chance_probs[i])
        else:
            chance_probs.extend([0.0] * len(builder.children[i]))
        child_end[i] = len(child_index)

    game = ExtensiveGame(
        name=name,
        num_players=builder.num_players,
        payoff_structure=structure,
        symmetric_player_groups=symmetric_groups,
        spec=spec,
        node_kind=np.asarray(builder.kind, dtype=np.int8),
        node_player=np.asarray(builder.player, dtype=np.int32),
        node_infoset=np.asarray(builder.infoset, dtype=np.int32),
        node_payoffs=np.asarray(builder.payoffs, dtype=np.float64),
        child_start=child_start,
        child_end=child_end,
        child_index=np.asarray(child_index, dtype=np.int64),
        chance_probs=np.asarray(chance_probs, dtype=np.float64),
        infoset_ids=tuple(tuple(ids) for ids in builder.infoset_ids),
        infoset_actions=tuple(
            tuple(tuple(a) for a in acts) for acts in builder.infoset_actions),
        infoset_depth=tuple(
            np.array([len(s) for s in seqs], dtype=np.int64)
            for seqs in builder.infoset_own_seq),
    )
    _validate(game)
    return game


def _validate(game: ExtensiveGame) -> None:
    for i in range(game.num_nodes):
        kind = game.node_kind[i]
        kids = game.children(i)
        if kind == CHANCE:
            probs = game.chance_probs[game.child_start[i]:game.child_end[i]]
            if len(kids) == 0:
                raise GameValidationError("chance node with no outcomes")
            if probs.min() < 0 or abs(probs.sum() - 1.0) > _CHANCE_TOL:
                raise GameValidationError(
                    f"chance node {i} outcome probabilities do not normalise "
                    f"(sum {probs.sum()!r})")
        elif kind == DECISION:
            p = game.node_player[i]
            acts = game.infoset_actions[p][game.node_infoset[i]]
            if len(kids) != len(acts):
                raise GameValidationError(
                    f"decision node {i} has {len(kids)} children for {len(acts)} actions")
        else:
            if len(kids) != 0:
                raise GameValidationError("terminal node with children")
            payoff = game.node_payoffs[i]
            if game.payoff_structure == ZERO_SUM and abs(payoff.sum()) > _PAYOFF_TOL:
                raise GameValidationError(
                    f"zero-sum game has terminal payoff {payoff} summing to {payoff.sum()}")
            if game.payoff_structure == COMMON_PAYOFF and np.ptp(payoff) > _PAYOFF_TOL:
                raise GameValidationError(
                    f"common-payoff game has unequal terminal payoff {payoff}")


# ---------------------------------------------------------------------------
# Built-in games.
# ---------------------------------------------------------------------------


def _build_rock_paper_scissors(spec: GameSpec) -> ExtensiveGame:
    b = _TreeBuilder(2)
    actions = ["R", "P", "S"]
    # Payoff to player 0 of (row, col).
    win = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=float)
    root = b.decision(0, "choice", actions, own_seq=())
    for i in range(3):
        # Player 1 cannot observe the first move: a single infoset.
        second = b.decision(1, "choice", actions, own_seq=())
        b.attach(root, second)
        for j in range(3):
            term = b.terminal([win[i, j], -win[i, j]])
            b.attach(second, term)
    return _freeze(b, "rock_paper_scissors", ZERO_SUM, ((0, 1),), spec)


def _build_avoid_direction(spec: GameSpec) -> ExtensiveGame:
    b = _TreeBuilder(2)
    actions = ["L", "M", "R"]
    root = b.decision(0, "declare", actions, own_seq=())
    for i, declared in enumerate(actions):
        # The declaration is public: one responder infoset per declaration.
        second = b.decision(1, f"after_{declared}", actions, own_seq=())
        b.attach(root, second)
        for j in range(3):
            avoider = 1.0 if i != j else -1.0
            b.attach(second, b.terminal([-avoider, avoider]))
    return _freeze(b, "avoid_direction", ZERO_SUM, (), spec)


def _kuhn_showdown(contrib: list[float], live: list[int], cards: tuple[int, ...]) -> list[float]:
    winner = max(live, key=lambda p: cards[p])
    pot = sum(contrib)
    payoff = [-c for c in contrib]
    payoff[winner] += pot
    return payoff


def _build_kuhn_poker(spec: GameSpec) -> ExtensiveGame:
    players = spec.parameters["players"]
    if players not in (2, 3):
        raise UnknownGameError("kuhn_poker supports players in {2, 3}")
    n_cards = players + 1
    b = _TreeBuilder(players)

    deals: list[tuple[int, ...]] = []

    def _deals(prefix: tuple[int, ...]) -> None:
        if len(prefix) == players:
            deals.append(prefix)
            return
        for c in range(n_cards):
            if c not in prefix:
                _deals(prefix + (c,))

    _deals(())
    root = b.chance([1.0 / len(deals)] * len(deals))

    def betting(cards: tuple[int, ...], history: str, own_seqs: list[tuple]) -> int:
        num_moves = len(history)
        bettor = history.find("b")
        if bettor == -1:
            if num_moves == players:
                # Everyone passed: showdown for the antes.
                return b.terminal(_kuhn_showdown([1.0] * players, list(range(players)), cards))
            actor = num_moves
        else:
            responders = num_moves - bettor - 1
            if responders == players - 1:
                contrib = [1.0] * players
                live = [bettor]
                contrib[bettor] = 2.0
                for k, move in enumerate(history[bettor + 1:]):
                    p = (bettor + 1 + k) % players
                    if move == "b":
                        contrib[p] = 2.0
                        live.append(p)
                return b.terminal(_kuhn_showdown(contrib, live, cards))
            actor = (bettor + 1 + responders) % players
        key = f"{cards[actor]}:{history}"
        node = b.decision(actor, key, ["p", "b"], own_seqs[actor])
        for a, move in enumerate(("p", "b")):
            seqs = list(own_seqs)
            seqs[actor] = own_seqs[actor] + ((key, a),)
            b.attach(node, betting(cards, history + move, seqs))
        return node

    for deal in deals:
        b.attach(root, betting(deal, "", [() for _ in range(players)]))
    return _freeze(b, f"kuhn_poker_{players}p", ZERO_SUM, (), spec)


def _build_goofspiel(spec: GameSpec) -> ExtensiveGame:
    num_cards = spec.parameters["num_cards"]
    if num_cards not in (3, 4, 5):
        raise UnknownGameError("goofspiel supports num_cards in {3, 4, 5}")
    b = _TreeBuilder(2)
    all_cards = tuple(range(1, num_cards + 1))

    def infoset_key(my_bids: tuple[int, ...], outcomes: tuple[str, ...]) -> str:
        # Egocentric: own bids plus win/tie/loss outcomes, never the
        # opponent's cards, so both players share one key space.
        return f"b{','.join(map(str, my_bids))}|o{''.join(outcomes)}"

    def play(hands: tuple[tuple[int, ...], tuple[int, ...]],
             bids: tuple[tuple[int, ...], tuple[int, ...]],
             outcomes: tuple[tuple[str, ...], tuple[str, ...]],
             scores: tuple[float, float],
             own_seqs: tuple[tuple, tuple]) -> int:
        rnd = len(bids[0])
        if rnd == num_cards:
            diff = scores[0] - scores[1]
            return b.terminal([diff, -diff])
        prize = num_cards - rnd  # descending point order
        key0 = infoset_key(bids[0], outcomes[0])
        node0 = b.decision(0, key0, [str(c) for c in hands[0]], own_seqs[0])
        for a0, c0 in enumerate(hands[0]):
            key1 = infoset_key(bids[1], outcomes[1])
            node1 = b.decision(1, key1, [str(c) for c in hands[1]], own_seqs[1])
            b.attach(node0, node1)
            for a1, c1 in enumerate(hands[1]):
                if c0 > c1:
                    new_scores = (scores[0] + prize, scores[1])
                    out = ("W", "L")
                elif c1 > c0:
                    new_scores = (scores[0], scores[1] + prize)
                    out = ("L", "W")
                else:
                    new_scores = scores
                    out = ("T", "T")
                child = play(
                    (tuple(c for c in hands[0] if c != c0),
                     tuple(c for c in hands[1] if c != c1)),
                    (bids[0] + (c0,), bids[1] + (c1,)),
                    (outcomes[0] + (out[0],), outcomes[1] + (out[1],)),
                    new_scores,
                    (own_seqs[0] + ((key0, a0),), own_seqs[1] + ((key1, a1),)),
                )
                b.attach(node1, child)
        return node0

    root = play((all_cards, all_cards), ((), ()), ((), ()), (0.0, 0.0), ((), ()))
    del root
    return _freeze(b, f"goofspiel_{num_cards}c", ZERO_SUM, ((0, 1),), spec)


def _build_trade_comm(spec: GameSpec) -> ExtensiveGame:
    num_items = spec.parameters["num_items"]
    if num_items != 3:
        raise UnknownGameError("trade_comm supports num_items=3")
    k = num_items
    b = _TreeBuilder(2)
    utter = [f"u{i}" for i in range(k)]
    trades = [f"g{g}r{r}" for g in range(k) for r in range(k)]

    root = b.chance([1.0 / (k * k)] * (k * k))
    for item0 in range(k):
        for item1 in range(k):
            key0u = f"i{item0}"
            n0 = b.decision(0, key0u, utter, ())
            b.attach(root, n0)
            for u0 in range(k):
                key1u = f"i{item1}:h{u0}"
                n1 = b.decision(1, key1u, utter, ())
                b.attach(n0, n1)
                for u1 in range(k):
                    key0t = f"i{item0}:u{u0}{u1}"
                    t0 = b.decision(0, key0t, trades, (((key0u, u0),)))
                    b.attach(n1, t0)
                    for g0 in range(k):
                        for r0 in range(k):
                            key1t = f"i{item1}:u{u0}{u1}"
                            t1 = b.decision(1, key1t, trades, (((key1u, u1),)))
                            b.attach(t0, t1)
                            for g1 in range(k):
                                for r1 in range(k):
                                    # A trade succeeds when both players give
                                    # the item they hold and each requests
                                    # exactly what the other offers.
                                    ok = (g0 == item0 and g1 == item1
                                          and r0 == g1 and r1 == g0)
                                    val = 1.0 if ok else 0.0
                                    b.attach(t1, b.terminal([val, val]))
    return _freeze(b, f"trade_comm_{k}i", COMMON_PAYOFF, (), spec)


_BUILDERS = {
    "rock_paper_scissors": (_build_rock_paper_scissors, set()),
    "kuhn_poker": (_build_kuhn_poker, {"players"}),
    "goofspiel": (_build_goofspiel, {"num_cards"}),
    "trade_comm": (_build_trade_comm, {"num_items"}),
    "avoid_direction": (_build_avoid_direction, set()),
}

# Parameters that may be passed but must equal the only supported value.
_FIXED_PARAMS = {
    "goofspiel": {"players": 2, "points_order": "descending",
                  "returns_type": "point_difference", "egocentric": "true"},
    "trade_comm": {"players": 2},
}


def build_game(spec: GameSpec | str) -> ExtensiveGame:
    """Builds a validated built-in game from a spec. Deterministic."""
    if isinstance(spec, str):
        spec = parse_game_spec(spec)
    if spec.name not in _BUILDERS:
        raise UnknownGameError(
            f"unknown game {spec.name!r}; known: {sorted(_BUILDERS)}")
    builder, required = _BUILDERS[spec.name]
    fixed = _FIXED_PARAMS.get(spec.name, {})
    params = dict(spec.parameters)
    for key, value in fixed.items():
        if key in params:
            if str(params.pop(key)).lower() != str(value).lower():
                raise UnknownGameError(
                    f"{spec.name} only supports {key}={value}")
    unknown = set(params) - required
    if unknown:
        raise UnknownGameError(f"{spec.name} got unknown parameters {sorted(unknown)}")
    missing = required - set(params)
    if missing:
        raise UnknownGameError(f"{spec.name} missing parameters {sorted(missing)}")
    return builder(GameSpec(spec.name, dict(spec.parameters)))
