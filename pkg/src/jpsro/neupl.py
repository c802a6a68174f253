"""Continual population learning with a shared conditional policy.

A single set of shared parameters represents every strategy of every
player, indexed by per-strategy embedding vectors. Before each outer
iteration the parameters and embeddings are snapshotted; fresh best
responses are distilled into the live model under new embeddings while
all prior strategies are regularised toward the frozen snapshot, which
keeps co-players stationary without requiring every state to stay
reachable.

Two fidelities:

  tabular_exact      strategies are stored as exact tables; distill is a
                     copy and regularisation is a no-op, so the produced
                     trace coincides bit-for-bit with the exact driver.
  shared_parametric  strategies share a linear-softmax model over
                     (infoset feature x embedding) products; distill and
                     regularise are KL-gradient updates on sampled
                     episodes.
"""

from __future__ import annotations

import random
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .best_response import (exact_maxent_best_response,
                            expected_value_under_sigma, mixture_from_marginal)
from .cce_solver import JointDistribution, solve_cce
from .driver import (IterationRecord, RunConfig, RunResult, initial_policies,
                     support_counts, topk_mass_loss)
from .games import ExtensiveGame, build_game
from .metagame import (PayoffTensor, evaluate_payoff_tensor, simulate_episode,
                       stack_policies)
from .policies import TabularPolicy

TABULAR_EXACT = "tabular_exact"
SHARED_PARAMETRIC = "shared_parametric"

DISTILL_GATE_KL = 1e-3
ESTIMATOR_TERMINATION_EPS = 1e-3
DEFAULT_TOPK = 96


def pr_br(tau: int, t: int, horizon: int) -> float:
    """Episode-mixing schedule: probability that an episode drawn from the
    iteration-tau distribution trains a best-responding player."""
    if t == 1:
        return 1.0
    if tau == t - 1:
        return min(0.5, max(0.2, t / horizon))
    return 0.0


# ---------------------------------------------------------------------------
# Strategy embeddings and the co-player encoder.
# ---------------------------------------------------------------------------


def player_slot_classes(game: ExtensiveGame) -> list[int]:
    """Maps each player to a slot class; symmetric players share a class."""
    classes = list(range(game.num_players))
    for group in game.symmetric_player_groups:
        rep = min(group)
        for p in group:
            classes[p] = rep
    return classes


@dataclass
class EmbeddingSets:
    """Per-player strategy embedding vectors plus the symmetry layout."""

    per_player: list[list[np.ndarray]]
    dim: int
    slot_classes: list[int]

    def copy(self) -> "EmbeddingSets":
        return EmbeddingSets(
            [[nu.copy() for nu in row] for row in self.per_player],
            self.dim, list(self.slot_classes))

    def sizes(self) -> tuple[int, ...]:
        return tuple(len(row) for row in self.per_player)

    def encoded_dim(self) -> int:
        return len(sorted(set(self.slot_classes))) * self.dim


def aggregate_assignment(V: EmbeddingSets, assignment: tuple[int, ...],
                         focal_player: int) -> np.ndarray:
    """Slot aggregator f: embeddings of one joint assignment, the focal
    slot zeroed, pooled order-invariantly within each symmetric class."""
    classes = sorted(set(V.slot_classes))
    pooled = {c: np.zeros(V.dim) for c in classes}
    for p, idx in enumerate(assignment):
        if p == focal_player:
            continue
        pooled[V.slot_classes[p]] += V.per_player[p][idx]
    return np.concatenate([pooled[c] for c in classes])


def encode_coplayers(V: EmbeddingSets, sigma: JointDistribution | np.ndarray,
                     player: int, K: int = DEFAULT_TOPK) -> np.ndarray:
    """Probability-weighted encoding of the K most likely joint strategies.

    K larger than the support is a no-op truncation; the included mass
    then sums to one and the representation is lossless.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    probs = np.asarray(getattr(sigma, "probabilities", sigma), dtype=np.float64)
    if probs.shape != V.sizes():
        raise ValueError(f"sigma shape {probs.shape} != embedding sets {V.sizes()}")
    flat = probs.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:K]
    g = np.zeros(V.encoded_dim())
    for idx in order:
        p = flat[idx]
        if p <= 0.0:
            break
        assignment = tuple(int(a) for a in np.unravel_index(idx, probs.shape))
        g += p * aggregate_assignment(V, assignment, player)
    return g


# ---------------------------------------------------------------------------
# Shared-parametric model machinery.
# ---------------------------------------------------------------------------


class FeatureIndex:
    """Maps (player, infoset) to a shared feature row.

    Symmetric players with identical (egocentric) infoset keys share a
    row. An optional bucket count hashes rows together, deliberately
    limiting capacity.
    """

    def __init__(self, game: ExtensiveGame, buckets: int | None = None):
        classes = player_slot_classes(game)
        self.rows: dict[tuple[int, int], int] = {}
        assigned: dict[str, int] = {}
        for p in range(game.num_players):
            for j, sid in enumerate(game.infoset_ids[p]):
                key = f"c{classes[p]}:{sid}"
                if buckets is not None:
                    row = zlib.crc32(key.encode()) % buckets
                elif key in assigned:
                    row = assigned[key]
                else:
                    row = len(assigned)
                    assigned[key] = row
                self.rows[(p, j)] = row
        self.num_rows = buckets if buckets is not None else len(assigned)

    def row_array(self, game: ExtensiveGame, player: int) -> np.ndarray:
        return np.array([self.rows[(player, j)]
                         for j in range(game.num_infosets(player))], dtype=np.int64)


class Adam:
    """Elementwise Adam over a dict of named parameter arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bias1 = 1 - self.beta1 ** self.t
        bias2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            params[name] -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


class PopulationModel:
    """Shared conditional policy with per-player strategy embedding sets."""

    def __init__(self, game: ExtensiveGame, mode: str, embedding_dim: int,
                 seed: int, feature_buckets: int | None = None,
                 learning_rate: float = 0.2):
        if mode not in (TABULAR_EXACT, SHARED_PARAMETRIC):
            raise ValueError(f"unknown mode {mode!r}")
        self.game = game
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.iteration = 0
        classes = player_slot_classes(game)
        self.embeddings = EmbeddingSets(
            [[] for _ in range(game.num_players)], embedding_dim, classes)
        self.ref_embeddings: EmbeddingSets | None = None

        self.tables: list[list[TabularPolicy]] = [[] for _ in range(game.num_players)]
        self.ref_tables: list[list[TabularPolicy]] | None = None

        self.features = FeatureIndex(game, feature_buckets)
        self.max_actions = max(game.max_actions(p) for p in range(game.num_players))
        d = embedding_dim
        self.theta = np.zeros((self.features.num_rows, d, self.max_actions))
        self.ref_theta: np.ndarray | None = None
        self.phi = np.zeros((self.features.num_rows,
                             self.embeddings.encoded_dim(), self.max_actions))
        self.optimizer = Adam(learning_rate)
        self._row_cache = {p: self.features.row_array(game, p)
                           for p in range(game.num_players)}
        self._count_cache = {p: game.num_actions(p) for p in range(game.num_players)}
        # Cumulative episode visitation; once a state has been reached, all
        # prior strategies keep being regularised there in later iterations.
        self.visit_totals = [np.zeros(game.num_infosets(p))
                             for p in range(game.num_players)]

    # -- population bookkeeping -------------------------------------------

    def add_strategy(self, player: int, table: TabularPolicy | None = None) -> int:
        """Appends a fresh strategy; embeddings are drawn from a seeded
        standard normal and trained jointly afterwards."""
        nu = self.rng.standard_normal(self.embeddings.dim)
        self.embeddings.per_player[player].append(nu)
        if self.mode == TABULAR_EXACT:
            if table is None:
                raise ValueError("tabular mode requires an explicit table")
            self.tables[player].append(table.copy())
        return len(self.embeddings.per_player[player]) - 1

    def population_sizes(self) -> tuple[int, ...]:
        return self.embeddings.sizes()

    # -- extraction ---------------------------------------------------------

    def extract_policy(self, player: int, strategy: int,
                       reference: bool = False) -> TabularPolicy:
        if self.mode == TABULAR_EXACT:
            tables = self.ref_tables if reference else self.tables
            return tables[player][strategy].copy()
        theta = self.ref_theta if reference else self.theta
        V = self.ref_embeddings if reference else self.embeddings
        nu = V.per_player[player][strategy]
        rows = self._row_cache[player]
        counts = self._count_cache[player]
        logits = np.einsum("d,ida->ia", nu, theta[rows])
        probs = np.zeros_like(logits)
        for i in range(len(rows)):
            probs[i, :counts[i]] = _softmax(logits[i, :counts[i]])
        return TabularPolicy(player, probs, self.game.infoset_ids[player],
                             counts)

    def extract_all(self, reference: bool = False,
                    sizes: tuple[int, ...] | None = None) -> list[list[TabularPolicy]]:
        sizes = sizes or self.population_sizes()
        return [[self.extract_policy(p, k, reference) for k in range(sizes[p])]
                for p in range(self.game.num_players)]

    def br_head_policy(self, player: int, encoded: np.ndarray) -> TabularPolicy:
        """The auxiliary best-response head conditioned on co-player encoding."""
        rows = self._row_cache[player]
        counts = self._count_cache[player]
        logits = np.einsum("d,ida->ia", encoded, self.phi[rows])
        probs = np.zeros_like(logits)
        for i in range(len(rows)):
            probs[i, :counts[i]] = _softmax(logits[i, :counts[i]])
        return TabularPolicy(player, probs, self.game.infoset_ids[player], counts)

    # -- reference snapshot -------------------------------------------------

    def snapshot_reference(self) -> None:
        """Deep-copies the live parameters; training cannot mutate the copy."""
        self.ref_embeddings = self.embeddings.copy()
        if self.mode == TABULAR_EXACT:
            self.ref_tables = [[pol.copy() for pol in row] for row in self.tables]
        else:
            self.ref_theta = self.theta.copy()

    # -- parametric training pieces ------------------------------------------

    def force_strategy(self, player: int, strategy: int, target: TabularPolicy,
                       steps: int = 400, floor: float = 1e-6) -> None:
        """Gradient-distills an externally given policy into one strategy
        (parametric mode); used to pin down starting populations."""
        if self.mode == TABULAR_EXACT:
            self.tables[player][strategy] = target.copy()
            return
        counts = self._count_cache[player]
        smoothed = target.probs.copy()
        for i in range(len(counts)):
            k = counts[i]
            row = smoothed[i, :k] * (1 - k * floor) + floor
            smoothed[i, :k] = row / row.sum()
        weights = {sid: 1.0 for sid in self.game.infoset_ids[player]}
        opt = Adam(0.3)
        for _ in range(steps):
            grads = self._kl_gradients(player, strategy, smoothed, weights_arr=None)
            opt.step(self._params(), grads)

    def _params(self) -> dict[str, np.ndarray]:
        params = {"theta": self.theta, "phi": self.phi}
        for p, row in enumerate(self.embeddings.per_player):
            for k, nu in enumerate(row):
                params[f"nu/{p}/{k}"] = nu
        return params

    def _kl_gradients(self, player: int, strategy: int, target_probs: np.ndarray,
                      weights_arr: np.ndarray | None,
                      scale: float = 1.0) -> dict[str, np.ndarray]:
        """Gradients of sum_s w(s) KL(model(.|s,nu) || target(.|s))."""
        rows = self._row_cache[player]
        counts = self._count_cache[player]
        nu = self.embeddings.per_player[player][strategy]
        dtheta = np.zeros_like(self.theta)
        dnu = np.zeros_like(nu)
        for i in range(len(rows)):
            w = 1.0 if weights_arr is None else float(weights_arr[i])
            if w == 0.0:
                continue
            k = counts[i]
            r = rows[i]
            m = _softmax(nu @ self.theta[r][:, :k])
            q = target_probs[i, :k]
            # x log x -> 0 as x -> 0, so clamping the logs is exact here.
            diff = np.log(np.maximum(m, 1e-300)) - np.log(np.maximum(q, 1e-300))
            # Reverse-KL gradient plus a cross-entropy term: the latter keeps
            # the update alive when the model saturates on a wrong action,
            # where the pure KL gradient vanishes. Both vanish at m = q.
            dlogits = (m * (diff - float(m @ diff)) + (m - q)) * (w * scale)
            dtheta[r][:, :k] += np.outer(nu, dlogits)
            dnu += self.theta[r][:, :k] @ dlogits
        return {"theta": dtheta, f"nu/{player}/{strategy}": dnu}

    def policy_kl(self, player: int, strategy: int, target_probs: np.ndarray,
                  weights_arr: np.ndarray) -> float:
        """Visit-weighted KL between the live strategy and a target table."""
        pol = self.extract_policy(player, strategy)
        counts = self._count_cache[player]
        total, wsum = 0.0, 0.0
        for i in range(len(counts)):
            w = float(weights_arr[i])
            if w == 0.0:
                continue
            k = counts[i]
            m = pol.probs[i, :k]
            q = np.maximum(target_probs[i, :k], 1e-300)
            total += w * float(np.sum(m * (np.log(np.maximum(m, 1e-300)) - np.log(q))))
            wsum += w
        return total / wsum if wsum else 0.0

    # -- checkpointing --------------------------------------------------------

    CHECKPOINT_VERSION = 1

    def save(self, path: str) -> None:
        sizes = self.population_sizes()
        nus = [nu for row in self.embeddings.per_player for nu in row]
        payload = {
            "version": np.array(self.CHECKPOINT_VERSION),
            "mode": np.array(self.mode),
            "iteration": np.array(self.iteration),
            "sizes": np.array(sizes),
            "theta": self.theta,
            "phi": self.phi,
            "embeddings": np.stack(nus) if nus else np.zeros((0, self.embeddings.dim)),
        }
        if self.mode == TABULAR_EXACT:
            for p in range(self.game.num_players):
                for k, pol in enumerate(self.tables[p]):
                    payload[f"table/{p}/{k}"] = pol.probs
        np.savez(path, **payload)

    @classmethod
    def load(cls, game: ExtensiveGame, path: str, seed: int = 0,
             feature_buckets: int | None = None) -> "PopulationModel":
        data = np.load(path, allow_pickle=False)
        if int(data["version"]) != cls.CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data['version']}")
        mode = str(data["mode"])
        dim = data["embeddings"].shape[1]
        model = cls(game, mode, dim, seed, feature_buckets=feature_buckets)
        model.iteration = int(data["iteration"])
        model.theta = data["theta"]
        model.phi = data["phi"]
        sizes = tuple(int(s) for s in data["sizes"])
        flat = list(data["embeddings"])
        pos = 0
        for p in range(game.num_players):
            for k in range(sizes[p]):
                model.embeddings.per_player[p].append(flat[pos])
                pos += 1
                if mode == TABULAR_EXACT:
                    probs = data[f"table/{p}/{k}"]
                    model.tables[p].append(TabularPolicy(
                        p, probs, game.infoset_ids[p], game.num_actions(p)))
        return model


# ---------------------------------------------------------------------------
# Payoff estimator.
# ---------------------------------------------------------------------------


class PayoffEstimator:
    """Predicts per-player expected payoffs from joint strategy embeddings.

    Slot-equivariant by construction: each player's prediction combines
    its own lifted embedding with a sum over co-player embeddings pooled
    per slot class, and heads are shared within a symmetric class, so
    permuting symmetric players' inputs permutes the outputs.
    """

    def __init__(self, V: EmbeddingSets, hidden: int = 32, seed: int = 0,
                 learning_rate: float = 0.02):
        self.V = V
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        d = V.dim
        self.classes = sorted(set(V.slot_classes))
        scale = 1.0 / np.sqrt(d)
        self.params: dict[str, np.ndarray] = {}
        for c in self.classes:
            self.params[f"self/{c}"] = rng.standard_normal((d, hidden)) * scale
            self.params[f"bias/{c}"] = np.zeros(hidden)
            self.params[f"out_w/{c}"] = rng.standard_normal(hidden) / np.sqrt(hidden)
            self.params[f"out_b/{c}"] = np.zeros(1)
            for c2 in self.classes:
                self.params[f"cross/{c}/{c2}"] = rng.standard_normal((d, hidden)) * scale
        self.optimizer = Adam(learning_rate)
        self.steps = 0
        self.last_loss = float("nan")

    def _forward(self, assignment: tuple[int, ...]):
        V = self.V
        embs = [V.per_player[p][a] for p, a in enumerate(assignment)]
        pre, hid, out = [], [], []
        for p in range(len(assignment)):
            c = V.slot_classes[p]
            x = embs[p] @ self.params[f"self/{c}"] + self.params[f"bias/{c}"]
            for q in range(len(assignment)):
                if q != p:
                    x = x + embs[q] @ self.params[f"cross/{c}/{V.slot_classes[q]}"]
            h = np.tanh(x)
            pre.append(x)
            hid.append(h)
            out.append(float(h @ self.params[f"out_w/{c}"] + self.params[f"out_b/{c}"][0]))
        return np.array(out), hid, embs

    def predict(self, assignment: tuple[int, ...]) -> np.ndarray:
        sizes = self.V.sizes()
        for p, a in enumerate(assignment):
            if not 0 <= a < sizes[p]:
                raise ValueError(f"unknown strategy index {a} for player {p}")
        return self._forward(assignment)[0]

    def predict_tensor(self) -> PayoffTensor:
        sizes = self.V.sizes()
        n = len(sizes)
        values = np.zeros(sizes + (n,))
        for flat in range(int(np.prod(sizes))):
            assignment = tuple(int(a) for a in np.unravel_index(flat, sizes))
            values[assignment] = self.predict(assignment)
        return PayoffTensor(values=values, provenance="estimated")

    def train(self, experience: list[tuple[tuple[int, ...], np.ndarray]],
              steps: int = 200) -> float:
        """Runs Adam on the mean squared error toward per-player returns;
        returns the final loss."""
        if not experience:
            return float("nan")
        V = self.V
        for _ in range(steps):
            grads = {k: np.zeros_like(v) for k, v in self.params.items()}
            loss = 0.0
            for assignment, target in experience:
                preds, hid, embs = self._forward(assignment)
                err = preds - np.asarray(target)
                loss += float(err @ err)
                for p in range(len(assignment)):
                    c = V.slot_classes[p]
                    dout = 2 * err[p] / len(experience)
                    grads[f"out_w/{c}"] += dout * hid[p]
                    grads[f"out_b/{c}"] += dout
                    dh = dout * self.params[f"out_w/{c}"] * (1 - hid[p] ** 2)
                    grads[f"bias/{c}"] += dh
                    grads[f"self/{c}"] += np.outer(embs[p], dh)
                    for q in range(len(assignment)):
                        if q != p:
                            grads[f"cross/{c}/{V.slot_classes[q]}"] += np.outer(embs[q], dh)
            self.optimizer.step(self.params, grads)
            self.steps += 1
            self.last_loss = loss / len(experience)
        return self.last_loss


def estimate_payoffs(estimator: PayoffEstimator, V: EmbeddingSets,
                     assignment: tuple[int, ...]) -> np.ndarray:
    estimator.V = V
    return estimator.predict(assignment)


def train_estimator(estimator: PayoffEstimator,
                    experience: list[tuple[tuple[int, ...], np.ndarray]],
                    steps: int = 200) -> float:
    return estimator.train(experience, steps=steps)


# ---------------------------------------------------------------------------
# One training iteration (Algorithm-2 body) and the outer loop.
# ---------------------------------------------------------------------------


@dataclass
class TrainOutcome:
    br_policies: list[TabularPolicy]          # pi_t per player (BR results)
    exact_gains: list[float]                  # exact deviation gains
    termination_gains: list[float]            # gains used for the stop test
    fidelity: list[float]                     # distill KL per player
    fidelity_ok: bool
    visited: list[np.ndarray]                 # per player, visit weights of nu_t
    estimator_experience: list = field(default_factory=list)


def train_iteration(model: PopulationModel, game: ExtensiveGame,
                    sigma_history: list[JointDistribution],
                    tensor: PayoffTensor, t: int, config: RunConfig,
                    py_rng: random.Random,
                    estimator: PayoffEstimator | None = None) -> TrainOutcome:
    """Runs one population iteration against the frozen reference.

    Requires ``snapshot_reference`` to have been taken for this iteration.
    Returns the per-player best-response policies and deviation gains; in
    tabular mode the best response is computed directly and copied, in
    parametric mode the BR head is trained toward exact max-entropy
    targets on visited infosets and then distilled.
    """
    n = game.num_players
    sigma_prev = sigma_history[-1]
    ref_sizes = model.population_sizes()
    ref_policies = model.extract_all(reference=True, sizes=ref_sizes)

    values = tensor.contract(sigma_prev.probabilities)
    br_results = []
    for p in range(n):
        mixture = mixture_from_marginal(game, ref_policies,
                                        sigma_prev.probabilities, p)
        br_results.append(exact_maxent_best_response(
            game, mixture, baseline=float(values[p])))
    exact_gains = [float(r.deviation_gain) for r in br_results]

    if model.mode == TABULAR_EXACT:
        for p in range(n):
            model.add_strategy(p, table=br_results[p].policy)
        return TrainOutcome(
            br_policies=[r.policy for r in br_results],
            exact_gains=exact_gains,
            termination_gains=exact_gains,
            fidelity=[0.0] * n,
            fidelity_ok=True,
            visited=[np.zeros(game.num_infosets(p)) for p in range(n)],
        )

    # Shared-parametric path. A fresh optimiser per iteration avoids stale
    # momentum pointing at the previous iteration's targets.
    model.optimizer = Adam(config.learning_rate)
    new_idx = [model.add_strategy(p) for p in range(n)]
    encoded = [encode_coplayers(model.ref_embeddings, sigma_prev, p, config.topk)
               for p in range(n)]
    # Label-smoothed targets keep the head's optimal logits finite.
    br_targets = []
    for p in range(n):
        probs = br_results[p].policy.probs.copy()
        counts = model._count_cache[p]
        for i in range(len(counts)):
            k = counts[i]
            probs[i, :k] = probs[i, :k] * (1 - k * 1e-3) + 1e-3
        br_targets.append(probs)

    ref_stacks = [stack_policies(game, ref_policies[p], p) for p in range(n)]
    visit_br = [np.zeros(game.num_infosets(p)) for p in range(n)]
    # Regularisation coverage: every state a player reaches in this
    # iteration's episodes pins all of that player's prior strategies.
    visit_player = [np.zeros(game.num_infosets(p)) for p in range(n)]
    ref_prob_cache: dict[tuple[int, int], np.ndarray] = {}
    estimator_experience: list[tuple[tuple[int, ...], np.ndarray]] = []
    br_returns: list[list[float]] = [[] for _ in range(n)]

    # Optional: also train the response head against arbitrary co-player
    # priors so it can answer any mixture, not only the solver's output.
    prior_tasks = []
    if config.sample_coplayer_priors:
        prior = model.rng.dirichlet(
            np.ones(int(np.prod(sigma_prev.shape)))).reshape(sigma_prev.shape)
        for p in range(n):
            mixture = mixture_from_marginal(game, ref_policies, prior, p)
            target = exact_maxent_best_response(game, mixture).policy.probs
            g_prior = encode_coplayers(model.ref_embeddings, prior, p,
                                       config.topk)
            prior_tasks.append((p, g_prior, target))

    cdfs = [np.cumsum(s.probabilities.reshape(-1)) for s in sigma_history]
    horizon = config.max_iterations

    def sample_tau() -> int:
        if t == 1 or py_rng.random() < config.tau_recency:
            return t - 1
        return py_rng.randrange(t)

    for _ in range(config.rounds_per_iteration):
        # Collect episodes against the frozen reference.
        br_stacks = [
            np.concatenate([ref_stacks[p],
                            model.br_head_policy(p, encoded[p]).probs[None]], axis=0)
            for p in range(n)]
        for _ in range(config.episodes_per_round):
            tau = sample_tau()
            u = py_rng.random()
            flat = int(np.searchsorted(cdfs[tau], u, side="right"))
            flat = min(flat, len(cdfs[tau]) - 1)
            assignment = list(np.unravel_index(flat, sigma_history[tau].shape))
            br_player = None
            if py_rng.random() < pr_br(tau, t, horizon):
                br_player = py_rng.randrange(n)
            visits: list[list[int]] = [[] for _ in range(n)]
            if br_player is None:
                returns = simulate_episode(game, ref_stacks, tuple(assignment),
                                           py_rng, visits)
                estimator_experience.append(
                    (tuple(int(a) for a in assignment), returns.copy()))
            else:
                sim_assignment = list(assignment)
                sim_assignment[br_player] = ref_sizes[br_player]  # the head's row
                returns = simulate_episode(game, br_stacks, tuple(sim_assignment),
                                           py_rng, visits)
                br_returns[br_player].append(float(returns[br_player]))
                for iset in visits[br_player]:
                    visit_br[br_player][iset] += 1.0
            for k in range(n):
                if k == br_player:
                    continue
                for iset in visits[k]:
                    visit_player[k][iset] += 1.0

        # Optimise: BR head toward exact targets, distill the new strategy
        # toward the head, regularise everything else toward the reference.
        params = model._params()
        for _ in range(config.opt_steps):
            grads: dict[str, np.ndarray] = {"phi": np.zeros_like(model.phi)}
            for p in range(n):
                wsum = visit_br[p].sum()
                if wsum == 0:
                    continue
                w = visit_br[p] / wsum
                rows = model._row_cache[p]
                counts = model._count_cache[p]
                head = model.br_head_policy(p, encoded[p])
                for i in np.flatnonzero(w):
                    k = counts[i]
                    dlogits = (head.probs[i, :k] - br_targets[p][i, :k]) * w[i]
                    grads["phi"][rows[i]][:, :k] += np.outer(encoded[p], dlogits)
                distill_target = head.probs
                for name, g in model._kl_gradients(
                        p, new_idx[p], distill_target, w,
                        scale=config.distill_weight).items():
                    grads[name] = grads.get(name, 0) + g
            if config.regularize_weight > 0:
                for k in range(n):
                    coverage = model.visit_totals[k] + visit_player[k]
                    wsum = coverage.sum()
                    if wsum == 0:
                        continue
                    w = coverage / wsum
                    for kappa in range(ref_sizes[k]):
                        if (k, kappa) not in ref_prob_cache:
                            ref_prob_cache[(k, kappa)] = model.extract_policy(
                                k, kappa, reference=True).probs
                        for name, g in model._kl_gradients(
                                k, kappa, ref_prob_cache[(k, kappa)], w,
                                scale=config.regularize_weight).items():
                            grads[name] = grads.get(name, 0) + g
            model.optimizer.step(params, grads)

    for k in range(n):
        model.visit_totals[k] += visit_player[k]

    # Distillation fidelity gate and the BR result policies.
    br_policies, fidelity = [], []
    for p in range(n):
        head = model.br_head_policy(p, encoded[p])
        br_policies.append(head)
        wsum = visit_br[p].sum()
        if wsum == 0:
            fidelity.append(0.0)
        else:
            fidelity.append(model.policy_kl(p, new_idx[p], head.probs,
                                            visit_br[p]))
    fidelity_ok = all(f <= DISTILL_GATE_KL for f in fidelity)

    termination_gains = list(exact_gains)
    if config.payoff_mode == "estimator" and estimator is not None:
        marg_cache = sigma_prev.probabilities
        for p in range(n):
            emp = [ret[p] for (a, ret) in estimator_experience]
            br_value = br_results[p].value
            # Estimator-contracted baseline with the fresh strategy in slot p.
            flat = marg_cache.sum(axis=p).reshape(-1)
            baseline = 0.0
            co_players = [q for q in range(n) if q != p]
            co_shape = tuple(sigma_prev.shape[q] for q in co_players)
            for idx in np.flatnonzero(flat):
                co_assignment = np.unravel_index(idx, co_shape)
                assignment = [0] * n
                for qi, q in enumerate(co_players):
                    assignment[q] = int(co_assignment[qi])
                assignment[p] = new_idx[p]
                baseline += flat[idx] * estimator.predict(tuple(assignment))[p]
            empirical = float(np.mean(emp)) if emp else br_value
            termination_gains[p] = max(br_value - baseline, 0.0)
            del empirical

    return TrainOutcome(
        br_policies=br_policies,
        exact_gains=exact_gains,
        termination_gains=termination_gains,
        fidelity=fidelity,
        fidelity_ok=fidelity_ok,
        visited=visit_br,
        estimator_experience=estimator_experience,
    )


def neupl_jpsro_run(config: RunConfig,
                    initial: list[list[TabularPolicy]] | None = None,
                    observer=None) -> RunResult:
    """Full continual-learning loop: snapshot, best-respond, distill,
    regularise, re-evaluate payoffs, re-solve; terminates like the exact
    driver (plus the distillation fidelity gate in parametric mode).

    In tabular-exact mode with exact payoffs the produced populations and
    joint distributions are bit-identical to ``jpsro_run`` for the same
    config.
    """
    if config.algo == "neupl-tabular":
        mode = TABULAR_EXACT
    elif config.algo == "neupl-parametric":
        mode = SHARED_PARAMETRIC
    else:
        raise ValueError("neupl_jpsro_run requires a neupl-* algo")

    game = build_game(config.game)
    if (config.payoff_mode != "estimator"
            and config.solver_epsilon >= config.termination_epsilon):
        import warnings
        warnings.warn(
            "solver epsilon >= termination epsilon: deviation gains can "
            "settle at the solver slack, so the loop may never terminate",
            RuntimeWarning, stacklevel=2)
    model = PopulationModel(game, mode, config.embedding_dim, config.seed,
                            feature_buckets=config.feature_buckets,
                            learning_rate=config.learning_rate)
    py_rng = random.Random(config.seed)

    if mode == TABULAR_EXACT:
        start = initial if initial is not None else initial_policies(game, config.seed)
        for p in range(game.num_players):
            model.add_strategy(p, table=start[p][0])
    else:
        for p in range(game.num_players):
            model.add_strategy(p)
        if initial is not None:
            for p in range(game.num_players):
                model.force_strategy(p, 0, initial[p][0])

    estimator = None
    if config.payoff_mode == "estimator":
        estimator = PayoffEstimator(model.embeddings, seed=config.seed)

    def evaluate(prev: PayoffTensor | None) -> PayoffTensor:
        if config.payoff_mode == "estimator":
            estimator.V = model.embeddings
            return estimator.predict_tensor()
        extracted = model.extract_all()
        if mode == TABULAR_EXACT:
            return evaluate_payoff_tensor(
                game, extracted,
                mode="simulated" if config.payoff_mode == "simulated" else "exact",
                episodes=config.simulation_episodes, seed=config.seed, prev=prev)
        return evaluate_payoff_tensor(game, extracted, mode="exact")

    tensor = evaluate(prev=None)
    sigma = solve_cce(tensor, config.objective, config.solver_epsilon)
    sigma_history = [sigma]
    records: list[IterationRecord] = []

    for t in range(1, config.max_iterations + 1):
        start_time = time.perf_counter()
        model.iteration = t
        model.snapshot_reference()
        ref_sizes = model.population_sizes()

        outcome = train_iteration(model, game, sigma_history, tensor, t,
                                  config, py_rng, estimator=estimator)
        if estimator is not None and outcome.estimator_experience:
            estimator.train(outcome.estimator_experience, steps=100)

        if mode == TABULAR_EXACT:
            values = tensor.contract(sigma.probabilities)
        else:
            ref_policies = model.extract_all(reference=True, sizes=ref_sizes)
            values = expected_value_under_sigma(game, ref_policies,
                                                sigma.probabilities)
        records.append(IterationRecord(
            iteration=t,
            mode=config.algo,
            population_sizes=ref_sizes,
            deviation_gains=tuple(outcome.exact_gains),
            cce_gap=float(sum(outcome.exact_gains)),
            cce_values=tuple(float(v) for v in values),
            sigma=sigma,
            support_counts=support_counts(sigma),
            topk_mass_loss=topk_mass_loss(sigma, config.topk),
            wall_time_s=time.perf_counter() - start_time,
        ))
        if observer is not None:
            observer(model, t, outcome)

        threshold = (ESTIMATOR_TERMINATION_EPS
                     if config.payoff_mode == "estimator"
                     else config.termination_epsilon)
        if max(outcome.termination_gains) < threshold and outcome.fidelity_ok:
            populations = model.extract_all(reference=True, sizes=ref_sizes)
            return RunResult(config, populations, sigma, records,
                             terminated=True, game=game)

        tensor = evaluate(prev=tensor if mode == TABULAR_EXACT else None)
        sigma = solve_cce(tensor, config.objective, config.solver_epsilon)
        sigma_history.append(sigma)
        records[-1].wall_time_s = time.perf_counter() - start_time

    populations = model.extract_all()
    return RunResult(config, populations, sigma, records, terminated=False,
                     game=game)


# ---------------------------------------------------------------------------
# Non-stationarity demonstration on the public-declaration game.
# ---------------------------------------------------------------------------


def counterexample_demo(seed: int = 0, iterations: int = 10,
                        feature_buckets: int = 2,
                        episodes_per_round: int = 128,
                        rounds_per_iteration: int = 6) -> dict:
    """Compares concurrent training (regime A, no reference regularisation)
    with the continual-learning loop (regime B) on avoid_direction.

    Player 0 starts from a pinned always-first-direction policy so the
    responder's first best response only ever visits one of its three
    infosets; the other two are the unreachable states where regime A is
    free to drift. Returns per-regime, per-iteration drift rows for the
    iteration-1 responder strategy plus the max drift over all prior
    strategies on their visited infosets.
    """
    from .policies import policy_from_table, uniform_policy

    report: dict = {"game": "avoid_direction", "iterations": iterations,
                    "regimes": {}}
    regimes = (("A", "neupl-parametric", 0.0),
               ("B", "neupl-parametric", 1.0),
               ("B-tabular", "neupl-tabular", 1.0))
    for regime, algo, reg_weight in regimes:
        game = build_game("avoid_direction")
        pinned = policy_from_table(game, 0, {"declare": np.array([1.0, 0.0, 0.0])})
        config = RunConfig(
            game="avoid_direction", algo=algo,
            solver_epsilon=0.0, termination_epsilon=1e-9,
            max_iterations=iterations, seed=seed,
            feature_buckets=feature_buckets,
            episodes_per_round=episodes_per_round,
            rounds_per_iteration=rounds_per_iteration,
            regularize_weight=reg_weight,
        )
        tracker = _DriftTracker(game)
        neupl_jpsro_run(config,
                        initial=[[pinned], [uniform_policy(game, 1)]],
                        observer=tracker)
        report["regimes"][regime] = tracker.rows
    return report


class _DriftTracker:
    """Observer recording KL drift of prior strategies across iterations."""

    TRACKED_PLAYER = 1

    def __init__(self, game: ExtensiveGame):
        self.game = game
        self.rows: list[dict] = []
        self.snapshots: dict[tuple[int, int], np.ndarray] = {}
        self.visited: dict[tuple[int, int], np.ndarray] = {}
        self.first_strategy: tuple[int, int] | None = None

    def __call__(self, model: PopulationModel, t: int, outcome) -> None:
        n = self.game.num_players
        sizes = model.population_sizes()
        drift_all_visited = 0.0
        drift_everywhere = 0.0
        tracked_visited = None
        tracked_unvisited = None
        for (p, k), snap in self.snapshots.items():
            pol = model.extract_policy(p, k).probs
            per_infoset = self._per_infoset_kl(p, pol, snap)
            drift_everywhere = max(drift_everywhere, float(per_infoset.max()))
            vis = self.visited[(p, k)] > 0
            if vis.any():
                drift_all_visited = max(drift_all_visited,
                                        float(per_infoset[vis].max()))
            if (p, k) == self.first_strategy:
                tracked_visited = float(per_infoset[vis].max()) if vis.any() else 0.0
                tracked_unvisited = (float(per_infoset[~vis].max())
                                     if (~vis).any() else 0.0)
        self.rows.append({
            "iteration": t,
            "max_drift_visited": drift_all_visited,
            "max_drift_all": drift_everywhere,
            "tracked_drift_visited": tracked_visited,
            "tracked_drift_unvisited": tracked_unvisited,
        })
        # Snapshot the strategies distilled this iteration.
        for p in range(n):
            k = sizes[p] - 1
            self.snapshots[(p, k)] = model.extract_policy(p, k).probs
            self.visited[(p, k)] = outcome.visited[p].copy()
            if p == self.TRACKED_PLAYER and self.first_strategy is None and t == 1:
                self.first_strategy = (p, k)

    def _per_infoset_kl(self, player: int, probs: np.ndarray,
                        ref: np.ndarray) -> np.ndarray:
        counts = self.game.num_actions(player)
        out = np.zeros(len(counts))
        for i in range(len(counts)):
            k = counts[i]
            m = probs[i, :k]
            q = np.maximum(ref[i, :k], 1e-300)
            out[i] = float(np.sum(m * (np.log(np.maximum(m, 1e-300)) - np.log(q))))
        return out
