"""Meta-strategy solvers: epsilon-CCE joint distributions of a payoff tensor.

Constraint system: one inequality per player per restricted pure
deviation, E_{a~sigma}[G_p(a'_p, a_{-p}) - G_p(a)] <= epsilon, plus the
simplex constraints. Objectives:

  max_gini     minimise sum sigma(a)^2 (quadratic program)
  max_welfare  maximise sum_p E_sigma[G_p] (linear program)
  max_entropy  maximise -sum sigma log sigma (convex program)

The Gini QP is solved by an interior-point method (cvxopt), with a
Woodbury KKT solver once the joint space outgrows dense factorisation
and a projected dual ascent as the fallback path. Every solution is
checked against its own epsilon-CCE certificate before it is returned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize

from .metagame import PayoffTensor

OBJECTIVES = ("max_gini", "max_welfare", "max_entropy")

DIST_TOL = 1e-10        # probabilities below this are snapped to zero
CERT_SLACK = 1e-6       # allowed certificate violation beyond epsilon
_DENSE_KKT_LIMIT = 2500   # above this many cells, use the Woodbury KKT
_CVXOPT_CELL_LIMIT = 60000  # above this, skip cvxopt entirely


class SolverNumericalError(RuntimeError):
    """The meta-strategy solver failed to produce a certified solution."""


@dataclass
class JointDistribution:
    """A probability distribution over metagame joint actions."""

    probabilities: np.ndarray   # shape = metagame sizes
    solver_epsilon: float

    @property
    def shape(self) -> tuple[int, ...]:
        return self.probabilities.shape

    def validate(self) -> None:
        p = self.probabilities
        if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a distribution (min {p.min()}, sum {p.sum()})")

    def support_count(self, threshold: float) -> int:
        return int(np.sum(self.probabilities > threshold))


def marginal(sigma: JointDistribution, player: int) -> np.ndarray:
    """sigma_{-p}: exact marginal over all players other than ``player``."""
    if not 0 <= player < sigma.probabilities.ndim:
        raise ValueError(f"player {player} out of range")
    return sigma.probabilities.sum(axis=player)


def serialize_distribution(sigma: JointDistribution) -> str:
    flat = sigma.probabilities.reshape(-1)
    entries = [[int(i), float(flat[i])] for i in np.flatnonzero(flat)]
    return json.dumps({
        "shape": list(sigma.shape),
        "solver_epsilon": sigma.solver_epsilon,
        "entries": entries,
    })


def deserialize_distribution(text: str) -> JointDistribution:
    payload = json.loads(text)
    probs = np.zeros(int(np.prod(payload["shape"])))
    for idx, p in payload["entries"]:
        probs[idx] = p
    return JointDistribution(probs.reshape(tuple(payload["shape"])),
                             payload["solver_epsilon"])


class GainOperator:
    """Applies the deviation-gain constraint system of a payoff tensor.

    Row (p, j) of the implied matrix A maps sigma to
    E_sigma[G_p(j, a_{-p})] - E_sigma[G_p(a)].
    """

    def __init__(self, tensor: PayoffTensor):
        self.sizes = tensor.sizes
        self.num_players = tensor.num_players
        self.num_cells = int(np.prod(self.sizes))
        self.views = [tensor.player_view(p) for p in range(self.num_players)]
        self.row_player = np.concatenate([
            np.full(self.sizes[p], p, dtype=np.int64)
            for p in range(self.num_players)])
        self.num_rows = len(self.row_player)

    def apply(self, sigma_flat: np.ndarray) -> np.ndarray:
        sigma = sigma_flat.reshape(self.sizes)
        gains = []
        for p in range(self.num_players):
            gp = self.views[p]
            marg = sigma.sum(axis=p).reshape(-1)
            moved = np.moveaxis(gp, p, 0).reshape(self.sizes[p], -1)
            on_policy = float(np.vdot(sigma, gp))
            gains.append(moved @ marg - on_policy)
        return np.concatenate(gains)

    def apply_transpose(self, lam: np.ndarray) -> np.ndarray:
        out = np.zeros(self.sizes)
        offset = 0
        for p in range(self.num_players):
            lam_p = lam[offset:offset + self.sizes[p]]
            offset += self.sizes[p]
            gp = self.views[p]
            moved = np.moveaxis(gp, p, 0).reshape(self.sizes[p], -1)
            co = (lam_p @ moved).reshape(np.delete(self.sizes, p))
            out += np.expand_dims(co, axis=p)
            out -= lam_p.sum() * gp
        return out.reshape(-1)

    def dense(self) -> np.ndarray:
        rows = np.empty((self.num_rows, self.num_cells))
        r = 0
        for p in range(self.num_players):
            gp = self.views[p]
            moved = np.moveaxis(gp, p, 0)
            for j in range(self.sizes[p]):
                dev = np.broadcast_to(np.expand_dims(moved[j], axis=p), self.sizes)
                rows[r] = (dev - gp).reshape(-1)
                r += 1
        return rows


def restricted_gap(tensor: PayoffTensor, sigma: JointDistribution) -> float:
    """Sum over players of the clipped best restricted deviation gain."""
    op = GainOperator(tensor)
    gains = op.apply(sigma.probabilities.reshape(-1))
    total = 0.0
    for p in range(tensor.num_players):
        total += max(0.0, float(gains[op.row_player == p].max()))
    return total


def certificate_violation(tensor: PayoffTensor, sigma: JointDistribution) -> float:
    """Largest constraint violation beyond sigma's epsilon (can be < 0)."""
    gains = GainOperator(tensor).apply(sigma.probabilities.reshape(-1))
    return float(gains.max() - sigma.solver_epsilon)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (exact, sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.flatnonzero(u * np.arange(1, len(v) + 1) > css)[-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _clean(x: np.ndarray) -> np.ndarray:
    x = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    x[x < DIST_TOL] = 0.0
    return x / x.sum()


# ---------------------------------------------------------------------------
# Max-Gini quadratic program.
# ---------------------------------------------------------------------------


def _woodbury_kktsolver(a_dense: np.ndarray):
    """KKT solver for cvxopt's coneqp exploiting P = 2I, G = [A; -I].

    The reduced normal matrix is diagonal plus a rank-m correction, so
    each factorisation costs O(m^2 N + m^3) instead of O(N^3).
    """
    from cvxopt import matrix

    m, n = a_dense.shape

    def kktsolver(w):
        d = np.array(w["d"]).reshape(-1)
        d1sq = d[:m] ** 2        # scaling of the gain rows
        d2sq = d[m:] ** 2        # scaling of the bound rows
        lam_diag = 2.0 + 1.0 / d2sq
        inv_lam = 1.0 / lam_diag
        scaled = a_dense * inv_lam            # (m, n): A Lambda^-1
        cap = np.diag(d1sq) + scaled @ a_dense.T
        cap_inv = np.linalg.inv(cap)

        def solve_m(rhs: np.ndarray) -> np.ndarray:
            t = inv_lam * rhs
            return t - inv_lam * (a_dense.T @ (cap_inv @ (scaled @ rhs)))

        ones = np.ones(n)
        m_inv_one = solve_m(ones)
        schur = float(ones @ m_inv_one)

        def f(x, y, z):
            bx = np.array(x).reshape(-1)
            by = float(y[0])
            bz = np.array(z).reshape(-1)
            bz1, bz2 = bz[:m], bz[m:]
            rhs = bx + a_dense.T @ (bz1 / d1sq) - bz2 / d2sq
            m_inv_rhs = solve_m(rhs)
            uy = (float(ones @ m_inv_rhs) - by) / schur
            ux = m_inv_rhs - uy * m_inv_one
            uz1 = (a_dense @ ux - bz1) / d1sq
            uz2 = (-ux - bz2) / d2sq
            x[:] = matrix(ux)
            y[0] = uy
            z[:m] = matrix(d[:m] * uz1)
            z[m:] = matrix(d[m:] * uz2)

        return f

    return kktsolver


_CVXOPT_OPTIONS = {
    "show_progress": False,
    "maxiters": 200,
    "abstol": 1e-9,
    "reltol": 1e-9,
    "feastol": 1e-9,
    "refinement": 2,
}


def _solve_gini_cvxopt(op: GainOperator, epsilon: float) -> np.ndarray:
    from cvxopt import matrix, solvers, spdiag, sparse

    n = op.num_cells
    m = op.num_rows
    a_dense = op.dense()
    p_mat = spdiag(matrix(2.0, (n, 1)))
    q = matrix(0.0, (n, 1))
    g_mat = sparse([matrix(a_dense), -spdiag(matrix(1.0, (n, 1)))])
    h = matrix(np.concatenate([np.full(m, epsilon), np.zeros(n)]))
    a_eq = matrix(1.0, (1, n))
    b_eq = matrix(1.0)
    kwargs = {}
    if n > _DENSE_KKT_LIMIT:
        kwargs["kktsolver"] = _woodbury_kktsolver(a_dense)
    sol = solvers.qp(p_mat, q, g_mat, h, a_eq, b_eq,
                     options=dict(_CVXOPT_OPTIONS), **kwargs)
    if sol["x"] is None:
        raise SolverNumericalError(f"cvxopt qp returned status {sol['status']}")
    return np.array(sol["x"]).reshape(-1)


def _solve_gini_dual(op: GainOperator, epsilon: float) -> np.ndarray:
    """Projected dual ascent: sigma(lam) = Proj_simplex(-A^T lam / 2)."""

    def neg_dual(lam: np.ndarray):
        sigma = _project_simplex(-0.5 * op.apply_transpose(lam))
        gains = op.apply(sigma)
        value = float(sigma @ sigma + lam @ (gains - epsilon))
        return -value, -(gains - epsilon)

    lam0 = np.zeros(op.num_rows)
    res = minimize(neg_dual, lam0, jac=True, method="L-BFGS-B",
                   bounds=[(0.0, None)] * op.num_rows,
                   options={"maxiter": 20000, "ftol": 1e-16, "gtol": 1e-12})
    return _project_simplex(-0.5 * op.apply_transpose(res.x))


# ---------------------------------------------------------------------------
# Max-welfare linear program.
# ---------------------------------------------------------------------------


def _solve_welfare(op: GainOperator, epsilon: float) -> np.ndarray:
    welfare = np.sum([v for v in op.views], axis=0).reshape(-1)
    res = linprog(
        c=-welfare,
        A_ub=op.dense(),
        b_ub=np.full(op.num_rows, epsilon),
        A_eq=np.ones((1, op.num_cells)),
        b_eq=np.ones(1),
        bounds=(0.0, None),
        method="highs",
    )
    if not res.success:
        raise SolverNumericalError(f"welfare LP failed: {res.message}")
    return res.x


# ---------------------------------------------------------------------------
# Max-entropy convex program (smooth dual).
# ---------------------------------------------------------------------------


def _solve_entropy(op: GainOperator, epsilon: float) -> np.ndarray:
    def sigma_of(lam: np.ndarray) -> np.ndarray:
        logits = -op.apply_transpose(lam)
        logits -= logits.max()
        e = np.exp(logits)
        return e / e.sum()

    def neg_dual(lam: np.ndarray):
        sigma = sigma_of(lam)
        gains = op.apply(sigma)
        logits = -op.apply_transpose(lam)
        shift = logits.max()
        value = float(-(shift + np.log(np.exp(logits - shift).sum())) - lam @ np.full_like(lam, epsilon))
        return -value, -(gains - epsilon)

    lam0 = np.zeros(op.num_rows)
    res = minimize(neg_dual, lam0, jac=True, method="L-BFGS-B",
                   bounds=[(0.0, None)] * op.num_rows,
                   options={"maxiter": 20000, "ftol": 1e-16, "gtol": 1e-12})
    return sigma_of(res.x)


def solve_cce(tensor: PayoffTensor,
              objective: str = "max_gini",
              epsilon: float = 0.01) -> JointDistribution:
    """Computes a certified epsilon-CCE of the restricted metagame.

    Deterministic given (tensor, objective, epsilon). Raises
    SolverNumericalError if no attempted method passes the epsilon-CCE
    certificate; infeasibility cannot occur for epsilon >= 0 because
    every finite game admits a CCE.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if not np.isfinite(tensor.values).all():
        raise ValueError("payoff tensor contains non-finite entries")

    op = GainOperator(tensor)
    if op.num_cells == 1:
        return JointDistribution(np.ones(tensor.sizes), epsilon)

    if objective == "max_gini":
        attempts = []
        if op.num_cells <= _CVXOPT_CELL_LIMIT:
            attempts.append(_solve_gini_cvxopt)
        attempts.append(_solve_gini_dual)
    elif objective == "max_welfare":
        attempts = [_solve_welfare]
    else:
        attempts = [_solve_entropy]

    errors = []
    for attempt in attempts:
        try:
            x = attempt(op, epsilon)
        except Exception as exc:  # solver backends raise assorted error types
            errors.append(f"{attempt.__name__}: {type(exc).__name__}: {exc}")
            continue
        sigma = JointDistribution(_clean(x).reshape(tensor.sizes), epsilon)
        viol = certificate_violation(tensor, sigma)
        if viol <= CERT_SLACK:
            sigma.validate()
            return sigma
        errors.append(f"{attempt.__name__}: certificate violated by {viol:.3g}")
    raise SolverNumericalError(
        f"no solver produced a certified epsilon-CCE: {errors}")
