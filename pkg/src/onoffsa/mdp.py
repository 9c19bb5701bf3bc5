"""MDP assembly, value iteration, policy extraction and exact policy evaluation.

State indices follow the Kronecker order of the per-user ``(b, h)`` pairs:
single-user ``x = b*K + h``; user pair ``x = ((b1*K + h1)*(L+1) + b2)*K + h2``.
Channel states are 0-based.  Pair actions are encoded ``a = 2*a1 + a2``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .channel_queue import (
    ArrivalModel,
    CostParams,
    FsmcModel,
    cost_queue,
    cost_tx,
    queue_transition_matrix,
)

__all__ = [
    "MdpModel",
    "StructureError",
    "ConvergenceError",
    "SingleUserLayout",
    "PairLayout",
    "assemble_single_user",
    "assemble_pair_nc_twrc",
    "value_iteration",
    "q_function",
    "q_table",
    "extract_policy",
    "check_policy_monotone",
    "extract_thresholds",
    "policy_evaluation_exact",
    "discounted_cost_moments",
    "objective_exact",
]


class StructureError(RuntimeError):
    """A structural assumption (policy monotone in the queue state) does not hold."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MdpModel:
    """Finite discounted MDP over products of per-user (queue, channel) states.

    ``P`` has shape (A, S, S) and ``cost`` shape (S, A).  ``users`` keeps the
    per-user channel and arrival models so that trajectories can be simulated
    structurally; ``queue`` and ``chan`` give each state's per-user
    coordinates, shape (S, U).
    """

    P: np.ndarray
    cost: np.ndarray
    beta: float
    L: int
    K: int
    users: tuple
    relay_cost: float = 0.0
    costs: CostParams | None = None

    def __post_init__(self):
        A, S, S2 = self.P.shape
        if S != S2 or self.cost.shape != (S, A):
            raise ValueError("inconsistent MDP dimensions")
        if np.any(np.abs(self.P.sum(axis=2) - 1.0) > 1e-10):
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.cost)) or np.any(self.cost < 0):
            raise ValueError("costs must be finite and nonnegative")
        U = len(self.users)
        coords = np.array(list(itertools.product(*[range(self.L + 1), range(self.K)] * U)), dtype=np.int64)
        object.__setattr__(self, "queue", coords[:, 0::2].copy())
        object.__setattr__(self, "chan", coords[:, 1::2].copy())
        bits = np.array(list(itertools.product((0, 1), repeat=U)), dtype=np.int64)
        object.__setattr__(self, "action_bits", bits)
        for arr in (self.P, self.cost, self.queue, self.chan, self.action_bits):
            arr.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.P.shape[1]

    @property
    def n_actions(self) -> int:
        return self.P.shape[0]

    @property
    def n_users(self) -> int:
        return len(self.users)

    def state_index(self, *coords: int) -> int:
        """Index of ``(b1, h1[, b2, h2])``."""
        x = 0
        for i, c in enumerate(coords):
            radix = self.L + 1 if i % 2 == 0 else self.K
            if not 0 <= c < radix:
                raise ValueError(f"coordinate {c} out of range")
            x = x * radix + c
        return x


def _assemble(users, costs: CostParams, relay_cost: float) -> MdpModel:
    L = costs.L
    Ks = {fsmc.K for fsmc, _ in users}
    if len(Ks) != 1:
        raise ValueError("all users must share the number of channel states")
    K = Ks.pop()
    # per-user factors, indexed by the user's own action
    trans, cst = [], []
    for fsmc, arrivals in users:
        trans.append([np.kron(queue_transition_matrix(a, arrivals, L), fsmc.transition) for a in (0, 1)])
        cst.append(np.array([
            [cost_queue(b, a, arrivals, costs.w, L) + cost_tx(h, a, costs.pb_bar, fsmc) for a in (0, 1)]
            for b in range(L + 1) for h in range(K)
        ]))
    U = len(users)
    S = ((L + 1) * K) ** U
    A = 2 ** U
    P = np.empty((A, S, S))
    cost = np.zeros((S, A))
    for a, bits in enumerate(itertools.product((0, 1), repeat=U)):
        M = np.ones((1, 1))
        c = np.zeros(1)
        for u, bit in enumerate(bits):
            M = np.kron(M, trans[u][bit])
            c = np.add.outer(c, cst[u][:, bit]).ravel()
        P[a] = M
        cost[:, a] = c + (relay_cost if any(bits) else 0.0)
    return MdpModel(P, cost, costs.beta, L, K, tuple(users), relay_cost, costs)


def assemble_single_user(fsmc: FsmcModel, arrivals: ArrivalModel, costs: CostParams) -> MdpModel:
    return _assemble([(fsmc, arrivals)], costs, 0.0)


def assemble_pair_nc_twrc(fsmc1, fsmc2, arrivals1, arrivals2, costs: CostParams, relay_cost: float = 1.0) -> MdpModel:
    """Two users sharing a network-coding relay.

    A relay broadcast costs ``relay_cost`` once whenever either queue
    transmits; two simultaneous packets are XORed into one broadcast.
    """
    return _assemble([(fsmc1, arrivals1), (fsmc2, arrivals2)], costs, relay_cost)


# ---------------------------------------------------------------------------
# dynamic programming


def q_table(mdp: MdpModel, V: np.ndarray, beta: float | None = None) -> np.ndarray:
    """All Q values, shape (S, A)."""
    beta = mdp.beta if beta is None else beta
    cont = np.einsum("asj,j->sa", mdp.P, V)
    return mdp.cost + beta * cont


def q_function(mdp: MdpModel, V: np.ndarray, x: int, a: int, beta: float | None = None) -> float:
    beta = mdp.beta if beta is None else beta
    return float(mdp.cost[x, a] + beta * mdp.P[a, x] @ V)


def value_iteration(
    mdp: MdpModel,
    beta: float | None = None,
    epsilon: float = 1e-4,
    max_iter: int = 10**6,
    on_sweep: Callable[[int, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, int]:
    """Bellman sweeps from V=0 until the sup-norm change is at most ``epsilon``.

    Returns the last iterate and the number of sweeps. ``on_sweep(n, V)`` is
    called after every sweep with the new iterate.
    """
    beta = mdp.beta if beta is None else beta
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    V = np.zeros(mdp.n_states)
    for n in range(1, max_iter + 1):
        V_new = q_table(mdp, V, beta).min(axis=1)
        if on_sweep is not None:
            on_sweep(n, V_new)
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if delta <= epsilon:
            return V, n
    raise ConvergenceError(f"value iteration did not reach epsilon={epsilon} in {max_iter} sweeps")


def extract_policy(mdp: MdpModel, V: np.ndarray, beta: float | None = None, tie_tol: float = 1e-12) -> np.ndarray:
    """Greedy policy w.r.t. ``V``; among (near-)tied actions the lowest index wins (idle first)."""
    Q = q_table(mdp, V, beta)
    qmin = Q.min(axis=1, keepdims=True)
    near = Q <= qmin + tie_tol * (1.0 + np.abs(qmin))
    return np.argmax(near, axis=1)


def policy_evaluation_exact(mdp: MdpModel, policy, beta: float | None = None) -> np.ndarray:
    """Solve V = c_theta + beta P_theta V for a deterministic policy."""
    beta = mdp.beta if beta is None else beta
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    policy = np.asarray(policy, dtype=np.int64)
    rows = np.arange(mdp.n_states)
    P_pol = mdp.P[policy, rows, :]
    c_pol = mdp.cost[rows, policy]
    M = np.eye(mdp.n_states) - beta * P_pol
    V = np.linalg.solve(M, c_pol)
    # one refinement step keeps the residual near machine precision for large costs
    V += np.linalg.solve(M, c_pol - M @ V)
    resid = np.max(np.abs(M @ V - c_pol))
    if not np.isfinite(resid) or resid > 1e-10 * max(1.0, np.max(np.abs(c_pol))):
        raise np.linalg.LinAlgError(f"policy evaluation residual too large: {resid:.3e}")
    return V


def discounted_cost_moments(mdp: MdpModel, policy, beta: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the infinite-horizon discounted cost from every state.

    With G = c(x) + beta G', the second moment solves
    (I - beta^2 P) M = c^2 + 2 beta c (P V).
    """
    beta = mdp.beta if beta is None else beta
    policy = np.asarray(policy, dtype=np.int64)
    rows = np.arange(mdp.n_states)
    P_pol = mdp.P[policy, rows, :]
    c_pol = mdp.cost[rows, policy]
    V = policy_evaluation_exact(mdp, policy, beta)
    rhs = c_pol**2 + 2 * beta * c_pol * (P_pol @ V)
    M2 = np.linalg.solve(np.eye(mdp.n_states) - beta**2 * P_pol, rhs)
    return V, np.maximum(M2 - V**2, 0.0)


# ---------------------------------------------------------------------------
# threshold layouts


class SingleUserLayout:
    """Threshold per channel state: ``theta[h]``; transmit iff ``b >= theta[h]``."""

    kind = "single"

    def __init__(self, L: int, K: int):
        self.L, self.K = L, K
        self.dim = K
        self.upper = np.full(K, L, dtype=np.int64)

    def policy(self, mdp: MdpModel, theta) -> np.ndarray:
        theta = np.asarray(theta)
        b, h = mdp.queue[:, 0], mdp.chan[:, 0]
        return (b >= theta[h]).astype(np.int64)

    def monotone_lines(self, mdp: MdpModel):
        """Yield (layout index or None, user, state indices ordered by the user's queue)."""
        for h in range(self.K):
            yield h, 0, np.array([mdp.state_index(b, h) for b in range(self.L + 1)])

    def labels(self) -> list[str]:
        return [f"h{h}" for h in range(self.K)]


class PairLayout:
    """NC-TWRC user pair: one threshold per queue per other-coordinate triple.

    Queue 1's thresholds are indexed by ``(h1, b2, h2)`` and queue 2's by
    ``(b1, h1, h2)``, with the other user's occupancy restricted to
    ``1..L`` (K*L*K entries per queue).  An empty partner queue reuses the
    occupancy-1 entry.
    """

    kind = "pair"

    def __init__(self, L: int, K: int):
        self.L, self.K = L, K
        self.per_queue = K * L * K
        self.dim = 2 * self.per_queue
        self.upper = np.full(self.dim, L, dtype=np.int64)

    def index_q1(self, h1, b2, h2):
        return (h1 * self.L + (np.maximum(b2, 1) - 1)) * self.K + h2

    def index_q2(self, b1, h1, h2):
        return self.per_queue + ((np.maximum(b1, 1) - 1) * self.K + h1) * self.K + h2

    def policy(self, mdp: MdpModel, theta) -> np.ndarray:
        theta = np.asarray(theta)
        b1, b2 = mdp.queue[:, 0], mdp.queue[:, 1]
        h1, h2 = mdp.chan[:, 0], mdp.chan[:, 1]
        a1 = b1 >= theta[self.index_q1(h1, b2, h2)]
        a2 = b2 >= theta[self.index_q2(b1, h1, h2)]
        return (2 * a1 + a2).astype(np.int64)

    def monotone_lines(self, mdp: MdpModel):
        L, K = self.L, self.K
        for h1, b2, h2 in itertools.product(range(K), range(L + 1), range(K)):
            idx = int(self.index_q1(h1, b2, h2)) if b2 >= 1 else None
            yield idx, 0, np.array([mdp.state_index(b1, h1, b2, h2) for b1 in range(L + 1)])
        for b1, h1, h2 in itertools.product(range(L + 1), range(K), range(K)):
            idx = int(self.index_q2(b1, h1, h2)) if b1 >= 1 else None
            yield idx, 1, np.array([mdp.state_index(b1, h1, b2, h2) for b2 in range(L + 1)])

    def labels(self) -> list[str]:
        L, K = self.L, self.K
        q1 = [f"q1_h1{h1}_b2{b2}_h2{h2}" for h1 in range(K) for b2 in range(1, L + 1) for h2 in range(K)]
        q2 = [f"q2_b1{b1}_h1{h1}_h2{h2}" for b1 in range(1, L + 1) for h1 in range(K) for h2 in range(K)]
        return q1 + q2


def make_layout(mdp: MdpModel):
    return SingleUserLayout(mdp.L, mdp.K) if mdp.n_users == 1 else PairLayout(mdp.L, mdp.K)


def check_policy_monotone(mdp: MdpModel, policy, layout=None) -> list[tuple]:
    """Return every (user, state line) where a user's action decreases as its own queue grows."""
    layout = layout or make_layout(mdp)
    policy = np.asarray(policy)
    bad = []
    for _, user, line in layout.monotone_lines(mdp):
        acts = mdp.action_bits[policy[line], user]
        if np.any(np.diff(acts) < 0):
            bad.append((user, line.tolist(), acts.tolist()))
    return bad


def extract_thresholds(mdp: MdpModel, policy, layout=None) -> np.ndarray:
    """Smallest own-queue occupancy at which each queue transmits.

    Lines where the queue never transmits are clamped to ``L`` so that the
    threshold stays inside {0..L}; the induced threshold policy then still
    transmits at a full queue.
    """
    layout = layout or make_layout(mdp)
    bad = check_policy_monotone(mdp, policy, layout)
    if bad:
        raise StructureError(f"policy is not monotone in the queue state on {len(bad)} line(s); first: {bad[0]}")
    theta = np.empty(layout.dim, dtype=np.int64)
    policy = np.asarray(policy)
    for idx, user, line in layout.monotone_lines(mdp):
        if idx is None:
            continue
        acts = mdp.action_bits[policy[line], user]
        on = np.flatnonzero(acts)
        theta[idx] = on[0] if on.size else mdp.L
    return theta


def objective_exact(mdp: MdpModel, theta, beta: float | None = None, layout=None) -> float:
    """Sum over initial states of the discounted cost of the threshold policy."""
    layout = layout or make_layout(mdp)
    return float(policy_evaluation_exact(mdp, layout.policy(mdp, theta), beta).sum())


def threshold_box_iter(upper: Sequence[int]):
    return itertools.product(*[range(int(u) + 1) for u in upper])
