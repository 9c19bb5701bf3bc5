"""Numerical checks of discrete convexity and the structural properties of the DP.

Every check returns a :class:`ConvexityReport` instead of raising, so that a
violation carries a concrete witness.  Tolerances are relative:
``tol * (1 + |magnitude|)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .mdp import MdpModel, q_table

__all__ = [
    "ConvexityReport",
    "LatticeFunction",
    "EnumerationCapError",
    "check_submodular_q",
    "check_monotone_convex_value",
    "check_phi_convex",
    "check_q_monotone",
    "check_separable_convex",
    "check_midpoint_lnatural",
    "pli_evaluate",
    "pli_simplex",
    "brute_force_min",
    "induction_suite",
]

DEFAULT_TOL = 1e-9
DEFAULT_CAP = 10**6


class EnumerationCapError(RuntimeError):
    pass


@dataclass
class ConvexityReport:
    prop: str
    passed: bool = True
    checked: int = 0
    worst_margin: float = np.inf
    witness: object = None
    sampled: bool = False
    notes: str = ""

    def record(self, margin: float, scale: float, tol: float, where) -> None:
        """``margin`` should be >= 0 when the inequality holds."""
        self.checked += 1
        slack = margin + tol * (1.0 + abs(scale))
        if margin < self.worst_margin:
            self.worst_margin = float(margin)
            if slack < 0 or self.passed:
                self.witness = where
        if slack < 0 and self.passed:
            self.passed = False
            self.witness = where

    def merge(self, other: "ConvexityReport") -> "ConvexityReport":
        out = ConvexityReport(self.prop, self.passed and other.passed, self.checked + other.checked,
                              min(self.worst_margin, other.worst_margin), sampled=self.sampled or other.sampled)
        if not self.passed:
            out.witness = self.witness
        elif not other.passed:
            out.witness = other.witness
        else:
            out.witness = self.witness if self.worst_margin <= other.worst_margin else other.witness
        return out

    def summary(self) -> str:
        state = "pass" if self.passed else "FAIL"
        extra = " (sampled)" if self.sampled else ""
        s = f"{self.prop}: {state} over {self.checked} checks{extra}, worst margin {self.worst_margin:.6g}"
        if not self.passed:
            s += f", witness {self.witness}"
        return s

    def to_dict(self) -> dict:
        w = self.witness
        if isinstance(w, np.ndarray):
            w = w.tolist()
        return {
            "property": self.prop,
            "passed": bool(self.passed),
            "checked": int(self.checked),
            "worst_margin": None if not np.isfinite(self.worst_margin) else float(self.worst_margin),
            "witness": repr(w) if w is not None else None,
            "sampled": bool(self.sampled),
        }


class LatticeFunction:
    """Deterministic function on the integer box ``{0..upper_d}`` with memoisation."""

    def __init__(self, func: Callable[[np.ndarray], float], upper: Sequence[int]):
        self.func = func
        self.upper = np.asarray(upper, dtype=np.int64)
        self._cache: dict[bytes, float] = {}

    @classmethod
    def from_table(cls, table: np.ndarray) -> "LatticeFunction":
        table = np.asarray(table, dtype=float)
        return cls(lambda t: float(table[tuple(t)]), np.array(table.shape) - 1)

    @property
    def dim(self) -> int:
        return self.upper.size

    @property
    def size(self) -> int:
        return int(np.prod(self.upper + 1, dtype=float))

    def in_box(self, theta) -> bool:
        theta = np.asarray(theta)
        return bool(np.all(theta >= 0) and np.all(theta <= self.upper))

    def __call__(self, theta) -> float:
        t = np.asarray(theta, dtype=np.int64)
        if not self.in_box(t):
            raise ValueError(f"point {t.tolist()} outside the box")
        key = t.tobytes()
        val = self._cache.get(key)
        if val is None:
            val = float(self.func(t))
            self._cache[key] = val
        return val

    def table(self, cap: int = DEFAULT_CAP) -> np.ndarray:
        if self.size > cap:
            raise EnumerationCapError(f"box has {self.size} points, cap is {cap}")
        T = np.empty(tuple(self.upper + 1))
        for idx in np.ndindex(T.shape):
            T[idx] = self(np.array(idx))
        return T


def _points(fn: LatticeFunction, cap: int, n_sample: int, rng):
    if fn.size <= cap:
        return itertools.product(*[range(u + 1) for u in fn.upper]), False
    pts = (rng.integers(0, fn.upper + 1) for _ in range(n_sample))
    return pts, True


# ---------------------------------------------------------------------------
# MDP structure


def check_submodular_q(mdp: MdpModel, V: np.ndarray, tol: float = DEFAULT_TOL, Q: np.ndarray | None = None) -> ConvexityReport:
    """Decreasing differences of Q in (own queue, own action), other coordinates fixed."""
    Q = q_table(mdp, V) if Q is None else Q
    rep = ConvexityReport("Q submodular in (b_i, a_i)")
    for u in range(mdp.n_users):
        for a in range(mdp.n_actions):
            if mdp.action_bits[a, u] != 0:
                continue
            a_on = a + (1 << (mdp.n_users - 1 - u))
            for x in range(mdp.n_states):
                if mdp.queue[x, u] == mdp.L:
                    continue
                coords = _coords(mdp, x)
                coords[2 * u] += 1
                xu = mdp.state_index(*coords)
                lhs = Q[xu, a] + Q[x, a_on]
                rhs = Q[x, a] + Q[xu, a_on]
                rep.record(lhs - rhs, max(abs(lhs), abs(rhs)), tol, (u, x, a))
    return rep


def check_q_monotone(mdp: MdpModel, V: np.ndarray, tol: float = DEFAULT_TOL, Q: np.ndarray | None = None) -> ConvexityReport:
    """Q nondecreasing in each user's own queue for every action."""
    Q = q_table(mdp, V) if Q is None else Q
    rep = ConvexityReport("Q nondecreasing in b_i")
    for u in range(mdp.n_users):
        for x in range(mdp.n_states):
            if mdp.queue[x, u] == mdp.L:
                continue
            coords = _coords(mdp, x)
            coords[2 * u] += 1
            xu = mdp.state_index(*coords)
            for a in range(mdp.n_actions):
                rep.record(Q[xu, a] - Q[x, a], Q[xu, a], tol, (u, x, a))
    return rep


def _coords(mdp: MdpModel, x: int) -> list[int]:
    out = []
    for u in range(mdp.n_users):
        out += [int(mdp.queue[x, u]), int(mdp.chan[x, u])]
    return out


def check_monotone_convex_value(V, tol: float = DEFAULT_TOL) -> tuple[ConvexityReport, ConvexityReport]:
    """``V`` given as a (L+1, K) array: nondecreasing and convex along the queue axis for every column."""
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    mono = ConvexityReport("V nondecreasing in b")
    conv = ConvexityReport("V convex in b")
    L = V.shape[0] - 1
    for h in range(V.shape[1]):
        for b in range(L):
            mono.record(V[b + 1, h] - V[b, h], V[b + 1, h], tol, (b, h))
        for b in range(1, L):
            d2 = V[b + 1, h] + V[b - 1, h] - 2 * V[b, h]
            conv.record(d2, V[b, h], tol, (b, h))
    return mono, conv


def _phi(mdp: MdpModel, V: np.ndarray) -> np.ndarray:
    """phi[y+1, f, h'] for y in -1..L: overflow penalty plus discounted continuation."""
    (fsmc, arrivals), = mdp.users
    L, K = mdp.L, mdp.K
    if mdp.costs is None:
        raise ValueError("model carries no cost parameters")
    w = mdp.costs.w
    Vb = V.reshape(L + 1, K)
    F = arrivals.pmf.size
    out = np.empty((L + 2, F, K))
    for y in range(-1, L + 1):
        for f in range(F):
            yp = max(y, 0)
            out[y + 1, f] = w * max(yp + f - L, 0) + mdp.beta * Vb[min(yp + f, L)]
    return out


def check_phi_convex(mdp: MdpModel, V: np.ndarray, tol: float = DEFAULT_TOL) -> tuple[ConvexityReport, ConvexityReport]:
    """Convexity and monotonicity in y of the post-decision cost-to-go (single-user models)."""
    if mdp.n_users != 1:
        raise ValueError("phi is defined for single-user models")
    phi = _phi(mdp, V)
    conv = ConvexityReport("phi convex in y")
    mono = ConvexityReport("phi nondecreasing in y")
    n = phi.shape[0]
    for f in range(phi.shape[1]):
        for h in range(phi.shape[2]):
            col = phi[:, f, h]
            for i in range(n - 1):
                mono.record(col[i + 1] - col[i], col[i + 1], tol, (i - 1, f, h))
            for i in range(1, n - 1):
                conv.record(col[i + 1] + col[i - 1] - 2 * col[i], col[i], tol, (i - 1, f, h))
    return conv, mono


def induction_suite(mdp: MdpModel, every: int = 10, epsilon: float = 1e-4, tol: float = DEFAULT_TOL,
                   max_iter: int = 10**6) -> dict[str, ConvexityReport]:
    """Run value iteration and check both inductive steps on every ``every``-th sweep.

    Step A: a nondecreasing convex V gives a convex nondecreasing phi, hence a
    submodular Q that is nondecreasing in b.  Step B: such a Q gives a
    nondecreasing convex V = min_a Q.  Both the premises and the conclusions
    are checked, so a premise failure is visible separately.
    """
    from .mdp import value_iteration

    if mdp.n_users != 1:
        raise ValueError("the induction suite applies to single-user models")
    names = ["V nondecreasing in b", "V convex in b", "phi convex in y", "phi nondecreasing in y",
             "Q submodular in (b_i, a_i)", "Q nondecreasing in b_i", "V' nondecreasing in b", "V' convex in b"]
    reports = {k: ConvexityReport(k) for k in names}
    sweeps: list[int] = []
    prev = {"V": np.zeros(mdp.n_states)}

    def on_sweep(n, V_new):
        V = prev["V"]
        prev["V"] = V_new
        if (n - 1) % every:
            return
        sweeps.append(n - 1)
        shape = (mdp.L + 1, mdp.K)
        parts = list(check_monotone_convex_value(V.reshape(shape), tol))
        parts += list(check_phi_convex(mdp, V, tol))
        Q = q_table(mdp, V)
        parts.append(check_submodular_q(mdp, V, tol, Q=Q))
        parts.append(check_q_monotone(mdp, V, tol, Q=Q))
        m2, c2 = check_monotone_convex_value(Q.min(axis=1).reshape(shape), tol)
        m2.prop, c2.prop = "V' nondecreasing in b", "V' convex in b"
        parts += [m2, c2]
        for r in parts:
            reports[r.prop] = reports[r.prop].merge(r)
            reports[r.prop].prop = r.prop

    value_iteration(mdp, epsilon=epsilon, max_iter=max_iter, on_sweep=on_sweep)
    for r in reports.values():
        r.notes = f"sweeps {sweeps[0]}..{sweeps[-1]} every {every}"
    return reports


# ---------------------------------------------------------------------------
# lattice functions


def check_separable_convex(fn: LatticeFunction, tol: float = DEFAULT_TOL, cap: int = DEFAULT_CAP,
                           n_sample: int = 10000, seed: int = 0) -> ConvexityReport:
    """Discrete convexity along every coordinate line: J(t+e_d) + J(t-e_d) >= 2 J(t)."""
    rng = np.random.default_rng(seed)
    pts, sampled = _points(fn, cap, n_sample, rng)
    rep = ConvexityReport("separable convex", sampled=sampled)
    for p in pts:
        t = np.array(p, dtype=np.int64)
        for d in range(fn.dim):
            if t[d] == 0 or t[d] == fn.upper[d]:
                continue
            up, dn = t.copy(), t.copy()
            up[d] += 1
            dn[d] -= 1
            mid = fn(t)
            rep.record(fn(up) + fn(dn) - 2 * mid, mid, tol, (t.tolist(), d))
    return rep


def check_midpoint_lnatural(fn: LatticeFunction, tol: float = DEFAULT_TOL, cap: int = DEFAULT_CAP,
                            n_sample: int = 10000, seed: int = 0) -> ConvexityReport:
    """Discrete midpoint convexity f(x)+f(y) >= f(floor((x+y)/2)) + f(ceil((x+y)/2)) over pairs."""
    rng = np.random.default_rng(seed)
    n = fn.size
    rep = ConvexityReport("midpoint L-natural convex")
    if n * n <= cap:
        pts = [np.array(p, dtype=np.int64) for p in itertools.product(*[range(u + 1) for u in fn.upper])]
        pairs = itertools.combinations(pts, 2)
    else:
        rep.sampled = True
        pairs = ((rng.integers(0, fn.upper + 1), rng.integers(0, fn.upper + 1)) for _ in range(n_sample))
    for x, y in pairs:
        s = x + y
        lo, hi = s // 2, s - s // 2
        lhs = fn(x) + fn(y)
        rhs = fn(lo) + fn(hi)
        rep.record(lhs - rhs, max(abs(lhs), abs(rhs)), tol, (x.tolist(), y.tolist()))
    return rep


def pli_simplex(theta_real, upper) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Base point, descending order of fractional parts, and fractional parts.

    The base is ``floor(theta)`` except on the upper face, where it steps back
    one unit so that ``base + 1`` stays in the box.  Ties in the fractional
    parts keep ascending coordinate order.
    """
    t = np.asarray(theta_real, dtype=float)
    upper = np.asarray(upper)
    if np.any(t < 0) or np.any(t > upper):
        raise ValueError("point outside the box")
    p = np.minimum(np.floor(t), np.maximum(upper - 1, 0)).astype(np.int64)
    q = t - p
    order = np.argsort(-q, kind="stable")
    return p, order, q


def pli_evaluate(fn: LatticeFunction, theta_real) -> float:
    """Piecewise linear (Lovász) interpolation of ``fn`` at a real point."""
    p, order, q = pli_simplex(theta_real, fn.upper)
    D = p.size
    qs = q[order]
    if not np.any(qs):
        return fn(p)
    val = (1.0 - qs[0]) * fn(p)
    pt = p.copy()
    for d in range(D):
        pt[order[d]] += 1
        wgt = (qs[d] - qs[d + 1]) if d + 1 < D else qs[d]
        if wgt != 0.0:
            val += wgt * fn(pt)
    return float(val)


def brute_force_min(fn: LatticeFunction, cap: int = DEFAULT_CAP) -> tuple[np.ndarray, float]:
    """Exhaustive minimum; ties go to the lexicographically smallest point."""
    if fn.size > cap:
        raise EnumerationCapError(f"box has {fn.size} points, cap is {cap}")
    best, best_val = None, np.inf
    for p in itertools.product(*[range(u + 1) for u in fn.upper]):
        v = fn(np.array(p))
        if v < best_val:
            best, best_val = p, v
    return np.array(best, dtype=np.int64), float(best_val)
