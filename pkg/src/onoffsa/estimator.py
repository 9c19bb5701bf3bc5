"""Noisy objective measurements for threshold vectors.

Two estimators share one interface (``est(theta) -> float`` with a call
counter):

* :class:`SimulationEstimator` simulates trajectories from every initial
  state, ``n_rep`` times each, and averages the summed discounted costs over
  repetitions.
* :class:`GaussianSurrogateEstimator` returns the exact objective plus a
  Gaussian error whose variance equals the variance the simulation estimator
  would have.  It is meant for scenarios too large to simulate at every
  measurement.

Random streams are derived from ``numpy.random.SeedSequence`` keyed by the
root seed, the model index and a per-estimator call counter, then one 32-bit
seed per (initial state, repetition) cell.  Results therefore do not depend
on evaluation order inside a call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
from scipy.linalg.blas import dger

from .mdp import MdpModel, make_layout, policy_evaluation_exact

__all__ = [
    "ScenarioPart",
    "Scenario",
    "EstimatorConfig",
    "SimulationEstimator",
    "GaussianSurrogateEstimator",
    "ExactEstimator",
    "simulate_episode",
    "estimate_j",
    "estimate_j_with_se",
    "make_estimator",
]


@dataclass(frozen=True)
class ScenarioPart:
    mdp: MdpModel
    layout: object
    offset: int

    @property
    def dim(self) -> int:
        return self.layout.dim


class Scenario:
    """Independent MDPs whose thresholds are stacked into one vector."""

    def __init__(self, mdps: Sequence[MdpModel], name: str = "custom", layouts=None):
        parts, off = [], 0
        layouts = layouts or [make_layout(m) for m in mdps]
        for m, lay in zip(mdps, layouts):
            parts.append(ScenarioPart(m, lay, off))
            off += lay.dim
        if len({m.L for m in mdps}) != 1:
            raise ValueError("all models in a scenario must share the queue length")
        self.parts = tuple(parts)
        self.name = name
        self.dim = off
        self.upper = np.concatenate([p.layout.upper for p in parts])
        self.L = mdps[0].L

    def split(self, theta) -> list[np.ndarray]:
        theta = np.asarray(theta)
        if theta.shape != (self.dim,):
            raise ValueError(f"threshold vector must have length {self.dim}")
        return [theta[p.offset:p.offset + p.dim] for p in self.parts]

    def check_theta(self, theta) -> np.ndarray:
        t = np.asarray(theta)
        if t.shape != (self.dim,):
            raise ValueError(f"threshold vector must have length {self.dim}")
        if np.any(t < 0) or np.any(t > self.upper) or np.any(t != np.round(t)):
            raise ValueError("threshold vector must be integral and inside the box")
        return t.astype(np.int64)

    def objective_exact(self, theta) -> float:
        theta = self.check_theta(theta)
        total = 0.0
        for p, sub in zip(self.parts, self.split(theta)):
            total += float(policy_evaluation_exact(p.mdp, p.layout.policy(p.mdp, sub)).sum())
        return total

    @property
    def n_states(self) -> int:
        return sum(p.mdp.n_states for p in self.parts)


@dataclass(frozen=True)
class EstimatorConfig:
    n_rep: int = 100
    beta: float | None = None
    trunc_tol: float = 1e-4
    trunc_window: int = 5
    seed: int = 0
    # "ceiling": stop once beta^t times the largest one-step cost of the policy
    # is below trunc_tol; "realized": use the cost actually incurred.
    trunc_rule: str = "ceiling"

    def __post_init__(self):
        if self.n_rep < 1:
            raise ValueError("n_rep must be at least 1")
        if not self.trunc_tol > 0:
            raise ValueError("trunc_tol must be positive")
        if self.trunc_window < 1:
            raise ValueError("trunc_window must be at least 1")
        if self.trunc_rule not in ("ceiling", "realized"):
            raise ValueError(f"unknown truncation rule {self.trunc_rule!r}")
        if self.beta is not None and not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")


# ---------------------------------------------------------------------------
# simulation kernel


@numba.njit(cache=True)
def _draw(cdf, u):
    n = cdf.shape[0]
    for i in range(n - 1):
        if u < cdf[i]:
            return i
    return n - 1


@numba.njit(cache=True)
def _simulate_cells(c_pol, act, bits, queue, chan, arr_cdf, chan_cum, L, K,
                    beta, tol, window, t_max, ceiling, x0s, seeds):
    n_cells = x0s.shape[0]
    U = queue.shape[1]
    out = np.empty(n_cells)
    b = np.empty(U, np.int64)
    h = np.empty(U, np.int64)
    for cell in range(n_cells):
        np.random.seed(seeds[cell])
        x = x0s[cell]
        for u in range(U):
            b[u] = queue[x, u]
            h[u] = chan[x, u]
        acc = 0.0
        disc = 1.0
        below = 0
        t = 0
        while True:
            c = c_pol[x]
            acc += disc * c
            level = ceiling if ceiling >= 0.0 else c
            if disc * level < tol:
                below += 1
            else:
                below = 0
            if (below >= window and t >= 1) or t >= t_max:
                break
            a = act[x]
            for u in range(U):
                served = b[u] - bits[a, u]
                if served < 0:
                    served = 0
                f = _draw(arr_cdf[u], np.random.random())
                nb = served + f
                b[u] = nb if nb < L else L
                h[u] = _draw(chan_cum[u, h[u]], np.random.random())
            x = 0
            for u in range(U):
                x = (x * (L + 1) + b[u]) * K + h[u]
            disc *= beta
            t += 1
        out[cell] = acc
    return out


def _cdf(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p)
    c[-1] = 1.0
    return c


class _SimTables:
    """Policy-independent arrays for simulating one model."""

    def __init__(self, mdp: MdpModel):
        U = mdp.n_users
        F = max(a.pmf.size for _, a in mdp.users)
        self.arr_cdf = np.ones((U, F))
        self.chan_cum = np.empty((U, mdp.K, mdp.K))
        for u, (fsmc, arrivals) in enumerate(mdp.users):
            self.arr_cdf[u, :arrivals.pmf.size] = _cdf(arrivals.pmf)
            for k in range(mdp.K):
                self.chan_cum[u, k] = _cdf(fsmc.transition[k])
        self.queue = np.ascontiguousarray(mdp.queue)
        self.chan = np.ascontiguousarray(mdp.chan)
        self.bits = np.ascontiguousarray(mdp.action_bits)


def _horizon(c_hat: float, beta: float, cfg: EstimatorConfig) -> int:
    """Hard cap ``ceil(log(tol / (c_hat (1 - beta))) / log beta)`` on the episode length.

    At the cap ``beta^T c_hat / (1 - beta) <= tol / (1 - beta)``, so the dropped
    tail is at most ``beta tol / (1 - beta)^2`` per episode.  For ``beta`` near 1
    the cap binds before the consecutive-epoch rule does.
    """
    if beta == 0.0 or c_hat <= 0.0:
        return cfg.trunc_window
    r = cfg.trunc_tol / (c_hat * (1.0 - beta))
    if r >= 1.0:
        return cfg.trunc_window
    return max(cfg.trunc_window, int(math.ceil(math.log(r) / math.log(beta))))


def _run_part(part: ScenarioPart, tables: _SimTables, sub, x0s, seeds, cfg: EstimatorConfig) -> np.ndarray:
    mdp = part.mdp
    beta = mdp.beta if cfg.beta is None else cfg.beta
    act = part.layout.policy(mdp, sub).astype(np.int64)
    c_pol = mdp.cost[np.arange(mdp.n_states), act].copy()
    c_hat = float(c_pol.max())
    ceiling = c_hat if cfg.trunc_rule == "ceiling" else -1.0
    return _simulate_cells(c_pol, act, tables.bits, tables.queue, tables.chan, tables.arr_cdf,
                           tables.chan_cum, mdp.L, mdp.K, beta, cfg.trunc_tol, cfg.trunc_window,
                           _horizon(c_hat, beta, cfg), ceiling, np.asarray(x0s, np.int64),
                           np.asarray(seeds, np.uint32))


def _cell_seeds(root: int, part_index: int, key: int, n: int) -> np.ndarray:
    ss = np.random.SeedSequence(root, spawn_key=(part_index, key))
    return ss.generate_state(n, dtype=np.uint32)


def simulate_episode(mdp: MdpModel, theta, x0: int, seed: int, config: EstimatorConfig | None = None,
                     layout=None) -> float:
    """Discounted cost of one truncated trajectory from ``x0`` under the threshold policy."""
    cfg = config or EstimatorConfig()
    part = ScenarioPart(mdp, layout or make_layout(mdp), 0)
    if not 0 <= x0 < mdp.n_states:
        raise ValueError("initial state out of range")
    out = _run_part(part, _SimTables(mdp), np.asarray(theta), [x0], [seed & 0xFFFFFFFF], cfg)
    return float(out[0])


def _rep_totals(scenario: Scenario, theta, cfg: EstimatorConfig, key: int, tables=None) -> np.ndarray:
    """Per-repetition totals summed over initial states and models, shape (n_rep,)."""
    theta = scenario.check_theta(theta)
    tables = tables or [_SimTables(p.mdp) for p in scenario.parts]
    R = cfg.n_rep
    totals = np.zeros(R)
    for i, (part, sub) in enumerate(zip(scenario.parts, scenario.split(theta))):
        S = part.mdp.n_states
        x0s = np.repeat(np.arange(S), R)
        seeds = _cell_seeds(cfg.seed, i, key, S * R)
        G = _run_part(part, tables[i], sub, x0s, seeds, cfg).reshape(S, R)
        totals += G.sum(axis=0)
    return totals


def estimate_j(scenario: Scenario, theta, config: EstimatorConfig | None = None, key: int = 0) -> float:
    """Monte-Carlo objective: sum over initial states, averaged over repetitions."""
    cfg = config or EstimatorConfig()
    return float(_rep_totals(scenario, theta, cfg, key).mean())


def estimate_j_with_se(scenario: Scenario, theta, config: EstimatorConfig | None = None,
                       key: int = 0) -> tuple[float, float]:
    """Estimate and its empirical standard error across repetitions."""
    cfg = config or EstimatorConfig()
    tot = _rep_totals(scenario, theta, cfg, key)
    se = float(tot.std(ddof=1) / math.sqrt(tot.size)) if tot.size > 1 else float("nan")
    return float(tot.mean()), se


class SimulationEstimator:
    """Stateful wrapper: every call uses a fresh key, so calls are independent."""

    kind = "simulate"

    def __init__(self, scenario: Scenario, config: EstimatorConfig | None = None, stream: int = 0):
        self.scenario = scenario
        self.config = config or EstimatorConfig()
        self.stream = stream
        self.n_calls = 0
        self._tables = [_SimTables(p.mdp) for p in scenario.parts]

    def __call__(self, theta) -> float:
        key = (self.stream << 40) + self.n_calls
        self.n_calls += 1
        return float(_rep_totals(self.scenario, theta, self.config, key, self._tables).mean())


# ---------------------------------------------------------------------------
# exact moments and the Gaussian surrogate


class _PartMoments:
    """Exact mean and variance of the summed discounted cost for one model.

    A point far from the previous one is handled with two dense solves.  For
    nearby points (a few policy rows changed) the inverses of ``I - beta P``
    and ``I - beta^2 P`` are built once and then carried along with in-place
    rank-one updates, refreshed after ``refresh`` updates.
    """

    def __init__(self, part: ScenarioPart, beta: float, k_max: int = 16, refresh: int = 512):
        self.part = part
        self.beta = beta
        self.k_max = k_max
        self.refresh = refresh
        self.memo: dict[bytes, tuple[float, float]] = {}
        self.pol = None
        self.Ppol = None
        self.Minv = None
        self.Ninv = None
        self.n_updates = 0
        mdp = part.mdp
        self.rows = np.arange(mdp.n_states)
        self.eye = np.eye(mdp.n_states)

    def _reset(self, pol):
        self.pol = pol.copy()
        self.Ppol = self.part.mdp.P[pol, self.rows, :]
        self.Minv = self.Ninv = None
        self.n_updates = 0

    def _invert(self):
        self.Minv = np.linalg.inv(self.eye - self.beta * self.Ppol)
        self.Ninv = np.linalg.inv(self.eye - self.beta**2 * self.Ppol)
        self.n_updates = 0

    def _update(self, pol, changed):
        P = self.part.mdp.P
        for r in changed:
            new = P[pol[r], r, :]
            d = new - self.Ppol[r]
            nz = np.flatnonzero(d)
            for inv, s in ((self.Minv, -self.beta), (self.Ninv, -self.beta**2)):
                col = inv[:, r].copy()
                rowv = (s * d[nz]) @ inv[nz]
                # C-ordered inv: inv -= col rowv^T / den, done on the Fortran-ordered transpose
                dger(-1.0 / (1.0 + rowv[r]), rowv, col, a=inv.T, overwrite_a=1)
            self.Ppol[r] = new
            self.pol[r] = pol[r]
        self.n_updates += len(changed)

    def __call__(self, sub) -> tuple[float, float]:
        key = np.asarray(sub, dtype=np.int64).tobytes()
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        mdp, beta = self.part.mdp, self.beta
        pol = self.part.layout.policy(mdp, sub)
        if self.pol is None:
            self._reset(pol)
        else:
            changed = np.flatnonzero(pol != self.pol)
            if changed.size > self.k_max:
                self._reset(pol)
            elif changed.size:
                if self.Minv is None or self.n_updates + changed.size > self.refresh:
                    self._invert()
                self._update(pol, changed)
        c = mdp.cost[self.rows, pol]
        if self.Minv is not None:
            V = self.Minv @ c
            M2 = self.Ninv @ (c**2 + 2 * beta * c * (self.Ppol @ V))
        else:
            V = np.linalg.solve(self.eye - beta * self.Ppol, c)
            M2 = np.linalg.solve(self.eye - beta**2 * self.Ppol, c**2 + 2 * beta * c * (self.Ppol @ V))
        var = np.maximum(M2 - V**2, 0.0)
        out = (float(V.sum()), float(var.sum()))
        self.memo[key] = out
        return out


class ExactEstimator:
    """Noise-free objective with the estimator interface (for oracles and tests)."""

    kind = "exact"

    def __init__(self, scenario: Scenario, beta: float | None = None):
        self.scenario = scenario
        self.n_calls = 0
        self._moments = [_PartMoments(p, p.mdp.beta if beta is None else beta) for p in scenario.parts]

    def moments(self, theta) -> tuple[float, float]:
        theta = self.scenario.check_theta(theta)
        J = var = 0.0
        for m, sub in zip(self._moments, self.scenario.split(theta)):
            j, v = m(sub)
            J += j
            var += v
        return J, var

    def __call__(self, theta) -> float:
        self.n_calls += 1
        return self.moments(theta)[0]


class GaussianSurrogateEstimator(ExactEstimator):
    """Exact objective plus N(0, sum_x Var_x / n_rep) noise."""

    kind = "gaussian"

    def __init__(self, scenario: Scenario, config: EstimatorConfig | None = None, stream: int = 0):
        self.config = config or EstimatorConfig()
        super().__init__(scenario, self.config.beta)
        self.stream = stream

    def __call__(self, theta) -> float:
        J, var = self.moments(theta)
        ss = np.random.SeedSequence(self.config.seed, spawn_key=(1 << 20, self.stream, self.n_calls))
        z = np.random.default_rng(ss).standard_normal()
        self.n_calls += 1
        return J + math.sqrt(var / self.config.n_rep) * z


def make_estimator(kind: str, scenario: Scenario, config: EstimatorConfig | None = None, stream: int = 0):
    if kind == "simulate":
        return SimulationEstimator(scenario, config, stream)
    if kind == "gaussian":
        return GaussianSurrogateEstimator(scenario, config, stream)
    if kind == "exact":
        return ExactEstimator(scenario, None if config is None else config.beta)
    raise ValueError(f"unknown estimator kind {kind!r}")
