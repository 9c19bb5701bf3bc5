"""Stochastic approximation over integer threshold vectors.

Three gradient estimators drive the same projected iteration
``theta <- clip(theta - a_n * g(theta))``:

* ``dspsa``: two measurements at the unit-cube neighbours ``p + (1 +- delta)/2``;
* ``lnatural``: D+1 measurements along the simplex of the piecewise linear
  interpolation, giving one of its subgradients;
* ``cspsa``: two measurements at randomly rounded points ``theta +- c_n delta``.

The cube anchor ``p`` is ``floor(theta)`` except on the upper face of the box,
where it is ``upper - 1`` so that every queried point stays feasible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .convexity import pli_simplex

__all__ = [
    "METHODS",
    "StepSchedule",
    "SaTrace",
    "step_size",
    "perturbation_size",
    "round_nearest",
    "project_random_round",
    "dspsa_gradient",
    "lnatural_subgradient",
    "cspsa_gradient",
    "gradient",
    "calibrate_a",
    "run_sa",
    "CalibrationError",
    "attach_oracle",
]

METHODS = ("dspsa", "lnatural", "cspsa")


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepSchedule:
    A: float
    B: float = 47.5
    alpha: float = 0.602
    C: float = 1.0
    rho: float = 0.101

    def __post_init__(self):
        if self.A < 0 or self.B < 0:
            raise ValueError("A and B must be nonnegative")
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0.5, 1] for the standard step-size conditions")
        if self.C <= 0 or not 0 < self.rho < self.alpha:
            raise ValueError("need C > 0 and 0 < rho < alpha")


def step_size(n: int, schedule: StepSchedule) -> float:
    if n < 1:
        raise ValueError("iteration index starts at 1")
    return schedule.A / (schedule.B + n) ** schedule.alpha


def perturbation_size(n: int, schedule: StepSchedule) -> float:
    if n < 1:
        raise ValueError("iteration index starts at 1")
    return schedule.C / n**schedule.rho


def round_nearest(x) -> np.ndarray:
    """Nearest integer with halves rounded down."""
    return np.ceil(np.asarray(x, dtype=float) - 0.5).astype(np.int64)


def _anchor(theta_real, upper) -> np.ndarray:
    return np.minimum(np.floor(theta_real), np.maximum(upper - 1, 0)).astype(np.int64)


def _draw_delta(rng: np.random.Generator, D: int) -> np.ndarray:
    return rng.integers(0, 2, size=D) * 2 - 1


def project_random_round(theta_real, rng: np.random.Generator) -> np.ndarray:
    """Round each coordinate up with probability equal to its fractional part."""
    t = np.asarray(theta_real, dtype=float)
    lo = np.floor(t)
    frac = t - lo
    up = rng.random(t.shape) < frac
    return (lo + up).astype(np.int64)


def dspsa_gradient(est, theta_real, rng: np.random.Generator, upper, delta=None) -> np.ndarray:
    upper = np.asarray(upper)
    p = _anchor(theta_real, upper)
    delta = _draw_delta(rng, p.size) if delta is None else np.asarray(delta)
    plus = np.clip(p + (1 + delta) // 2, 0, upper)
    minus = np.clip(p + (1 - delta) // 2, 0, upper)
    diff = est(plus) - est(minus)
    return diff / delta


def lnatural_subgradient(est, theta_real, upper) -> np.ndarray:
    """Subgradient of the interpolated objective from D+1 measurements along the simplex path."""
    p, order, _ = pli_simplex(theta_real, upper)
    g = np.empty(p.size)
    pt = p.copy()
    prev = est(pt)
    for d in order:
        pt[d] += 1
        cur = est(pt)
        g[d] = cur - prev
        prev = cur
    return g


def cspsa_gradient(est, theta_real, n: int, schedule: StepSchedule, rng: np.random.Generator, upper,
                   perturb: str = "scaled", delta=None) -> np.ndarray:
    """Two-point estimate with randomized rounding of the perturbed points.

    ``perturb="scaled"`` queries ``theta +- c_n delta``; ``"unit"`` queries
    ``theta +- delta``.  Both divide by ``2 c_n delta``.
    """
    upper = np.asarray(upper)
    t = np.asarray(theta_real, dtype=float)
    delta = _draw_delta(rng, t.size) if delta is None else np.asarray(delta)
    c = perturbation_size(n, schedule)
    if perturb == "scaled":
        shift = c * delta
    elif perturb == "unit":
        shift = delta.astype(float)
    else:
        raise ValueError(f"unknown perturbation mode {perturb!r}")
    plus = project_random_round(np.clip(t + shift, 0, upper), rng)
    minus = project_random_round(np.clip(t - shift, 0, upper), rng)
    diff = est(plus) - est(minus)
    return diff / (2.0 * c * delta)


def gradient(method: str, est, theta_real, n: int, schedule: StepSchedule, rng, upper,
             perturb: str = "scaled") -> np.ndarray:
    if method == "dspsa":
        return dspsa_gradient(est, theta_real, rng, upper)
    if method == "lnatural":
        return lnatural_subgradient(est, theta_real, upper)
    if method == "cspsa":
        return cspsa_gradient(est, theta_real, n, schedule, rng, upper, perturb)
    raise ValueError(f"unknown method {method!r}")


def calibrate_a(est, theta0, method: str, upper, B: float = 47.5, alpha: float = 0.602,
                target_step: float = 0.1, n_rep: int = 100, seed: int = 0, C: float = 1.0,
                rho: float = 0.101, perturb: str = "scaled") -> float:
    """Choose A so that the first step has length ``target_step`` on average.

    The gradient norm at ``theta0`` is averaged over ``n_rep`` independent
    draws; CSPSA draws use the first-iteration perturbation size.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xCA1,)))
    sched = StepSchedule(1.0, B, alpha, C, rho)
    t0 = np.clip(np.asarray(theta0, dtype=float), 0, upper)
    norms = [np.linalg.norm(gradient(method, est, t0, 1, sched, rng, upper, perturb)) for _ in range(n_rep)]
    g = float(np.mean(norms))
    if not g > 0 or not np.isfinite(g):
        raise CalibrationError(f"gradient norm estimate is {g}; cannot calibrate the step size")
    return target_step * (B + 1) ** alpha / g


@dataclass
class SaTrace:
    """Per-iteration record; row ``n = 0`` holds the starting point."""

    method: str
    theta: np.ndarray  # (N+1, D) real iterates
    step: np.ndarray
    grad_norm: np.ndarray
    meas_count: np.ndarray
    j_rounded: np.ndarray | None = None
    norm_err: np.ndarray | None = None
    norm_absolute: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n_iter(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def rounded(self) -> np.ndarray:
        return round_nearest(self.theta)

    @property
    def final(self) -> np.ndarray:
        return round_nearest(self.theta[-1])

    def auc(self) -> float:
        """Area under the normalized-error curve (sum over iterations 1..N)."""
        if self.norm_err is None:
            raise ValueError("trace has no oracle metrics")
        return float(np.sum(self.norm_err[1:]))


def run_sa(method: str, est, theta0, N: int, schedule: StepSchedule, seed: int, upper,
           oracle=None, perturb: str = "scaled") -> SaTrace:
    """Projected SA loop.

    ``oracle`` is an optional pair ``(theta_star, exact)`` with ``exact`` a
    noise-free objective on integer points; it adds ``J([theta_n])`` and the
    normalized distance to ``theta_star`` to the trace.  Oracle calls are not
    counted as measurements.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if N < 1:
        raise ValueError("need at least one iteration")
    upper = np.asarray(upper)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(METHODS.index(method),)))
    D = upper.size
    theta = np.clip(np.asarray(theta0, dtype=float), 0, upper)
    if theta.shape != (D,):
        raise ValueError(f"theta0 must have length {D}")
    thetas = np.empty((N + 1, D))
    steps = np.full(N + 1, np.nan)
    gnorm = np.full(N + 1, np.nan)
    meas = np.zeros(N + 1, dtype=np.int64)
    thetas[0] = theta
    for n in range(1, N + 1):
        before = est.n_calls
        g = gradient(method, est, theta, n, schedule, rng, upper, perturb)
        meas[n] = est.n_calls - before
        a = step_size(n, schedule)
        theta = np.clip(theta - a * g, 0, upper)
        thetas[n] = theta
        steps[n] = a
        gnorm[n] = np.linalg.norm(g)
    trace = SaTrace(method, thetas, steps, gnorm, meas, meta={"A": schedule.A, "B": schedule.B,
                                                              "alpha": schedule.alpha, "seed": seed})
    if oracle is not None:
        attach_oracle(trace, *oracle)
    return trace


def attach_oracle(trace: SaTrace, theta_star, exact) -> SaTrace:
    """Fill ``j_rounded`` and ``norm_err``; the error is absolute if the start equals ``theta_star``."""
    theta_star = np.asarray(theta_star, dtype=float)
    dist = np.linalg.norm(trace.theta - theta_star, axis=1)
    if dist[0] == 0:
        trace.norm_err = dist
        trace.norm_absolute = True
    else:
        trace.norm_err = dist / dist[0]
        trace.norm_absolute = False
    cache: dict[bytes, float] = {}
    vals = np.empty(trace.theta.shape[0])
    for i, r in enumerate(trace.rounded):
        k = r.tobytes()
        if k not in cache:
            cache[k] = float(exact(r))
        vals[i] = cache[k]
    trace.j_rounded = vals
    return trace
