"""Physical-layer and queue models: FSMC channel, arrivals, Lindley dynamics, costs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "ArrivalModel",
    "FsmcModel",
    "CostParams",
    "lindley_update",
    "queue_transition_prob",
    "queue_transition_matrix",
    "build_fsmc",
    "cost_queue",
    "cost_tx",
    "erfc_inv",
]


@dataclass(frozen=True)
class ArrivalModel:
    """I.i.d. packet arrivals per epoch; ``pmf[f]`` is Pr(f packets arrive)."""

    pmf: np.ndarray

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=float)
        if pmf.ndim != 1 or pmf.size == 0:
            raise ValueError("pmf must be a non-empty 1-D array")
        if np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-12:
            raise ValueError("pmf must be nonnegative and sum to 1")
        pmf.setflags(write=False)
        object.__setattr__(self, "pmf", pmf)

    @classmethod
    def bernoulli(cls, p: float) -> "ArrivalModel":
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"Bernoulli probability out of range: {p}")
        return cls(np.array([1.0 - p, p]))

    @property
    def max_arrivals(self) -> int:
        return self.pmf.size - 1

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(self.pmf.size), self.pmf))

    def tail(self, n: int) -> float:
        """Pr(f >= n)."""
        if n <= 0:
            return 1.0
        return float(self.pmf[n:].sum())


@dataclass(frozen=True)
class FsmcModel:
    """K-state finite-state Markov channel.

    Channel states are 0-based here (``h = 0..K-1``), so state ``h`` covers
    the SNR interval ``[boundaries[h], boundaries[h+1])`` with an implicit
    upper boundary of infinity.  ``tx_snr`` is the SNR used when pricing a
    transmission: equal to ``boundaries`` except that the lowest state, whose
    lower boundary is 0, uses a positive floor.
    """

    boundaries: np.ndarray
    transition: np.ndarray
    stationary: np.ndarray
    tx_snr: np.ndarray
    avg_snr: float = 1.0
    doppler: float = 0.0
    frame_duration: float = 0.0

    def __post_init__(self):
        for name in ("boundaries", "transition", "stationary", "tx_snr"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        K = self.boundaries.size
        if self.transition.shape != (K, K) or self.stationary.shape != (K,):
            raise ValueError("inconsistent FSMC dimensions")
        if np.any(np.diff(self.boundaries) <= 0):
            raise ValueError("SNR boundaries must be strictly increasing")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1) > 1e-12):
            raise ValueError("transition matrix must be row-stochastic")
        if np.any(self.tx_snr <= 0):
            raise ValueError("transmission SNR must be positive in every state")

    @property
    def K(self) -> int:
        return self.boundaries.size

    @classmethod
    def from_matrix(cls, boundaries, transition, tx_snr=None) -> "FsmcModel":
        """Build a channel from an explicit transition matrix (stationary vector is solved for)."""
        P = np.asarray(transition, dtype=float)
        bounds = np.asarray(boundaries, dtype=float)
        tx = bounds if tx_snr is None else np.asarray(tx_snr, dtype=float)
        return cls(bounds, P, _stationary(P), tx)


@dataclass(frozen=True)
class CostParams:
    w: float = 4.0
    pb_bar: float = 0.01
    L: int = 10
    beta: float = 0.95

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("overflow weight w must be positive")
        if not 0 < self.pb_bar < 0.5:
            raise ValueError("target BER must lie in (0, 0.5)")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError("queue length L must be a positive integer")
        if not 0 <= self.beta < 1:
            raise ValueError("discount factor must lie in [0, 1)")


def _stationary(P: np.ndarray) -> np.ndarray:
    K = P.shape[0]
    A = np.vstack([P.T - np.eye(K), np.ones(K)])
    rhs = np.zeros(K + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return pi


def _check_queue_args(b, a, L, f=0):
    if a not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {a}")
    if b < 0 or f < 0:
        raise ValueError("queue state and arrivals must be nonnegative")
    if b > L:
        raise ValueError(f"queue state {b} exceeds queue length {L}")


def lindley_update(b: int, a: int, f: int, L: int) -> int:
    """One epoch of queue evolution: serve ``a`` packets, then admit ``f`` up to ``L``."""
    _check_queue_args(b, a, L, f)
    return min(max(b - a, 0) + f, L)


def queue_transition_prob(b: int, a: int, b_next: int, arrivals: ArrivalModel, L: int) -> float:
    _check_queue_args(b, a, L)
    if not 0 <= b_next <= L:
        raise ValueError(f"next queue state {b_next} outside [0, {L}]")
    served = max(b - a, 0)
    need = b_next - served
    if b_next < L:
        if need < 0 or need > arrivals.max_arrivals:
            return 0.0
        return float(arrivals.pmf[need])
    return arrivals.tail(need)


def queue_transition_matrix(a: int, arrivals: ArrivalModel, L: int) -> np.ndarray:
    """(L+1)x(L+1) matrix of ``queue_transition_prob`` for a fixed action."""
    M = np.zeros((L + 1, L + 1))
    for b in range(L + 1):
        for bn in range(L + 1):
            M[b, bn] = queue_transition_prob(b, a, bn, arrivals, L)
    return M


def build_fsmc(
    avg_snr: float,
    doppler: float,
    frame_duration: float = 1e-3,
    K: int = 8,
    floor_quantile: float = 0.01,
) -> FsmcModel:
    """Rayleigh-fading FSMC with equiprobable SNR regions.

    The SNR is exponential with mean ``avg_snr``; boundaries are its
    ``k/K`` quantiles.  Only adjacent states communicate, with crossing
    probabilities ``N_k * frame_duration / pi_k`` where ``N_k`` is the
    level-crossing rate at boundary ``k``.  ``floor_quantile`` sets the SNR
    used to price transmission in the lowest state.
    """
    if K < 2:
        raise ValueError("need at least two channel states")
    if avg_snr <= 0 or doppler <= 0 or frame_duration <= 0:
        raise ValueError("avg_snr, doppler and frame_duration must be positive")
    if not 0 < floor_quantile < 1:
        raise ValueError("floor_quantile must lie in (0, 1)")

    k = np.arange(K)
    bounds = -avg_snr * np.log1p(-k / K)
    pi = np.full(K, 1.0 / K)
    rate = np.sqrt(2 * np.pi * bounds / avg_snr) * doppler * np.exp(-bounds / avg_snr)

    P = np.zeros((K, K))
    for s in range(K):
        up = rate[s + 1] * frame_duration / pi[s] if s + 1 < K else 0.0
        down = rate[s] * frame_duration / pi[s] if s > 0 else 0.0
        if up + down > 1.0:
            raise ValueError(
                "doppler * frame_duration too large for an adjacent-state FSMC "
                f"(state {s} leaves with probability {up + down:.3f})"
            )
        if s + 1 < K:
            P[s, s + 1] = up
        if s > 0:
            P[s, s - 1] = down
        P[s, s] = 1.0 - up - down

    tx = bounds.copy()
    tx[0] = min(-avg_snr * math.log1p(-floor_quantile), bounds[1])
    return FsmcModel(bounds, P, pi, tx, float(avg_snr), float(doppler), float(frame_duration))


def cost_queue(b: int, a: int, arrivals: ArrivalModel, w: float, L: int) -> float:
    """Weighted expected overflow ``w * E[[b-a]^+ + f - L]^+``."""
    _check_queue_args(b, a, L)
    served = max(b - a, 0)
    f = np.arange(arrivals.pmf.size)
    return float(w * np.dot(arrivals.pmf, np.maximum(served + f - L, 0)))


def cost_tx(h: int, a: int, pb_bar: float, fsmc: FsmcModel) -> float:
    """BPSK power needed in channel state ``h`` (0-based) to meet average BER ``pb_bar``."""
    if not 0 <= h < fsmc.K:
        raise ValueError(f"channel state {h} outside [0, {fsmc.K})")
    if a not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {a}")
    if a == 0:
        return 0.0
    return erfc_inv(2.0 * pb_bar) ** 2 / float(fsmc.tx_snr[h])


def erfc_inv(y: float) -> float:
    """Inverse complementary error function by Brent root-finding on :func:`math.erfc`."""
    if not 0.0 < y < 2.0:
        raise ValueError(f"erfc_inv domain is (0, 2), got {y}")
    if y == 1.0:
        return 0.0
    # erfc(x) is decreasing; widen the bracket until it straddles y
    lo, hi = -1.0, 1.0
    while math.erfc(hi) > y:
        hi *= 2.0
    while math.erfc(lo) < y:
        lo *= 2.0
    # relative tolerance on erfc(x) needs a tight x tolerance in the tails
    return brentq(lambda x: math.erfc(x) - y, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
