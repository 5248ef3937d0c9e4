"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism, noise
calibration, the quantile/gradient budget split, and per-group noise plans."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import InfeasibleError, InputError, NumericError

DEFAULT_ORDERS = tuple(range(2, 65))
SIGMA_BOUNDS = (0.3, 50.0)
STRATEGIES = ("global", "equal_budget", "equal_snr")


def rdp_sgm(alpha: int, sigma: float, rho: float) -> float:
    """RDP of order ``alpha`` for one step of the sampled Gaussian mechanism.

    Binomial expansion over the integer order, summed in log space.
    """
    if int(alpha) != alpha or alpha < 2:
        raise InputError(f"order must be an integer >= 2, got {alpha}")
    if not sigma > 0 or not 0.0 <= rho <= 1.0:
        raise InputError(f"need sigma > 0 and rho in [0, 1], got sigma={sigma}, rho={rho}")
    alpha = int(alpha)
    if rho == 0.0:
        return 0.0
    if rho == 1.0:
        return alpha / (2.0 * sigma**2)
    j = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(j + 1) - gammaln(alpha - j + 1)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        log_terms = log_binom + (alpha - j) * math.log1p(-rho) + j * math.log(rho) + j * (j - 1) / (2.0 * sigma**2)
        value = float(logsumexp(log_terms)) / (alpha - 1)
    if not math.isfinite(value):
        raise NumericError(f"RDP overflow at alpha={alpha}, sigma={sigma}, rho={rho}")
    return max(value, 0.0)


def rdp_curve(sigma: float, rho: float, orders: Sequence[int] = DEFAULT_ORDERS) -> dict[int, float]:
    return {a: rdp_sgm(a, sigma, rho) for a in orders}


def eps_from_rdp(rdp: Mapping[int, float], steps: int, delta: float) -> float:
    """(epsilon, delta) after composing ``steps`` releases, best order on the grid."""
    if not rdp:
        raise InputError("empty order grid")
    if not 0 < delta < 1:
        raise InputError(f"delta must lie in (0, 1), got {delta}")
    if steps == 0:
        return 0.0
    log_inv_delta = math.log(1.0 / delta)
    return min(steps * v + log_inv_delta / (a - 1) for a, v in rdp.items())


def conversion_floor(delta: float, orders: Sequence[int] = DEFAULT_ORDERS) -> float:
    return math.log(1.0 / delta) / (max(orders) - 1)


def epsilon_for(sigma: float, rho: float, steps: int, delta: float, orders: Sequence[int] = DEFAULT_ORDERS) -> float:
    return eps_from_rdp(rdp_curve(sigma, rho, orders), steps, delta)


def calibrate_sigma(epsilon: float, delta: float, rho: float, steps: int,
                    orders: Sequence[int] = DEFAULT_ORDERS, bounds: tuple[float, float] = SIGMA_BOUNDS,
                    tol: float = 1e-3) -> float:
    """Smallest noise multiplier (to ``tol``) meeting ``epsilon`` by bisection."""
    floor = conversion_floor(delta, orders)
    if epsilon <= floor:
        raise InfeasibleError(
            f"epsilon={epsilon} is at or below the conversion floor ln(1/delta)/(max order - 1) = {floor:.4g}; "
            "no amount of noise reaches it on this order grid"
        )
    lo, hi = bounds
    if epsilon_for(lo, rho, steps, delta, orders) <= epsilon:
        return lo
    if epsilon_for(hi, rho, steps, delta, orders) > epsilon:
        raise InfeasibleError(f"epsilon={epsilon} needs sigma > {hi}; outside the search range")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if epsilon_for(mid, rho, steps, delta, orders) > epsilon:
            lo = mid
        else:
            hi = mid
    return hi


def split_budget(sigma: float, sigma_b: float, K: int) -> float:
    """Gradient noise multiplier left after K count releases at ``sigma_b``."""
    if K == 0 or math.isinf(sigma_b):
        return sigma
    inv = sigma**-2 - K / (4.0 * sigma_b**2)
    if not inv > 0:
        raise InfeasibleError(
            f"sigma_b={sigma_b} is infeasible for sigma={sigma}, K={K}: need sigma_b > sigma*sqrt(K)/2 = {sigma * math.sqrt(K) / 2:.6g}"
        )
    return inv**-0.5


def budget_fraction(sigma: float, sigma_b: float, K: int) -> float:
    """Fraction of the RDP budget spent on K noisy clip counts."""
    return K * sigma**2 / (4.0 * sigma_b**2)


def sigma_b_for_fraction(r: float, sigma: float, K: int) -> float:
    if r == 0:
        return math.inf
    if not 0 < r < 1:
        raise InputError(f"budget fraction must lie in [0, 1), got {r}")
    return math.sqrt(K * sigma**2 / (4.0 * r))


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float | None
    delta: float | None
    rate: float
    steps: int
    budget_fraction: float
    sigma: float
    sigma_b: float
    sigma_new: float

    @classmethod
    def resolve(cls, *, rate: float, steps: int, K: int, epsilon: float | None = None, delta: float | None = None,
                sigma: float | None = None, budget_fraction: float = 0.0) -> "PrivacySpec":
        """Calibrate (or take) sigma, then split off ``budget_fraction`` for quantile estimation."""
        if (sigma is None) == (epsilon is None):
            raise InputError("give exactly one of sigma or (epsilon, delta)")
        if sigma is None:
            if delta is None:
                raise InputError("delta is required with epsilon")
            sigma = calibrate_sigma(epsilon, delta, rate, steps)
        sb = sigma_b_for_fraction(budget_fraction, sigma, K)
        return cls(epsilon, delta, rate, steps, budget_fraction, sigma, sb, split_budget(sigma, sb, K))


@dataclass(frozen=True)
class NoisePlan:
    strategy: str
    gammas: tuple[float, ...]
    sensitivity: float
    stds: tuple[float, ...]
    V: float


def make_noise_plan(strategy: str, groups: Sequence, sigma_new: float) -> NoisePlan:
    """Per-group noise stds for the chosen allocation strategy.

    ``groups`` are ``ParamGroup``-like objects with ``threshold`` and ``size``.
    """
    C = np.array([g.threshold for g in groups], dtype=np.float64)
    d = np.array([g.size for g in groups], dtype=np.float64)
    if strategy == "global":
        gam = np.ones_like(C)
    elif strategy == "equal_budget":
        gam = C.copy()
    elif strategy == "equal_snr":
        gam = C / np.sqrt(d)
    else:
        raise InputError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if sigma_new == 0:
        zeros = (0.0,) * len(C)
        return NoisePlan(strategy, tuple(gam), float(np.sqrt(np.sum((C / gam) ** 2))), zeros, 0.0)
    S = float(np.sqrt(np.sum((C / gam) ** 2)))
    stds = sigma_new * S * gam
    V = float(sigma_new**2 * S**2 * np.sum(gam**2 * d))
    return NoisePlan(strategy, tuple(float(g) for g in gam), S, tuple(float(s) for s in stds), V)


def draw_noise(plan: NoisePlan, sizes: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    """One Gaussian vector per group, groups in order. Always consumes the
    generator, even for zero std, so the stream does not depend on the plan."""
    if len(sizes) != len(plan.stds):
        raise InputError(f"plan has {len(plan.stds)} groups, got {len(sizes)} sizes")
    return [rng.standard_normal(n) * s for n, s in zip(sizes, plan.stds)]
