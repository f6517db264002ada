"""PAC-Bayes certificates: fixed-time bounds, the Bernoulli-KL inverse, the
Gibbs posterior on a discrete grid, and the geometric-peeling anytime
schedule.

Fixed-time forms at confidence delta on t samples of a [0,1] loss:

    sqrt:         R_hat + sqrt((KL + ln(1/delta) + ln t + 2) / (2t - 1))
    Bernoulli-KL: kl_ber_inv_upper(R_hat, (KL + ln(2 sqrt(t)/delta)) / t)

Anytime validity comes from geometric peeling: epochs
T_k = [t_min b^k, t_min b^{k+1}) receive budgets delta_k = delta (b-1)/b^{k+1}
(summing exactly to delta), and within an epoch each integer t gets
delta_k / |T_k|, so the fixed-time bound applied at that per-t budget holds
simultaneously over all t >= t_min by a union bound.  Natural log throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .risk import GaussianPosterior

BISECTION_TOL = 1e-12
BISECTION_MAX_ITERS = 200


@dataclass(frozen=True)
class PeelingSchedule:
    t_min: int = 100
    b: float = 2.0
    delta: float = 0.05

    def __post_init__(self) -> None:
        if self.t_min < 1 or self.b <= 1 or not 0 < self.delta < 1:
            raise ValueError("need t_min >= 1, b > 1, 0 < delta < 1")


@dataclass(frozen=True)
class DiscretePosterior:
    grid: np.ndarray
    mass: np.ndarray

    def __post_init__(self) -> None:
        if self.grid.shape != self.mass.shape:
            raise ValueError("grid and mass must align")
        if np.any(self.mass < 0) or abs(float(self.mass.sum()) - 1.0) > 1e-12:
            raise ValueError("mass must be a probability vector")


@dataclass(frozen=True)
class BoundReport:
    emp_risk: float
    kl: float
    t: int
    delta: float  # the budget actually plugged into the fixed-time formula
    mode: str
    bound: float
    epoch: int | None = None
    epoch_budget: float | None = None


def kl_gaussian(posterior: GaussianPosterior, prior: GaussianPosterior) -> float:
    """KL(N(a0, s2) || N(m, v2)) =
    (s2/v2 + (a0-m)^2/v2 - 1 - ln(s2/v2)) / 2."""
    ratio = posterior.sigma2 / prior.sigma2
    gap = posterior.a0 - prior.a0
    return 0.5 * (ratio + gap * gap / prior.sigma2 - 1.0 - math.log(ratio))


def sqrt_bound(emp_risk: float, kl: float, t: int, delta: float) -> float:
    if t < 1 or not 0 < delta < 1 or kl < 0:
        raise ValueError("need t >= 1, delta in (0,1), kl >= 0")
    num = kl + math.log(1.0 / delta) + math.log(t) + 2.0
    return emp_risk + math.sqrt(num / (2.0 * t - 1.0))


def kl_ber(q: float, p: float) -> float:
    """Bernoulli KL divergence kl(q || p) with the 0 ln 0 = 0 convention.

    Boundary disagreement (p in {0,1} with q strictly inside the conflicting
    side) is +infinity, returned as math.inf, never NaN.
    """
    if not (0 <= q <= 1 and 0 <= p <= 1):
        raise ValueError("arguments must lie in [0, 1]")
    if q == p:
        return 0.0
    total = 0.0
    if q > 0:
        if p == 0:
            return math.inf
        total += q * math.log(q / p)
    if q < 1:
        if p == 1:
            return math.inf
        total += (1 - q) * math.log((1 - q) / (1 - p))
    return total


def kl_ber_inv_upper(q: float, eps: float) -> float:
    """sup{p in [q, 1] : kl_ber(q, p) <= eps}, by bisection to absolute
    tolerance 1e-12 in at most 200 iterations.

    kl_ber(q, .) is continuous and strictly increasing on [q, 1), so the
    bisection bracket [q, 1] is sound; p = 1 is returned only when even the
    left limit kl(q, 1-) stays within budget (q = 1 or eps = inf).
    """
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0.0 or q == 1.0:
        return q if eps == 0.0 else 1.0
    if kl_ber(q, 1.0) <= eps:  # only when eps is infinite
        return 1.0
    lo, hi = q, 1.0
    for _ in range(BISECTION_MAX_ITERS):
        mid = 0.5 * (lo + hi)
        if kl_ber(q, mid) <= eps:
            lo = mid
        else:
            hi = mid
        if hi - lo <= BISECTION_TOL:
            break
    return lo


def _kl_ber_inv_upper_vec(q: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Vectorized bisection with the same bracket and tolerance; used for
    anytime sweeps where a scalar loop would dominate the stage runtime."""
    q = np.asarray(q, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    lo = q.copy()
    hi = np.ones_like(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(48):  # 2^-48 < 1e-12 on a unit bracket
            mid = 0.5 * (lo + hi)
            kl = np.where(q > 0, q * np.log(q / mid), 0.0)
            kl += np.where(q < 1, (1 - q) * np.log((1 - q) / (1 - mid)), 0.0)
            ok = kl <= eps
            lo = np.where(ok, mid, lo)
            hi = np.where(ok, hi, mid)
    return lo


def bernoulli_kl_bound(emp_risk: float, kl: float, t: int, delta: float) -> float:
    if not 0 <= emp_risk <= 1:
        raise ValueError("emp_risk must lie in [0, 1]")
    if t < 1 or not 0 < delta < 1 or kl < 0:
        raise ValueError("need t >= 1, delta in (0,1), kl >= 0")
    eps = (kl + math.log(2.0 * math.sqrt(t) / delta)) / t
    return kl_ber_inv_upper(emp_risk, eps)


def epoch_index(t: int, schedule: PeelingSchedule = PeelingSchedule()) -> int:
    """Epoch k with t in [t_min b^k, t_min b^{k+1}).

    Integer-safe: when t_min and b are integers the comparison runs in exact
    integer arithmetic, so powers of b land in the correct epoch (a float
    log would misclassify boundaries like t = 200).
    """
    if t < schedule.t_min:
        raise ValueError(f"t must be >= t_min = {schedule.t_min}")
    b = schedule.b
    if float(b).is_integer():
        b_int, edge, k = int(b), schedule.t_min * int(b), 0
        while edge <= t:
            edge *= b_int
            k += 1
        return k
    k, edge = 0, schedule.t_min * b
    while edge <= t:
        edge *= b
        k += 1
    return k


def epoch_budget(k: int, schedule: PeelingSchedule = PeelingSchedule()):
    """(delta_k, |T_k|): the epoch's confidence budget delta (b-1)/b^{k+1}
    and the exact count of integers in [t_min b^k, t_min b^{k+1})."""
    if k < 0:
        raise ValueError("epoch index must be >= 0")
    b, t_min = schedule.b, schedule.t_min
    delta_k = schedule.delta * (b - 1.0) / b ** (k + 1)
    if float(b).is_integer():
        lo = t_min * int(b) ** k
        size = lo * (int(b) - 1)
    else:
        lo, hi = t_min * b**k, t_min * b ** (k + 1)
        size = max(1, math.ceil(hi) - math.ceil(lo))
    return delta_k, size


def anytime_bound(emp_risk: float, kl: float, t: int,
                  schedule: PeelingSchedule = PeelingSchedule(),
                  mode: str = "bernoulli_kl") -> BoundReport:
    """Fixed-time bound at the peeled per-t budget delta_k / |T_k|; valid
    simultaneously over every integer t >= t_min."""
    k = epoch_index(t, schedule)
    delta_k, size = epoch_budget(k, schedule)
    delta_eff = delta_k / size
    if mode == "sqrt":
        value = sqrt_bound(emp_risk, kl, t, delta_eff)
    elif mode == "bernoulli_kl":
        value = bernoulli_kl_bound(emp_risk, kl, t, delta_eff)
    else:
        raise ValueError("mode must be 'sqrt' or 'bernoulli_kl'")
    return BoundReport(emp_risk=emp_risk, kl=kl, t=t, delta=delta_eff,
                       mode=f"anytime_{mode}", bound=value, epoch=k,
                       epoch_budget=delta_k)


def anytime_curve(emp_risks: np.ndarray, kl: float, ts: np.ndarray,
                  schedule: PeelingSchedule = PeelingSchedule(),
                  mode: str = "bernoulli_kl") -> np.ndarray:
    """Vectorized anytime bounds along a monitored trajectory; emp_risks[i]
    is the running empirical risk at sample count ts[i]."""
    ts = np.asarray(ts)
    emp = np.asarray(emp_risks, dtype=np.float64)
    delta_eff = np.empty(len(ts))
    for i, t in enumerate(ts):  # epochs change rarely; exact per-t lookup
        k = epoch_index(int(t), schedule)
        dk, size = epoch_budget(k, schedule)
        delta_eff[i] = dk / size
    tf = ts.astype(np.float64)
    if mode == "sqrt":
        num = kl + np.log(1.0 / delta_eff) + np.log(tf) + 2.0
        return emp + np.sqrt(num / (2.0 * tf - 1.0))
    if mode == "bernoulli_kl":
        eps = (kl + np.log(2.0 * np.sqrt(tf) / delta_eff)) / tf
        return _kl_ber_inv_upper_vec(emp, eps)
    raise ValueError("mode must be 'sqrt' or 'bernoulli_kl'")


def gibbs_posterior(grid_risks, prior: DiscretePosterior, beta: float) -> DiscretePosterior:
    """Exponential tilt mass_i proportional to prior_i exp(-beta risk_i),
    normalized by log-sum-exp."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    risks = np.asarray(grid_risks, dtype=np.float64)
    if risks.shape != prior.grid.shape:
        raise ValueError("risks must align with the grid")
    with np.errstate(divide="ignore"):
        logits = np.log(prior.mass) - beta * risks
    logits -= logits.max()
    mass = np.exp(logits)
    mass /= mass.sum()
    return DiscretePosterior(grid=prior.grid, mass=mass)


def uniform_grid_prior(lo: float = -3.0, hi: float = 3.0,
                       points: int = 601) -> DiscretePosterior:
    grid = np.linspace(lo, hi, points)
    return DiscretePosterior(grid=grid, mass=np.full(points, 1.0 / points))


def discrete_kl(p: DiscretePosterior, q: DiscretePosterior) -> float:
    if p.grid.shape != q.grid.shape or not np.array_equal(p.grid, q.grid):
        raise ValueError("posteriors must share a grid")
    support = p.mass > 0
    if np.any(q.mass[support] == 0):
        raise ValueError("first argument not absolutely continuous w.r.t. second")
    pm, qm = p.mass[support], q.mass[support]
    return float(np.sum(pm * np.log(pm / qm)))


def gibbs_objective_gap(candidate: DiscretePosterior, gibbs: DiscretePosterior,
                        beta: float, grid_risks, prior: DiscretePosterior):
    """Both sides of J_PB(rho) - J_PB(rho*) = (1/beta) KL(rho || rho*), where
    J_PB(rho) = E_rho[risk] + (1/beta) KL(rho || prior).  Returns
    (objective_gap, scaled_kl); callers assert their agreement."""
    risks = np.asarray(grid_risks, dtype=np.float64)

    def objective(rho: DiscretePosterior) -> float:
        return float(rho.mass @ risks) + discrete_kl(rho, prior) / beta

    lhs = objective(candidate) - objective(gibbs)
    rhs = discrete_kl(candidate, gibbs) / beta
    return lhs, rhs


def tv_distance(p: DiscretePosterior, q: DiscretePosterior) -> float:
    if p.grid.shape != q.grid.shape or not np.array_equal(p.grid, q.grid):
        raise ValueError("posteriors must share a grid")
    return 0.5 * float(np.abs(p.mass - q.mass).sum())
