"""Importance-weight stability diagnostics.

ESS_t = (sum w_i)^2 / sum w_i^2 lies in [1, t] for any nonnegative weights
(Cauchy-Schwarz both ways), with equality at t for constant weights and at 1
for a single atom.  Sums use compensated (exact) summation: at stress shifts
a handful of huge weights dominate and naive accumulation loses the tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import lab, net


@dataclass(frozen=True)
class DiagnosticsReport:
    mean: float
    second_moment: float
    ess_abs: float
    ess_fraction: float
    count: int


def _exact_sum(values: np.ndarray) -> float:
    return math.fsum(values.tolist())


def ess(weights) -> tuple[float, float]:
    """(absolute ESS, ESS fraction) of a nonnegative weight vector."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or np.any(w < 0):
        raise ValueError("weights must be nonempty and nonnegative")
    scale = float(np.max(w))
    if scale == 0.0:
        raise ValueError("all-zero weights have no effective sample size")
    # ESS is scale-invariant; dividing by the max keeps the squares inside
    # the float range even when the raw weights are subnormal or huge
    wn = w / scale
    s1 = _exact_sum(wn)
    s2 = _exact_sum(np.square(wn))
    e = s1 * s1 / s2
    return e, e / w.size


def second_moment(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("weights must be nonempty")
    return _exact_sum(np.square(w)) / w.size


def l2q_error(model_or_weights, mu: float, q_batch) -> float:
    """Root-mean-square distance to the analytic ratio on a source batch,
    i.e. a Monte Carlo estimate of ||r - r*||_{L2(Q)}.  Reported as the root
    so the threshold tau_L2 = 0.05 applies directly.

    Accepts a fitted model or an already-evaluated weight vector.
    """
    zq = np.asarray(q_batch, dtype=np.float64)
    if isinstance(model_or_weights, net.RatioModel):
        w = net.evaluate(model_or_weights, zq)
    else:
        w = np.asarray(model_or_weights, dtype=np.float64)
        if w.shape != zq.shape:
            raise ValueError("weights and batch must align")
    diff = w - lab.true_ratio(zq, mu)
    return math.sqrt(_exact_sum(np.square(diff)) / len(zq))


def report(weights) -> DiagnosticsReport:
    w = np.asarray(weights, dtype=np.float64)
    e_abs, e_frac = ess(w)
    return DiagnosticsReport(
        mean=_exact_sum(w) / w.size,
        second_moment=second_moment(w),
        ess_abs=e_abs,
        ess_fraction=e_frac,
        count=int(w.size),
    )
