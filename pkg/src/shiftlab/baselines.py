"""Classical direct ratio estimators: uLSIF, KLIEP, and the discriminator
inverse-odds ratio.

All kernel models share the Gaussian RBF basis K(z, c) = exp(-|z-c|^2 /
(2 bw^2)) with a median-heuristic bandwidth.  uLSIF solves the regularized
normal equations (H + lambda I) alpha = h in closed form and clips negative
predictions at evaluation; KLIEP maximizes mean_P[ln r_alpha] by projected
gradient ascent (clip alpha at 0, rescale to unit Q-mean) with backtracking;
the discriminator is a ridge-regularized logistic regression converted
through the inverse-odds map (n_q/n_p) p/(1-p).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve


class DegenerateBandwidthWarning(UserWarning):
    pass


class RestartWarning(UserWarning):
    pass


@dataclass
class KernelModel:
    centers: np.ndarray
    bandwidth: float
    alpha: np.ndarray
    nonneg_clip: bool

    def __call__(self, z) -> np.ndarray:
        values = _rbf(np.asarray(z, dtype=np.float64), self.centers,
                      self.bandwidth) @ self.alpha
        return np.clip(values, 0.0, None) if self.nonneg_clip else values


@dataclass
class LogisticModel:
    weights: np.ndarray  # slope coefficients
    intercept: float
    n_q: int
    n_p: int
    converged: bool
    cov: np.ndarray = field(repr=False)  # inverse curvature, for slope SEs


def _rbf(z: np.ndarray, centers: np.ndarray, bandwidth: float) -> np.ndarray:
    d = z[:, None] - centers[None, :]
    return np.exp(-np.square(d) / (2.0 * bandwidth * bandwidth))


def median_bandwidth(batch, cap: int = 1000) -> float:
    """Median pairwise distance over a deterministic strided subsample of at
    most `cap` points; identical points fall back to 1.0 with a warning."""
    z = np.asarray(batch, dtype=np.float64)
    if z.size < 2:
        raise ValueError("need at least two points")
    if z.size > cap:
        stride = -(-z.size // cap)
        z = z[::stride][:cap]
    diffs = np.abs(z[:, None] - z[None, :])
    med = float(np.median(diffs[np.triu_indices(len(z), k=1)]))
    if med == 0.0:
        warnings.warn("all points identical; bandwidth fallback 1.0",
                      DegenerateBandwidthWarning)
        return 1.0
    return med


def fit_ulsif(q_batch, p_batch, centers, bandwidth: float,
              lambda_reg: float) -> KernelModel:
    """Closed-form regularized least-squares fit (H + lambda I) alpha = h,
    H = Q-sample second moment of the basis, h = P-sample basis mean."""
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")
    zq = np.asarray(q_batch, dtype=np.float64)
    zp = np.asarray(p_batch, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    phi_q = _rbf(zq, centers, bandwidth)
    h_mat = phi_q.T @ phi_q / len(zq) + lambda_reg * np.eye(len(centers))
    h_vec = _rbf(zp, centers, bandwidth).mean(axis=0)
    alpha = solve(h_mat, h_vec, assume_a="pos")
    return KernelModel(centers=centers, bandwidth=bandwidth, alpha=alpha,
                       nonneg_clip=True)


def ulsif_objective(model: KernelModel, q_batch, p_batch) -> float:
    """Unregularized empirical LSIF objective of the (unclipped) expansion."""
    phi_q = _rbf(np.asarray(q_batch, np.float64), model.centers, model.bandwidth)
    phi_p = _rbf(np.asarray(p_batch, np.float64), model.centers, model.bandwidth)
    rq = phi_q @ model.alpha
    rp = phi_p @ model.alpha
    return 0.5 * float(np.mean(rq * rq)) - float(np.mean(rp))


def fit_kliep(q_batch, p_batch, centers, bandwidth: float,
              max_iters: int = 200) -> KernelModel:
    """Projected gradient ascent on mean_P[ln r_alpha] with the feasibility
    projection (alpha >= 0, rescale so mean_Q[r_alpha] = 1) after every
    step; backtracking keeps the objective nondecreasing across accepted
    steps."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    zq = np.asarray(q_batch, dtype=np.float64)
    zp = np.asarray(p_batch, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    phi_q = _rbf(zq, centers, bandwidth)
    phi_p = _rbf(zp, centers, bandwidth)
    q_mean = phi_q.mean(axis=0)

    def project(a: np.ndarray) -> np.ndarray:
        a = np.clip(a, 0.0, None)
        scale = float(a @ q_mean)
        if scale <= 0.0:
            warnings.warn("alpha collapsed to zero; restarting from uniform",
                          RestartWarning)
            a = np.ones_like(a)
            scale = float(a @ q_mean)
        return a / scale

    def objective(a: np.ndarray) -> float:
        vals = phi_p @ a
        if np.any(vals <= 0.0):
            return -math.inf
        return float(np.mean(np.log(vals)))

    alpha = project(np.ones(len(centers)))
    best = objective(alpha)
    step = 1.0
    for _ in range(max_iters):
        # gradient of the rescale-projected objective at a feasible point:
        # the raw gradient's radial part is cancelled by the projection, so
        # ascent needs mean_P[phi/r] - mean_Q[phi], which vanishes at the KKT
        # point instead of stalling the line search
        grad = phi_p.T @ (1.0 / (phi_p @ alpha)) / len(zp) - q_mean
        while step > 1e-12:
            cand = project(alpha + step * grad)
            value = objective(cand)
            if value >= best:
                alpha, best = cand, value
                step *= 1.5
                break
            step *= 0.5
        else:
            break

    # final exact rescale in float64 so |mean_Q[r] - 1| <= 1e-8 holds firmly
    alpha = alpha / float(alpha @ q_mean)
    return KernelModel(centers=centers, bandwidth=bandwidth, alpha=alpha,
                       nonneg_clip=False)


def kliep_objective(model: KernelModel, p_batch) -> float:
    vals = _rbf(np.asarray(p_batch, np.float64), model.centers,
                model.bandwidth) @ model.alpha
    return float(np.mean(np.log(vals)))


def fit_discriminator(q_batch, p_batch, l2_reg: float = 1e-3,
                      max_iters: int = 100) -> LogisticModel:
    """Ridge-regularized logistic regression separating source (label 0)
    from target (label 1), by damped Newton; converged when the gradient
    norm falls below 1e-8, flagged otherwise or when the parameters blow
    past norm 1e3."""
    zq = np.asarray(q_batch, dtype=np.float64)
    zp = np.asarray(p_batch, dtype=np.float64)
    if zq.size == 0 or zp.size == 0:
        raise ValueError("both batches must be nonempty")
    if zq.ndim == 1:
        zq, zp = zq[:, None], zp[:, None]
    x = np.vstack([zq, zp])
    y = np.concatenate([np.zeros(len(zq)), np.ones(len(zp))])
    design = np.hstack([np.ones((len(x), 1)), x])
    theta = np.zeros(design.shape[1])
    ridge = l2_reg * np.eye(len(theta))
    ridge[0, 0] = 0.0  # intercept unpenalized

    converged = False
    for _ in range(max_iters):
        p = _sigmoid(design @ theta)
        grad = design.T @ (p - y) + ridge @ theta
        if float(np.linalg.norm(grad)) <= 1e-8:
            converged = True
            break
        w = p * (1.0 - p)
        hess = design.T @ (design * w[:, None]) + ridge
        direction = solve(hess, grad, assume_a="pos")
        damp = 1.0
        loss0 = _logistic_loss(design, y, theta, ridge)
        while damp > 1e-8:
            cand = theta - damp * direction
            if _logistic_loss(design, y, cand, ridge) <= loss0:
                theta = cand
                break
            damp *= 0.5
        else:
            break

    if float(np.linalg.norm(theta[1:])) > 1e3:
        warnings.warn("discriminator weights exceed norm 1e3", UserWarning)
    p = _sigmoid(design @ theta)
    w = p * (1.0 - p)
    hess = design.T @ (design * w[:, None]) + ridge
    cov = np.linalg.inv(hess)
    return LogisticModel(weights=theta[1:], intercept=float(theta[0]),
                         n_q=len(zq), n_p=len(zp), converged=converged,
                         cov=cov)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _logistic_loss(design, y, theta, ridge) -> float:
    margins = design @ theta
    # log(1 + e^m) - y*m, stable via the softplus split
    sp = np.maximum(margins, 0.0) + np.log1p(np.exp(-np.abs(margins)))
    return float(np.sum(sp - y * margins) + 0.5 * theta @ ridge @ theta)


def ratio_from_discriminator(model: LogisticModel, z, floor: float = 1e-3,
                             ceiling: float = 1e6) -> np.ndarray:
    """Inverse-odds ratio (n_q/n_p) p/(1-p), clipped to [floor, ceiling]."""
    z = np.asarray(z, dtype=np.float64)
    zz = z[:, None] if z.ndim == 1 else z
    logit = model.intercept + zz @ model.weights
    # (n_q/n_p) p/(1-p) = (n_q/n_p) e^logit; work in log space to dodge overflow
    log_ratio = math.log(model.n_q / model.n_p) + logit
    log_ratio = np.clip(log_ratio, math.log(floor), math.log(ceiling))
    return np.exp(log_ratio)
