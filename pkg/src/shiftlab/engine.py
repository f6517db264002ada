"""LSIF fitting under hard integral constraints.

The empirical objective is J_fit = (1/2) mean_Q[r^2] - mean_P[r], whose
population minimizer is the true ratio with J(r*) = -(1/2) E_Q[r*^2].  The
augmented Lagrangian adds, per active constraint,

    lambda*g0 + (rho0/2)*g0^2 + sum_j ( mu_j*g_j + (rho_j/2)*g_j^2 ),

with g0 the normalization residual mean_Q[w] - 1 and g_j the moment residuals
mean_Q[w * phi_j] - mean_P[phi_j] for phi_1(z) = z, phi_2(z) = z^2.  Each
constraint reaches the primal gradient through the effective coefficient
(multiplier + penalty * residual); duals ascend by eta * residual after every
primal step.  Quadratic penalties (rho) and dual step sizes (eta) are
deliberately separate knobs.

Tail control: with clipping, min(r, c) replaces r inside the constraints
only; with tempering, r^beta replaces r inside the LSIF term only and never
reaches the constraints or deployment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import lab, net

MODES = ("none", "norm", "norm+moments")
PHI = (lambda z: z, lambda z: z * z)
DEFAULT_LAYERS = (1, 64, 64, 1)


@dataclass(frozen=True)
class DualState:
    lam: float = 0.0
    mus: tuple[float, ...] = (0.0, 0.0)
    rho0: float = 1.0
    rhos: tuple[float, ...] = (1.0, 1.0)
    eta_norm: float = 0.1
    eta_mm: float = 5e-3
    cap: float = 1e6
    diverged: bool = False

    def __post_init__(self) -> None:
        if self.rho0 <= 0 or any(r <= 0 for r in self.rhos):
            raise ValueError("quadratic penalties must be positive")
        if not (math.isfinite(self.lam) and all(map(math.isfinite, self.mus))):
            raise ValueError("multipliers must be finite")


@dataclass(frozen=True)
class ConstraintResiduals:
    g0: float
    g: tuple[float, ...]


@dataclass
class TrainConfig:
    shift: lab.ShiftConfig
    steps: int = 2000
    constraint_mode: str = "norm+moments"
    clip: float | None = None
    temper_beta: float | None = None
    layer_sizes: tuple[int, ...] = DEFAULT_LAYERS
    floor: float = 1e-3
    lr: float = 1e-3
    duals: DualState = field(default_factory=DualState)
    init_seed: int = 0
    dtype: str = "float32"  # inner-loop compute; parameters stay float64
    q_data: np.ndarray | None = None  # override sampling (CSV mode)
    p_data: np.ndarray | None = None
    track_l2q: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.constraint_mode not in MODES:
            raise ValueError(f"constraint_mode must be one of {MODES}")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip threshold must be positive")
        if self.temper_beta is not None and not 0 < self.temper_beta <= 1:
            raise ValueError("temper beta must be in (0, 1]")


@dataclass
class TrainTrace:
    step: np.ndarray
    lsif: np.ndarray
    g0: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    lam: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    l2q: np.ndarray  # nan where not tracked

    def __len__(self) -> int:
        return len(self.step)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,lsif,g0,g1,g2,lambda,mu1,mu2,l2q_optional\n")
            for i in range(len(self.step)):
                l2 = "" if math.isnan(self.l2q[i]) else repr(float(self.l2q[i]))
                row = [str(int(self.step[i]))] + [
                    repr(float(col[i]))
                    for col in (self.lsif, self.g0, self.g1, self.g2,
                                self.lam, self.mu1, self.mu2)
                ]
                fh.write(",".join(row + [l2]) + "\n")


def lsif_value_and_grad(model: net.RatioModel, q_batch, p_batch):
    """Empirical LSIF objective and its exact parameter gradient."""
    zq = np.asarray(q_batch, dtype=np.float64)
    zp = np.asarray(p_batch, dtype=np.float64)
    if zq.size == 0 or zp.size == 0:
        raise ValueError("batches must be nonempty")
    rq = net.evaluate(model, zq)
    rp = net.evaluate(model, zp)
    value = 0.5 * float(np.mean(rq * rq)) - float(np.mean(rp))
    gw_q, gb_q = net.gradient(model, zq, rq / len(zq))
    gw_p, gb_p = net.gradient(model, zp, np.full(len(zp), -1.0 / len(zp)))
    grads = ([a + b for a, b in zip(gw_q, gw_p)],
             [a + b for a, b in zip(gb_q, gb_p)])
    return value, grads


def residuals(model: net.RatioModel, q_batch, p_batch, test_fns=PHI,
              clip: float | None = None) -> ConstraintResiduals:
    """Empirical constraint residuals; clipping, when given, applies to the
    weights inside the constraints."""
    zq = np.asarray(q_batch, dtype=np.float64)
    zp = np.asarray(p_batch, dtype=np.float64)
    w = net.evaluate(model, zq)
    if clip is not None:
        w = np.minimum(w, clip)
    g0 = float(np.mean(w)) - 1.0
    g = tuple(
        float(np.mean(w * fn(zq))) - float(np.mean(fn(zp))) for fn in test_fns
    )
    return ConstraintResiduals(g0=g0, g=g)


def al_value_and_grad(model: net.RatioModel, duals: DualState, q_batch, p_batch,
                      mode: str = "norm+moments", clip: float | None = None,
                      temper_beta: float | None = None, test_fns=PHI):
    """Augmented-Lagrangian value and exact gradient on the given batches."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    zq = np.asarray(q_batch, dtype=np.float64)
    zp = np.asarray(p_batch, dtype=np.float64)
    rq = net.evaluate(model, zq)
    rp = net.evaluate(model, zp)
    n_q, n_p = len(zq), len(zp)

    if temper_beta is None:
        value = 0.5 * float(np.mean(rq * rq)) - float(np.mean(rp))
        uq = rq / n_q
        up = np.full(n_p, -1.0 / n_p)
    else:
        b = temper_beta
        value = 0.5 * float(np.mean(rq ** (2 * b))) - float(np.mean(rp**b))
        uq = b * rq ** (2 * b - 1) / n_q
        up = -b * rp ** (b - 1) / n_p

    if mode != "none":
        w = rq if clip is None else np.minimum(rq, clip)
        live = 1.0 if clip is None else (rq < clip).astype(np.float64)
        g0 = float(np.mean(w)) - 1.0
        value += duals.lam * g0 + 0.5 * duals.rho0 * g0 * g0
        coef = duals.lam + duals.rho0 * g0
        if mode == "norm+moments":
            for j, fn in enumerate(test_fns):
                gj = float(np.mean(w * fn(zq))) - float(np.mean(fn(zp)))
                value += duals.mus[j] * gj + 0.5 * duals.rhos[j] * gj * gj
                coef = coef + (duals.mus[j] + duals.rhos[j] * gj) * fn(zq)
        uq = uq + coef * live / n_q

    gw_q, gb_q = net.gradient(model, zq, uq)
    gw_p, gb_p = net.gradient(model, zp, up)
    grads = ([a + b for a, b in zip(gw_q, gw_p)],
             [a + b for a, b in zip(gb_q, gb_p)])
    return value, grads


def dual_update(duals: DualState, res: ConstraintResiduals,
                mode: str = "norm+moments") -> DualState:
    """Dual ascent: lambda += eta_norm*g0, mu_j += eta_mm*g_j; flags DIVERGED
    when any multiplier passes the cap.  Penalties are never touched."""
    if mode == "none":
        return duals
    lam = duals.lam + duals.eta_norm * res.g0
    mus = duals.mus
    if mode == "norm+moments":
        mus = tuple(m + duals.eta_mm * g for m, g in zip(duals.mus, res.g))
    diverged = abs(lam) > duals.cap or any(abs(m) > duals.cap for m in mus)
    return replace(duals, lam=lam, mus=mus, diverged=duals.diverged or diverged)


def train(config: TrainConfig):
    """Run the full constrained fit; returns (model, duals, trace).

    Exactly config.steps primal Adam steps, each followed by one dual update
    when constraints are active.  On divergence the loop stops early and the
    trace is truncated to the completed steps; a nonfinite objective aborts.
    """
    shift = config.shift
    zq64 = (np.asarray(config.q_data, dtype=np.float64)
            if config.q_data is not None else lab.sample(shift, "source").values)
    zp64 = (np.asarray(config.p_data, dtype=np.float64)
            if config.p_data is not None else lab.sample(shift, "target").values)
    n_q, n_p = len(zq64), len(zp64)
    dtype = np.dtype(config.dtype)

    model = net.init_model(config.layer_sizes, config.floor, config.init_seed)
    adam = net.init_adam(model, lr=config.lr)
    duals = config.duals
    mode = config.constraint_mode

    if zq64.ndim == 1:
        x = np.concatenate([zq64, zp64])[:, None].astype(dtype)
    else:
        x = np.vstack([zq64, zp64]).astype(dtype)
    ws = net.FusedNet(model, n_q + n_p, dtype=dtype)

    zq = zq64.astype(dtype) if zq64.ndim == 1 else None
    phi_q = [fn(zq).astype(dtype) for fn in PHI] if zq is not None else []
    phi_p_mean = [float(np.mean(fn(zp64))) for fn in PHI] if zq is not None else []
    moments_on = mode == "norm+moments" and zq is not None
    track_l2q = config.track_l2q and zq is not None
    rstar_q = (lab.true_ratio(zq64, shift.mu).astype(dtype)
               if track_l2q else None)

    u = np.empty(n_q + n_p, dtype)
    cq = np.empty(n_q, dtype)
    steps = config.steps
    cols = {name: np.empty(steps) for name in
            ("lsif", "g0", "g1", "g2", "lam", "mu1", "mu2", "l2q")}
    done = 0

    for step in range(steps):
        r = ws.forward(x)
        rq, rp = r[:n_q], r[n_q:]
        j_fit = _lsif_value(rq, rp, config.temper_beta)
        if not math.isfinite(j_fit):
            raise FloatingPointError(f"nonfinite objective at step {step}")

        # residuals (clip applies inside the constraints only)
        if config.clip is None:
            w_q = rq
        else:
            np.minimum(rq, dtype.type(config.clip), out=cq)
            w_q = cq
        g0 = float(np.mean(w_q, dtype=np.float64)) - 1.0
        g = tuple(float(np.mean(w_q * f, dtype=np.float64)) - m
                  for f, m in zip(phi_q, phi_p_mean))
        res = ConstraintResiduals(g0=g0, g=g if g else (0.0, 0.0))

        _fill_upstream(u, rq, rp, n_q, n_p, config, duals, mode, moments_on,
                       res, phi_q, dtype)
        ws.backward(x, u)
        net.adam_step(model, adam, ws.grads_float64())
        ws.refresh()

        if mode != "none":
            duals = dual_update(duals, res, mode)

        cols["lsif"][step] = j_fit
        cols["g0"][step] = res.g0
        cols["g1"][step] = res.g[0]
        cols["g2"][step] = res.g[1]
        cols["lam"][step] = duals.lam
        cols["mu1"][step] = duals.mus[0]
        cols["mu2"][step] = duals.mus[1]
        cols["l2q"][step] = (
            math.sqrt(float(np.mean(np.square(rq - rstar_q), dtype=np.float64)))
            if track_l2q else math.nan)
        done = step + 1
        if duals.diverged:
            break

    trace = TrainTrace(step=np.arange(done),
                       **{k: v[:done] for k, v in cols.items()})
    return model, duals, trace


def _lsif_value(rq, rp, temper_beta) -> float:
    if temper_beta is None:
        return (0.5 * float(np.mean(np.square(rq), dtype=np.float64))
                - float(np.mean(rp, dtype=np.float64)))
    b = temper_beta
    return (0.5 * float(np.mean(rq ** (2 * b), dtype=np.float64))
            - float(np.mean(rp**b, dtype=np.float64)))


def _fill_upstream(u, rq, rp, n_q, n_p, config, duals, mode, moments_on,
                   res, phi_q, dtype) -> None:
    uq, up = u[:n_q], u[n_q:]
    if config.temper_beta is None:
        np.multiply(rq, dtype.type(1.0 / n_q), out=uq)
        up.fill(-1.0 / n_p)
    else:
        b = config.temper_beta
        np.power(rq, dtype.type(2 * b - 1), out=uq)
        uq *= dtype.type(b / n_q)
        np.power(rp, dtype.type(b - 1), out=up)
        up *= dtype.type(-b / n_p)
    if mode == "none":
        return
    coef0 = duals.lam + duals.rho0 * res.g0
    if moments_on:
        c1 = duals.mus[0] + duals.rhos[0] * res.g[0]
        c2 = duals.mus[1] + duals.rhos[1] * res.g[1]
        extra = coef0 + c1 * phi_q[0] + c2 * phi_q[1]
    else:
        extra = np.full(n_q, coef0, dtype)
    if config.clip is not None:
        extra = extra * (rq < dtype.type(config.clip))
    uq += extra * dtype.type(1.0 / n_q)


def posthoc_normalize(weights) -> np.ndarray:
    """Rescale so the sample mean is exactly 1."""
    w = np.asarray(weights, dtype=np.float64)
    m = float(np.mean(w))
    if m <= 0:
        raise ValueError("weights must have positive mean")
    return w / m


def clip_weights(weights, c: float) -> np.ndarray:
    if c <= 0:
        raise ValueError("clip threshold must be positive")
    return np.minimum(np.asarray(weights, dtype=np.float64), c)


def temper_weights(weights, beta: float) -> np.ndarray:
    """Elementwise w^beta; a training-time variance reducer that violates the
    normalization identity (Jensen), so it is never deployed."""
    if not 0 < beta <= 1:
        raise ValueError("beta must be in (0, 1]")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    return w**beta
