"""Nonnegative ratio network r_theta(z) = max(softplus(f_theta(z)), floor).

f_theta is a fully connected network with softplus hidden activations; the
softplus output post-composed with a hard floor keeps the ratio strictly
positive.  Gradients are exact backpropagation of sum_i upstream_i * r(z_i),
with the floor treated as a clamp (zero gradient on the floored branch).

The module also houses a fused stacked-batch forward/backward used by the
training loop; it reuses the stored exp of each pre-activation to obtain the
softplus derivative sigma(x) = E/(1+E) without a second transcendental pass,
and runs in a caller-chosen dtype.  The public evaluate/gradient path is
float64 and exact everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_FORMAT = "ratio-model/1"


@dataclass
class RatioModel:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]  # weights[l]: (fan_in, fan_out)
    biases: list[np.ndarray]  # biases[l]: (fan_out,)
    floor: float = 1e-3


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8


def init_model(layer_sizes, floor: float = 1e-3, seed: int = 0) -> RatioModel:
    """Uniform fan-in-scaled init (+-sqrt(1/fan_in)), zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError("layer_sizes needs at least input and output sizes")
    if floor <= 0:
        raise ValueError("floor must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = (1.0 / fan_in) ** 0.5
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return RatioModel(layer_sizes=sizes, weights=weights, biases=biases, floor=floor)


def softplus(x: np.ndarray) -> np.ndarray:
    """max(x, 0) + log1p(exp(-|x|)); exact and overflow-free for all inputs."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _as_input(model: RatioModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"batch arity {x.shape} does not match input size {model.layer_sizes[0]}"
        )
    return x


def _forward(model: RatioModel, x: np.ndarray):
    pre = []  # pre-activations, one per layer
    act = [x]  # post-activations, starting with the input
    a = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w + b
        pre.append(z)
        a = softplus(z)
        act.append(a)
    f = (a @ model.weights[-1] + model.biases[-1]).ravel()
    pre.append(f)
    s = softplus(f)
    r = np.maximum(s, model.floor)
    return r, s, pre, act


def evaluate(model: RatioModel, batch) -> np.ndarray:
    """Ratio values on a batch; elementwise >= floor."""
    r, _, _, _ = _forward(model, _as_input(model, batch))
    return r


def gradient(model: RatioModel, batch, upstream):
    """Exact gradient of sum_i upstream_i * r_theta(z_i).

    Returns (d_weights, d_biases) shaped like the model parameters.  Floored
    samples contribute zero (clamp semantics); the softplus derivative is
    sigma(f) = 1 - exp(-softplus(f)), reusing the stored forward value.
    """
    x = _as_input(model, batch)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (x.shape[0],):
        raise ValueError("upstream must be one weight per sample")
    r, s, pre, act = _forward(model, x)
    # d r / d f, zero where the clamp is active
    df = u * (1.0 - np.exp(-s)) * (s > model.floor)
    d_weights = [np.empty_like(w) for w in model.weights]
    d_biases = [np.empty_like(b) for b in model.biases]
    delta = df[:, None]
    for layer in range(len(model.weights) - 1, -1, -1):
        d_weights[layer] = act[layer].T @ delta
        d_biases[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ model.weights[layer].T
            delta *= 1.0 - np.exp(-act[layer])  # sigma of the pre-activation
    return d_weights, d_biases


def init_adam(model: RatioModel, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps_hat: float = 1e-8) -> AdamState:
    return AdamState(
        m_w=[np.zeros_like(w) for w in model.weights],
        v_w=[np.zeros_like(w) for w in model.weights],
        m_b=[np.zeros_like(b) for b in model.biases],
        v_b=[np.zeros_like(b) for b in model.biases],
        lr=lr, beta1=beta1, beta2=beta2, eps_hat=eps_hat,
    )


def adam_step(model: RatioModel, state: AdamState, grads) -> tuple[RatioModel, AdamState]:
    """One bias-corrected Adam update.

    Mutates the model and state in place under the exclusive-access contract
    and returns them; a nonfinite gradient aborts the run.
    """
    d_weights, d_biases = grads
    for g in (*d_weights, *d_biases):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("nonfinite gradient; run aborted")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for params, grads_, ms, vs in (
        (model.weights, d_weights, state.m_w, state.v_w),
        (model.biases, d_biases, state.m_b, state.v_b),
    ):
        for p, g, m, v in zip(params, grads_, ms, vs):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * np.square(g)
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)
    return model, state


def save_checkpoint(model: RatioModel, path) -> None:
    """JSON checkpoint; float64 round-trips exactly through repr decimals."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "layer_sizes": list(model.layer_sizes),
        "floor": model.floor,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> RatioModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    return RatioModel(
        layer_sizes=tuple(payload["layer_sizes"]),
        weights=[np.asarray(w, dtype=np.float64) for w in payload["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in payload["biases"]],
        floor=float(payload["floor"]),
    )


# --- fused stacked-batch kernel -------------------------------------------
#
# The training loop evaluates the network on the concatenated (Q, P) batch
# once per step.  Buffers are preallocated; softplus is computed as
# log1p(exp(min(x, CLAMP))) with an exact H = x patch above the clamp
# (softplus(x) == x in float64 for x >= 38, so only exp overflow needs the
# clamp), and the stored exp yields the backward sigma = E/(1+E) for free.

_CLAMP = 40.0


class FusedNet:
    """Preallocated forward/backward workspace bound to one model + batch size.

    Master parameters stay float64 on the model; compute runs in `dtype`
    (float32 by default in training).  refresh() re-casts after each update.
    """

    def __init__(self, model: RatioModel, n_rows: int, dtype=np.float32):
        if len(model.layer_sizes) < 2:
            raise ValueError("model must have at least one affine layer")
        self.model = model
        self.dtype = np.dtype(dtype)
        self.n = n_rows
        self.w = [np.empty(w.shape, self.dtype) for w in model.weights]
        self.b = [np.empty(b.shape, self.dtype) for b in model.biases]
        widths = model.layer_sizes[1:-1]
        self.pre = [np.empty((n_rows, k), self.dtype) for k in widths]
        self.expo = [np.empty((n_rows, k), self.dtype) for k in widths]
        self.act = [np.empty((n_rows, k), self.dtype) for k in widths]
        self.tmp = [np.empty((n_rows, k), self.dtype) for k in widths]
        self.f = np.empty(n_rows, self.dtype)
        self.ef = np.empty(n_rows, self.dtype)
        self.s = np.empty(n_rows, self.dtype)
        self.r = np.empty(n_rows, self.dtype)
        self.df = np.empty(n_rows, self.dtype)
        self.delta = [np.empty((n_rows, k), self.dtype) for k in widths]
        self.g_w = [np.empty(w.shape, self.dtype) for w in model.weights]
        self.g_b = [np.empty(b.shape, self.dtype) for b in model.biases]
        self.refresh()

    def refresh(self) -> None:
        for dst, src in zip(self.w, self.model.weights):
            np.copyto(dst, src, casting="same_kind")
        for dst, src in zip(self.b, self.model.biases):
            np.copyto(dst, src, casting="same_kind")

    def _softplus(self, z, e_out, h_out) -> None:
        if z.max() <= _CLAMP:
            np.exp(z, out=e_out)
            np.log1p(e_out, out=h_out)
        else:
            big = z > _CLAMP
            np.exp(np.minimum(z, _CLAMP), out=e_out)
            np.log1p(e_out, out=h_out)
            np.copyto(h_out, z, where=big)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Ratio values on the bound batch; x must be (n, fan_in) in dtype."""
        a = x
        for i in range(len(self.pre)):
            np.matmul(a, self.w[i], out=self.pre[i])
            self.pre[i] += self.b[i]
            self._softplus(self.pre[i], self.expo[i], self.act[i])
            a = self.act[i]
        last = len(self.w) - 1
        np.matmul(a, self.w[last], out=self.f[:, None])
        self.f += self.b[last]
        self._softplus(self.f, self.ef, self.s)
        np.maximum(self.s, self.model.floor, out=self.r)
        return self.r

    def backward(self, x: np.ndarray, upstream: np.ndarray):
        """Gradients of sum_i upstream_i * r_i into g_w/g_b (dtype arrays)."""
        # sigma(f) masked by the floor clamp
        np.add(self.ef, 1.0, out=self.df)
        np.divide(self.ef, self.df, out=self.df)
        self.df *= upstream
        self.df *= self.s > self.model.floor
        last = len(self.w) - 1
        a_last = self.act[-1] if self.pre else x
        np.matmul(a_last.T, self.df[:, None], out=self.g_w[last])
        self.g_b[last][0] = self.df.sum()
        delta = self.df[:, None]
        for i in range(len(self.pre) - 1, -1, -1):
            d = self.delta[i]
            if delta.shape[1] == 1:
                np.multiply(delta, self.w[i + 1].T, out=d)
            else:
                np.matmul(delta, self.w[i + 1].T, out=d)
            np.add(self.expo[i], 1.0, out=self.tmp[i])
            np.divide(self.expo[i], self.tmp[i], out=self.tmp[i])
            d *= self.tmp[i]
            a_prev = self.act[i - 1] if i > 0 else x
            np.matmul(a_prev.T, d, out=self.g_w[i])
            d.sum(axis=0, out=self.g_b[i])
            delta = d
        return self.g_w, self.g_b

    def grads_float64(self):
        return (
            [g.astype(np.float64) for g in self.g_w],
            [g.astype(np.float64) for g in self.g_b],
        )
