"""Gaussian mean-shift laboratory: sampling, the closed-form density ratio,
and every population reference value used by the campaign.

The instance is one-dimensional: source Q = N(0, 1), target P_mu = N(mu, 1).
The Radon-Nikodym derivative has the closed form

    r*_mu(z) = exp(mu*z - mu^2/2),

and the moments of r* under Q follow from E_Q[r*^k] = exp(k*(k-1)*mu^2/2):
the normalization E_Q[r*] = 1, the second moment E_Q[r*^2] = exp(mu^2),
the transported moments E_Q[r* Z] = mu and E_Q[r* Z^2] = 1 + mu^2, and the
population effective-sample fraction exp(-mu^2).
"""

from __future__ import annotations

import hashlib
import math
import sys
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

LOG_FLOAT_MAX = math.log(sys.float_info.max)
LOG_FLOAT_MIN = math.log(sys.float_info.min)


class SaturationWarning(UserWarning):
    """Raised when a ratio evaluation overflows and is saturated."""


@dataclass(frozen=True)
class ShiftConfig:
    """One mean-shift instance: shift mu, sample counts, and the base seed."""

    mu: float
    n_q: int
    n_p: int
    seed: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.mu):
            raise ValueError("mu must be finite")
        if self.n_q < 1 or self.n_p < 1:
            raise ValueError("sample counts must be >= 1")


@dataclass(frozen=True)
class SampleBatch:
    values: np.ndarray
    law: str  # "source" | "target"
    seed_used: int


@dataclass(frozen=True)
class IdentityTable:
    norm: float
    second_moment: float
    first_moment_transport: float
    second_moment_transport: float
    ess_fraction: float


def _key_digest(base_seed: int, labels) -> bytes:
    key = "\x1f".join([str(int(base_seed))] + [str(x) for x in labels])
    return hashlib.sha256(key.encode("utf-8")).digest()


def substream(base_seed: int, *labels) -> np.random.Generator:
    """Derive an independent PCG64 substream from a base seed and labels.

    The (base_seed, *labels) tuple is rendered to a canonical UTF-8 string,
    hashed with SHA-256, and the first 16 bytes are consumed as four 32-bit
    entropy words for a SeedSequence.  Substreams are therefore reproducible,
    order-independent, and collision-resistant across (stage, seed-index,
    law) keys without any shared-state jumping.
    """
    digest = _key_digest(base_seed, labels)
    words = [int.from_bytes(digest[4 * i : 4 * i + 4], "little") for i in range(4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def derive_seed(base_seed: int, *labels) -> int:
    """Derive a 63-bit integer seed with the same keying as substream, for
    configs that carry one integer rather than a generator.  Reads a disjoint
    slice of the digest so the integer is independent of the substream drawn
    from the same labels."""
    digest = _key_digest(base_seed, labels)
    return int.from_bytes(digest[16:24], "little") >> 1


def _standard_normal(rng: np.random.Generator, n: int) -> np.ndarray:
    # Inversion sampling: map a uint64 draw k to the open unit interval via
    # (k + 0.5) * 2^-64 and apply the normal quantile.  Fixed here so replays
    # are byte-stable regardless of the library's default normal algorithm.
    k = rng.integers(0, 2**64, size=n, dtype=np.uint64, endpoint=False)
    u = (k.astype(np.float64) + 0.5) * 2.0**-64
    return ndtri(u)


def sample(config: ShiftConfig, law: str) -> SampleBatch:
    """Draw the source or target batch for one instance, deterministically.

    The stream depends on (seed, law) only, so the two laws are independent
    and a batch is reproducible given (seed, law, count).
    """
    if law == "source":
        n, shift = config.n_q, 0.0
    elif law == "target":
        n, shift = config.n_p, config.mu
    else:
        raise ValueError(f"unknown law {law!r}")
    rng = substream(config.seed, "sample", law)
    values = _standard_normal(rng, n)
    if shift != 0.0:
        values = values + shift
    values.flags.writeable = False
    return SampleBatch(values=values, law=law, seed_used=config.seed)


def true_ratio(z, mu: float):
    """Closed-form ratio r*_mu(z) = exp(mu*z - mu^2/2).

    Accepts a scalar or an array.  Exponents beyond the float64 range are
    saturated to the largest finite value and a SaturationWarning is issued;
    stress shifts legitimately produce huge tail values and a hard error
    would be wrong there.
    """
    z = np.asarray(z, dtype=np.float64)
    expo = mu * z - 0.5 * mu * mu
    saturated = expo > LOG_FLOAT_MAX
    if np.any(saturated):
        warnings.warn(
            "ratio exponent beyond float range; saturating", SaturationWarning
        )
        expo = np.where(saturated, LOG_FLOAT_MAX, expo)
    # the low side clamps to the smallest positive normal so the ratio stays
    # strictly positive instead of underflowing to zero in the far left tail
    out = np.exp(np.maximum(expo, LOG_FLOAT_MIN))
    return float(out) if out.ndim == 0 else out


def analytic_identities(mu: float) -> IdentityTable:
    """Population reference values for one shift (see the module docstring)."""
    m2 = math.exp(mu * mu)
    return IdentityTable(
        norm=1.0,
        second_moment=m2,
        first_moment_transport=mu,
        second_moment_transport=1.0 + mu * mu,
        ess_fraction=math.exp(-mu * mu),
    )


def target_risk(a: float, mu: float) -> float:
    """Closed-form target risk of h_a(z) = a*z under squared loss:
    R_{P_mu}(h_a) = (1-a)^2 (1+mu^2)."""
    return (1.0 - a) ** 2 * (1.0 + mu * mu)


def sigma_mc(a: float, mu: float, n: int) -> float:
    """Monte Carlo standard error of the target-sample risk estimate,
    sigma_MC = (1-a)^2 sqrt((2+4 mu^2)/n); this is SD[(1-a)^2 Z^2]/sqrt(n)
    for Z ~ P_mu, since Var[Z^2] = 2 + 4 mu^2 when Var[Z] = 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return (1.0 - a) ** 2 * math.sqrt((2.0 + 4.0 * mu * mu) / n)


def transport_sd(mu: float, moment: int) -> float:
    """Standard deviation under Q of r*(Z) * Z^moment, moment in {0, 1, 2}.

    These drive the Monte Carlo bands for oracle-weighted estimators.  Using
    r*_mu(z)^2 = exp(mu^2) * r*_{2mu}(z), the second moments reduce to plain
    Gaussian moments under P_{2mu}:

        Var[r*]       = e^{mu^2} - 1
        Var[r* Z]     = e^{mu^2} (1 + 4 mu^2) - mu^2
        Var[r* Z^2]   = e^{mu^2} (3 + 24 mu^2 + 16 mu^4) - (1 + mu^2)^2
    """
    m2 = math.exp(mu * mu)
    if moment == 0:
        var = m2 - 1.0
    elif moment == 1:
        var = m2 * (1.0 + 4.0 * mu * mu) - mu * mu
    elif moment == 2:
        var = m2 * (3.0 + 24.0 * mu**2 + 16.0 * mu**4) - (1.0 + mu * mu) ** 2
    else:
        raise ValueError("moment must be 0, 1, or 2")
    return math.sqrt(var)


def ratio_square_sd(mu: float) -> float:
    """Standard deviation under Q of r*(Z)^2: sqrt(e^{6 mu^2} - e^{2 mu^2}),
    from E_Q[r*^4] = e^{6 mu^2}."""
    return math.sqrt(math.exp(6.0 * mu * mu) - math.exp(2.0 * mu * mu))


def weighted_risk_sd(a: float, mu: float, n: int) -> float:
    """Per-run standard deviation of the oracle-weighted risk estimate
    (1/n) sum r*(Z_i) (1-a)^2 Z_i^2 on a source batch: the weighted
    estimator's own spread, (1-a)^2 * SD_Q[r* Z^2] / sqrt(n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return (1.0 - a) ** 2 * transport_sd(mu, 2) / math.sqrt(n)
