"""Importance weighting under covariate shift, end to end: a constrained
density-ratio network, weight diagnostics and transforms, kernel and
discriminator baselines, and PAC-Bayes risk certificates (fixed-time and
anytime), validated on a Gaussian mean-shift patch test against
pre-registered tolerances."""

from . import (artifacts, baselines, certificates, diagnostics, engine,
               harness, lab, net, risk)

__version__ = "0.1.0"

__all__ = [
    "artifacts",
    "baselines",
    "certificates",
    "diagnostics",
    "engine",
    "harness",
    "lab",
    "net",
    "risk",
    "__version__",
]
