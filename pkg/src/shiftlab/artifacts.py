"""Immutable JSON verdict artifacts and the registered tolerance file.

Artifacts are canonical JSON: sorted keys, compact separators, and floats in
Python's shortest round-trip decimal form, so an identical report always
produces identical bytes and one content hash.  A path that already holds a
different artifact is never overwritten.  Nonfinite floats (the Bernoulli-KL
boundary) are encoded as the strings "inf"/"-inf"/"nan" since canonical JSON
has no literal for them.

The tolerance registry ships inside the package (registry.toml); its SHA-256
is embedded in every artifact and there is no override path, so a report can
always be traced to the exact tolerances it was judged against.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from importlib import resources

try:
    import tomllib as tomli  # stdlib from 3.11
except ModuleNotFoundError:
    import tomli


class ImmutabilityError(RuntimeError):
    """Destination already holds a different artifact."""


def _encode(value):
    if isinstance(value, dict):
        return {str(k): _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        return _encode(value.item())  # numpy scalars
    return value


def canonical_json(report: dict) -> bytes:
    return json.dumps(_encode(report), sort_keys=True,
                      separators=(",", ":"), allow_nan=False).encode("utf-8")


def content_hash(report: dict) -> str:
    return hashlib.sha256(canonical_json(report)).hexdigest()


def emit_artifact(report: dict, path) -> str:
    """Write the canonical form once; returns its SHA-256.

    Re-emitting an identical report is a no-op with the same hash; emitting
    a different report at an existing path raises ImmutabilityError.
    """
    payload = canonical_json(report)
    digest = hashlib.sha256(payload).hexdigest()
    path = os.fspath(path)
    if os.path.exists(path):
        with open(path, "rb") as fh:
            existing = fh.read()
        if hashlib.sha256(existing).hexdigest() != digest:
            raise ImmutabilityError(
                f"{path} already holds a different artifact; refusing to overwrite"
            )
        return digest
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return digest


def load_artifact(path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.read().decode("utf-8"))


def registry_bytes() -> bytes:
    return resources.files("shiftlab").joinpath("registry.toml").read_bytes()


def load_registry() -> tuple[dict, str]:
    """(parsed registry, SHA-256 of the registered bytes)."""
    raw = registry_bytes()
    return tomli.loads(raw.decode("utf-8")), hashlib.sha256(raw).hexdigest()


def validate_completeness(report: dict, required_ids: set[str]) -> None:
    """Refuse a report whose criterion set differs from the registered set."""
    got = {c["id"] for c in report.get("criteria", [])}
    if got != set(required_ids):
        missing = sorted(set(required_ids) - got)
        extra = sorted(got - set(required_ids))
        raise ValueError(
            f"criterion set mismatch: missing={missing} extra={extra}"
        )
