from __future__ import annotations

import hashlib
import json
import math

import numpy as np
import pytest

from shiftlab.artifacts import (
    ImmutabilityError,
    canonical_json,
    content_hash,
    emit_artifact,
    load_artifact,
    load_registry,
    registry_bytes,
    validate_completeness,
)


def test_canonical_json_sorted_and_compact():
    payload = canonical_json({"b": 1, "a": {"z": [1, 2], "y": 0.5}})
    assert payload == b'{"a":{"y":0.5,"z":[1,2]},"b":1}'


def test_canonical_json_key_order_irrelevant():
    a = {"x": 1, "y": {"p": 2, "q": 3}}
    b = {"y": {"q": 3, "p": 2}, "x": 1}
    assert canonical_json(a) == canonical_json(b)
    assert content_hash(a) == content_hash(b)


def test_canonical_json_float_round_trip():
    value = 0.1 + 0.2  # 0.30000000000000004, shortest repr must survive
    report = {"v": value}
    decoded = json.loads(canonical_json(report))
    assert decoded["v"] == value


def test_canonical_json_nonfinite_encoding():
    payload = json.loads(canonical_json(
        {"a": math.inf, "b": -math.inf, "c": math.nan}))
    assert payload == {"a": "inf", "b": "-inf", "c": "nan"}


def test_canonical_json_numpy_scalars():
    report = {"x": np.float64(0.25), "n": np.int64(7),
              "flag": np.bool_(True)}
    assert json.loads(canonical_json(report)) == {
        "x": 0.25, "n": 7, "flag": True}


def test_content_hash_stable_and_sensitive():
    base = {"stage": "S0", "value": 1.0}
    assert content_hash(base) == content_hash(dict(base))
    assert content_hash(base) != content_hash({"stage": "S0", "value": 1.1})
    assert content_hash(base) == hashlib.sha256(
        canonical_json(base)).hexdigest()


def test_emit_artifact_idempotent(tmp_path):
    report = {"stage": "S0", "passed": True, "q": {"m": 0.5}}
    path = tmp_path / "S0.json"
    first = emit_artifact(report, path)
    second = emit_artifact({"q": {"m": 0.5}, "passed": True, "stage": "S0"},
                           path)
    assert first == second
    assert load_artifact(path) == report


def test_emit_artifact_refuses_mutation(tmp_path):
    path = tmp_path / "S1.json"
    emit_artifact({"stage": "S1", "passed": True}, path)
    with pytest.raises(ImmutabilityError):
        emit_artifact({"stage": "S1", "passed": False}, path)
    # the original bytes survive the refused write
    assert load_artifact(path) == {"stage": "S1", "passed": True}


def test_emit_artifact_leaves_no_temp_file(tmp_path):
    emit_artifact({"k": 1}, tmp_path / "a.json")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.json"]


def test_load_artifact_round_trip(tmp_path):
    report = {"criteria": [{"id": "c1", "passed": True}],
              "quantities": {"ess": 0.775093, "bound": "inf"}}
    path = tmp_path / "r.json"
    emit_artifact(report, path)
    assert load_artifact(path) == report


def test_validate_completeness_exact_set():
    report = {"criteria": [{"id": "a"}, {"id": "b"}]}
    validate_completeness(report, {"a", "b"})
    with pytest.raises(ValueError, match="missing=\\['c'\\]"):
        validate_completeness(report, {"a", "b", "c"})
    with pytest.raises(ValueError, match="extra=\\['b'\\]"):
        validate_completeness(report, {"a"})
    with pytest.raises(ValueError):
        validate_completeness({"criteria": []}, {"a"})


def test_registry_loads_and_hash_matches_bytes():
    registry, sha = load_registry()
    assert sha == hashlib.sha256(registry_bytes()).hexdigest()
    assert registry["version"] == 1
    assert registry["base_seed"] == 922337
    stages = registry["stages"]
    assert set(stages) == {f"S{i}" for i in range(8)}
    # every rule carries an id and a kind the checker knows
    kinds = {"absolute", "relative", "mc_band", "coverage_floor",
             "failure_cap"}
    for stage in stages.values():
        for rule in stage["rules"]:
            assert rule["kind"] in kinds
            assert rule["id"]


def test_registry_rule_ids_unique():
    registry, _ = load_registry()
    ids = [rule["id"] for stage in registry["stages"].values()
           for rule in stage["rules"]]
    assert len(ids) == len(set(ids))
