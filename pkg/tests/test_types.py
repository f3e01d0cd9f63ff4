"""Core type tests: bundles, trajectories, beliefs."""

import numpy as np
import pytest

from mirror.types import (
    LatentBelief,
    ModalityBundle,
    NumericInputError,
    Step,
    TrajectoryRecord,
    load_trajectories,
    save_trajectories,
)


def test_belief_validation():
    with pytest.raises(ValueError):
        LatentBelief(np.zeros(3), np.zeros(3))  # zero variance
    with pytest.raises(NumericInputError):
        LatentBelief(np.array([np.nan]), np.ones(1))
    b = LatentBelief.standard(4)
    assert b.dim == 4
    s1 = b.sample(np.random.default_rng(9))
    s2 = b.sample(np.random.default_rng(9))
    assert np.array_equal(s1, s2)


def test_bundle_masking_zeroes_absent():
    bundle = ModalityBundle(
        {"a": np.array([1.0, 2.0]), "b": np.array([3.0])},
        {"a": True, "b": False},
    )
    masked = bundle.masked()
    assert np.array_equal(masked.payloads["a"], [1.0, 2.0])
    assert np.array_equal(masked.payloads["b"], [0.0])


def test_bundle_rejects_nonfinite():
    with pytest.raises(NumericInputError):
        ModalityBundle({"a": np.array([np.inf])}, {"a": True})


def test_trajectory_nonempty_and_finite():
    with pytest.raises(ValueError):
        TrajectoryRecord(steps=[])
    with pytest.raises(NumericInputError):
        TrajectoryRecord(
            steps=[Step(ModalityBundle({"a": np.zeros(1)}, {"a": True}), 0, float("nan"))]
        )


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    records = []
    for k in range(3):
        steps = [
            Step(
                ModalityBundle(
                    {"visual": rng.standard_normal(4), "verbal": rng.standard_normal(2)},
                    {"visual": True, "verbal": bool(k % 2)},
                ),
                int(rng.integers(3)),
                float(rng.standard_normal()),
            )
            for _ in range(5)
        ]
        records.append(
            TrajectoryRecord(steps=steps, domain="driving", variant="transfer",
                             scenario=k + 1, persona=f"p{k}", seed=k,
                             extra={"view": "robot"})
        )
    path = tmp_path / "trajs.jsonl"
    save_trajectories(path, records)
    loaded = load_trajectories(path)
    assert len(loaded) == 3
    for a, b in zip(records, loaded):
        assert (a.domain, a.variant, a.scenario, a.persona, a.seed) == (
            b.domain, b.variant, b.scenario, b.persona, b.seed)
        assert a.extra == b.extra
        for sa, sb in zip(a.steps, b.steps):
            assert sa.action == sb.action and sa.reward == sb.reward
            for m in sa.obs.payloads:
                assert np.array_equal(sa.obs.payloads[m], sb.obs.payloads[m])
                assert sa.obs.present[m] == sb.obs.present[m]


def test_rejects_unknown_schema(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"kind": "header", "schema": "other.v9", "domain": "x", '
                    '"variant": "original", "scenario": 1, "persona": "", "seed": 0}\n')
    with pytest.raises(ValueError):
        load_trajectories(path)
