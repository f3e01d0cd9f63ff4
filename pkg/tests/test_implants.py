"""Implant tests: filter semantics, residual softmax, fitting plumbing."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mirror.envs import bomb as bombmod
from mirror.envs.driving import DrivingEnv
from mirror.implants import (
    DrivingThresholdFilter,
    ImplantFitConfig,
    ImplantSet,
    MirrorPolicy,
    RescueRadialFilter,
    TerminalPerceptionProbs,
    UsageError,
    apply_perceptual,
    apply_policy_residual,
    default_implants,
    fit_implants,
    policy_nll,
)
from mirror.types import ModalityBundle, Step, TrajectoryRecord
from mirror.world_model import new_params
from mirror.envs.driving import driving_arch


def driving_obs(cars, ego_lane=0):
    """Full robot bundle with the given (lane, rel_pos) cars."""
    env = DrivingEnv(1)
    env.reset(np.random.default_rng(0))
    env.state.ego_lane = ego_lane
    while len(cars) < 4:
        cars = cars + [(1, 8.0)]
    env.state.lanes = np.array([c[0] for c in cars])
    env.state.rel_pos = np.array([c[1] for c in cars], dtype=float)
    env.state.speeds = np.ones(4)
    return env.full_observation()


def car_visible(bundle, i):
    return bundle.payloads["visual"][1 + 3 * i] > 0


class TestDrivingFilter:
    def test_front_threshold_masks_far_car(self):
        obs = driving_obs([(0, 3.0), (0, 2.0)])
        filt = DrivingThresholdFilter(front=2.0, back=0.0, side_front=2.0, side_back=0.0)
        out = apply_perceptual(obs, filt)
        assert not car_visible(out, 0)  # 3 units ahead, threshold 2
        assert car_visible(out, 1)  # exactly at the threshold stays visible

    def test_rear_threshold(self):
        obs = driving_obs([(0, -1.0), (1, -1.0)])
        filt = DrivingThresholdFilter(front=8.0, back=0.0, side_front=8.0, side_back=0.0)
        out = apply_perceptual(obs, filt)
        assert not car_visible(out, 0)
        assert not car_visible(out, 1)

    def test_wide_open_thresholds_are_identity(self):
        obs = driving_obs([(0, 3.0), (1, -5.0), (0, -2.0)])
        filt = DrivingThresholdFilter(16.0, 16.0, 16.0, 16.0)
        out = apply_perceptual(obs, filt)
        assert np.array_equal(out.payloads["visual"], obs.payloads["visual"])

    def test_never_reveals_hidden_item(self):
        obs = driving_obs([(0, 3.0)])
        obs.payloads["visual"][1:4] = 0.0  # car 0 already hidden upstream
        out = apply_perceptual(obs, DrivingThresholdFilter(16, 16, 16, 16))
        assert not car_visible(out, 0)

    def test_idempotent(self, rng):
        for _ in range(25):
            cars = [(int(rng.integers(2)), float(rng.integers(-8, 9))) for _ in range(4)]
            obs = driving_obs(cars, ego_lane=int(rng.integers(2)))
            filt = DrivingThresholdFilter(*rng.uniform(0, 8, size=4))
            once = apply_perceptual(obs, filt)
            twice = apply_perceptual(once, filt)
            assert np.array_equal(once.payloads["visual"], twice.payloads["visual"])

    def test_monotone_in_thresholds(self, rng):
        for _ in range(25):
            cars = [(int(rng.integers(2)), float(rng.integers(-8, 9))) for _ in range(4)]
            obs = driving_obs(cars)
            lo = rng.uniform(0, 6, size=4)
            hi = lo + rng.uniform(0, 4, size=4)
            out_lo = apply_perceptual(obs, DrivingThresholdFilter(*lo))
            out_hi = apply_perceptual(obs, DrivingThresholdFilter(*hi))
            for i in range(4):
                if car_visible(out_lo, i):
                    assert car_visible(out_hi, i)

    def test_fog_filter_drops_verbal(self):
        obs = driving_obs([(0, 1.0)])
        out = apply_perceptual(obs, DrivingThresholdFilter(2, 0, 2, 0, drop_verbal=True))
        assert out.present["verbal"] is False
        assert np.all(out.payloads["verbal"] == 0)

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            DrivingThresholdFilter(front=-1.0)


class TestBombFilter:
    def bomb_obs(self):
        from mirror.envs.bomb import BombEnv

        env = BombEnv(1)
        env.reset(np.random.default_rng(3))
        return env.full_observation()

    def test_all_ones_shows_everything(self):
        obs = self.bomb_obs()
        out = apply_perceptual(obs, TerminalPerceptionProbs((1.0,) * 6), np.random.default_rng(0))
        base = 4
        assert all(out.payloads["visual"][base + 5 * i] == 1.0 for i in range(6))

    def test_all_zeros_shows_nothing(self):
        obs = self.bomb_obs()
        out = apply_perceptual(obs, TerminalPerceptionProbs((0.0,) * 6), np.random.default_rng(0))
        base = 4
        assert all(out.payloads["visual"][base + 5 * i] == 0.0 for i in range(6))

    def test_needs_rng(self):
        with pytest.raises(UsageError):
            apply_perceptual(self.bomb_obs(), TerminalPerceptionProbs((0.5,) * 6))

    def test_probability_bounds_validated(self):
        with pytest.raises(ValueError):
            TerminalPerceptionProbs((1.5,) * 6)


class TestRescueFilter:
    def test_radius_masks_far_cells(self):
        from mirror.envs.rescue import RescueEnv

        env = RescueEnv(1)
        env.reset(np.random.default_rng(0))
        env.state.agent = (6, 4)
        obs = env.full_observation()
        out = apply_perceptual(obs, RescueRadialFilter(1.5))
        grid = out.payloads["visual"].reshape(5, 9, 9)
        assert grid[0, 5, 4] == 1.0  # adjacent stays known
        assert grid[0, 2, 4] == 0.0  # far cell hidden
        assert np.all(grid[1, 2] == 0.0)


class TestPolicyResidual:
    def test_zero_residual_is_plain_softmax(self):
        logits = np.array([0.5, -1.0, 2.0])
        probs = apply_policy_residual(logits, None, np.zeros(3))
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(probs, expected, atol=1e-12)

    def test_large_residual_dominates(self):
        # direct softmax evaluation oracle: p = softmax((10, 0))
        expected0 = 1.0 / (1.0 + math.exp(-10.0))
        probs = apply_policy_residual(np.array([10.0, 0.0]), None, np.zeros(2))
        assert probs[0] == pytest.approx(expected0, abs=1e-9)
        assert probs[0] == pytest.approx(0.99995, abs=5e-6)
        assert int(np.argmax(probs)) == 0

    @given(
        st.lists(st.floats(-50, 50), min_size=2, max_size=6),
    )
    @settings(max_examples=60, deadline=None)
    def test_simplex_for_any_finite_logits(self, logits):
        probs = apply_policy_residual(np.array(logits), None, np.zeros(1))
        assert abs(probs.sum() - 1.0) < 1e-12
        assert np.all(probs > 0)


def make_driving_demos(n=3, length=6):
    rng = np.random.default_rng(0)
    demos = []
    for k in range(n):
        env = DrivingEnv(1 + (k % 8))
        obs = env.reset(np.random.default_rng(k))
        steps = []
        for t in range(length):
            action = int(rng.integers(2))
            nxt, reward, done, _ = env.step(action)
            steps.append(Step(obs, action, reward))
            obs = nxt
        demos.append(TrajectoryRecord(steps=steps, domain="driving"))
    return demos


class TestFitImplants:
    def test_rejects_empty_and_negative_lambda(self):
        params = new_params(driving_arch(), seed=0)
        implants = default_implants("driving", "transfer")
        with pytest.raises(UsageError):
            fit_implants([], params, implants, ImplantFitConfig(), np.random.default_rng(0))
        with pytest.raises(UsageError):
            fit_implants(
                make_driving_demos(), params, implants,
                ImplantFitConfig(lam=-0.1), np.random.default_rng(0),
            )

    def test_model_params_never_mutated(self, tmp_path):
        params = new_params(driving_arch(), seed=1)
        before = tmp_path / "before.ckpt"
        params.save(before)
        implants = default_implants("driving", "transfer")
        fit_implants(
            make_driving_demos(), params, implants,
            ImplantFitConfig(steps=5), np.random.default_rng(0),
        )
        after = tmp_path / "after.ckpt"
        params.save(after)
        assert before.read_bytes() == after.read_bytes()

    def test_lambda_zero_excludes_prior(self):
        params = new_params(driving_arch(), seed=1)
        demos = make_driving_demos()
        # shared seed: the first logged NLL is identical, later steps diverge
        # because only the lam > 0 run optimizes the prior term
        implants = default_implants("driving", "transfer")
        cfg0 = ImplantFitConfig(steps=3, lam=0.0, lr=0.5, seed=7)
        cfg1 = ImplantFitConfig(steps=3, lam=50.0, lr=0.5, seed=7)
        _, curve0 = fit_implants(demos, params, implants, cfg0, np.random.default_rng(5))
        _, curve1 = fit_implants(demos, params, implants, cfg1, np.random.default_rng(5))
        assert curve0[0] == pytest.approx(curve1[0], abs=1e-7)
        assert abs(curve0[-1] - curve1[-1]) > 1e-6

    def test_fitted_set_serializes(self, tmp_path):
        params = new_params(driving_arch(), seed=1)
        fitted, curve = fit_implants(
            make_driving_demos(), params, default_implants("driving", "transfer"),
            ImplantFitConfig(steps=4), np.random.default_rng(0),
        )
        assert len(curve) == 4
        path = tmp_path / "implants.json"
        fitted.save(path)
        loaded = ImplantSet.load(path)
        assert loaded.perceptual == fitted.perceptual
        for k in fitted.residual_state:
            np.testing.assert_array_equal(loaded.residual_state[k], fitted.residual_state[k])


class _ConstantPolicy:
    """Stub emitting a fixed probability vector."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)

    def start(self, rng=None):
        pass

    def step(self, obs):
        return self.probs

    def advance(self, action):
        pass


class _RecordedActionPolicy(_ConstantPolicy):
    """Predicts whichever action the record plays next with probability one."""

    def __init__(self, records):
        self.actions = []
        for rec in records:
            self.actions.extend(s.action for s in rec.steps)
        self.i = 0

    def start(self, rng=None):
        pass

    def step(self, obs):
        probs = np.zeros(2)
        probs[self.actions[self.i]] = 1.0
        return probs

    def advance(self, action):
        self.i += 1


class TestPolicyNLL:
    def test_perfect_predictor_zero_nll(self):
        demos = make_driving_demos(2, 5)
        assert policy_nll(_RecordedActionPolicy(demos), demos) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_policy_ln2(self):
        demos = make_driving_demos(2, 5)
        nll = policy_nll(_ConstantPolicy([0.5, 0.5]), demos)
        assert nll == pytest.approx(math.log(2.0), abs=1e-12)

    def test_empty_testset_rejected(self):
        with pytest.raises(UsageError):
            policy_nll(_ConstantPolicy([1.0, 0.0]), [])

    def test_mirror_policy_runs(self):
        params = new_params(driving_arch(), seed=2)
        demos = make_driving_demos(1, 4)
        implants = default_implants("driving", "transfer")
        nll = policy_nll(MirrorPolicy(params, implants), demos, np.random.default_rng(0))
        assert np.isfinite(nll) and nll > 0
