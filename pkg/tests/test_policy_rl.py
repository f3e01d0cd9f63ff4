"""DQN tests against a value-iteration oracle on a 5-state chain MDP."""

import numpy as np
import pytest
import torch
from scipy import stats

from conftest import inv_softplus
from mirror.policy_rl import (
    DRIVING_SCHEDULE,
    GRID_SCHEDULE,
    ConfigurationError,
    DQNConfig,
    ExplorationSchedule,
    ReplayBuffer,
    select_action,
    train_dqn,
)
from mirror.types import ModalityBundle
from mirror.world_model import ArchSpec, ModalitySpec, new_params

N_STATES = 5
GAMMA = 0.95


class ChainEnv:
    """Deterministic chain: right moves toward the terminal, +1 on arrival."""

    n_actions = 2

    def __init__(self):
        self.state = 0
        self.steps = 0

    def reset(self, rng):
        del rng
        self.state = 0
        self.steps = 0
        return self._obs()

    def _obs(self):
        onehot = np.zeros(N_STATES)
        onehot[self.state] = 1.0
        return ModalityBundle({"x": onehot}, {"x": True})

    def step(self, action):
        if action == 1:
            self.state = min(self.state + 1, N_STATES - 1)
        else:
            self.state = max(self.state - 1, 0)
        reward = 1.0 if self.state == N_STATES - 1 else 0.0
        self.steps += 1
        done = self.state == N_STATES - 1 or self.steps >= 30
        return self._obs(), reward, done, {}


def value_iteration_oracle():
    """Exact Q* for the chain (terminal state absorbing with zero value)."""
    q = np.zeros((N_STATES, 2))
    for _ in range(500):
        v = q.max(axis=1)
        v[N_STATES - 1] = 0.0
        new_q = np.zeros_like(q)
        for s in range(N_STATES - 1):
            for a, nxt in ((0, max(s - 1, 0)), (1, min(s + 1, N_STATES - 1))):
                reward = 1.0 if nxt == N_STATES - 1 else 0.0
                new_q[s, a] = reward + GAMMA * v[nxt]
        if np.abs(new_q - q).max() < 1e-12:
            q = new_q
            break
        q = new_q
    return q


def identity_latent_params():
    """Hand-set model whose posterior mean reproduces the one-hot state."""
    arch = ArchSpec(
        latent_dim=N_STATES,
        n_actions=2,
        modalities=[ModalitySpec("x", N_STATES, dec_hidden=())],
        trans_hidden=(),
        infer_hidden=(),
        reward_hidden=(),
        q_hidden=(64, 64),
    )
    params = new_params(arch, seed=0)
    state = {k: v.astype(np.float64) for k, v in params.state.items()}
    w = np.zeros((2 * N_STATES, N_STATES + 2 + N_STATES + 1))
    w[:N_STATES, N_STATES + 2 : 2 * N_STATES + 2] = np.eye(N_STATES)
    state["infer_net.net.layers.0.weight"] = w
    bias = np.zeros(2 * N_STATES)
    bias[N_STATES:] = inv_softplus(1e-4)
    state["infer_net.net.layers.0.bias"] = bias
    params.state = state
    return params


class TestSelectAction:
    def test_greedy_argmax(self):
        q = lambda z: np.array([1.0, 3.0])
        assert select_action(q, np.zeros(1), 0.0, np.random.default_rng(0), 2) == 1

    def test_exact_tie_prefers_lowest_index(self):
        q = lambda z: np.array([2.0, 2.0])
        assert select_action(q, np.zeros(1), 0.0, np.random.default_rng(0), 2) == 0

    def test_uniform_at_eps_one(self):
        q = lambda z: np.array([5.0, -5.0])
        rng = np.random.default_rng(42)
        draws = [select_action(q, np.zeros(1), 1.0, rng, 2) for _ in range(10_000)]
        freq1 = np.mean(draws)
        assert 0.47 <= freq1 <= 0.53  # binomial 3-sigma band around 0.5


class TestReplayBuffer:
    def test_capacity_bound(self):
        buf = ReplayBuffer(capacity=10, latent_dim=2)
        for i in range(25):
            buf.push(np.zeros(2), 0, 0.0, np.zeros(2), False)
            assert len(buf) <= 10
        assert len(buf) == 10

    def test_uniform_sampling_covers_indices(self):
        buf = ReplayBuffer(capacity=16, latent_dim=1)
        for i in range(16):
            buf.push(np.array([float(i)]), 0, 0.0, np.zeros(1), False)
        rng = np.random.default_rng(3)
        counts = np.zeros(16)
        n_draws = 16_000
        for _ in range(n_draws // 100):
            *_, idx = buf.sample(100, rng)
            for i in idx:
                counts[i] += 1
        chi2 = ((counts - n_draws / 16) ** 2 / (n_draws / 16)).sum()
        p = 1.0 - stats.chi2.cdf(chi2, df=15)
        assert p > 0.001


class TestSchedules:
    def test_paper_defaults(self):
        assert (DRIVING_SCHEDULE.beta0, DRIVING_SCHEDULE.beta_decay) == (0.5, 0.8)
        assert (DRIVING_SCHEDULE.eps0, DRIVING_SCHEDULE.eps_decay) == (0.5, 0.75)
        assert (GRID_SCHEDULE.beta0, GRID_SCHEDULE.beta_decay) == (1.0, 0.98)
        assert (GRID_SCHEDULE.eps0, GRID_SCHEDULE.eps_decay) == (0.5, 0.9)

    def test_decay_never_increases(self):
        sched = ExplorationSchedule(0.9, 0.7, 0.4, 0.95)
        beta, eps = sched.beta0, sched.eps0
        for _ in range(50):
            nb, ne = beta * sched.beta_decay, eps * sched.eps_decay
            assert nb <= beta and ne <= eps
            beta, eps = nb, ne

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ExplorationSchedule(beta0=1.2)


class TestTrainDQN:
    def test_missing_expert_rejected(self):
        params = identity_latent_params()
        with pytest.raises(ConfigurationError):
            train_dqn(
                lambda rng: ChainEnv(), params, None,
                ExplorationSchedule(0.5, 0.8, 0.5, 0.75), DQNConfig(episodes=1),
                np.random.default_rng(0),
            )

    def test_chain_mdp_matches_value_iteration(self):
        torch.manual_seed(0)
        params = identity_latent_params()
        q_star = value_iteration_oracle()
        config = DQNConfig(
            episodes=300,
            episodes_per_phase=20,
            grad_steps_per_phase=300,
            batch_size=64,
            lr=1e-3,
            gamma=GAMMA,
            target_update=100,
            capacity=10000,
        )
        schedule = ExplorationSchedule(0.5, 0.9, 0.5, 0.9)
        trained, curve = train_dqn(
            lambda rng: ChainEnv(),
            params,
            expert=lambda env: 1,
            schedule=schedule,
            config=config,
            rng=np.random.default_rng(11),
        )
        model = trained.module(torch.float32)
        with torch.no_grad():
            q_learned = model.q_values(torch.eye(N_STATES)).numpy()
        # greedy policy must be exactly optimal at every non-terminal state
        for s in range(N_STATES - 1):
            assert int(np.argmax(q_learned[s])) == int(np.argmax(q_star[s])), s
        err = np.abs(q_learned[: N_STATES - 1] - q_star[: N_STATES - 1]).max()
        assert err <= 0.05
        assert len(curve) == config.episodes
