"""Deep Q-learning on latent beliefs.

Rollout phases mix a scripted expert (probability beta per episode) with
eps-greedy play of the learned Q; beta and eps decay multiplicatively
after each rollout phase. Latent states come from the inference network's
posterior mean along rollouts. The Q head lives inside WorldModelParams,
so checkpoints carry policy and model together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .runtime import RuntimeModel
from .world_model import WorldModelParams


class ConfigurationError(RuntimeError):
    pass


@dataclass
class ExplorationSchedule:
    beta0: float = 0.5
    beta_decay: float = 0.8
    eps0: float = 0.5
    eps_decay: float = 0.75

    def __post_init__(self):
        for v in (self.beta0, self.beta_decay, self.eps0, self.eps_decay):
            if not 0.0 <= v <= 1.0:
                raise ValueError("schedule values must lie in [0, 1]")


# appendix defaults: driving decays fast, the grid domains anneal slowly
DRIVING_SCHEDULE = ExplorationSchedule(0.5, 0.8, 0.5, 0.75)
GRID_SCHEDULE = ExplorationSchedule(1.0, 0.98, 0.5, 0.9)


class ReplayBuffer:
    """Capacity-bounded FIFO over latent transitions, uniform sampling."""

    def __init__(self, capacity: int, latent_dim: int):
        self.capacity = capacity
        self.z = np.zeros((capacity, latent_dim), dtype=np.float32)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity, dtype=np.float32)
        self.z2 = np.zeros((capacity, latent_dim), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=np.float32)
        self.size = 0
        self.ptr = 0

    def push(self, z, a, r, z2, done):
        i = self.ptr
        self.z[i], self.a[i], self.r[i], self.z2[i], self.done[i] = z, a, r, z2, float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self):
        return self.size

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(self.size, size=batch)
        return (
            torch.as_tensor(self.z[idx]),
            torch.as_tensor(self.a[idx]),
            torch.as_tensor(self.r[idx]),
            torch.as_tensor(self.z2[idx]),
            torch.as_tensor(self.done[idx]),
            idx,
        )


def select_action(q_values_fn, z: np.ndarray, eps: float, rng: np.random.Generator,
                  n_actions: int) -> int:
    """Eps-greedy over Q(z, .); exact ties resolve to the lowest action id."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if eps > 0 and rng.random() < eps:
        return int(rng.integers(n_actions))
    values = np.asarray(q_values_fn(z)).reshape(-1)
    return int(np.argmax(values))


@dataclass
class DQNConfig:
    episodes: int = 400
    episodes_per_phase: int = 10
    grad_steps_per_phase: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    gamma: float = 0.95
    target_update: int = 100
    capacity: int = 20000
    min_buffer: int = 200


def train_dqn(
    env_factory,
    params: WorldModelParams,
    expert,
    schedule: ExplorationSchedule,
    config: DQNConfig,
    rng: np.random.Generator,
) -> tuple[WorldModelParams, list[float]]:
    """Train the Q head on inferred beliefs; returns updated params + returns.

    env_factory(rng) builds a fresh episode environment; expert(env) returns
    a scripted action on ground truth and must be provided while beta > 0.
    """
    if schedule.beta0 > 0 and expert is None:
        raise ConfigurationError("expert policy required while beta > 0")
    arch = params.arch
    rt = RuntimeModel.from_params(params)
    model = params.module(torch.float32)
    for name, p in model.named_parameters():
        p.requires_grad_(name.startswith("q_net"))
    target = params.module(torch.float32)
    opt = torch.optim.Adam(model.q_net.parameters(), lr=config.lr)
    buffer = ReplayBuffer(config.capacity, arch.latent_dim)

    def q_np(z_row: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return model.q_values(torch.as_tensor(z_row, dtype=torch.float32).reshape(1, -1)).numpy()[0]

    beta, eps = schedule.beta0, schedule.eps0
    curve: list[float] = []
    grad_steps = 0
    episodes_done = 0
    while episodes_done < config.episodes:
        # rollout phase
        for _ in range(min(config.episodes_per_phase, config.episodes - episodes_done)):
            env = env_factory(rng)
            obs = env.reset(rng)
            prev_mean = np.zeros((1, arch.latent_dim))
            prev_action = None
            use_expert = bool(rng.random() < beta)
            ep_return, done = 0.0, False
            while not done:
                bundle = obs.masked()
                payloads = {m: np.atleast_2d(bundle.payloads[m]) for m in bundle.payloads}
                present = {m: np.array([float(bundle.present[m])]) for m in bundle.present}
                mean, _ = rt.infer(prev_mean, rt.action_onehot(prev_action), payloads, present)
                if use_expert:
                    action = int(expert(env))
                else:
                    action = select_action(q_np, mean[0], eps, rng, arch.n_actions)
                obs, reward, done, _ = env.step(action)
                bundle2 = obs.masked()
                payloads2 = {m: np.atleast_2d(bundle2.payloads[m]) for m in bundle2.payloads}
                present2 = {m: np.array([float(bundle2.present[m])]) for m in bundle2.present}
                mean2, _ = rt.infer(mean, rt.action_onehot(action), payloads2, present2)
                buffer.push(mean[0], action, reward, mean2[0], done)
                prev_mean, prev_action = mean, action
                ep_return += reward
            curve.append(ep_return)
            episodes_done += 1
        # gradient phase
        if len(buffer) >= config.min_buffer:
            for _ in range(config.grad_steps_per_phase):
                z, a, r, z2, done_f, _ = buffer.sample(config.batch_size, rng)
                with torch.no_grad():
                    target_q = target.q_values(z2).max(dim=1).values
                    td_target = r + config.gamma * (1.0 - done_f) * target_q
                q_all = model.q_values(z)
                q_sa = q_all.gather(1, a.unsqueeze(1)).squeeze(1)
                loss = torch.nn.functional.mse_loss(q_sa, td_target)
                opt.zero_grad()
                loss.backward()
                opt.step()
                grad_steps += 1
                if grad_steps % config.target_update == 0:
                    target.load_state_dict(model.state_dict())
        beta *= schedule.beta_decay
        eps *= schedule.eps_decay

    out = params.copy()
    for k, v in model.state_dict().items():
        if k.startswith("q_net"):
            out.state[k] = v.detach().numpy().copy()
    return out, curve
