"""Behavioral cloning and soft-Q imitation baselines.

Both consume the human's ground-truth observations (they are told what the
human can perceive, unlike the implanted self-model which has to learn
it). The policy body is a GRU over (observation, previous action) followed
by a small fully-connected head; the head depth is searched over a fixed
grid with early stopping on validation NLL.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .types import ModalityBundle, TrajectoryRecord, UsageError
from .world_model import ArchSpec

# ---------------------------------------------------------------------------
# Shared recurrent policy body
# ---------------------------------------------------------------------------


def obs_input_dim(arch: ArchSpec) -> int:
    return sum(m.dim + 1 for m in arch.modalities) + arch.n_actions


def bundle_to_vec(bundle: ModalityBundle, arch: ArchSpec, prev_action: int | None) -> np.ndarray:
    b = bundle.masked()
    parts = []
    for m in arch.modalities:
        parts.append(b.payloads[m.name])
        parts.append([float(b.present[m.name])])
    a = np.zeros(arch.n_actions)
    if prev_action is not None:
        a[prev_action] = 1.0
    parts.append(a)
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


class RecurrentPolicy(nn.Module):
    """GRU encoder + FC head emitting action logits (or Q values for SQIL)."""

    def __init__(self, arch: ArchSpec, hidden: int = 48, head_width: int = 32,
                 head_layers: int = 1):
        super().__init__()
        self.arch = arch
        self.hidden = hidden
        self.cell = nn.GRUCell(obs_input_dim(arch), hidden)
        widths = [hidden] + [head_width] * head_layers
        self.head = nn.ModuleList(
            nn.Linear(widths[i], widths[i + 1]) for i in range(head_layers)
        )
        self.out = nn.Linear(widths[-1], arch.n_actions)

    def head_forward(self, h):
        x = h
        for layer in self.head:
            x = torch.tanh(layer(x))
        return self.out(x)

    def forward_sequence(self, inputs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """inputs (B, T, D), mask (B, T) -> logits (B, T, A); hidden resets at t=0."""
        b, tmax, _ = inputs.shape
        h = torch.zeros(b, self.hidden, dtype=inputs.dtype)
        outs = []
        for t in range(tmax):
            h_new = self.cell(inputs[:, t], h)
            h = torch.where(mask[:, t].unsqueeze(-1) > 0, h_new, h)
            outs.append(self.head_forward(h))
        return torch.stack(outs, dim=1)


def pack_policy_batch(records: list[TrajectoryRecord], arch: ArchSpec):
    b = len(records)
    tmax = max(len(r) for r in records)
    dim = obs_input_dim(arch)
    inputs = torch.zeros(b, tmax, dim)
    actions = torch.zeros(b, tmax, dtype=torch.long)
    mask = torch.zeros(b, tmax)
    for i, rec in enumerate(records):
        prev = None
        for t, step in enumerate(rec.steps):
            inputs[i, t] = torch.as_tensor(bundle_to_vec(step.obs, arch, prev), dtype=torch.float32)
            actions[i, t] = step.action
            mask[i, t] = 1.0
            prev = step.action
    return inputs, actions, mask


# ---------------------------------------------------------------------------
# Behavioral cloning
# ---------------------------------------------------------------------------


@dataclass
class BCConfig:
    epochs: int = 150
    lr: float = 1e-3
    patience: int = 10
    gru_hidden: int = 48
    head_width: int = 32
    layer_grid: tuple[int, ...] = (1, 2, 3)
    seed: int = 0


class BCPolicy:
    """Trained cloning policy exposed through the teacher-forced NLL interface."""

    def __init__(self, net: RecurrentPolicy, arch: ArchSpec):
        self.net = net
        self.arch = arch

    def start(self, rng=None):
        self._h = torch.zeros(1, self.net.hidden)
        self._prev = None

    def step(self, obs: ModalityBundle) -> np.ndarray:
        vec = torch.as_tensor(
            bundle_to_vec(obs, self.arch, self._prev), dtype=torch.float32
        ).unsqueeze(0)
        with torch.no_grad():
            self._h = self.net.cell(vec, self._h)
            logits = self.net.head_forward(self._h)
            probs = torch.softmax(logits, dim=-1).numpy()[0]
        return probs

    def advance(self, action: int):
        self._prev = int(action)

    def act(self, obs: ModalityBundle, rng: np.random.Generator, greedy: bool = True) -> int:
        probs = self.step(obs)
        action = int(np.argmax(probs)) if greedy else int(rng.choice(len(probs), p=probs))
        self.advance(action)
        return action


def _nll_on(net: RecurrentPolicy, batch) -> float:
    inputs, actions, mask = batch
    with torch.no_grad():
        logits = net.forward_sequence(inputs, mask)
        logp = torch.log_softmax(logits, dim=-1)
        chosen = logp.gather(2, actions.unsqueeze(-1)).squeeze(-1)
        return float(-(chosen * mask).sum() / mask.sum())


def train_bc(
    demos: list[TrajectoryRecord],
    valset: list[TrajectoryRecord],
    arch: ArchSpec,
    config: BCConfig,
) -> tuple[BCPolicy, dict]:
    """Cross-entropy cloning with early stopping on validation NLL.

    Searches the configured head-depth grid and returns the best measured
    checkpoint (argmin validation NLL across all epochs and depths).
    """
    if not valset:
        raise UsageError("empty validation set")
    if not demos:
        raise UsageError("empty demonstration set")
    train_batch = pack_policy_batch(demos, arch)
    val_batch = pack_policy_batch(valset, arch)
    best = {"nll": math.inf, "state": None, "layers": None, "epoch": None}
    history = {}
    for layers in config.layer_grid:
        torch.manual_seed(config.seed + layers)
        net = RecurrentPolicy(arch, config.gru_hidden, config.head_width, layers)
        opt = torch.optim.Adam(net.parameters(), lr=config.lr)
        val_curve = [_nll_on(net, val_batch)]
        if val_curve[0] < best["nll"]:
            best = {"nll": val_curve[0], "state": _clone_state(net), "layers": layers, "epoch": 0}
        since_best = 0
        for epoch in range(1, config.epochs + 1):
            inputs, actions, mask = train_batch
            logits = net.forward_sequence(inputs, mask)
            logp = torch.log_softmax(logits, dim=-1)
            chosen = logp.gather(2, actions.unsqueeze(-1)).squeeze(-1)
            loss = -(chosen * mask).sum() / mask.sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            val_nll = _nll_on(net, val_batch)
            val_curve.append(val_nll)
            if val_nll < best["nll"] - 1e-9:
                best = {"nll": val_nll, "state": _clone_state(net), "layers": layers, "epoch": epoch}
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
        history[layers] = val_curve
    net = RecurrentPolicy(arch, config.gru_hidden, config.head_width, best["layers"])
    net.load_state_dict(best["state"])
    info = {
        "val_nll": best["nll"],
        "layers": best["layers"],
        "best_epoch": best["epoch"],
        "val_curves": history,
    }
    return BCPolicy(net, arch), info


def _clone_state(net: nn.Module):
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


# ---------------------------------------------------------------------------
# Soft Q imitation
# ---------------------------------------------------------------------------


@dataclass
class SQILConfig:
    grad_steps: int = 600
    batch_episodes: int = 16  # half demos, half fresh rollouts
    lr: float = 1e-3
    gamma: float = 0.95
    temperature: float = 1.0
    gru_hidden: int = 48
    head_width: int = 32
    head_layers: int = 3
    rollout_every: int = 10
    target_update: int = 50
    max_rollouts: int = 200
    seed: int = 0


class SQILPolicy(BCPolicy):
    """Same interface as BCPolicy; probabilities are softmax(Q / temperature)."""

    def __init__(self, net: RecurrentPolicy, arch: ArchSpec, temperature: float):
        super().__init__(net, arch)
        self.temperature = temperature

    def step(self, obs: ModalityBundle) -> np.ndarray:
        vec = torch.as_tensor(
            bundle_to_vec(obs, self.arch, self._prev), dtype=torch.float32
        ).unsqueeze(0)
        with torch.no_grad():
            self._h = self.net.cell(vec, self._h)
            q = self.net.head_forward(self._h)
            probs = torch.softmax(q / self.temperature, dim=-1).numpy()[0]
        return probs


def train_sqil(
    env_factory,
    demos: list[TrajectoryRecord],
    arch: ArchSpec,
    config: SQILConfig,
    rng: np.random.Generator,
    sample_audit: list | None = None,
) -> SQILPolicy:
    """Soft Q-learning with demo transitions at reward 1, rollouts at reward 0.

    Minibatches are balanced half-and-half between the two buffers; fresh
    rollouts are collected with the current softmax policy as training runs.
    """
    if env_factory is None:
        raise UsageError("SQIL needs environment access for rollouts")
    if not demos:
        raise UsageError("empty demonstration set")
    torch.manual_seed(config.seed)
    net = RecurrentPolicy(arch, config.gru_hidden, config.head_width, config.head_layers)
    target = RecurrentPolicy(arch, config.gru_hidden, config.head_width, config.head_layers)
    target.load_state_dict(net.state_dict())
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    policy = SQILPolicy(net, arch, config.temperature)

    demo_batches = [pack_policy_batch([r], arch) for r in demos]
    rollouts: list = []

    def collect_rollout():
        env = env_factory(rng)
        obs = env.reset(rng)
        policy.start()
        steps = []
        done = False
        while not done:
            action = policy.act(obs, rng, greedy=False)
            nxt, _, done, _ = env.step(action)
            steps.append((obs, action))
            obs = nxt
        rec = TrajectoryRecord(
            steps=[_mk_step(o, a) for o, a in steps], domain=getattr(env, "domain", "")
        )
        rollouts.append(pack_policy_batch([rec], arch))
        if len(rollouts) > config.max_rollouts:
            rollouts.pop(0)

    collect_rollout()
    half = config.batch_episodes // 2
    for step_i in range(config.grad_steps):
        if step_i % config.rollout_every == 0:
            collect_rollout()
        demo_idx = rng.integers(len(demo_batches), size=half)
        roll_idx = rng.integers(len(rollouts), size=half)
        if sample_audit is not None:
            sample_audit.append((half, half))
        loss = torch.zeros(())
        for kind, batches, idxs in (("demo", demo_batches, demo_idx), ("roll", rollouts, roll_idx)):
            reward = 1.0 if kind == "demo" else 0.0
            for i in idxs:
                inputs, actions, mask = batches[i]
                q_seq = net.forward_sequence(inputs, mask)
                with torch.no_grad():
                    qt = target.forward_sequence(inputs, mask)
                    v_soft = config.temperature * torch.logsumexp(
                        qt / config.temperature, dim=-1
                    )
                t_len = int(mask.sum())
                q_sa = q_seq[0, :t_len].gather(1, actions[0, :t_len].unsqueeze(1)).squeeze(1)
                targets = torch.full((t_len,), reward)
                targets[:-1] += config.gamma * v_soft[0, 1:t_len]
                loss = loss + ((q_sa - targets) ** 2).mean()
        loss = loss / config.batch_episodes
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step_i + 1) % config.target_update == 0:
            target.load_state_dict(net.state_dict())
    return policy


def _mk_step(obs: ModalityBundle, action: int):
    from .types import Step

    return Step(obs, action, 0.0)


# ---------------------------------------------------------------------------
# Checkpointing (same container as the world model, tagged with the kind)
# ---------------------------------------------------------------------------


def save_policy(path, policy: BCPolicy, kind: str) -> None:
    from . import checkpoint

    net = policy.net
    meta = {
        "kind": "baseline",
        "baseline": kind,
        "arch": policy.arch.to_dict(),
        "gru_hidden": net.hidden,
        "head_layers": len(net.head),
        "head_width": net.head[0].out_features if net.head else net.out.in_features,
        "temperature": getattr(policy, "temperature", 1.0),
    }
    arrays = {k: v.detach().numpy().copy() for k, v in net.state_dict().items()}
    checkpoint.save_container(path, arrays, meta)


def load_policy(path) -> BCPolicy:
    from . import checkpoint
    from .world_model import ArchSpec

    arrays, meta = checkpoint.load_container(path)
    if meta.get("kind") != "baseline":
        raise checkpoint.CheckpointError(f"not a baseline checkpoint: {meta.get('kind')!r}")
    arch = ArchSpec.from_dict(meta["arch"])
    net = RecurrentPolicy(arch, meta["gru_hidden"], meta["head_width"], meta["head_layers"])
    expected = {k: tuple(v.shape) for k, v in net.state_dict().items()}
    checkpoint.validate_shapes(arrays, expected)
    net.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    if meta["baseline"] == "sqil":
        return SQILPolicy(net, arch, meta["temperature"])
    return BCPolicy(net, arch)
