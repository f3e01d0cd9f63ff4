"""Multi-modal latent state-space self-model.

The model factors into a transition net, per-modality decoders, a reward
head and an amortized inference net, all diagonal-Gaussian. Training
maximizes the per-step evidence lower bound with a single reparameterized
sample per step; absent modalities are zero-filled and flagged via a
presence bit, and contribute nothing to the reconstruction terms.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .nets import MLP, GaussHead, GridDecoder, GridEncoder, gaussian_kl, gaussian_logprob
from .types import LatentBelief, ModalityBundle, NumericInputError, TrajectoryRecord


@dataclass
class ModalitySpec:
    name: str
    dim: int
    grid: tuple[int, int, int] | None = None  # (C, H, W) for conv-coded payloads
    dec_hidden: tuple[int, ...] = (32, 32)
    # decoder noise: fixed sigma, or None for a learned-variance head. Fixed
    # variance trains far better (a learned variance absorbs the residual
    # before the mean converges).
    sigma: float | None = None
    # index groups that can be zeroed independently (per-item dropout mimics
    # individually missing sensor readings, e.g. one car slot or map region)
    items: list[list[int]] | None = None


@dataclass
class ArchSpec:
    latent_dim: int = 48
    n_actions: int = 2
    modalities: list[ModalitySpec] = field(default_factory=list)
    trans_hidden: tuple[int, ...] = (32, 32)
    infer_hidden: tuple[int, ...] = (64, 64)
    infer_fused: bool = False  # per-modality encoders + fusion trunk (grid domains)
    infer_feature_dim: int = 16
    infer_fuse_hidden: tuple[int, ...] = (128, 128)
    conv_channels: int = 4
    conv_kernel: int = 3
    conv_stride: int = 3
    reward_hidden: tuple[int, ...] = (32, 32)
    reward_sigma: float | None = 1.0  # None => learned variance
    q_hidden: tuple[int, ...] = (128, 128)
    var_floor: float = 1e-5
    policy_temp: float = 1.0

    def modality(self, name: str) -> ModalitySpec:
        for spec in self.modalities:
            if spec.name == name:
                return spec
        raise KeyError(f"unknown modality {name!r}")

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        d = dict(d)
        mods = [
            ModalitySpec(
                name=m["name"],
                dim=int(m["dim"]),
                grid=tuple(m["grid"]) if m.get("grid") else None,
                dec_hidden=tuple(m.get("dec_hidden", (32, 32))),
                sigma=m.get("sigma"),
                items=[list(g) for g in m["items"]] if m.get("items") else None,
            )
            for m in d.pop("modalities")
        ]
        for key in ("trans_hidden", "infer_hidden", "infer_fuse_hidden", "reward_hidden", "q_hidden"):
            d[key] = tuple(d[key])
        return ArchSpec(modalities=mods, **d)


class WorldModel(nn.Module):
    """Torch realization of an ArchSpec (training side)."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        d, a = arch.latent_dim, arch.n_actions
        self.transition = GaussHead(d + a, arch.trans_hidden, d, arch.var_floor)
        self.decoders = nn.ModuleDict()
        for m in arch.modalities:
            if m.grid is not None:
                self.decoders[m.name] = GridDecoder(
                    d, m.grid, arch.conv_channels, arch.conv_kernel, arch.conv_stride,
                    arch.var_floor, sigma=m.sigma,
                )
            elif m.sigma is None:
                self.decoders[m.name] = GaussHead(d, m.dec_hidden, m.dim, arch.var_floor)
            else:
                self.decoders[m.name] = _FixedSigmaHead(d, m.dec_hidden, m.dim, m.sigma)
        if arch.reward_sigma is None:
            self.reward_head = GaussHead(d, arch.reward_hidden, 1, arch.var_floor)
        else:
            self.reward_head = MLP(d, arch.reward_hidden, 1)
        if arch.infer_fused:
            self.encoders = nn.ModuleDict()
            for m in arch.modalities:
                if m.grid is not None:
                    self.encoders[m.name] = GridEncoder(
                        m.grid, arch.conv_channels, arch.conv_kernel, arch.conv_stride,
                        arch.infer_feature_dim,
                    )
                else:
                    self.encoders[m.name] = _DenseEncoder(m.dim, arch.infer_feature_dim)
            fuse_in = d + a + arch.infer_feature_dim * len(arch.modalities)
            self.infer_net = GaussHead(fuse_in, arch.infer_fuse_hidden, d, arch.var_floor)
        else:
            obs_dim = sum(m.dim + 1 for m in arch.modalities)
            self.infer_net = GaussHead(d + a + obs_dim, arch.infer_hidden, d, arch.var_floor)
        self.q_net = MLP(d + a, arch.q_hidden, 1)

    # -- heads ---------------------------------------------------------

    def prior(self, prev_z, prev_a):
        return self.transition(torch.cat([prev_z, prev_a], dim=-1))

    def posterior(self, prev_z, prev_a, payloads, present):
        feats = [prev_z, prev_a]
        for m in self.arch.modalities:
            pay = payloads[m.name] * present[m.name].unsqueeze(-1)
            if self.arch.infer_fused:
                feats.append(self.encoders[m.name](pay, present[m.name]))
            else:
                feats.append(pay)
                feats.append(present[m.name].unsqueeze(-1))
        return self.infer_net(torch.cat(feats, dim=-1))

    def decode(self, name, z):
        return self.decoders[name](z)

    def reward(self, z):
        if self.arch.reward_sigma is None:
            mean, var = self.reward_head(z)
        else:
            mean = self.reward_head(z)
            var = torch.full_like(mean, float(self.arch.reward_sigma) ** 2)
        return mean, var

    def q_values(self, z):
        """Q(z, a) for every action: (B, n_actions)."""
        b, a = z.shape[0], self.arch.n_actions
        eye = torch.eye(a, dtype=z.dtype, device=z.device)
        zz = z.unsqueeze(1).expand(b, a, z.shape[1]).reshape(b * a, -1)
        aa = eye.unsqueeze(0).expand(b, a, a).reshape(b * a, a)
        return self.q_net(torch.cat([zz, aa], dim=-1)).reshape(b, a)


class _DenseEncoder(nn.Module):
    def __init__(self, dim: int, feature_dim: int):
        super().__init__()
        self.fc = nn.Linear(dim + 1, feature_dim)

    def forward(self, payload, present):
        x = torch.cat([payload, present.unsqueeze(-1)], dim=-1)
        return torch.tanh(self.fc(x))


class _FixedSigmaHead(nn.Module):
    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int, sigma: float):
        super().__init__()
        self.net = MLP(in_dim, hidden, out_dim)
        self.sigma = sigma

    def forward(self, x):
        mean = self.net(x)
        return mean, torch.full_like(mean, self.sigma**2)


def _init_module(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for p in module.parameters():
        fan_in = p.shape[-1] if p.dim() > 1 else max(p.shape[0], 1)
        if p.dim() > 2:  # conv kernels: fan-in over input channels * window
            fan_in = int(np.prod(p.shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        with torch.no_grad():
            p.uniform_(-bound, bound, generator=gen)
    _init_variance_biases(module)


def _init_variance_biases(module: nn.Module, std0: float = 0.1) -> None:
    """Start all Gaussian heads near std0.

    With the default near-zero bias, softplus gives variances around 0.7 and
    the reparameterized samples are noise; decoders then learn to ignore the
    latent and training settles into a collapsed optimum.
    """
    raw = float(np.log(np.expm1(std0 * std0)))
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, GaussHead):
                bias = sub.net.layers[-1].bias
                bias[sub.out_dim :] = raw
            if isinstance(sub, GridDecoder) and sub.sigma is None:
                c = sub.grid[0]
                sub.deconv.bias[c:] = raw


@dataclass
class WorldModelParams:
    """Architecture descriptor + named weight arrays (policy head included)."""

    arch: ArchSpec
    state: dict[str, np.ndarray]

    def module(self, dtype=torch.float32) -> WorldModel:
        model = WorldModel(self.arch).to(dtype)
        tensors = {k: torch.as_tensor(v).to(dtype) for k, v in self.state.items()}
        model.load_state_dict(tensors)
        return model

    def copy(self) -> "WorldModelParams":
        return WorldModelParams(self.arch, {k: v.copy() for k, v in self.state.items()})

    def save(self, path) -> None:
        checkpoint.save_container(path, self.state, {"kind": "world_model", "arch": self.arch.to_dict()})

    @staticmethod
    def load(path) -> "WorldModelParams":
        arrays, meta = checkpoint.load_container(path)
        if meta.get("kind") != "world_model":
            raise checkpoint.CheckpointError(f"not a world-model checkpoint: {meta.get('kind')!r}")
        arch = ArchSpec.from_dict(meta["arch"])
        expected = {k: tuple(v.shape) for k, v in WorldModel(arch).state_dict().items()}
        checkpoint.validate_shapes(arrays, expected)
        return WorldModelParams(arch, arrays)

    @staticmethod
    def from_module(model: WorldModel) -> "WorldModelParams":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return WorldModelParams(model.arch, state)


def new_params(arch: ArchSpec, seed: int = 0) -> WorldModelParams:
    model = WorldModel(arch)
    _init_module(model, seed)
    return WorldModelParams.from_module(model)


# ---------------------------------------------------------------------------
# Batching and the ELBO
# ---------------------------------------------------------------------------


def pack_records(records: list[TrajectoryRecord], arch: ArchSpec, dtype=torch.float32) -> dict:
    """Pad a list of trajectories into step-masked tensors."""
    if not records:
        raise ValueError("empty batch")
    b = len(records)
    tmax = max(len(r) for r in records)
    batch = {
        "actions": torch.zeros(b, tmax, dtype=torch.long),
        "rewards": torch.zeros(b, tmax, dtype=dtype),
        "mask": torch.zeros(b, tmax, dtype=dtype),
        "obs": {m.name: torch.zeros(b, tmax, m.dim, dtype=dtype) for m in arch.modalities},
        "present": {m.name: torch.zeros(b, tmax, dtype=dtype) for m in arch.modalities},
    }
    for i, rec in enumerate(records):
        for t, step in enumerate(rec.steps):
            if not 0 <= step.action < arch.n_actions:
                raise ValueError(f"action id {step.action} invalid for this domain")
            batch["actions"][i, t] = step.action
            batch["rewards"][i, t] = step.reward
            batch["mask"][i, t] = 1.0
            bundle = step.obs.masked()
            for m in arch.modalities:
                batch["obs"][m.name][i, t] = torch.as_tensor(bundle.payloads[m.name], dtype=dtype)
                batch["present"][m.name][i, t] = float(bundle.present[m.name])
    return batch


def elbo_terms(model: WorldModel, batch: dict, gen: torch.Generator,
               kl_weight: float = 1.0) -> dict:
    """Negative ELBO averaged per valid step, with per-step term breakdown.

    Reconstruction sums over present modalities only; the KL is between the
    amortized posterior and the transition prior at the carried sample.
    kl_weight < 1 is used only for warmup during training (the reported
    per-step KL values are always the true divergences).
    """
    arch = model.arch
    dtype = batch["rewards"].dtype
    b, tmax = batch["rewards"].shape
    prev_z = torch.zeros(b, arch.latent_dim, dtype=dtype)
    prev_a = torch.zeros(b, arch.n_actions, dtype=dtype)
    eye = torch.eye(arch.n_actions, dtype=dtype)
    kls, recons, rewards_lp = [], [], []
    total = torch.zeros((), dtype=dtype)
    obs_in = batch.get("obs_in", batch["obs"])  # corrupted inference inputs, clean targets
    for t in range(tmax):
        payloads = {m: batch["obs"][m][:, t] for m in arch.modality_names}
        inputs = {m: obs_in[m][:, t] for m in arch.modality_names}
        present = {m: batch["present"][m][:, t] for m in arch.modality_names}
        q_mean, q_var = model.posterior(prev_z, prev_a, inputs, present)
        p_mean, p_var = model.prior(prev_z, prev_a)
        kl_t = gaussian_kl(q_mean, q_var, p_mean, p_var)
        eps = torch.randn(b, arch.latent_dim, generator=gen, dtype=dtype)
        z = q_mean + torch.sqrt(q_var) * eps
        recon_t = torch.zeros(b, dtype=dtype)
        for m in arch.modality_names:
            mean, var = model.decode(m, z)
            recon_t = recon_t + present[m] * gaussian_logprob(payloads[m], mean, var)
        r_mean, r_var = model.reward(z)
        rew_t = gaussian_logprob(batch["rewards"][:, t].unsqueeze(-1), r_mean, r_var)
        step_mask = batch["mask"][:, t]
        total = total + (step_mask * (recon_t + rew_t - kl_weight * kl_t)).sum()
        kls.append(kl_t)
        recons.append(recon_t)
        rewards_lp.append(rew_t)
        prev_z = z
        prev_a = eye[batch["actions"][:, t]]
    n_steps = batch["mask"].sum()
    loss = -total / n_steps
    return {
        "loss": loss,
        "kl": torch.stack(kls, dim=1),
        "recon": torch.stack(recons, dim=1),
        "reward_lp": torch.stack(rewards_lp, dim=1),
        "mask": batch["mask"],
    }


def elbo_loss(records: list[TrajectoryRecord], params: WorldModelParams, seed: int = 0,
              dtype=torch.float64) -> tuple[float, dict]:
    """Single-sample negative-ELBO estimate on a batch of trajectories."""
    if not records:
        raise ValueError("empty batch")
    model = params.module(dtype)
    batch = pack_records(records, params.arch, dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        terms = elbo_terms(model, batch, gen)
    parts = {k: v.numpy() for k, v in terms.items() if k != "loss"}
    return float(terms["loss"]), parts


@dataclass
class WorldModelTrainConfig:
    epochs: int = 50
    lr: float = 3e-4
    batch_size: int = 32
    modality_dropout: float = 0.2
    item_dropout: float = 0.2  # chance of zeroing each declared item group per batch
    augment_sigma: float = 0.05
    grad_clip: float = 10.0
    kl_warmup_epochs: int = 0  # ramp the KL weight 0 -> 1 to avoid posterior collapse


def train_world_model(
    dataset: list[TrajectoryRecord],
    params: WorldModelParams,
    config: WorldModelTrainConfig,
    rng: np.random.Generator,
) -> tuple[WorldModelParams, list[float]]:
    """Stochastic ELBO training with modality dropout and jitter augmentation."""
    if not dataset:
        raise ValueError("empty dataset")
    if config.epochs == 0:
        return params.copy(), []
    arch = params.arch
    model = params.module(torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    full = pack_records(dataset, arch, torch.float32)
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    curve: list[float] = []
    n = len(dataset)
    for epoch in range(config.epochs):
        if config.kl_warmup_epochs > 0:
            kl_weight = min(1.0, (epoch + 1) / config.kl_warmup_epochs)
        else:
            kl_weight = 1.0
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[start : start + config.batch_size])
            batch = _slice_batch(full, idx)
            _augment_batch(batch, arch, config, rng)
            terms = elbo_terms(model, batch, gen, kl_weight)
            loss = terms["loss"]
            if config.lr > 0:
                opt.zero_grad()
                loss.backward()
                if config.grad_clip:
                    nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
            epoch_losses.append(float(loss.detach()))
        curve.append(float(np.mean(epoch_losses)))
    if config.lr == 0:
        return params.copy(), curve
    return WorldModelParams.from_module(model), curve


def _slice_batch(full: dict, idx: torch.Tensor) -> dict:
    return {
        "actions": full["actions"][idx],
        "rewards": full["rewards"][idx],
        "mask": full["mask"][idx].clone(),
        "obs": {m: full["obs"][m][idx].clone() for m in full["obs"]},
        "present": {m: full["present"][m][idx].clone() for m in full["present"]},
    }


def _augment_batch(batch: dict, arch: ArchSpec, config: WorldModelTrainConfig,
                   rng: np.random.Generator) -> None:
    """Corrupt inference inputs (dropout + jitter); reconstruction targets stay clean.

    Whole-modality dropout also clears the target: an absent channel must
    contribute nothing. Item dropout only hides items from the inference
    net, which teaches it to carry unseen items through the dynamics.
    """
    batch["obs_in"] = {m: batch["obs"][m].clone() for m in batch["obs"]}
    for spec in arch.modalities:
        m = spec.name
        if config.modality_dropout > 0 and rng.random() < config.modality_dropout:
            batch["present"][m].zero_()
            batch["obs"][m].zero_()
            batch["obs_in"][m].zero_()
            continue
        if spec.items and config.item_dropout > 0:
            b, t, _ = batch["obs_in"][m].shape
            for group in spec.items:
                drop = rng.random(size=(b, t)) < config.item_dropout
                keep = torch.as_tensor(~drop, dtype=batch["obs_in"][m].dtype)
                batch["obs_in"][m][:, :, group] *= keep.unsqueeze(-1)
        if config.augment_sigma > 0:
            noise = rng.normal(0.0, config.augment_sigma, size=tuple(batch["obs_in"][m].shape))
            jitter = torch.as_tensor(noise, dtype=batch["obs_in"][m].dtype)
            batch["obs_in"][m] += jitter * batch["present"][m].unsqueeze(-1)


# ---------------------------------------------------------------------------
# Belief-space operations (numpy-facing; used by planning and evaluation)
# ---------------------------------------------------------------------------


def _runtime(params: WorldModelParams):
    from .runtime import RuntimeModel

    return RuntimeModel.from_params(params)


def transition_prior(prev_sample: np.ndarray, action, params: WorldModelParams) -> LatentBelief:
    """Diagonal-Gaussian prediction p(z' | z, a) at a concrete previous sample."""
    rt = _runtime(params)
    mean, var = rt.transition(np.atleast_2d(prev_sample), rt.action_onehot(action))
    return LatentBelief(mean[0], var[0])


def infer_posterior(prev_sample: np.ndarray, action, obs: ModalityBundle,
                    params: WorldModelParams) -> LatentBelief:
    """Amortized posterior over z' given the previous sample, action and observation."""
    if not np.all(np.isfinite(np.asarray(prev_sample, dtype=np.float64))):
        raise NumericInputError("previous latent sample must be finite")
    rt = _runtime(params)
    bundle = obs.masked()
    payloads = {m: np.atleast_2d(bundle.payloads[m]) for m in bundle.payloads}
    present = {m: np.array([float(bundle.present[m])]) for m in bundle.present}
    mean, var = rt.infer(np.atleast_2d(prev_sample), rt.action_onehot(action), payloads, present)
    return LatentBelief(mean[0], var[0])


def decode_modality(z_sample: np.ndarray, modality: str, params: WorldModelParams):
    """Gaussian observation parameters p(x^m | z) at a latent sample."""
    rt = _runtime(params)
    if modality not in rt.modalities:
        raise KeyError(f"unknown modality {modality!r}")
    mean, var = rt.decode(modality, np.atleast_2d(z_sample))
    return mean[0], var[0]


def predict_reward(z_sample: np.ndarray, params: WorldModelParams):
    """Gaussian reward parameters p(r | z) at a latent sample."""
    rt = _runtime(params)
    mean, var = rt.reward(np.atleast_2d(z_sample))
    return float(mean[0, 0]), float(var[0, 0])
