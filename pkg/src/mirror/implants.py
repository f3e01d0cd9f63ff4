"""Implants: small parameterized edits that turn the self-model into a human model.

Perceptual implants delete observation items the human cannot perceive
(directional thresholds in driving, a radial threshold in rescue,
per-terminal Bernoulli visibility in bomb defusal). The policy implant adds
a state-dependent residual to the action logits before the softmax. A
low-pass belief implant is available but disabled by default. Fitting
touches only implant parameters: the self-model stays frozen, and hard
visibility masks are relaxed to sigmoids with an annealed temperature so
thresholds receive gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .envs import bomb as bombmod
from .envs import driving as drvmod
from .envs import rescue as rescuemod
from .nets import MLP
from .runtime import NumpyMLP, RuntimeModel, softmax
from .types import ModalityBundle, TrajectoryRecord, UsageError
from .world_model import WorldModelParams, pack_records

IMPLANT_SCHEMA = "mirror.implants.v1"


# ---------------------------------------------------------------------------
# Perceptual filter variants
# ---------------------------------------------------------------------------


@dataclass
class DrivingThresholdFilter:
    """Visibility distance per direction sector around the ego car.

    Sectors: same-lane ahead (front), same-lane behind (back), other-lane
    ahead (side_front), other-lane behind (side_back). A car is kept when
    its longitudinal distance is within its sector's threshold. When
    drop_verbal is set the verbal channel is removed entirely (fog).
    """

    front: float = 8.0
    back: float = 8.0
    side_front: float = 8.0
    side_back: float = 8.0
    drop_verbal: bool = False

    def __post_init__(self):
        for v in self.thresholds():
            if v < 0:
                raise ValueError("thresholds must be nonnegative")

    def thresholds(self) -> np.ndarray:
        return np.array([self.front, self.back, self.side_front, self.side_back])


@dataclass
class RescueRadialFilter:
    """Map regions beyond `radius` of the agent are hidden; smoke drops verbal."""

    radius: float = 12.0
    drop_verbal: bool = False

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")


@dataclass
class TerminalPerceptionProbs:
    """Chance per step that each bomb terminal is perceived."""

    probs: tuple[float, ...] = (1.0,) * 6

    def __post_init__(self):
        if len(self.probs) != bombmod.N_TERMINALS:
            raise ValueError("expected one probability per terminal")
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise ValueError("probabilities must lie in [0, 1]")


PERCEPTUAL_KINDS = {
    "driving": DrivingThresholdFilter,
    "rescue": RescueRadialFilter,
    "bomb": TerminalPerceptionProbs,
}


def _driving_sectors(ego_lane, car_lane, pos):
    """Sector index per car given rounded lanes and signed distance."""
    same = np.rint(car_lane) == np.rint(ego_lane)
    ahead = pos >= 0
    return np.select(
        [same & ahead, same & ~ahead, ~same & ahead],
        [0, 1, 2],
        default=3,
    )


def apply_perceptual(obs: ModalityBundle, filt, rng: np.random.Generator | None = None) -> ModalityBundle:
    """Hard application of a perceptual implant to one observation bundle."""
    out = obs.copy()
    if isinstance(filt, DrivingThresholdFilter):
        visual = out.payloads["visual"]
        ego_lane = visual[0]
        vis, lane, pos_scaled = drvmod.visual_slots(visual[None])
        pos_units = pos_scaled[0] * drvmod.SENSOR_RANGE
        sector = _driving_sectors(ego_lane, lane[0], pos_units)
        keep = np.abs(pos_units) <= filt.thresholds()[sector]
        for i in range(drvmod.N_CARS):
            if not keep[i]:
                visual[1 + 3 * i : 4 + 3 * i] = 0.0
        if filt.drop_verbal:
            out.payloads["verbal"][:] = 0.0
            out.present["verbal"] = False
    elif isinstance(filt, RescueRadialFilter):
        grid = out.payloads["visual"].reshape(rescuemod.CHANNELS, rescuemod.GRID, rescuemod.GRID)
        agent_idx = int(np.argmax(grid[4]))
        ar, ac = divmod(agent_idx, rescuemod.GRID)
        rr, cc = np.mgrid[0 : rescuemod.GRID, 0 : rescuemod.GRID]
        keep = np.sqrt((rr - ar) ** 2 + (cc - ac) ** 2) <= filt.radius
        grid *= keep[None]
        out.payloads["visual"] = grid.reshape(-1)
        if filt.drop_verbal:
            out.payloads["verbal"][:] = 0.0
            out.present["verbal"] = False
    elif isinstance(filt, TerminalPerceptionProbs):
        if rng is None:
            raise UsageError("terminal filter needs an rng for its Bernoulli draws")
        visual = out.payloads["visual"]
        base = bombmod.N_STAGES + 1
        shown = rng.random(bombmod.N_TERMINALS) < np.asarray(filt.probs)
        for i in range(bombmod.N_TERMINALS):
            if not shown[i]:
                visual[base + 5 * i : base + 5 * i + 5] = 0.0
        out.payloads["verbal"][:] = 0.0
        out.present["verbal"] = False  # the human cannot sense the bomb type
    else:
        raise UsageError(f"unknown perceptual implant {type(filt).__name__}")
    return out


def filter_visual_batched(filt, visual: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
    """Hard perceptual filter over a batch of (decoded) visual payloads.

    `u` supplies the uniform draws for the Bernoulli terminal filter so
    planners can use common random numbers.
    """
    out = visual.copy()
    if isinstance(filt, DrivingThresholdFilter):
        ego = np.rint(np.clip(out[:, 0], 0, 1))
        vis, lane, pos_scaled = drvmod.visual_slots(out)
        pos_units = pos_scaled * drvmod.SENSOR_RANGE
        sector = _driving_sectors(ego[:, None], lane, pos_units)
        keep = (np.abs(pos_units) <= filt.thresholds()[sector]).astype(np.float64)
        body = out[:, 1:].reshape(out.shape[0], drvmod.N_CARS, 3)
        body *= keep[:, :, None]
        out[:, 1:] = body.reshape(out.shape[0], -1)
    elif isinstance(filt, RescueRadialFilter):
        b = out.shape[0]
        g = rescuemod.GRID
        grid = out.reshape(b, rescuemod.CHANNELS, g, g)
        agent_idx = grid[:, 4].reshape(b, -1).argmax(axis=1)
        ar, ac = agent_idx // g, agent_idx % g
        rr, cc = np.mgrid[0:g, 0:g]
        dist = np.sqrt(
            (rr[None] - ar[:, None, None]) ** 2 + (cc[None] - ac[:, None, None]) ** 2
        )
        grid *= (dist <= filt.radius)[:, None]
        out = grid.reshape(b, -1)
    elif isinstance(filt, TerminalPerceptionProbs):
        if u is None:
            raise UsageError("terminal filter needs uniform draws")
        base = bombmod.N_STAGES + 1
        shown = (u < np.asarray(filt.probs)[None, :]).astype(np.float64)
        for i in range(bombmod.N_TERMINALS):
            out[:, base + 5 * i : base + 5 * i + 5] *= shown[:, i : i + 1]
    else:
        raise UsageError(f"unknown perceptual implant {type(filt).__name__}")
    return out


# ---------------------------------------------------------------------------
# Policy residual
# ---------------------------------------------------------------------------


def residual_module(latent_dim: int, n_actions: int, hidden: tuple[int, ...] = (32,)) -> MLP:
    net = MLP(latent_dim, hidden, n_actions)
    last = net.layers[-1]
    with torch.no_grad():  # start as an exact no-op
        last.weight.zero_()
        last.bias.zero_()
    return net


def apply_policy_residual(base_logits: np.ndarray, residual: NumpyMLP | None,
                          z: np.ndarray) -> np.ndarray:
    """softmax(base_logits + residual(z)); returns a probability vector."""
    logits = np.atleast_2d(np.asarray(base_logits, dtype=np.float64))
    if residual is not None:
        logits = logits + residual(np.atleast_2d(z))
    probs = softmax(logits)
    return probs[0] if np.asarray(base_logits).ndim == 1 else probs


# ---------------------------------------------------------------------------
# Implant set
# ---------------------------------------------------------------------------


@dataclass
class ImplantSet:
    domain: str
    perceptual: DrivingThresholdFilter | RescueRadialFilter | TerminalPerceptionProbs
    residual_state: dict[str, np.ndarray] = field(default_factory=dict)
    residual_hidden: tuple[int, ...] = (32,)
    lowpass_alpha: float | None = None  # disabled unless set
    lam: float = 0.01
    prior_center: float = 8.0

    def residual_numpy(self) -> NumpyMLP | None:
        if not self.residual_state:
            return None
        return NumpyMLP.from_state(self.residual_state, "")

    def residual_torch(self, latent_dim: int, n_actions: int) -> MLP:
        net = residual_module(latent_dim, n_actions, self.residual_hidden)
        if self.residual_state:
            net.load_state_dict({k: torch.as_tensor(v) for k, v in self.residual_state.items()})
        return net

    def save(self, path) -> None:
        doc = {
            "schema": IMPLANT_SCHEMA,
            "domain": self.domain,
            "lam": self.lam,
            "prior_center": self.prior_center,
            "lowpass_alpha": self.lowpass_alpha,
            "residual_hidden": list(self.residual_hidden),
            "residual": {k: v.tolist() for k, v in self.residual_state.items()},
        }
        f = self.perceptual
        if isinstance(f, DrivingThresholdFilter):
            doc["perceptual"] = {
                "kind": "driving_thresholds",
                "front": f.front,
                "back": f.back,
                "side_front": f.side_front,
                "side_back": f.side_back,
                "drop_verbal": f.drop_verbal,
            }
        elif isinstance(f, RescueRadialFilter):
            doc["perceptual"] = {"kind": "rescue_radius", "radius": f.radius, "drop_verbal": f.drop_verbal}
        else:
            doc["perceptual"] = {"kind": "terminal_probs", "probs": list(f.probs)}
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))

    @staticmethod
    def load(path) -> "ImplantSet":
        doc = json.loads(Path(path).read_text())
        if doc.get("schema") != IMPLANT_SCHEMA:
            raise UsageError(f"unsupported implant schema {doc.get('schema')!r}")
        p = doc["perceptual"]
        if p["kind"] == "driving_thresholds":
            filt = DrivingThresholdFilter(
                p["front"], p["back"], p["side_front"], p["side_back"], p["drop_verbal"]
            )
        elif p["kind"] == "rescue_radius":
            filt = RescueRadialFilter(p["radius"], p["drop_verbal"])
        else:
            filt = TerminalPerceptionProbs(tuple(p["probs"]))
        return ImplantSet(
            domain=doc["domain"],
            perceptual=filt,
            residual_state={k: np.asarray(v, dtype=np.float32) for k, v in doc["residual"].items()},
            residual_hidden=tuple(doc["residual_hidden"]),
            lowpass_alpha=doc["lowpass_alpha"],
            lam=doc["lam"],
            prior_center=doc["prior_center"],
        )


def default_implants(domain: str, variant: str = "original") -> ImplantSet:
    drop = variant == "transfer"
    if domain == "driving":
        filt = DrivingThresholdFilter(8.0, 8.0, 8.0, 8.0, drop_verbal=drop)
        center = drvmod.SENSOR_RANGE
    elif domain == "rescue":
        filt = RescueRadialFilter(12.0, drop_verbal=drop)
        center = rescuemod.GRID / 2
    elif domain == "bomb":
        filt = TerminalPerceptionProbs((0.5,) * bombmod.N_TERMINALS)
        center = 0.5
    else:
        raise UsageError(f"unknown domain {domain!r}")
    return ImplantSet(domain=domain, perceptual=filt, prior_center=center)


# ---------------------------------------------------------------------------
# Soft (relaxed) filters used during fitting
# ---------------------------------------------------------------------------


def _soft_filter_driving(payload: torch.Tensor, thresholds: torch.Tensor, temp: float) -> torch.Tensor:
    """Relaxed visibility: sigmoid((threshold - distance) / temp) per car."""
    ego_lane = payload[:, 0:1]
    out = [payload[:, 0:1]]
    for i in range(drvmod.N_CARS):
        slot = payload[:, 1 + 3 * i : 4 + 3 * i]
        vis, lane, pos_scaled = slot[:, 0:1], slot[:, 1:2], slot[:, 2:3]
        pos_units = pos_scaled * drvmod.SENSOR_RANGE
        same = (torch.round(lane) == torch.round(ego_lane)).float()
        ahead = (pos_units >= 0).float()
        idx = (same * ahead * 0 + same * (1 - ahead) * 1 + (1 - same) * ahead * 2
               + (1 - same) * (1 - ahead) * 3).long().squeeze(-1)
        thr = thresholds[idx].unsqueeze(-1)
        w = torch.sigmoid((thr - pos_units.abs()) / temp) * vis
        out.append(torch.cat([w, lane * w, pos_scaled * w], dim=-1))
    return torch.cat(out, dim=-1)


def _soft_filter_rescue(payload: torch.Tensor, radius: torch.Tensor, temp: float) -> torch.Tensor:
    b = payload.shape[0]
    g = rescuemod.GRID
    grid = payload.reshape(b, rescuemod.CHANNELS, g, g)
    agent_idx = grid[:, 4].reshape(b, -1).argmax(dim=1)
    ar, ac = (agent_idx // g).float(), (agent_idx % g).float()
    rr, cc = torch.meshgrid(
        torch.arange(g, dtype=payload.dtype), torch.arange(g, dtype=payload.dtype), indexing="ij"
    )
    dist = torch.sqrt(
        (rr[None] - ar[:, None, None]) ** 2 + (cc[None] - ac[:, None, None]) ** 2
    )
    w = torch.sigmoid((radius - dist) / temp)
    return (grid * w[:, None]).reshape(b, -1)


def _soft_filter_bomb(payload: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    # expectation relaxation: terminal slots scaled by their show-probability
    out = payload.clone()
    base = bombmod.N_STAGES + 1
    for i in range(bombmod.N_TERMINALS):
        out[:, base + 5 * i : base + 5 * i + 5] = (
            payload[:, base + 5 * i : base + 5 * i + 5] * probs[i]
        )
    return out


# ---------------------------------------------------------------------------
# Fitting (only implant parameters move)
# ---------------------------------------------------------------------------


@dataclass
class ImplantFitConfig:
    steps: int = 400
    lr: float = 0.01
    optimizer: str = "sgd"  # "sgd" per the declared default; "adam" available
    lam: float = 0.01
    temp_start: float = 1.0
    temp_end: float = 0.1
    residual_hidden: tuple[int, ...] = (32,)
    residual_prior_std: float = 1.0
    fit_residual: bool = True
    seed: int = 0


def _inv_softplus(y: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.expm1(y))


def fit_implants(
    demos: list[TrajectoryRecord],
    params: WorldModelParams,
    init: ImplantSet,
    config: ImplantFitConfig,
    rng: np.random.Generator,
) -> tuple[ImplantSet, list[float]]:
    """Gradient fit of implant parameters to demonstrated actions.

    Demonstrations carry the robot-side (full) observations; the filter
    decides what the modeled human saw. Thresholded masks are relaxed with
    an annealed temperature during optimization and applied hard afterward.
    """
    if not demos:
        raise UsageError("empty demonstration set")
    if config.lam < 0:
        raise UsageError("lambda must be nonnegative")
    arch = params.arch
    model = params.module(torch.float32)
    for p in model.parameters():
        p.requires_grad_(False)
    batch = pack_records(demos, arch, torch.float32)
    gen = torch.Generator().manual_seed(config.seed + int(rng.integers(2**30)))

    domain = init.domain
    filt = init.perceptual
    opt_params = []
    if domain == "driving":
        raw_thr = _inv_softplus(torch.as_tensor(filt.thresholds(), dtype=torch.float32)).requires_grad_(True)
        opt_params.append(raw_thr)
    elif domain == "rescue":
        raw_thr = _inv_softplus(torch.tensor([float(filt.radius)])).requires_grad_(True)
        opt_params.append(raw_thr)
    elif domain == "bomb":
        p0 = torch.as_tensor(np.clip(filt.probs, 1e-4, 1 - 1e-4), dtype=torch.float32)
        raw_thr = torch.log(p0 / (1 - p0)).requires_grad_(True)
        opt_params.append(raw_thr)
    else:
        raise UsageError(f"unknown domain {domain!r}")

    residual = residual_module(arch.latent_dim, arch.n_actions, config.residual_hidden)
    if config.fit_residual:
        opt_params.extend(residual.parameters())

    if config.optimizer == "adam":
        opt = torch.optim.Adam(opt_params, lr=config.lr)
    else:
        opt = torch.optim.SGD(opt_params, lr=config.lr)

    b, tmax = batch["rewards"].shape
    eye = torch.eye(arch.n_actions)
    drop_verbal = getattr(filt, "drop_verbal", domain == "bomb")
    curve: list[float] = []

    for step_i in range(config.steps):
        frac = step_i / max(config.steps - 1, 1)
        temp = config.temp_start * (config.temp_end / config.temp_start) ** frac
        prev_z = torch.zeros(b, arch.latent_dim)
        prev_a = torch.zeros(b, arch.n_actions)
        nll_terms = []
        for t in range(tmax):
            payloads = {}
            present = {}
            for m in arch.modality_names:
                pay = batch["obs"][m][:, t]
                pres = batch["present"][m][:, t]
                if m == "visual":
                    if domain == "driving":
                        pay = _soft_filter_driving(pay, torch.nn.functional.softplus(raw_thr), temp)
                    elif domain == "rescue":
                        pay = _soft_filter_rescue(pay, torch.nn.functional.softplus(raw_thr)[0], temp)
                    else:
                        pay = _soft_filter_bomb(pay, torch.sigmoid(raw_thr))
                if m == "verbal" and drop_verbal:
                    pay = torch.zeros_like(pay)
                    pres = torch.zeros_like(pres)
                payloads[m] = pay
                present[m] = pres
            q_mean, q_var = model.posterior(prev_z, prev_a, payloads, present)
            if init.lowpass_alpha is not None:
                q_mean = init.lowpass_alpha * prev_z + (1 - init.lowpass_alpha) * q_mean
            eps = torch.randn(b, arch.latent_dim, generator=gen)
            z = q_mean + torch.sqrt(q_var) * eps
            logits = model.q_values(z) / arch.policy_temp + residual(z)
            logp = torch.log_softmax(logits, dim=-1)
            chosen = logp.gather(1, batch["actions"][:, t].unsqueeze(1)).squeeze(1)
            nll_terms.append(-(chosen * batch["mask"][:, t]).sum())
            prev_z = z
            prev_a = eye[batch["actions"][:, t]]
        nll = torch.stack(nll_terms).sum() / batch["mask"].sum()
        loss = nll
        if config.lam > 0:
            loss = loss + config.lam * _neg_log_prior(
                domain, raw_thr, residual, init.prior_center, config.residual_prior_std
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(float(nll.detach()))

    if domain == "driving":
        thr = torch.nn.functional.softplus(raw_thr).detach().numpy()
        fitted_filt = DrivingThresholdFilter(*[float(v) for v in thr], drop_verbal=filt.drop_verbal)
    elif domain == "rescue":
        fitted_filt = RescueRadialFilter(
            float(torch.nn.functional.softplus(raw_thr)[0]), drop_verbal=filt.drop_verbal
        )
    else:
        fitted_filt = TerminalPerceptionProbs(
            tuple(float(v) for v in torch.sigmoid(raw_thr).detach().numpy())
        )
    fitted = ImplantSet(
        domain=domain,
        perceptual=fitted_filt,
        residual_state={k: v.detach().numpy().copy() for k, v in residual.state_dict().items()},
        residual_hidden=config.residual_hidden,
        lowpass_alpha=init.lowpass_alpha,
        lam=config.lam,
        prior_center=init.prior_center,
    )
    return fitted, curve


def _neg_log_prior(domain, raw_thr, residual, center, residual_std=1.0):
    """Log-normal prior on thresholds, zero-mean normal on residual weights."""
    total = torch.zeros(())
    if domain in ("driving", "rescue"):
        thr = torch.nn.functional.softplus(raw_thr)
        log_t = torch.log(thr + 1e-8)
        total = total + (0.5 * (log_t - math.log(center)) ** 2 + log_t).sum()
    else:
        pass  # uniform prior over [0,1] probabilities contributes a constant
    for p in residual.parameters():
        total = total + 0.5 * (p**2).sum() / residual_std**2
    return total


# ---------------------------------------------------------------------------
# Teacher-forced policies and NLL evaluation
# ---------------------------------------------------------------------------


class MirrorPolicy:
    """Implanted self-model evaluated teacher-forced over recorded trajectories."""

    def __init__(self, params: WorldModelParams, implants: ImplantSet | None,
                 apply_filter: bool = True):
        self.rt = RuntimeModel.from_params(params)
        self.arch = params.arch
        self.implants = implants
        self.apply_filter = apply_filter
        self.residual = implants.residual_numpy() if implants else None

    def start(self, rng: np.random.Generator | None = None):
        self._rng = rng or np.random.default_rng(0)
        self._prev = np.zeros((1, self.arch.latent_dim))
        self._prev_action = None

    def step(self, obs: ModalityBundle) -> np.ndarray:
        """Consume one recorded observation, return action probabilities."""
        bundle = obs.masked()
        if self.implants is not None and self.apply_filter:
            bundle = apply_perceptual(bundle, self.implants.perceptual, self._rng)
        payloads = {m: np.atleast_2d(bundle.payloads[m]) for m in bundle.payloads}
        present = {m: np.array([float(bundle.present[m])]) for m in bundle.present}
        mean, _ = self.rt.infer(self._prev, self.rt.action_onehot(self._prev_action), payloads, present)
        if self.implants is not None and self.implants.lowpass_alpha is not None:
            mean = self.implants.lowpass_alpha * self._prev + (1 - self.implants.lowpass_alpha) * mean
        logits = self.rt.policy_logits(mean)
        probs = apply_policy_residual(logits[0], self.residual, mean[0])
        self._prev = mean
        return probs

    def advance(self, action: int):
        self._prev_action = action


def policy_nll(policy, testset: list[TrajectoryRecord], rng: np.random.Generator | None = None) -> float:
    """Mean negative log-likelihood per recorded action, teacher-forced."""
    if not testset:
        raise UsageError("empty test set")
    total, count = 0.0, 0
    for rec in testset:
        policy.start(rng)
        for step in rec.steps:
            probs = policy.step(step.obs)
            total += -math.log(max(float(probs[step.action]), 1e-300))
            policy.advance(step.action)
            count += 1
    return total / count
