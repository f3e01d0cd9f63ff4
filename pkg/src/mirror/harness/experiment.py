"""The experiment pipeline: train, fit, evaluate, run assisted episodes.

Per method: train the self-model on robot experience (cached per workdir),
fit implants on the persona's demonstration fraction (or train the
baseline), evaluate teacher-forced NLL on the held-out test rounds, then
run seeded assisted episodes with per-step replanning and emit metrics
rows. All randomness flows from the config root seed through named
substreams, so identical configs give byte-identical metrics files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import rng as rngmod
from ..baselines import train_bc, train_sqil
from ..envs import arch_for, make_env
from ..humans import load_personas
from ..implants import ImplantFitConfig, ImplantSet, MirrorPolicy, default_implants, fit_implants, policy_nll
from ..policy_rl import train_dqn
from ..types import UsageError, save_trajectories
from ..world_model import WorldModelParams, new_params, train_world_model
from .config import ExperimentConfig
from .episodes import (
    build_assistant,
    generate_persona_rounds,
    generate_robot_dataset,
    run_assisted_episode,
    scenario_ids,
    split_rounds,
)
from .metrics import MetricsRow, write_metrics

SELF_MODEL_FILE = "checkpoints/self_model.ckpt"


def ensure_self_model(cfg: ExperimentConfig) -> WorldModelParams:
    """Train (or load) the domain self-model incl. its DQN policy head."""
    path = Path(cfg.workdir) / SELF_MODEL_FILE
    if path.exists():
        return WorldModelParams.load(path)
    arch = arch_for(cfg.domain)
    dataset = generate_robot_dataset(
        cfg.domain, cfg.dataset.robot_episodes, rngmod.torch_seed(cfg.root_seed, "robot-data"),
        cfg.dataset.robot_random_eps,
    )
    params = new_params(arch, seed=rngmod.torch_seed(cfg.root_seed, "init") % 2**31)
    params, _ = train_world_model(
        dataset, params, cfg.world_model, rngmod.substream(cfg.root_seed, "wm-train")
    )
    ids = scenario_ids(cfg.domain)

    def env_factory(rng):
        return make_env(cfg.domain, ids[int(rng.integers(len(ids)))], "original")

    from .episodes import _default_expert, robot_expert_action

    expert_agent = _default_expert(cfg.domain)
    expert_env = {"env": None}

    def expert(env):
        if expert_env["env"] is not env:  # fresh episode: clear the expert's memory
            expert_agent.reset()
            expert_env["env"] = env
        t = getattr(env.state, "step_count", 0)
        return robot_expert_action(cfg.domain, env, expert_agent, t, np.random.default_rng(0))

    params, _ = train_dqn(
        env_factory, params, expert, cfg.schedule, cfg.dqn,
        rngmod.substream(cfg.root_seed, "dqn"),
    )
    params.save(path)
    return params


def persona_dataset(cfg: ExperimentConfig, persona_params, variant: str):
    return generate_persona_rounds(
        cfg.domain, variant, persona_params, cfg.dataset.rounds_per_persona,
        cfg.root_seed,
    )


def fit_persona_implants(cfg: ExperimentConfig, params: WorldModelParams, persona_params,
                         robot_recs: list, *, fit_residual: bool) -> tuple[ImplantSet, list[float]]:
    split = split_rounds(robot_recs, cfg.data_fraction)
    init = default_implants(cfg.domain, cfg.variant)
    fit_cfg = cfg.implant_fit
    fit_cfg = ImplantFitConfig(
        steps=fit_cfg.steps, lr=fit_cfg.lr, optimizer=fit_cfg.optimizer, lam=fit_cfg.lam,
        temp_start=fit_cfg.temp_start, temp_end=fit_cfg.temp_end,
        residual_hidden=fit_cfg.residual_hidden, fit_residual=fit_residual,
        seed=fit_cfg.seed,
    )
    return fit_implants(
        split["train"], params, init, fit_cfg,
        rngmod.substream(cfg.root_seed, "fit", persona_params.name, fit_residual),
    )


def train_persona_bc(cfg: ExperimentConfig, persona_params, human_transfer, human_original):
    """BC trains on original+transfer human-view data combined."""
    tr = split_rounds(human_transfer, cfg.data_fraction)["train"]
    orig = split_rounds(human_original, cfg.data_fraction)["train"]
    val = split_rounds(human_transfer)["val"] + split_rounds(human_original)["val"]
    arch = arch_for(cfg.domain)
    return train_bc(tr + orig, val, arch, cfg.bc)


def train_persona_sqil(cfg: ExperimentConfig, persona_params, human_transfer, human_original):
    tr = split_rounds(human_transfer, cfg.data_fraction)["train"]
    orig = split_rounds(human_original, cfg.data_fraction)["train"]
    arch = arch_for(cfg.domain)
    ids = scenario_ids(cfg.domain)

    def env_factory(rng):
        return _HumanViewEnv(make_env(cfg.domain, ids[int(rng.integers(len(ids)))], cfg.variant))

    return train_sqil(
        env_factory, tr + orig, arch, cfg.sqil,
        rngmod.substream(cfg.root_seed, "sqil", persona_params.name),
    )


class _HumanViewEnv:
    """Wraps an env so rollouts observe what the human would see."""

    def __init__(self, env):
        self.env = env
        self.n_actions = env.n_actions
        self.domain = env.domain

    def reset(self, rng):
        self.env.reset(rng)
        return self.env.human_view()

    def step(self, action):
        _, reward, done, info = self.env.step(action)
        return self.env.human_view(), reward, done, info


def eval_method_nll(cfg: ExperimentConfig, method: str, params, assets, robot_recs, human_recs):
    split_r = split_rounds(robot_recs)
    split_h = split_rounds(human_recs)
    if method in ("mirror", "mirror_kl", "mirror_p"):
        policy = MirrorPolicy(params, assets["implants"])
        return policy_nll(policy, split_r["test"], rngmod.substream(cfg.root_seed, "nll", method))
    if method in ("bc", "sqil"):
        return policy_nll(assets["policy"], split_h["test"])
    return None


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Full pipeline; returns the metrics file path."""
    workdir = Path(cfg.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg.to_yaml(workdir / "config.yaml")
    needs_model = any(m != "nc" and m != "im" for m in cfg.methods)
    params = ensure_self_model(cfg) if needs_model else None

    personas = load_personas(cfg.domain)
    if cfg.personas:
        personas = [p for p in personas if p.name in cfg.personas]
    if not personas:
        raise UsageError("no personas selected")

    ids = scenario_ids(cfg.domain)
    rows: list[MetricsRow] = []
    for persona in personas:
        robot_recs, human_recs = persona_dataset(cfg, persona, cfg.variant)
        human_orig = None
        if any(m in ("bc", "sqil") for m in cfg.methods):
            _, human_orig = persona_dataset(cfg, persona, "original")
        save_trajectories(
            workdir / "datasets" / f"{persona.name}_{cfg.variant}_robot.jsonl", robot_recs
        )
        for method in cfg.methods:
            assets: dict = {"params": params}
            if method in ("mirror", "mirror_kl"):
                implants, curve = fit_persona_implants(
                    cfg, params, persona, robot_recs, fit_residual=True
                )
                implants.save(workdir / "implants" / f"{persona.name}_mirror.json")
                assets["implants"] = implants
                assets["fit_curve"] = curve
            elif method == "mirror_p":
                implants, _ = fit_persona_implants(
                    cfg, params, persona, robot_recs, fit_residual=False
                )
                implants.save(workdir / "implants" / f"{persona.name}_mirror_p.json")
                assets["implants"] = implants
            elif method == "bc":
                policy, _ = train_persona_bc(cfg, persona, human_recs, human_orig)
                assets["policy"] = policy
            elif method == "sqil":
                policy = train_persona_sqil(cfg, persona, human_recs, human_orig)
                assets["policy"] = policy
                assets["temperature"] = cfg.sqil.temperature
            nll = eval_method_nll(cfg, method, params, assets, robot_recs, human_recs)
            assistant = build_assistant(method, cfg.domain, cfg.variant, assets, cfg.planner)
            for episode in range(cfg.episodes):
                scenario = ids[episode % len(ids)]
                ep_seed = rngmod.torch_seed(cfg.root_seed, "episode", persona.name, episode)
                stats = run_assisted_episode(
                    cfg.domain, scenario, cfg.variant, persona, assistant, ep_seed
                )
                rows.append(
                    MetricsRow(
                        method=method,
                        domain=cfg.domain,
                        variant=cfg.variant,
                        data_fraction=cfg.data_fraction,
                        persona=persona.name,
                        seed=ep_seed % 2**31,
                        episode=episode,
                        scenario=stats["scenario"],
                        task_return=stats["task_return"],
                        collisions=stats["collisions"],
                        steps=stats["steps"],
                        visual_items=stats["visual_items"],
                        verbal_utterances=stats["verbal_utterances"],
                        comm_cost=stats["comm_cost"],
                        nll=nll,
                    )
                )
            if hasattr(assistant, "log") and assistant.log:
                log_path = workdir / "planner_logs" / f"{persona.name}_{method}.jsonl"
                log_path.parent.mkdir(parents=True, exist_ok=True)
                with open(log_path, "w") as fh:
                    for entry in assistant.log:
                        fh.write(json.dumps(entry, sort_keys=True) + "\n")
    metrics_path = workdir / "metrics.csv"
    write_metrics(metrics_path, rows)
    return metrics_path
