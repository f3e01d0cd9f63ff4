"""Command-line entry points for training, fitting, experiments and serving."""

from __future__ import annotations

import asyncio
import json
from pathlib import Path

import click
import numpy as np

from . import rng as rngmod
from .baselines import save_policy
from .envs import arch_for
from .harness.config import ExperimentConfig
from .harness.episodes import split_rounds
from .harness.export import export_figure_data
from .harness.metrics import read_metrics
from .humans import load_personas
from .implants import ImplantFitConfig, ImplantSet, MirrorPolicy, default_implants, fit_implants, policy_nll
from .types import load_trajectories
from .world_model import WorldModelParams


@click.group()
def main():
    """Self-model learning, implant fitting and assistive communication."""


def _load_config(config_path, **overrides) -> ExperimentConfig:
    if config_path:
        cfg = ExperimentConfig.from_yaml(config_path)
    else:
        cfg = ExperimentConfig()
    for key, value in overrides.items():
        if value is not None:
            object.__setattr__(cfg, key, value)
    return cfg


@main.command("train-self")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--domain", default=None)
@click.option("--workdir", default=None)
@click.option("--seed", type=int, default=None)
def train_self(config_path, domain, workdir, seed):
    """Train the self-model (world model + DQN policy head) for a domain."""
    from .harness.experiment import SELF_MODEL_FILE, ensure_self_model

    cfg = _load_config(config_path, domain=domain, workdir=workdir, root_seed=seed)
    ensure_self_model(cfg)
    click.echo(f"self-model ready at {Path(cfg.workdir) / SELF_MODEL_FILE}")


@main.command("train-baseline")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--kind", type=click.Choice(["bc", "sqil"]), required=True)
@click.option("--persona", required=True)
@click.option("--out", "out_path", required=True)
def train_baseline(config_path, kind, persona, out_path):
    """Train a BC or SQIL human model for one persona and save its checkpoint."""
    from .harness.experiment import persona_dataset, train_persona_bc, train_persona_sqil

    cfg = _load_config(config_path)
    presets = {p.name: p for p in load_personas(cfg.domain)}
    persona_params = presets[persona]
    _, human_transfer = persona_dataset(cfg, persona_params, cfg.variant)
    _, human_original = persona_dataset(cfg, persona_params, "original")
    if kind == "bc":
        policy, info = train_persona_bc(cfg, persona_params, human_transfer, human_original)
        click.echo(f"bc val nll {info['val_nll']:.4f} (head depth {info['layers']})")
    else:
        policy = train_persona_sqil(cfg, persona_params, human_transfer, human_original)
    save_policy(out_path, policy, kind)
    click.echo(f"saved {kind} checkpoint to {out_path}")


@main.command("fit-implants")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--demos", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True)
@click.option("--variant", default="transfer")
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=0)
def fit_implants_cmd(checkpoint, demos, out_path, variant, steps, seed):
    """Fit implant parameters to recorded demonstrations."""
    params = WorldModelParams.load(checkpoint)
    records = load_trajectories(demos)
    domain = records[0].domain
    init = default_implants(domain, variant)
    fit_cfg = ImplantFitConfig()
    if steps is not None:
        fit_cfg.steps = steps
    fitted, curve = fit_implants(records, params, init, fit_cfg, rngmod.substream(seed, "fit"))
    fitted.save(out_path)
    nll = policy_nll(MirrorPolicy(params, fitted), records, rngmod.substream(seed, "nll"))
    click.echo(json.dumps({"final_train_nll": curve[-1], "demo_nll": nll}))
    click.echo(f"implants saved to {out_path}")


@main.command("eval-nll")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--implants", "implants_path", type=click.Path(exists=True), default=None)
@click.option("--testset", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0)
def eval_nll(checkpoint, implants_path, testset, seed):
    """Teacher-forced NLL of recorded actions under the (implanted) self-model."""
    params = WorldModelParams.load(checkpoint)
    implants = ImplantSet.load(implants_path) if implants_path else None
    records = load_trajectories(testset)
    nll = policy_nll(MirrorPolicy(params, implants), records, rngmod.substream(seed, "nll"))
    click.echo(json.dumps({"nll": nll, "records": len(records)}))


@main.command("run-assist")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
def run_assist(config_path):
    """Run the configured assisted-communication experiment."""
    from .harness.experiment import run_experiment

    cfg = ExperimentConfig.from_yaml(config_path)
    path = run_experiment(cfg)
    click.echo(f"metrics written to {path}")


@main.command("export")
@click.option("--metrics", "metrics_path", required=True, type=click.Path(exists=True))
@click.option("--figure", type=click.Choice(["nll_curve", "perf_comm"]), required=True)
@click.option("--out", "out_path", required=True)
def export_cmd(metrics_path, figure, out_path):
    """Aggregate a metrics file into figure-ready tabular data."""
    rows = read_metrics(metrics_path)
    export_figure_data(rows, figure, out_path)
    click.echo(f"{figure} table written to {out_path}")


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8765)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--implants", "implants_path", type=click.Path(exists=True), default=None)
@click.option("--static", "static_dir", type=click.Path(exists=True), default=None)
@click.option("--demo-dir", default="sessions")
def serve_cmd(host, port, checkpoint, implants_path, static_dir, demo_dir):
    """Serve live play sessions (TCP protocol + browser WebSocket + static UI)."""
    from .harness.service import SessionService, serve

    service = SessionService(checkpoint, implants_path, static_dir, demo_dir)

    async def run():
        server = await serve(host, port, service)
        click.echo(f"session service on {host}:{port}")
        async with server:
            await server.serve_forever()

    asyncio.run(run())


if __name__ == "__main__":
    main()
