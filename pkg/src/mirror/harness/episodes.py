"""Episode runners: dataset generation and per-step replanned assisted play.

One real tick runs: the human digests its own view; the assistant updates
its world belief from the full observation, plans a reveal mask, realizes
it (decoding its belief into payloads and structured facts), the human
absorbs the communication and acts, the environment steps. The assistant's
estimate of the human belief advances through the overlay of the
perceptually-filtered real observation and the realized communication.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field

import numpy as np

from .. import rng as rngmod
from ..communication import (
    COST_TABLES,
    PlanConfig,
    comm_cost,
    comm_spec_for,
    plan_ce,
    plan_kl,
)
from ..envs import bomb as bombmod
from ..envs import driving as drvmod
from ..envs import rescue as rescuemod
from ..envs import make_env
from ..humans import BombHuman, DrivingHuman, RescueHuman, make_human
from ..implants import ImplantSet, apply_perceptual, default_implants, filter_visual_batched
from ..runtime import NumpyGRU, NumpyMLP, RuntimeModel, softmax
from ..types import LatentBelief, ModalityBundle, Step, TrajectoryRecord
from ..world_model import WorldModelParams

EPISODE_CAP = {"driving": drvmod.EPISODE_LEN, "rescue": rescuemod.MAX_STEPS, "bomb": bombmod.TIME_LIMIT}


def human_act(domain: str, human, env, t: int, rng: np.random.Generator) -> int:
    if domain == "driving":
        return human.act(env.state.ego_lane, t, rng)
    if domain == "rescue":
        return human.act(env.state.agent, t, rng)
    facts = env.human_facts()
    return human.act(facts["stage"], facts["relevant_symbol"], facts["rule_set"], rng)


def robot_expert_action(domain: str, env, expert, t: int, rng: np.random.Generator) -> int:
    """Scripted expert on ground truth, used for self-play data collection."""
    if domain == "bomb":
        return env.robot_recommendation()
    expert.observe(env.full_facts(), t)
    return human_act(domain, expert, env, t, rng)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def run_solo_episode(domain: str, scenario: int, variant: str, persona_params, seed: int):
    """Unassisted human episode; records robot-view and human-view streams."""
    env = make_env(domain, scenario, variant)
    obs = env.reset(rngmod.substream(seed, "env"))
    act_rng = rngmod.substream(seed, "act")
    human = make_human(domain, persona_params)
    robot_steps, human_steps = [], []
    total = 0.0
    for t in range(EPISODE_CAP[domain]):
        human.observe(env.human_facts(), t)
        full, view = env.full_observation(), env.human_view()
        action = human_act(domain, human, env, t, act_rng)
        obs, reward, done, info = env.step(action)
        robot_steps.append(Step(full, action, reward))
        human_steps.append(Step(view, action, reward))
        total += reward
        if done:
            break
    meta = dict(domain=domain, variant=variant, scenario=scenario,
                persona=persona_params.name, seed=seed)
    robot_rec = TrajectoryRecord(steps=robot_steps, extra={"view": "robot"}, **meta)
    human_rec = TrajectoryRecord(steps=human_steps, extra={"view": "human"}, **meta)
    return robot_rec, human_rec, {"return": total, "collisions": _collisions(env)}


def run_robot_episode(domain: str, scenario: int, seed: int, random_eps: float) -> TrajectoryRecord:
    """Self-play episode in the original variant for world-model training."""
    env = make_env(domain, scenario, "original")
    env.reset(rngmod.substream(seed, "env"))
    rng = rngmod.substream(seed, "robot")
    expert = _default_expert(domain)
    steps = []
    for t in range(EPISODE_CAP[domain]):
        full = env.full_observation()
        if rng.random() < random_eps:
            action = int(rng.integers(env.n_actions))
        else:
            action = robot_expert_action(domain, env, expert, t, rng)
        _, reward, done, _ = env.step(action)
        steps.append(Step(full, action, reward))
        if done:
            break
    return TrajectoryRecord(steps=steps, domain=domain, variant="original",
                            scenario=scenario, persona="robot", seed=seed)


def _default_expert(domain: str):
    from ..humans import BombHumanParams, DrivingHumanParams, RescueHumanParams

    if domain == "driving":
        return DrivingHuman(DrivingHumanParams())
    if domain == "rescue":
        return RescueHuman(RescueHumanParams())
    return BombHuman(BombHumanParams(p=1.0))


def scenario_ids(domain: str) -> list[int]:
    return {"driving": list(range(1, 9)), "rescue": list(range(1, 10)), "bomb": list(range(1, 9))}[domain]


def generate_robot_dataset(domain: str, episodes: int, seed: int, random_eps: float = 0.3):
    ids = scenario_ids(domain)
    return [
        run_robot_episode(domain, ids[i % len(ids)], rngmod.torch_seed(seed, "robot", i), random_eps)
        for i in range(episodes)
    ]


def generate_persona_rounds(domain: str, variant: str, persona_params, rounds: int, seed: int):
    """All rounds for one persona; returns (robot_view, human_view) record lists."""
    ids = scenario_ids(domain)
    robot_recs, human_recs = [], []
    for i in range(rounds):
        scenario = ids[i % len(ids)]
        ep_seed = rngmod.torch_seed(seed, "persona", persona_params.name, variant, i)
        r, h, _ = run_solo_episode(domain, scenario, variant, persona_params, ep_seed)
        robot_recs.append(r)
        human_recs.append(h)
    return robot_recs, human_recs


def split_rounds(records: list, fraction: float = 1.0):
    """First 20 rounds are the training pool; of the last 20, 10 validate and 6 test."""
    n_train = int(round(20 * fraction))
    return {
        "train": records[:n_train],
        "val": records[20:30],
        "test": records[30:36],
    }


# ---------------------------------------------------------------------------
# Communication realization (payloads -> structured facts for scripted humans)
# ---------------------------------------------------------------------------


def comm_payload_to_facts(domain: str, payloads: dict[str, np.ndarray]) -> dict:
    if domain == "driving":
        facts = {"cars": {}, "verbal": {}}
        vis, lane, pos = drvmod.visual_slots(payloads["visual"][None])
        for i in range(drvmod.N_CARS):
            if vis[0, i] > 0.5:
                facts["cars"][i] = (
                    int(np.rint(np.clip(lane[0, i], 0, 1))),
                    float(pos[0, i] * drvmod.SENSOR_RANGE),
                )
        spk, vlane, vpos, vspd = drvmod.verbal_slots(payloads["verbal"][None])
        for i in range(drvmod.N_CARS):
            if spk[0, i] > 0.5:
                facts["verbal"][i] = (
                    int(np.rint(np.clip(vlane[0, i], 0, 1))),
                    float(vpos[0, i] * drvmod.SENSOR_RANGE),
                    float(vspd[0, i] + 1.0),
                )
        return facts
    if domain == "rescue":
        cells = {}
        grid = payloads["visual"].reshape(rescuemod.CHANNELS, rescuemod.GRID, rescuemod.GRID)
        for r in range(rescuemod.GRID):
            for c in range(rescuemod.GRID):
                if grid[0, r, c] > 0.5:
                    if grid[2, r, c] > 0.5:
                        cells[(r, c)] = "obstacle"
                    elif grid[3, r, c] > 0.5:
                        cells[(r, c)] = "victim"
                    elif grid[1, r, c] > 0.5:
                        cells[(r, c)] = "wall"
                    else:
                        cells[(r, c)] = "free"
        verb = payloads["verbal"].reshape(-1, 2)
        gaps = list(rescuemod.GAPS.values())
        for j, gap in enumerate(gaps):
            if verb[j, 0] > 0.5:
                cells[gap] = "obstacle" if verb[j, 1] > 0.5 else "free"
        for j, cand in enumerate(rescuemod.VICTIM_CELLS):
            if verb[len(gaps) + j, 0] > 0.5:
                cells[cand] = "victim" if verb[len(gaps) + j, 1] > 0.5 else "free"
        return {"cells": cells}
    facts = {}
    visual = payloads["visual"]
    base = bombmod.N_STAGES + 1
    stage = int(np.argmax(visual[: bombmod.N_STAGES])) + 1 if visual[: bombmod.N_STAGES].any() else 1
    rel = bombmod.RELEVANT_TERMINAL[min(stage, bombmod.N_STAGES)]
    off = base + 5 * rel
    if visual[off] > 0.5:
        facts["relevant_symbol"] = int(np.argmax(visual[off + 1 : off + 5]))
    if payloads["verbal"][0] > 0.5:
        facts["bomb_type"] = 0 if payloads["verbal"][1] > 0.5 else 1
    return facts


def true_comm_facts(domain: str, env, mask: dict[str, np.ndarray]) -> dict:
    """Ground-truth communication content for the oracle (ideal-model) assistant."""
    if domain == "driving":
        facts = {"cars": {}, "verbal": {}}
        s = env.state
        for i in range(drvmod.N_CARS):
            if mask["visual"][i] > 0.5 and s.rel_pos[i] >= 0 and abs(s.rel_pos[i]) <= drvmod.SENSOR_RANGE:
                facts["cars"][i] = (int(s.lanes[i]), float(s.rel_pos[i]))
            if mask["verbal"][i] > 0.5 and abs(s.rel_pos[i]) <= drvmod.SENSOR_RANGE:
                facts["verbal"][i] = (int(s.lanes[i]), float(s.rel_pos[i]), float(s.speeds[i]))
        return facts
    if domain == "rescue":
        cells = {}
        for region in range(9):
            if mask["visual"][region] > 0.5:
                for cell in rescuemod.region_cells(region):
                    cells[cell] = env.cell_content(cell)
        gaps = list(rescuemod.GAPS.values())
        for j, gap in enumerate(gaps):
            if mask["verbal"][j] > 0.5:
                cells[gap] = env.cell_content(gap)
        for j, cand in enumerate(rescuemod.VICTIM_CELLS):
            if mask["verbal"][len(gaps) + j] > 0.5:
                cells[cand] = env.cell_content(cand)
        return {"cells": cells}
    facts = {}
    s = env.state
    rel = bombmod.RELEVANT_TERMINAL[min(s.stage, bombmod.N_STAGES)]
    if mask["visual"][rel] > 0.5:
        facts["relevant_symbol"] = int(s.terminals[rel])
    if mask["verbal"][0] > 0.5:
        facts["bomb_type"] = int(s.bomb_type)
    return facts


def mask_counts(mask: dict[str, np.ndarray]) -> tuple[float, float]:
    return float(mask.get("visual", np.zeros(1)).sum()), float(mask.get("verbal", np.zeros(1)).sum())


# ---------------------------------------------------------------------------
# Assistants
# ---------------------------------------------------------------------------


class NoCommAssistant:
    method = "nc"

    def __init__(self, domain: str):
        self.domain = domain

    def begin_episode(self, seed: int):
        pass

    def update_beliefs(self, obs, prev_action):
        pass

    def plan_comm(self, env, human, t):
        return None


class MirrorAssistant:
    """Plans reveal masks by forward imagination on the implanted self-model."""

    def __init__(self, domain: str, variant: str, params: WorldModelParams,
                 implants: ImplantSet, plan_cfg: PlanConfig, objective: str = "return"):
        self.domain = domain
        self.variant = variant
        self.rt = RuntimeModel.from_params(params)
        self.implants = implants
        self.cfg = plan_cfg
        self.objective = objective
        self.table = COST_TABLES[domain]
        self.spec = comm_spec_for(domain)
        self.log: list = []

    def begin_episode(self, seed: int):
        d = self.rt.arch.latent_dim
        self._z_r = LatentBelief(np.zeros(d), np.ones(d))
        self._z_h = LatentBelief(np.zeros(d), np.ones(d))
        self._seed = seed
        self._t = 0
        self._pending_comm = None

    def update_beliefs(self, obs: ModalityBundle, prev_action):
        bundle = obs.masked()
        payloads = {m: np.atleast_2d(bundle.payloads[m]) for m in bundle.payloads}
        present = {m: np.array([float(bundle.present[m])]) for m in bundle.present}
        aoh = self.rt.action_onehot(prev_action)
        mean, var = self.rt.infer(self._z_r.mean[None], aoh, payloads, present)
        self._z_r = LatentBelief(mean[0], var[0])
        # the human-belief estimate advances with the filtered real view plus
        # whatever was actually communicated last tick
        filt_vis = filter_visual_batched(
            self.implants.perceptual, payloads["visual"],
            rngmod.substream(self._seed, "hfilter", self._t).random((1, bombmod.N_TERMINALS)),
        )
        drop_verbal = getattr(self.implants.perceptual, "drop_verbal", self.domain == "bomb")
        human_verb = np.zeros_like(payloads["verbal"]) if drop_verbal else payloads["verbal"]
        verb_present = np.zeros(1) if drop_verbal else np.ones(1)
        comm = self._pending_comm_payloads()
        combined = self.spec.overlay(
            {"visual": filt_vis, "verbal": human_verb, "verbal_present": verb_present}, comm
        )
        hmean, hvar = self.rt.infer(
            self._z_h.mean[None], aoh,
            {"visual": combined["visual"], "verbal": combined["verbal"]},
            {"visual": np.ones(1), "verbal": combined["verbal_present"]},
        )
        self._z_h = LatentBelief(hmean[0], hvar[0])

    def _pending_comm_payloads(self):
        if self._pending_comm is None:
            return {
                "visual": np.zeros((1, self.rt.arch.modality("visual").dim)),
                "verbal": np.zeros((1, self.rt.arch.modality("verbal").dim)),
            }
        return self._pending_comm

    def plan_comm(self, env, human, t):
        self._t = t
        rng = rngmod.substream(self._seed, "plan", t)
        if self.objective == "kl":
            result = plan_kl(self._z_r, self._z_h, self.implants, self.rt, self.cfg, rng)
        else:
            result = plan_ce(
                self._z_r, self._z_h, self.implants, self.rt, self.table, self.cfg, rng,
            )
        mask = result["mask"]
        decoded = {}
        for m in self.rt.arch.modalities:
            mean, _ = self.rt.decode(m.name, self._z_r.mean[None])
            decoded[m.name] = mean
        payloads = self.spec.comm_payloads(decoded, {k: v[None] for k, v in mask.items()})
        facts = comm_payload_to_facts(self.domain, {k: v[0] for k, v in payloads.items()})
        self._pending_comm = payloads
        vis_n, verb_n = mask_counts(mask)
        self.log.append({"t": t, "objective": result["objective"],
                         "visual": mask["visual"].tolist(), "verbal": mask["verbal"].tolist()})
        return {
            "facts": facts,
            "mask": mask,
            "cost": comm_cost(mask, self.table),
            "visual_items": vis_n,
            "verbal_utterances": verb_n,
        }


class OracleAssistant:
    """Ideal-model assistant: plans on ground-truth clones of env and human."""

    method = "im"

    def __init__(self, domain: str, plan_cfg: PlanConfig):
        self.domain = domain
        self.cfg = plan_cfg
        self.table = COST_TABLES[domain]
        spec = comm_spec_for(domain)
        self.items = spec.items

    def begin_episode(self, seed: int):
        self._seed = seed

    def update_beliefs(self, obs, prev_action):
        pass

    def plan_comm(self, env, human, t):
        rng = rngmod.substream(self._seed, "implan", t)
        n_bits = sum(self.items.values())
        probs = np.full(n_bits, 0.5)
        cache: dict[bytes, float] = {}
        n_elite = max(1, int(round(self.cfg.population * self.cfg.elite_frac)))
        best_mask, best_score = np.zeros(n_bits), -np.inf

        def score(bits: np.ndarray) -> float:
            key = bits.tobytes()
            if key in cache:
                return cache[key]
            env2 = copy.deepcopy(env)
            human2 = copy.deepcopy(human)
            mask = self._split(bits)
            total = 0.0
            for k in range(self.cfg.horizon):
                if getattr(env2.state, "step_count", 0) >= EPISODE_CAP[self.domain]:
                    break
                human2.observe(env2.human_facts(), t + k)
                step_mask = mask if k == 0 else self._split(np.zeros(n_bits))
                human2.absorb_communication(true_comm_facts(self.domain, env2, step_mask), t + k)
                action = human_act(self.domain, human2, env2, t + k, np.random.default_rng(0))
                _, reward, done, _ = env2.step(action)
                cost = comm_cost(step_mask, self.table) if k == 0 else 0.0
                total += self.cfg.gamma**k * (reward - cost)
                if done:
                    break
            cache[key] = total
            return total

        for _ in range(self.cfg.iterations):
            cand = (rng.random((self.cfg.population, n_bits)) < probs).astype(np.float64)
            cand[0] = 0.0
            scores = np.array([score(row) for row in cand])
            order = np.argsort(-scores)
            elite = cand[order[:n_elite]]
            probs = np.clip(elite.mean(axis=0), 0.02, 0.98)
            for idx in order[:n_elite]:
                if scores[idx] > best_score + 1e-12 or (
                    abs(scores[idx] - best_score) <= 1e-9 and cand[idx].sum() < best_mask.sum()
                ):
                    best_score, best_mask = float(scores[idx]), cand[idx].copy()

        mask = self._split(best_mask)
        vis_n, verb_n = mask_counts(mask)
        return {
            "facts": true_comm_facts(self.domain, env, mask),
            "mask": mask,
            "cost": comm_cost(mask, self.table),
            "visual_items": vis_n,
            "verbal_utterances": verb_n,
        }

    def _split(self, bits: np.ndarray) -> dict[str, np.ndarray]:
        mask = {}
        offset = 0
        for m in sorted(self.items):
            n = self.items[m]
            mask[m] = bits[offset : offset + n]
            offset += n
        return mask


class PolicyModelAssistant(MirrorAssistant):
    """Assistant whose human-action model is a trained BC/SQIL policy.

    Dynamics still come from the robot self-model; the recurrent policy
    tracks the imagined human observations. The true perceptual limits are
    given (these baselines know what the human can perceive), so the
    implant slot carries the ground-truth filter.
    """

    def __init__(self, domain, variant, params, policy, plan_cfg, temperature=1.0):
        implants = default_implants(domain, variant)
        if domain == "driving" and variant == "transfer":
            from ..implants import DrivingThresholdFilter

            implants.perceptual = DrivingThresholdFilter(
                drvmod.FOG_FRONT_RANGE, 0.0, drvmod.FOG_FRONT_RANGE, 0.0, drop_verbal=True
            )
        elif domain == "rescue" and variant == "transfer":
            from ..implants import RescueRadialFilter

            implants.perceptual = RescueRadialFilter(rescuemod.SMOKE_RADIUS, drop_verbal=True)
        super().__init__(domain, variant, params, implants, plan_cfg)
        state = {k: v.detach().numpy() for k, v in policy.net.state_dict().items()}
        self.gru = NumpyGRU(state, "cell")
        head_ws, head_bs = [], []
        i = 0
        while f"head.{i}.weight" in state:
            head_ws.append(state[f"head.{i}.weight"].T)
            head_bs.append(state[f"head.{i}.bias"])
            i += 1
        head_ws.append(state["out.weight"].T)
        head_bs.append(state["out.bias"])
        self.head = NumpyMLP(head_ws, head_bs)
        self.temperature = temperature
        self._h_est = None

    def begin_episode(self, seed: int):
        super().begin_episode(seed)
        self._h_est = np.zeros((1, self.gru.hidden))

    def update_beliefs(self, obs, prev_action):
        # robot-belief update identical; the human model is the GRU hidden,
        # advanced with the filtered view plus realized communication
        bundle = obs.masked()
        payloads = {m: np.atleast_2d(bundle.payloads[m]) for m in bundle.payloads}
        present = {m: np.array([float(bundle.present[m])]) for m in bundle.present}
        aoh = self.rt.action_onehot(prev_action)
        mean, var = self.rt.infer(self._z_r.mean[None], aoh, payloads, present)
        self._z_r = LatentBelief(mean[0], var[0])
        filt_vis = filter_visual_batched(
            self.implants.perceptual, payloads["visual"],
            rngmod.substream(self._seed, "hfilter", self._t).random((1, bombmod.N_TERMINALS)),
        )
        drop_verbal = getattr(self.implants.perceptual, "drop_verbal", self.domain == "bomb")
        human_verb = np.zeros_like(payloads["verbal"]) if drop_verbal else payloads["verbal"]
        verb_present = np.zeros(1) if drop_verbal else np.ones(1)
        comm = self._pending_comm_payloads()
        combined = self.spec.overlay(
            {"visual": filt_vis, "verbal": human_verb, "verbal_present": verb_present}, comm
        )
        x = np.concatenate(
            [combined["visual"][0], [1.0], combined["verbal"][0],
             [combined["verbal_present"][0]], aoh[0]]
        )[None]
        self._h_est = self.gru(x, self._h_est)

    def plan_comm(self, env, human, t):
        self._t = t
        rng = rngmod.substream(self._seed, "plan", t)
        result = self._plan_recurrent(rng)
        mask = result["mask"]
        decoded = {}
        for m in self.rt.arch.modalities:
            mean, _ = self.rt.decode(m.name, self._z_r.mean[None])
            decoded[m.name] = mean
        payloads = self.spec.comm_payloads(decoded, {k: v[None] for k, v in mask.items()})
        facts = comm_payload_to_facts(self.domain, {k: v[0] for k, v in payloads.items()})
        self._pending_comm = payloads
        vis_n, verb_n = mask_counts(mask)
        return {
            "facts": facts,
            "mask": mask,
            "cost": comm_cost(mask, self.table),
            "visual_items": vis_n,
            "verbal_utterances": verb_n,
        }

    def _plan_recurrent(self, rng: np.random.Generator) -> dict:
        from ..communication import _unflatten, draw_noise, _tile

        cfg = self.cfg
        rt = self.rt
        spec = self.spec
        rng_noise, rng_masks = rng.spawn(2)
        noise = draw_noise(rng_noise, rt, cfg.samples, cfg.horizon)
        item_counts = spec.items
        n_bits = sum(item_counts.values()) * cfg.horizon
        probs = np.full(n_bits, 0.5)
        n_elite = max(1, int(round(cfg.population * cfg.elite_frac)))
        cache: dict[bytes, float] = {}
        best = {"score": -np.inf, "mask": None, "items": np.inf}
        eye = np.eye(rt.arch.n_actions)

        def score_rows(rows: np.ndarray) -> np.ndarray:
            u = rows.shape[0]
            masks = _unflatten(rows, item_counts, cfg.horizon, cfg.samples, item_counts)
            big = _tile(noise, u)
            b = u * cfg.samples
            z_r_s = self._z_r.mean[None] + np.sqrt(self._z_r.var)[None] * big["z_r0"][:b]
            h = np.repeat(self._h_est, b, axis=0)
            total = np.zeros(b)
            for t in range(cfg.horizon):
                logits = self.head(h) / self.temperature
                from ..runtime import sample_categorical

                actions = sample_categorical(softmax(logits), big["u_act"][:b, t])
                aoh = eye[actions]
                pm, pv = rt.transition(z_r_s, aoh)
                z_r_s2 = pm + np.sqrt(pv) * big["eps_r"][:b, t]
                decoded = {}
                for m in rt.arch.modalities:
                    dm, dv = rt.decode(m.name, z_r_s2)
                    decoded[m.name] = dm + np.sqrt(dv) * big[f"eps_dec_{m.name}"][:b, t]
                human_vis = filter_visual_batched(
                    self.implants.perceptual, decoded["visual"], big["u_filter"][:b, t]
                )
                drop_verbal = getattr(self.implants.perceptual, "drop_verbal", self.domain == "bomb")
                human_verb = np.zeros_like(decoded["verbal"]) if drop_verbal else decoded["verbal"]
                verb_present = np.zeros(b) if drop_verbal else np.ones(b)
                step_masks = {m: masks[m][:, t] for m in masks}
                comm = spec.comm_payloads(decoded, step_masks)
                combined = spec.overlay(
                    {"visual": human_vis, "verbal": human_verb, "verbal_present": verb_present},
                    comm,
                )
                x = np.concatenate(
                    [combined["visual"], np.ones((b, 1)), combined["verbal"],
                     combined["verbal_present"][:, None], aoh], axis=1
                )
                h = self.gru(x, h)
                r_mean, _ = rt.reward(z_r_s2)
                counts = {m: step_masks[m].sum(axis=1) for m in step_masks}
                step_cost = self.table.visual * counts.get("visual", 0.0) ** 2
                step_cost = step_cost + self.table.verbal * counts.get("verbal", 0.0) ** 2
                total += cfg.gamma**t * (r_mean[:, 0] - step_cost)
                z_r_s = z_r_s2
            return total.reshape(u, cfg.samples).mean(axis=1)

        for _ in range(cfg.iterations):
            cand = (rng_masks.random((cfg.population, n_bits)) < probs).astype(np.float64)
            cand[0] = 0.0
            keys = [row.tobytes() for row in cand]
            todo = [(k, r) for k, r in zip(keys, cand) if k not in cache]
            seen = set()
            rows = []
            for k, r in todo:
                if k not in seen:
                    seen.add(k)
                    rows.append((k, r))
            if rows:
                scores_new = score_rows(np.asarray([r for _, r in rows]))
                for (k, _), sc in zip(rows, scores_new):
                    cache[k] = float(sc)
            scores = np.array([cache[k] for k in keys])
            order = np.argsort(-scores)
            elite = cand[order[:n_elite]]
            probs = np.clip(elite.mean(axis=0), 0.02, 0.98)
            for idx in order[:n_elite]:
                sc, items = scores[idx], float(cand[idx].sum())
                if sc > best["score"] + 1e-12 or (
                    abs(sc - best["score"]) <= 1e-9 and items < best["items"]
                ):
                    best = {"score": float(sc), "mask": cand[idx].copy(), "items": items}

        first = _unflatten((probs[None] > 0.5).astype(np.float64), item_counts, cfg.horizon, 1, item_counts)
        mask = {m: first[m][0, 0].astype(float) for m in first}
        return {"mask": mask, "objective": best["score"]}


def build_assistant(method: str, domain: str, variant: str, assets: dict, plan_cfg: PlanConfig):
    if method == "nc":
        return NoCommAssistant(domain)
    if method == "im":
        im_cfg = PlanConfig(
            horizon=min(plan_cfg.horizon, 3), gamma=plan_cfg.gamma,
            population=32, elite_frac=0.25, iterations=4, samples=1,
        )
        return OracleAssistant(domain, im_cfg)
    if method in ("mirror", "mirror_p", "mirror_kl"):
        implants = assets["implants"]
        if method == "mirror_p":
            implants = ImplantSet(
                domain=implants.domain, perceptual=implants.perceptual,
                residual_state={}, residual_hidden=implants.residual_hidden,
                lowpass_alpha=implants.lowpass_alpha, lam=implants.lam,
                prior_center=implants.prior_center,
            )
        objective = "kl" if method == "mirror_kl" else "return"
        return MirrorAssistant(domain, variant, assets["params"], implants, plan_cfg, objective)
    if method in ("bc", "sqil"):
        temp = assets.get("temperature", 1.0)
        return PolicyModelAssistant(domain, variant, assets["params"], assets["policy"], plan_cfg, temp)
    raise ValueError(f"unknown method {method!r}")


def run_assisted_episode(domain: str, scenario: int, variant: str, persona_params,
                         assistant, seed: int) -> dict:
    env = make_env(domain, scenario, variant)
    env.reset(rngmod.substream(seed, "env"))
    act_rng = rngmod.substream(seed, "act")
    human = make_human(domain, persona_params)
    assistant.begin_episode(seed)
    total, vis_items, verb_items, cost_total = 0.0, 0.0, 0.0, 0.0
    prev_action = None
    steps = 0
    for t in range(EPISODE_CAP[domain]):
        obs = env.full_observation()
        human.observe(env.human_facts(), t)
        assistant.update_beliefs(obs, prev_action)
        comm = assistant.plan_comm(env, human, t)
        if comm is not None:
            human.absorb_communication(comm["facts"], t)
            vis_items += comm["visual_items"]
            verb_items += comm["verbal_utterances"]
            cost_total += comm["cost"]
        action = human_act(domain, human, env, t, act_rng)
        _, reward, done, info = env.step(action)
        total += reward
        prev_action = action
        steps += 1
        if done:
            break
    return {
        "task_return": total,
        "collisions": _collisions(env),
        "steps": steps,
        "visual_items": vis_items,
        "verbal_utterances": verb_items,
        "comm_cost": cost_total,
        "scenario": scenario,
    }


def _collisions(env) -> int:
    state = env.state
    return int(getattr(state, "collisions", 0))
