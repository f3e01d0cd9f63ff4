"""Communication pathways and planning.

Forward imagination couples the self-model (simulating the world) with the
implanted human model (simulating the operator): per imagined step the
human acts, the robot belief transitions, observations are decoded,
perceptually filtered, masked by the communication filter, overlaid onto
the human's view, and finally the human belief updates through the
inference net, in exactly that order.

Planning optimizes per-step binary reveal masks with the cross-entropy
method. Rollout noise uses common random numbers: every candidate mask is
scored on the same S noise streams, so a mask's score is a deterministic
function of the mask given the seed (this is what lets an exhaustive
enumeration reproduce the planner's objective exactly, and it reduces
comparison variance). Mask sampling draws fresh randomness per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import bomb as bombmod
from .envs import driving as drvmod
from .envs import rescue as rescuemod
from .implants import ImplantSet, filter_visual_batched
from .runtime import RuntimeModel, diag_gauss_kl, sample_categorical, softmax
from .types import LatentBelief, UsageError
from .world_model import WorldModelParams

ROLLOUT_STEPS = (
    "human_action",
    "robot_transition",
    "decode",
    "perceptual_filter",
    "comm_filter",
    "overlay",
    "human_inference",
)


@dataclass
class CostTable:
    visual: float
    verbal: float

    def __post_init__(self):
        if self.visual < 0 or self.verbal < 0:
            raise ValueError("cost coefficients must be nonnegative")


COST_TABLES = {
    "driving": CostTable(0.01, 0.03),
    "rescue": CostTable(0.02, 0.1),
    "bomb": CostTable(0.3, 0.5),
}


def comm_cost(mask_step: dict[str, np.ndarray], table: CostTable) -> float:
    """Quadratic per-modality cost of one filter step."""
    total = 0.0
    for name, coeff in (("visual", table.visual), ("verbal", table.verbal)):
        if name in mask_step:
            total += coeff * float(np.sum(mask_step[name])) ** 2
    return total


@dataclass
class PlanConfig:
    horizon: int = 5
    gamma: float = 0.95
    population: int = 128
    elite_frac: float = 0.125
    iterations: int = 8
    samples: int = 8
    channels: tuple[str, ...] = ("visual", "verbal")

    def __post_init__(self):
        if self.horizon < 1:
            raise UsageError("horizon must be >= 1")
        if not 0 < self.elite_frac <= 1:
            raise UsageError("elite fraction must lie in (0, 1]")
        if self.population * self.elite_frac < 1:
            raise UsageError("population x elite fraction must be >= 1")
        if not 0 < self.gamma <= 1:
            raise UsageError("gamma must lie in (0, 1]")
        if self.iterations < 1 or self.samples < 1:
            raise UsageError("iterations and samples must be >= 1")


# ---------------------------------------------------------------------------
# Per-domain communication semantics
# ---------------------------------------------------------------------------


class DrivingComm:
    """Visual: per-car show bits (front cars only, like a HUD); verbal: per-car
    utterances carrying position and speed."""

    domain = "driving"
    items = {"visual": drvmod.N_CARS, "verbal": drvmod.N_CARS}

    def comm_payloads(self, decoded, masks):
        dvis, dlane, dpos = drvmod.visual_slots(decoded["visual"])
        show_v = masks["visual"] * (dvis > 0.5) * (dpos >= 0)
        b = decoded["visual"].shape[0]
        vis_payload = np.zeros((b, drvmod.VISUAL_DIM))
        body = np.stack([show_v, dlane * show_v, dpos * show_v], axis=-1)
        vis_payload[:, 1:] = body.reshape(b, -1)

        dspk, vlane, vpos, vspd = drvmod.verbal_slots(decoded["verbal"])
        show_u = masks["verbal"] * (dspk > 0.5)
        verb_payload = np.stack([show_u, vlane * show_u, vpos * show_u, vspd * show_u], axis=-1)
        return {"visual": vis_payload, "verbal": verb_payload.reshape(b, -1)}

    def overlay(self, human, comm):
        h_vis, c_vis = human["visual"], comm["visual"]
        b = h_vis.shape[0]
        out_vis = h_vis.copy()
        hb = h_vis[:, 1:].reshape(b, drvmod.N_CARS, 3)
        cb = c_vis[:, 1:].reshape(b, drvmod.N_CARS, 3)
        seen = (hb[:, :, 0] > 0.5)[:, :, None]
        out_vis[:, 1:] = np.where(seen, hb, cb).reshape(b, -1)

        hv = human["verbal"].reshape(b, drvmod.N_CARS, 4)
        cv = comm["verbal"].reshape(b, drvmod.N_CARS, 4)
        heard = (hv[:, :, 0] > 0.5)[:, :, None]
        out_verb = np.where(heard, hv, cv).reshape(b, -1)
        present = np.maximum(
            human["verbal_present"], (cv[:, :, 0] > 0.5).any(axis=1).astype(np.float64)
        )
        return {"visual": out_vis, "verbal": out_verb, "verbal_present": present}


class RescueComm:
    """Visual: nine map-region reveal bits; verbal: corridor and victim slots."""

    domain = "rescue"
    items = {"visual": 9, "verbal": 5}

    def __init__(self):
        g = rescuemod.GRID
        self.region_masks = np.zeros((9, g, g))
        for region in range(9):
            for r, c in rescuemod.region_cells(region):
                self.region_masks[region, r, c] = 1.0

    def comm_payloads(self, decoded, masks):
        b = decoded["visual"].shape[0]
        g = rescuemod.GRID
        grid = decoded["visual"].reshape(b, rescuemod.CHANNELS, g, g)
        cell_on = np.einsum("bk,kij->bij", masks["visual"], self.region_masks)
        vis_payload = (grid * np.minimum(cell_on, 1.0)[:, None]).reshape(b, -1)

        verb = decoded["verbal"].reshape(b, rescuemod.VERBAL_DIM // 2, 2)
        show = masks["verbal"] * (verb[:, :, 0] > 0.5)
        verb_payload = np.stack([show, verb[:, :, 1] * show], axis=-1).reshape(b, -1)
        return {"visual": vis_payload, "verbal": verb_payload}

    def overlay(self, human, comm):
        b = human["visual"].shape[0]
        g = rescuemod.GRID
        h = human["visual"].reshape(b, rescuemod.CHANNELS, g, g)
        c = comm["visual"].reshape(b, rescuemod.CHANNELS, g, g)
        known = (h[:, 0:1] > 0.5)
        out_vis = np.where(known, h, c).reshape(b, -1)

        hv = human["verbal"].reshape(b, -1, 2)
        cv = comm["verbal"].reshape(b, -1, 2)
        heard = (hv[:, :, 0] > 0.5)[:, :, None]
        out_verb = np.where(heard, hv, cv).reshape(b, -1)
        present = np.maximum(
            human["verbal_present"], (cv[:, :, 0] > 0.5).any(axis=1).astype(np.float64)
        )
        return {"visual": out_vis, "verbal": out_verb, "verbal_present": present}


class BombComm:
    """Visual: six terminal reveal bits; verbal: the bomb-type utterance."""

    domain = "bomb"
    items = {"visual": bombmod.N_TERMINALS, "verbal": 1}

    def comm_payloads(self, decoded, masks):
        b = decoded["visual"].shape[0]
        base = bombmod.N_STAGES + 1
        vis_payload = np.zeros((b, bombmod.VISUAL_DIM))
        for i in range(bombmod.N_TERMINALS):
            sl = slice(base + 5 * i, base + 5 * i + 5)
            on = masks["visual"][:, i] * (decoded["visual"][:, sl.start] > 0.5)
            vis_payload[:, sl] = decoded["visual"][:, sl] * on[:, None]
        spk = masks["verbal"][:, 0] * (decoded["verbal"][:, 0] > 0.5)
        verb_payload = np.stack([spk, decoded["verbal"][:, 1] * spk], axis=-1)
        return {"visual": vis_payload, "verbal": verb_payload}

    def overlay(self, human, comm):
        base = bombmod.N_STAGES + 1
        out_vis = human["visual"].copy()
        out_vis[:, base:] = np.where(
            human["visual"][:, base:] != 0, human["visual"][:, base:], comm["visual"][:, base:]
        )
        heard = human["verbal"][:, 0:1] > 0.5
        out_verb = np.where(heard, human["verbal"], comm["verbal"])
        present = np.maximum(human["verbal_present"], (comm["verbal"][:, 0] > 0.5).astype(np.float64))
        return {"visual": out_vis, "verbal": out_verb, "verbal_present": present}


COMM_SPECS = {"driving": DrivingComm, "rescue": RescueComm, "bomb": BombComm}


def comm_spec_for(domain: str):
    return COMM_SPECS[domain]()


# ---------------------------------------------------------------------------
# Forward imagination
# ---------------------------------------------------------------------------


def draw_noise(rng: np.random.Generator, rt: RuntimeModel, samples: int, horizon: int) -> dict:
    """One noise bundle per (sample, step); shared across plan candidates."""
    d = rt.arch.latent_dim
    noise = {
        "z_r0": rng.standard_normal((samples, d)),
        "z_h0": rng.standard_normal((samples, d)),
        "u_act": rng.random((samples, horizon)),
        "eps_r": rng.standard_normal((samples, horizon, d)),
        "eps_h": rng.standard_normal((samples, horizon, d)),
        "u_filter": rng.random((samples, horizon, bombmod.N_TERMINALS)),
    }
    for m in rt.arch.modalities:
        noise[f"eps_dec_{m.name}"] = rng.standard_normal((samples, horizon, m.dim))
    return noise


def _tile(noise: dict, n_candidates: int) -> dict:
    return {k: np.concatenate([v] * n_candidates, axis=0) for k, v in noise.items()}


def rollout_batch(
    rt: RuntimeModel,
    spec,
    implants: ImplantSet,
    z_r: LatentBelief,
    z_h: LatentBelief,
    masks: dict[str, np.ndarray],  # modality -> (B, T, items)
    noise: dict,
    table: CostTable | None,
    gamma: float,
    trace: list | None = None,
) -> dict:
    """Batched seven-step imagination; returns per-row discounted terms."""
    residual = implants.residual_numpy()
    filt = implants.perceptual
    drop_verbal = getattr(filt, "drop_verbal", implants.domain == "bomb")
    some = next(iter(masks.values()))
    b, horizon = some.shape[0], some.shape[1]
    z_r_s = z_r.mean[None, :] + np.sqrt(z_r.var)[None, :] * noise["z_r0"][:b]
    z_h_s = z_h.mean[None, :] + np.sqrt(z_h.var)[None, :] * noise["z_h0"][:b]
    eye = np.eye(rt.arch.n_actions)
    reward_sum = np.zeros(b)
    cost_sum = np.zeros(b)
    final_beliefs = None
    for t in range(horizon):
        if trace is not None:
            trace.extend((name, t) for name in ROLLOUT_STEPS)
        logits = rt.policy_logits(z_h_s)
        if residual is not None:
            logits = logits + residual(z_h_s)
        actions = sample_categorical(softmax(logits), noise["u_act"][:b, t])
        aoh = eye[actions]
        pm, pv = rt.transition(z_r_s, aoh)
        z_r_s2 = pm + np.sqrt(pv) * noise["eps_r"][:b, t]
        decoded = {}
        for m in rt.arch.modalities:
            dm, dv = rt.decode(m.name, z_r_s2)
            decoded[m.name] = dm + np.sqrt(dv) * noise[f"eps_dec_{m.name}"][:b, t]
        human_vis = filter_visual_batched(filt, decoded["visual"], noise["u_filter"][:b, t])
        if drop_verbal:
            human_verb = np.zeros_like(decoded["verbal"])
            verb_present = np.zeros(b)
        else:
            human_verb = decoded["verbal"]
            verb_present = np.ones(b)
        step_masks = {m: masks[m][:, t] for m in masks}
        comm = spec.comm_payloads(decoded, step_masks)
        combined = spec.overlay(
            {"visual": human_vis, "verbal": human_verb, "verbal_present": verb_present}, comm
        )
        hm, hv = rt.infer(
            z_h_s,
            aoh,
            {"visual": combined["visual"], "verbal": combined["verbal"]},
            {"visual": np.ones(b), "verbal": combined["verbal_present"]},
        )
        z_h_s = hm + np.sqrt(hv) * noise["eps_h"][:b, t]
        r_mean, _ = rt.reward(z_r_s2)
        reward_sum += gamma**t * r_mean[:, 0]
        if table is not None:
            counts = {m: step_masks[m].sum(axis=1) for m in step_masks}
            step_cost = table.visual * counts.get("visual", 0.0) ** 2
            step_cost = step_cost + table.verbal * counts.get("verbal", 0.0) ** 2
            cost_sum += gamma**t * step_cost
        z_r_s = z_r_s2
        final_beliefs = {"h_mean": hm, "h_var": hv, "r_mean": pm, "r_var": pv}
    return {
        "objective": reward_sum - cost_sum,
        "reward": reward_sum,
        "cost": cost_sum,
        "beliefs": final_beliefs,
    }


def imagine_rollout(
    z_r: LatentBelief,
    z_h: LatentBelief,
    filters: dict[str, np.ndarray],  # modality -> (T, items)
    implants: ImplantSet,
    params: WorldModelParams | RuntimeModel,
    cfg: PlanConfig,
    rng: np.random.Generator,
    trace: list | None = None,
) -> dict:
    """Single imagined trajectory bundle: mean terms over cfg.samples rollouts."""
    rt = params if isinstance(params, RuntimeModel) else RuntimeModel.from_params(params)
    spec = comm_spec_for(implants.domain)
    horizon = next(iter(filters.values())).shape[0]
    if horizon != cfg.horizon:
        raise UsageError(f"filter horizon {horizon} != configured horizon {cfg.horizon}")
    noise = draw_noise(rng, rt, cfg.samples, cfg.horizon)
    masks = {m: np.repeat(filters[m][None], cfg.samples, axis=0) for m in filters}
    for m, n in spec.items.items():
        if m not in masks:
            masks[m] = np.zeros((cfg.samples, cfg.horizon, n))
    table = COST_TABLES[implants.domain]
    out = rollout_batch(rt, spec, implants, z_r, z_h, masks, noise, table, cfg.gamma, trace)
    return {
        "objective": float(out["objective"].mean()),
        "reward": float(out["reward"].mean()),
        "cost": float(out["cost"].mean()),
        "per_sample": out["objective"],
    }


# ---------------------------------------------------------------------------
# Cross-entropy planning
# ---------------------------------------------------------------------------


def _empty_masks(spec, cfg: PlanConfig) -> dict[str, int]:
    return {m: n for m, n in spec.items.items()}


def _flatten(masks: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([masks[m].reshape(masks[m].shape[0], -1) for m in sorted(masks)], axis=1)


def plan_ce(
    z_r: LatentBelief,
    z_h: LatentBelief,
    implants: ImplantSet,
    params: WorldModelParams | RuntimeModel,
    table: CostTable,
    cfg: PlanConfig,
    rng: np.random.Generator,
    objective: str = "return",
    log: list | None = None,
) -> dict:
    """CE over Bernoulli mask distributions; returns the first-step mask.

    objective="return" maximizes discounted reward minus communication
    cost; objective="kl" maximizes belief alignment (negative KL of human
    vs robot next beliefs) over a single communicated step, ignoring both
    reward and cost, with ties broken toward fewer items.
    """
    rt = params if isinstance(params, RuntimeModel) else RuntimeModel.from_params(params)
    spec = comm_spec_for(implants.domain)
    horizon = 1 if objective == "kl" else cfg.horizon
    item_counts = spec.items
    active = {m: n for m, n in item_counts.items() if m in cfg.channels}
    if not active:
        raise UsageError("no communicable channels selected")

    rng_noise, rng_masks = rng.spawn(2)
    noise = draw_noise(rng_noise, rt, cfg.samples, horizon)
    tiled_cache: dict[int, dict] = {}

    def score_masks(mask_rows: np.ndarray) -> np.ndarray:
        """Deterministic score per unique mask row (common random numbers)."""
        u = mask_rows.shape[0]
        if u not in tiled_cache:
            tiled_cache[u] = _tile(noise, u)
        big_noise = tiled_cache[u]
        masks = _unflatten(mask_rows, active, horizon, cfg.samples, item_counts)
        z_batch = u * cfg.samples
        out = rollout_batch(
            rt, spec, implants, z_r, z_h, masks, big_noise,
            None if objective == "kl" else table, cfg.gamma,
        )
        if objective == "kl":
            b = out["beliefs"]
            per = -diag_gauss_kl(b["h_mean"], b["h_var"], b["r_mean"], b["r_var"])
        else:
            per = out["objective"]
        assert per.shape[0] == z_batch
        return per.reshape(u, cfg.samples).mean(axis=1)

    n_bits = sum(active.values()) * horizon
    probs = np.full(n_bits, 0.5)
    n_elite = max(1, int(round(cfg.population * cfg.elite_frac)))
    score_cache: dict[bytes, float] = {}
    best = {"score": -np.inf, "items": np.inf, "mask": None}

    for it in range(cfg.iterations):
        cand = (rng_masks.random((cfg.population, n_bits)) < probs).astype(np.float64)
        cand[0] = 0.0  # the no-communication baseline is always on the table
        keys = [row.tobytes() for row in cand]
        todo_rows, todo_keys = [], []
        seen = set()
        for key, row in zip(keys, cand):
            if key not in score_cache and key not in seen:
                seen.add(key)
                todo_keys.append(key)
                todo_rows.append(row)
        if todo_rows:
            scores_new = score_masks(np.asarray(todo_rows))
            for key, sc in zip(todo_keys, scores_new):
                score_cache[key] = float(sc)
        scores = np.array([score_cache[k] for k in keys])
        order = np.argsort(-scores)
        elite = cand[order[:n_elite]]
        probs = np.clip(elite.mean(axis=0), 0.02, 0.98)
        for idx in order[:n_elite]:
            sc, items = scores[idx], float(cand[idx].sum())
            if sc > best["score"] + 1e-12 or (
                abs(sc - best["score"]) <= 1e-9 and items < best["items"]
            ):
                best = {"score": float(sc), "items": items, "mask": cand[idx].copy()}
        if log is not None:
            log.append({"iteration": it, "best_objective": best["score"], "elite_mean": probs.tolist()})

    first_mask = _unflatten(probs[None] > 0.5, active, horizon, 1)
    first_step = {m: first_mask[m][0, 0].astype(float) for m in first_mask}
    for m in item_counts:
        if m not in first_step:
            first_step[m] = np.zeros(item_counts[m])
    best_first = None
    if best["mask"] is not None:
        bm = _unflatten(best["mask"][None], active, horizon, 1)
        best_first = {m: bm[m][0, 0].astype(float) for m in bm}
        for m in item_counts:
            if m not in best_first:
                best_first[m] = np.zeros(item_counts[m])
    return {
        "mask": first_step,
        "best_mask": best_first,
        "objective": best["score"],
        "evaluations": len(score_cache),
    }


def _unflatten(rows: np.ndarray, active: dict[str, int], horizon: int, samples: int,
               all_items: dict[str, int] | None = None) -> dict:
    """(U, bits) candidate rows -> modality masks (U*samples, T, items).

    Modalities outside the active channel set get all-zero masks.
    """
    u = rows.shape[0]
    masks = {}
    offset = 0
    for m in sorted(active):
        n = active[m]
        block = rows[:, offset : offset + horizon * n].reshape(u, horizon, n)
        masks[m] = np.repeat(block, samples, axis=0)
        offset += horizon * n
    if all_items:
        for m, n in all_items.items():
            if m not in masks:
                masks[m] = np.zeros((u * samples, horizon, n))
    return masks


def plan_kl(
    z_r: LatentBelief,
    z_h: LatentBelief,
    implants: ImplantSet,
    params: WorldModelParams | RuntimeModel,
    cfg: PlanConfig,
    rng: np.random.Generator,
    log: list | None = None,
) -> dict:
    """Belief-matching variant: minimize KL(human belief || robot belief).

    Communication cost is excluded, matching this variant's tendency to
    over-communicate.
    """
    table = COST_TABLES[implants.domain]
    return plan_ce(z_r, z_h, implants, params, table, cfg, rng, objective="kl", log=log)
