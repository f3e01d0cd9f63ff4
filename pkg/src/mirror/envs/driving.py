"""Two-lane gridworld driving.

The ego car moves at constant speed 1; the four other cars follow scripted
speed schedules and never avoid the ego. Positions are tracked relative to
the ego. Per-step reward: -2 for each car within 2 units (same or adjacent
lane), -5 per collision or off-road, -1 for a lane change; terms compose
additively. In the fog variant the human sees two units ahead, nothing in
the rear, and no verbal channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..types import ModalityBundle
from ..world_model import ArchSpec, ModalitySpec
from .base import DomainError, load_scenarios

N_CARS = 4
N_LANES = 2
EPISODE_LEN = 20
SENSOR_RANGE = 8.0  # relative-position window; also the normalization scale
PROXIMITY_RADIUS = 2.0
FOG_FRONT_RANGE = 2.0

PROXIMITY_PENALTY = -2.0
COLLISION_PENALTY = -5.0
LANE_CHANGE_PENALTY = -1.0
COLLISION_EPS = 0.5  # same cell test: same lane and |rel pos| <= 0.5

VISUAL_DIM = 1 + 3 * N_CARS  # ego lane + per car (visible, lane, pos)
VERBAL_DIM = 4 * N_CARS  # per car (spoken, lane, pos, speed)

ACTION_STAY, ACTION_SWITCH = 0, 1


def driving_arch() -> ArchSpec:
    visual_items = [[1 + 3 * i, 2 + 3 * i, 3 + 3 * i] for i in range(N_CARS)]
    verbal_items = [[4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3] for i in range(N_CARS)]
    return ArchSpec(
        latent_dim=48,
        n_actions=2,
        modalities=[
            ModalitySpec("visual", VISUAL_DIM, dec_hidden=(32, 32), sigma=0.1, items=visual_items),
            ModalitySpec("verbal", VERBAL_DIM, dec_hidden=(32, 32), sigma=0.1, items=verbal_items),
        ],
        trans_hidden=(32, 32),
        infer_hidden=(64, 64),
        reward_hidden=(32, 32),
        q_hidden=(128, 128),
    )


@dataclass
class DrivingEnvState:
    ego_lane: int
    ego_pos: float
    lanes: np.ndarray  # (4,) int
    rel_pos: np.ndarray  # (4,) float, relative to ego
    speeds: np.ndarray  # (4,) float, road frame (ego speed is 1)
    scenario: int
    step_count: int = 0
    collisions: int = 0


class DrivingEnv:
    n_actions = 2
    domain = "driving"

    def __init__(self, scenario: int, variant: str = "original"):
        scenarios = load_scenarios("driving")["scenarios"]
        if not any(s["id"] == scenario for s in scenarios):
            raise DomainError(f"unknown driving scenario {scenario}")
        if variant not in ("original", "transfer"):
            raise DomainError(f"unknown variant {variant!r}")
        self.scenario_id = scenario
        self.variant = variant
        self.spec = next(s for s in scenarios if s["id"] == scenario)
        self.state: DrivingEnvState | None = None
        self._schedules: list[dict[int, float]] = []

    # -- lifecycle -------------------------------------------------------

    def reset(self, rng: np.random.Generator) -> ModalityBundle:
        lanes, pos, speeds = [], [], []
        self._schedules = []
        for car in self.spec["cars"]:
            lanes.append(car["lane"])
            pos.append(float(car["pos"]) + float(rng.integers(-1, 2)))
            if car.get("speed_choices"):
                speeds.append(float(rng.choice(car["speed_choices"])))
            else:
                speeds.append(float(car["speed"]))
            schedule: dict[int, float] = {}
            for ev in car.get("events", []):
                step = int(ev["step"])
                if ev.get("jitter"):
                    step += int(rng.integers(-ev["jitter"], ev["jitter"] + 1))
                if ev.get("choices"):
                    speed = float(rng.choice(ev["choices"]))
                else:
                    speed = float(ev["speed"])
                schedule[max(step, 1)] = speed
            self._schedules.append(schedule)
        self.state = DrivingEnvState(
            ego_lane=int(self.spec.get("ego_lane", 0)),
            ego_pos=0.0,
            lanes=np.array(lanes, dtype=int),
            rel_pos=np.array(pos, dtype=float),
            speeds=np.array(speeds, dtype=float),
            scenario=self.scenario_id,
        )
        return self.full_observation()

    def step(self, action: int):
        if action not in (ACTION_STAY, ACTION_SWITCH):
            raise DomainError(f"invalid driving action {action}")
        s = self.state
        lane_changed = action == ACTION_SWITCH
        if lane_changed:
            s.ego_lane = 1 - s.ego_lane
        # scripted speed updates, then car motion in the ego frame
        for i, sched in enumerate(self._schedules):
            if s.step_count in sched:
                s.speeds[i] = sched[s.step_count]
        s.rel_pos += s.speeds - 1.0
        s.ego_pos += 1.0
        s.step_count += 1

        reward = 0.0
        for i in range(N_CARS):
            dist = abs(s.rel_pos[i])
            if s.lanes[i] == s.ego_lane and dist <= COLLISION_EPS:
                reward += COLLISION_PENALTY
                s.collisions += 1
            elif dist <= PROXIMITY_RADIUS:
                reward += PROXIMITY_PENALTY
        if s.ego_lane not in range(N_LANES):  # unreachable with 2 lanes; off-road guard
            reward += COLLISION_PENALTY
        if lane_changed:
            reward += LANE_CHANGE_PENALTY
        done = s.step_count >= EPISODE_LEN
        return self.full_observation(), reward, done, {"collisions": s.collisions}

    # -- observations ------------------------------------------------------

    def car_facts(self) -> list[tuple[int, float, float]]:
        """(lane, rel_pos, speed) per car, ground truth."""
        s = self.state
        return [(int(s.lanes[i]), float(s.rel_pos[i]), float(s.speeds[i])) for i in range(N_CARS)]

    def full_visible_mask(self) -> np.ndarray:
        return np.abs(self.state.rel_pos) <= SENSOR_RANGE

    def human_visible_mask(self) -> np.ndarray:
        if self.variant == "original":
            return self.full_visible_mask()
        rel = self.state.rel_pos
        return (rel >= 0.0) & (rel <= FOG_FRONT_RANGE)

    def encode(self, visible: np.ndarray, spoken: np.ndarray, verbal_present: bool) -> ModalityBundle:
        s = self.state
        visual = np.zeros(VISUAL_DIM)
        visual[0] = s.ego_lane
        verbal = np.zeros(VERBAL_DIM)
        for i in range(N_CARS):
            if visible[i]:
                visual[1 + 3 * i] = 1.0
                visual[2 + 3 * i] = s.lanes[i]
                visual[3 + 3 * i] = np.clip(s.rel_pos[i], -SENSOR_RANGE, SENSOR_RANGE) / SENSOR_RANGE
            if verbal_present and spoken[i]:
                verbal[4 * i] = 1.0
                verbal[4 * i + 1] = s.lanes[i]
                verbal[4 * i + 2] = np.clip(s.rel_pos[i], -SENSOR_RANGE, SENSOR_RANGE) / SENSOR_RANGE
                verbal[4 * i + 3] = s.speeds[i] - 1.0
        return ModalityBundle(
            {"visual": visual, "verbal": verbal},
            {"visual": True, "verbal": bool(verbal_present)},
        )

    def full_observation(self) -> ModalityBundle:
        mask = self.full_visible_mask()
        return self.encode(mask, mask, verbal_present=True)

    def human_view(self) -> ModalityBundle:
        if self.variant == "original":
            return self.full_observation()
        return self.encode(self.human_visible_mask(), np.zeros(N_CARS, dtype=bool), verbal_present=False)

    def view_facts(self, visible: np.ndarray, spoken: np.ndarray | None = None) -> dict:
        """Structured car facts for the given visibility/spoken masks."""
        s = self.state
        facts = {"ego_lane": int(s.ego_lane), "cars": {}, "verbal": {}}
        for i in range(N_CARS):
            if visible[i]:
                facts["cars"][i] = (int(s.lanes[i]), float(s.rel_pos[i]))
            if spoken is not None and spoken[i]:
                facts["verbal"][i] = (int(s.lanes[i]), float(s.rel_pos[i]), float(s.speeds[i]))
        return facts

    def human_facts(self) -> dict:
        if self.variant == "original":
            mask = self.full_visible_mask()
            return self.view_facts(mask, mask)
        return self.view_facts(self.human_visible_mask(), None)

    def full_facts(self) -> dict:
        mask = self.full_visible_mask()
        return self.view_facts(mask, mask)


def state_space_size() -> int:
    """Static combinatorial count under the declared geometry."""
    positions = int(2 * SENSOR_RANGE + 1)
    speeds = 5
    per_car = N_LANES * positions * speeds
    return N_LANES * per_car**N_CARS


# -- payload slot helpers (shared by implants, communication, humans) -------


def visual_slots(payload: np.ndarray):
    """(visible, lane, pos_scaled) views per car; payload may be batched."""
    body = payload[..., 1:].reshape(*payload.shape[:-1], N_CARS, 3)
    return body[..., 0], body[..., 1], body[..., 2]


def verbal_slots(payload: np.ndarray):
    body = payload.reshape(*payload.shape[:-1], N_CARS, 4)
    return body[..., 0], body[..., 1], body[..., 2], body[..., 3]
