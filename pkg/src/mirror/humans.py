"""Scripted simulated humans.

Each human acts only on its ground-truth (perception-limited) view plus
whatever has been communicated; revealed facts persist for the episode
("never forgets"). The driving human plans receding-horizon over its known
cars by exact enumeration of the 2^H action sequences (the plan space is
tiny, so enumeration computes the same optimum a sampling optimizer would
approximate). The rescue human walks shortest paths on its known map; the
bomb human guesses the type unless told and discovers the relevant
terminal geometrically.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .envs import bomb as bombmod
from .envs import rescue as rescuemod
from .envs.driving import EPISODE_LEN, N_CARS

# ---------------------------------------------------------------------------
# Driving
# ---------------------------------------------------------------------------


@dataclass
class DrivingHumanParams:
    name: str = "default"
    proximity: float = -2.0
    collision: float = -5.0
    lane_change: float = -1.0
    center: float = 0.1
    horizon: int = 4
    gamma: float = 0.9


@dataclass
class _CarBelief:
    lane: int
    pos: float
    speed: float  # road-frame; 1.0 means keeping station with the ego
    stamp: int
    speed_known: bool = False


class DrivingHuman:
    def __init__(self, params: DrivingHumanParams):
        self.params = params
        self.reset()

    def reset(self):
        self.cars: dict[int, _CarBelief] = {}
        self._events: list = []

    @property
    def store_size(self) -> int:
        return len(self.cars)

    def observe(self, facts: dict, step: int) -> None:
        """Digest the current (possibly fog-limited) view."""
        for i, (lane, pos) in facts.get("cars", {}).items():
            prev = self.cars.get(i)
            speed, known = 1.0, False
            if prev is not None:
                if prev.stamp == step - 1:
                    speed, known = (pos - prev.pos) + 1.0, True
                else:
                    speed, known = prev.speed, prev.speed_known
            self.cars[i] = _CarBelief(lane, pos, speed, step, known)
        for i, (lane, pos, speed) in facts.get("verbal", {}).items():
            self.cars[i] = _CarBelief(lane, pos, speed, step, True)

    def absorb_communication(self, comm: dict, step: int) -> None:
        """Union of communicated car facts into the store."""
        for i, (lane, pos) in comm.get("cars", {}).items():
            prev = self.cars.get(i)
            speed = prev.speed if prev is not None and prev.speed_known else 1.0
            known = prev.speed_known if prev is not None else False
            if prev is not None and prev.stamp == step - 1 and not known:
                speed, known = (pos - prev.pos) + 1.0, True
            self.cars[i] = _CarBelief(lane, pos, speed, step, known)
        for i, (lane, pos, speed) in comm.get("verbal", {}).items():
            self.cars[i] = _CarBelief(lane, pos, speed, step, True)

    def act(self, ego_lane: int, step: int, rng: np.random.Generator) -> int:
        """Best first action of the enumerated receding-horizon plan."""
        del rng  # plan is deterministic; randomness only via the world
        p = self.params
        h = p.horizon
        seqs = np.array(list(itertools.product((0, 1), repeat=h)))  # (16, H), stay-first
        lanes = (ego_lane + np.cumsum(seqs, axis=1)) % 2  # ego lane after each action
        values = np.zeros(len(seqs))
        known = list(self.cars.values())
        discount = p.gamma ** np.arange(h)
        for k in known:
            drift = k.speed - 1.0
            ahead = k.pos + drift * (step - k.stamp)
            pos = ahead + drift * np.arange(1, h + 1)  # (H,)
            dist = np.abs(pos)[None, :]
            # perceived risk is lane-relevant: only same-lane cars count
            same_lane = lanes == k.lane
            collide = same_lane & (dist <= 0.5)
            near = same_lane & ~collide & (dist <= 2.0)
            values += ((collide * p.collision + near * p.proximity) * discount).sum(axis=1)
        values += (seqs * p.lane_change * discount).sum(axis=1)
        values += p.center * discount.sum()  # constant on a two-lane road
        return int(seqs[int(np.argmax(values)), 0])


# ---------------------------------------------------------------------------
# Rescue
# ---------------------------------------------------------------------------


@dataclass
class RescueHumanParams:
    name: str = "default"
    search_order: tuple[int, ...] = (0, 1, 2)


class RescueHuman:
    def __init__(self, params: RescueHumanParams):
        self.params = params
        self.walls = rescuemod.base_walls()
        self.reset()

    def reset(self):
        self.known_obstacles: set[tuple[int, int]] = set()
        self.cleared_gaps: set[tuple[int, int]] = set()
        self.victim_pos: tuple[int, int] | None = None
        self.absent_candidates: set[int] = set()
        self.carrying = False

    @property
    def store_size(self) -> int:
        return (
            len(self.known_obstacles)
            + len(self.cleared_gaps)
            + len(self.absent_candidates)
            + (1 if self.victim_pos else 0)
        )

    def observe(self, facts: dict, step: int) -> None:
        del step
        for cell, content in facts.get("cells", {}).items():
            if content == "obstacle":
                self.known_obstacles.add(cell)
            if cell in rescuemod.GAPS.values() and content == "free":
                self.cleared_gaps.add(cell)
            if content == "victim":
                self.victim_pos = cell
        for j, cell in enumerate(rescuemod.VICTIM_CELLS):
            if cell in facts.get("cells", {}) and facts["cells"][cell] != "victim":
                self.absent_candidates.add(j)
        if facts.get("carrying"):
            self.carrying = True
            self.victim_pos = None

    def absorb_communication(self, comm: dict, step: int) -> None:
        self.observe(comm, step)

    def _target(self) -> tuple[int, int] | None:
        if self.carrying:
            return rescuemod.ENTRANCE
        if self.victim_pos is not None:
            return self.victim_pos
        for j in self.params.search_order:
            if j not in self.absent_candidates:
                return rescuemod.VICTIM_CELLS[j]
        return None

    def shortest_path(self, start, goal) -> list[tuple[int, int]] | None:
        """BFS on the known map; unknown cells are assumed free."""
        blocked = self.walls.copy()
        for cell in self.known_obstacles:
            blocked[cell] = True
        if blocked[goal]:
            return None
        prev = {start: None}
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            if cur == goal:
                path = [cur]
                while prev[cur] is not None:
                    cur = prev[cur]
                    path.append(cur)
                return path[::-1]
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                nxt = (cur[0] + dr, cur[1] + dc)
                if (
                    0 <= nxt[0] < rescuemod.GRID
                    and 0 <= nxt[1] < rescuemod.GRID
                    and not blocked[nxt]
                    and nxt not in prev
                ):
                    prev[nxt] = cur
                    queue.append(nxt)
        return None

    def act(self, agent: tuple[int, int], step: int, rng: np.random.Generator) -> int:
        del step, rng
        goal = self._target()
        if goal is None or goal == agent:
            return 0
        path = self.shortest_path(agent, goal)
        if path is None or len(path) < 2:
            return 0  # stuck: episode continues with a no-op
        nxt = path[1]
        delta = (nxt[0] - agent[0], nxt[1] - agent[1])
        for action, d in rescuemod.ACTIONS.items():
            if d == delta:
                return action
        return 0


# ---------------------------------------------------------------------------
# Bomb
# ---------------------------------------------------------------------------


@dataclass
class BombHumanParams:
    name: str = "default"
    p: float = 0.2  # per-second chance of identifying the relevant terminal


class BombHuman:
    def __init__(self, params: BombHumanParams):
        if not 0 < params.p <= 1:
            raise ValueError("discovery probability must be in (0, 1]")
        self.params = params
        self.reset()

    def reset(self):
        self.told_type: int | None = None
        self.guessed_type: int | None = None
        self.known_symbol: int | None = None
        self.current_stage: int | None = None
        self.guess_branch_taken = False

    @property
    def store_size(self) -> int:
        return (self.told_type is not None) + (self.known_symbol is not None)

    def absorb_communication(self, comm: dict, step: int) -> None:
        del step
        if "bomb_type" in comm:
            self.told_type = int(comm["bomb_type"])
        if "relevant_symbol" in comm:
            self.known_symbol = int(comm["relevant_symbol"])

    def _type_to_use(self, rng: np.random.Generator) -> int:
        if self.told_type is not None:
            return self.told_type
        if self.guessed_type is None:
            self.guess_branch_taken = True
            self.guessed_type = int(rng.integers(2))
        return self.guessed_type

    def act(self, stage: int, relevant_symbol: int, rule_set: str,
            rng: np.random.Generator) -> int:
        """Press once the relevant terminal is identified; otherwise keep searching."""
        if stage != self.current_stage:
            self.current_stage = stage
            self.known_symbol = None
        if self.known_symbol is None:
            if rng.random() < self.params.p:
                self.known_symbol = int(relevant_symbol)
        if self.known_symbol is None:
            return bombmod.ACTION_WAIT
        bomb_type = self._type_to_use(rng)
        return bombmod.correct_button(rule_set, bomb_type, self.known_symbol)


# ---------------------------------------------------------------------------
# Personas
# ---------------------------------------------------------------------------


def load_personas(domain: str) -> list:
    raw = yaml.safe_load((resources.files("mirror") / "personas" / "default.yaml").read_text())
    entries = raw[domain]
    if domain == "driving":
        return [DrivingHumanParams(**e) for e in entries]
    if domain == "rescue":
        return [RescueHumanParams(name=e["name"], search_order=tuple(e["search_order"])) for e in entries]
    if domain == "bomb":
        return [BombHumanParams(**e) for e in entries]
    raise KeyError(domain)


def make_human(domain: str, params):
    return {"driving": DrivingHuman, "rescue": RescueHuman, "bomb": BombHuman}[domain](params)
