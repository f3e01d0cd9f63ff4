"""Search-&-rescue gridworld (9x9).

A wall band splits the map; two gaps connect the entrance side to the
victim side and one gap may hold an obstacle. The victim occupies one of
three candidate cells. Rewards: +1 on finding the victim, +15 on returning
to the entrance with them, -10 per obstacle collision, -0.1 per step. The
smoke variant limits the human to a 1.5-unit radius and removes the verbal
channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..types import ModalityBundle
from ..world_model import ArchSpec, ModalitySpec
from .base import DomainError, load_scenarios

GRID = 9
CHANNELS = 5  # known, wall, obstacle, victim, agent
ENTRANCE = (8, 4)
VICTIM_CELLS = [(1, 1), (1, 4), (1, 7)]
GAPS = {"top": (4, 2), "bottom": (4, 6)}
SMOKE_RADIUS = 1.5
MAX_STEPS = 60

FIND_REWARD = 1.0
RETURN_REWARD = 15.0
OBSTACLE_PENALTY = -10.0
STEP_PENALTY = -0.1

VISUAL_DIM = CHANNELS * GRID * GRID
# verbal slots: (spoken, blocked) per gap, then (spoken, present) per candidate
VERBAL_DIM = 2 * 2 + 2 * len(VICTIM_CELLS)

ACTIONS = {0: (0, 0), 1: (-1, 0), 2: (1, 0), 3: (0, -1), 4: (0, 1)}  # stay/up/down/left/right

REGION_BLOCKS = [(r, c) for r in range(3) for c in range(3)]  # 3x3 communication regions


def rescue_arch() -> ArchSpec:
    region_items = []
    for region in range(9):
        br, bc = REGION_BLOCKS[region]
        idx = [
            ch * GRID * GRID + (br * 3 + r) * GRID + (bc * 3 + c)
            for ch in range(CHANNELS)
            for r in range(3)
            for c in range(3)
        ]
        region_items.append(idx)
    verbal_items = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    return ArchSpec(
        latent_dim=48,
        n_actions=5,
        modalities=[
            ModalitySpec("visual", VISUAL_DIM, grid=(CHANNELS, GRID, GRID), sigma=0.1, items=region_items),
            ModalitySpec("verbal", VERBAL_DIM, dec_hidden=(64, 64, 64), sigma=0.1, items=verbal_items),
        ],
        infer_fused=True,
        infer_feature_dim=16,
        infer_fuse_hidden=(128, 128),
        conv_channels=4,
        conv_kernel=3,
        conv_stride=3,
        q_hidden=(200, 200),
    )


def base_walls() -> np.ndarray:
    walls = np.zeros((GRID, GRID), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    walls[ENTRANCE] = False
    walls[4, :] = True
    for gap in GAPS.values():
        walls[gap] = False
    return walls


@dataclass
class RescueEnvState:
    agent: tuple[int, int]
    victim_idx: int
    obstacle: str  # "top" | "bottom" | "none"
    victim_found: bool
    scenario: int
    step_count: int = 0


class RescueEnv:
    n_actions = 5
    domain = "rescue"

    def __init__(self, scenario: int, variant: str = "original"):
        scenarios = load_scenarios("rescue")["scenarios"]
        if not any(s["id"] == scenario for s in scenarios):
            raise DomainError(f"unknown rescue scenario {scenario}")
        if variant not in ("original", "transfer"):
            raise DomainError(f"unknown variant {variant!r}")
        self.scenario_id = scenario
        self.variant = variant
        self.spec = next(s for s in scenarios if s["id"] == scenario)
        self.walls = base_walls()
        self.state: RescueEnvState | None = None

    def reset(self, rng: np.random.Generator) -> ModalityBundle:
        del rng  # layout fully determined by the scenario
        self.state = RescueEnvState(
            agent=ENTRANCE,
            victim_idx=int(self.spec["victim"]),
            obstacle=self.spec["obstacle"],
            victim_found=False,
            scenario=self.scenario_id,
        )
        return self.full_observation()

    @property
    def obstacle_cell(self):
        return GAPS.get(self.state.obstacle)

    @property
    def victim_cell(self):
        return VICTIM_CELLS[self.state.victim_idx]

    def step(self, action: int):
        if action not in ACTIONS:
            raise DomainError(f"invalid rescue action {action}")
        s = self.state
        reward = STEP_PENALTY
        dr, dc = ACTIONS[action]
        target = (s.agent[0] + dr, s.agent[1] + dc)
        if self.obstacle_cell is not None and target == self.obstacle_cell:
            reward += OBSTACLE_PENALTY  # bounced back
        elif 0 <= target[0] < GRID and 0 <= target[1] < GRID and not self.walls[target]:
            s.agent = target
        done = False
        if not s.victim_found and s.agent == self.victim_cell:
            s.victim_found = True
            reward += FIND_REWARD
        elif s.victim_found and s.agent == ENTRANCE:
            reward += RETURN_REWARD
            done = True
        s.step_count += 1
        if s.step_count >= MAX_STEPS:
            done = True
        return self.full_observation(), reward, done, {"found": s.victim_found}

    # -- observations ------------------------------------------------------

    def grid_channels(self) -> np.ndarray:
        s = self.state
        grid = np.zeros((CHANNELS, GRID, GRID))
        grid[0] = 1.0  # known everywhere for the ground-truth grid
        grid[1] = self.walls
        if self.obstacle_cell is not None:
            grid[2][self.obstacle_cell] = 1.0
        if not s.victim_found:
            grid[3][self.victim_cell] = 1.0
        grid[4][s.agent] = 1.0
        return grid

    def known_mask(self) -> np.ndarray:
        if self.variant == "original":
            return np.ones((GRID, GRID), dtype=bool)
        rr, cc = np.mgrid[0:GRID, 0:GRID]
        ar, ac = self.state.agent
        dist = np.sqrt((rr - ar) ** 2 + (cc - ac) ** 2)
        return dist <= SMOKE_RADIUS

    def encode_visual(self, known: np.ndarray) -> np.ndarray:
        grid = self.grid_channels()
        grid[0] = known.astype(float)
        grid[1:] *= known[None]
        return grid.reshape(-1)

    def encode_verbal(self, spoken_gaps: dict[str, bool], spoken_victims: list[bool]) -> np.ndarray:
        verbal = np.zeros(VERBAL_DIM)
        for j, gap in enumerate(("top", "bottom")):
            if spoken_gaps.get(gap):
                verbal[2 * j] = 1.0
                verbal[2 * j + 1] = float(self.state.obstacle == gap)
        for j, spoken in enumerate(spoken_victims):
            if spoken:
                verbal[4 + 2 * j] = 1.0
                verbal[4 + 2 * j + 1] = float(self.state.victim_idx == j and not self.state.victim_found)
        return verbal

    def full_observation(self) -> ModalityBundle:
        visual = self.encode_visual(np.ones((GRID, GRID), dtype=bool))
        verbal = self.encode_verbal({"top": True, "bottom": True}, [True] * len(VICTIM_CELLS))
        return ModalityBundle({"visual": visual, "verbal": verbal}, {"visual": True, "verbal": True})

    def human_view(self) -> ModalityBundle:
        if self.variant == "original":
            return self.full_observation()
        visual = self.encode_visual(self.known_mask())
        return ModalityBundle(
            {"visual": visual, "verbal": np.zeros(VERBAL_DIM)},
            {"visual": True, "verbal": False},
        )


    def cell_content(self, cell: tuple[int, int]) -> str:
        if self.obstacle_cell is not None and cell == self.obstacle_cell:
            return "obstacle"
        if cell == self.victim_cell and not self.state.victim_found:
            return "victim"
        if self.walls[cell]:
            return "wall"
        return "free"

    def view_facts(self, known: np.ndarray, include_verbal: bool) -> dict:
        cells = {}
        for r in range(GRID):
            for c in range(GRID):
                if known[r, c]:
                    cells[(r, c)] = self.cell_content((r, c))
        if include_verbal:
            for gap in GAPS.values():
                cells[gap] = self.cell_content(gap)
            for cand in VICTIM_CELLS:
                cells[cand] = self.cell_content(cand)
        return {
            "agent": self.state.agent,
            "cells": cells,
            "carrying": self.state.victim_found,
        }

    def human_facts(self) -> dict:
        return self.view_facts(self.known_mask(), include_verbal=self.variant == "original")

    def full_facts(self) -> dict:
        return self.view_facts(np.ones((GRID, GRID), dtype=bool), include_verbal=True)


def region_cells(region: int) -> list[tuple[int, int]]:
    """Cells of one of the nine 3x3 communication regions."""
    br, bc = REGION_BLOCKS[region]
    return [(br * 3 + r, bc * 3 + c) for r in range(3) for c in range(3)]
