"""Bomb defusal: press the correct button at each of three stages within 15 steps.

Six terminals show symbols that re-roll after every press; the correct
button is a lookup over (bomb type, relevant terminal symbol). The robot
was trained under the train rule table; in the transfer variant the test
table permutes the button mapping, so the robot's own policy is wrong and
only the (rule-updated) human presses correctly. Rewards: +5 correct, -5
wrong, -1 per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..types import ModalityBundle
from ..world_model import ArchSpec, ModalitySpec
from .base import DomainError, load_scenarios

N_TERMINALS = 6
N_SYMBOLS = 4
N_BUTTONS = 3
N_STAGES = 3
TIME_LIMIT = 15
RELEVANT_TERMINAL = {1: 2, 2: 0, 3: 5}  # stage -> terminal index that matters

CORRECT_REWARD = 5.0
WRONG_PENALTY = -5.0
STEP_PENALTY = -1.0

ACTION_WAIT = 3  # actions 0..2 press buttons, 3 waits

VISUAL_DIM = N_STAGES + 1 + N_TERMINALS * (1 + N_SYMBOLS)  # stage onehot, time left, terminals
VERBAL_DIM = 2  # (spoken, is type A)


def bomb_arch() -> ArchSpec:
    base = N_STAGES + 1
    terminal_items = [list(range(base + i * 5, base + i * 5 + 5)) for i in range(N_TERMINALS)]
    return ArchSpec(
        latent_dim=48,
        n_actions=4,
        modalities=[
            ModalitySpec("visual", VISUAL_DIM, dec_hidden=(64, 64), sigma=0.1, items=terminal_items),
            ModalitySpec("verbal", VERBAL_DIM, dec_hidden=(64, 64), sigma=0.1, items=[[0, 1]]),
        ],
        infer_hidden=(64, 64),
        q_hidden=(2048, 2048),
    )


def correct_button(rule_set: str, bomb_type: int, symbol: int) -> int:
    # test rules permute the mapping, which is what invalidates the robot's policy
    if rule_set == "train":
        return (symbol + bomb_type) % N_BUTTONS
    return (symbol + bomb_type + 1) % N_BUTTONS


@dataclass
class BombEnvState:
    stage: int
    terminals: np.ndarray  # (6,) symbols
    bomb_type: int  # 0 = A, 1 = B
    rule_set: str  # active table: "train" | "test"
    elapsed: int = 0
    defused: bool = False
    scenario: int = 0


class BombEnv:
    n_actions = 4
    domain = "bomb"

    def __init__(self, scenario: int, variant: str = "original"):
        scenarios = load_scenarios("bomb")["scenarios"]
        if not any(s["id"] == scenario for s in scenarios):
            raise DomainError(f"unknown bomb scenario {scenario}")
        if variant not in ("original", "transfer"):
            raise DomainError(f"unknown variant {variant!r}")
        self.scenario_id = scenario
        self.variant = variant
        self.spec = next(s for s in scenarios if s["id"] == scenario)
        self.state: BombEnvState | None = None
        self._rng: np.random.Generator | None = None

    def reset(self, rng: np.random.Generator) -> ModalityBundle:
        self._rng = rng
        self.state = BombEnvState(
            stage=1,
            terminals=rng.integers(N_SYMBOLS, size=N_TERMINALS),
            bomb_type=0 if self.spec["type"] == "A" else 1,
            rule_set="test" if self.variant == "transfer" else "train",
            scenario=self.scenario_id,
        )
        return self.full_observation()

    def stage_correct_button(self) -> int:
        s = self.state
        symbol = int(s.terminals[RELEVANT_TERMINAL[s.stage]])
        return correct_button(s.rule_set, s.bomb_type, symbol)

    def robot_recommendation(self) -> int:
        """The robot's advised button, computed under its (train) rule table."""
        s = self.state
        symbol = int(s.terminals[RELEVANT_TERMINAL[s.stage]])
        return correct_button("train", s.bomb_type, symbol)

    def step(self, action: int):
        if not 0 <= action < self.n_actions:
            raise DomainError(f"invalid bomb action {action}")
        s = self.state
        reward = STEP_PENALTY
        done = False
        if action != ACTION_WAIT:
            if action == self.stage_correct_button():
                reward += CORRECT_REWARD
                s.stage += 1
                if s.stage > N_STAGES:
                    s.defused = True
                    done = True
            else:
                reward += WRONG_PENALTY
            s.terminals = self._rng.integers(N_SYMBOLS, size=N_TERMINALS)
        s.elapsed += 1
        if s.elapsed >= TIME_LIMIT:
            done = True
        return self.full_observation(), reward, done, {"defused": s.defused}

    # -- observations ------------------------------------------------------

    def encode(self, terminal_vis: np.ndarray, speak_type: bool) -> ModalityBundle:
        s = self.state
        visual = np.zeros(VISUAL_DIM)
        if s.stage <= N_STAGES:
            visual[s.stage - 1] = 1.0
        visual[N_STAGES] = (TIME_LIMIT - s.elapsed) / TIME_LIMIT
        base = N_STAGES + 1
        for i in range(N_TERMINALS):
            if terminal_vis[i]:
                off = base + i * (1 + N_SYMBOLS)
                visual[off] = 1.0
                visual[off + 1 + int(s.terminals[i])] = 1.0
        verbal = np.zeros(VERBAL_DIM)
        if speak_type:
            verbal[0] = 1.0
            verbal[1] = float(s.bomb_type == 0)
        return ModalityBundle(
            {"visual": visual, "verbal": verbal},
            {"visual": True, "verbal": bool(speak_type)},
        )

    def full_observation(self) -> ModalityBundle:
        return self.encode(np.ones(N_TERMINALS, dtype=bool), speak_type=True)

    def human_view(self) -> ModalityBundle:
        # the human sees stage/time but cannot identify terminals or the type
        # unaided in either variant; discovery is modeled by the simulated human
        return self.encode(np.zeros(N_TERMINALS, dtype=bool), speak_type=False)

    def human_facts(self) -> dict:
        s = self.state
        return {
            "stage": s.stage,
            "relevant_symbol": int(s.terminals[RELEVANT_TERMINAL[min(s.stage, N_STAGES)]]),
            "rule_set": s.rule_set,
            "recommendation": self.robot_recommendation() if s.stage <= N_STAGES else None,
        }

    def full_facts(self) -> dict:
        facts = self.human_facts()
        facts["bomb_type"] = self.state.bomb_type
        facts["terminals"] = self.state.terminals.tolist()
        return facts
