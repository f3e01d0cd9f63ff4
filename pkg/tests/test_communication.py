"""Communication tests: costs, seven-step order, CE vs exhaustive enumeration."""

import itertools

import numpy as np
import pytest

from conftest import inv_softplus
from mirror.communication import (
    COST_TABLES,
    ROLLOUT_STEPS,
    CostTable,
    PlanConfig,
    _unflatten,
    comm_cost,
    comm_spec_for,
    draw_noise,
    imagine_rollout,
    plan_ce,
    plan_kl,
    rollout_batch,
)
from mirror.envs.driving import VERBAL_DIM, VISUAL_DIM
from mirror.implants import DrivingThresholdFilter, ImplantSet, residual_module
from mirror.runtime import RuntimeModel, diag_gauss_kl
from mirror.types import LatentBelief, UsageError
from mirror.world_model import ArchSpec, ModalitySpec, new_params

LATENT = 6


def affine_driving_arch():
    """Driving payload layout with affine heads so weights can be hand-set."""
    return ArchSpec(
        latent_dim=LATENT,
        n_actions=2,
        modalities=[
            ModalitySpec("visual", VISUAL_DIM, dec_hidden=()),
            ModalitySpec("verbal", VERBAL_DIM, dec_hidden=()),
        ],
        trans_hidden=(),
        infer_hidden=(),
        reward_hidden=(),
        q_hidden=(),
    )


def hand_set_params(reward_bias=2.0, info_model=False):
    """Zeroed affine model; optionally wire 'revealed cars raise reward'.

    In the info model the inference net writes the count of visible cars in
    the combined observation into z[0], the transition writes the last
    action into z[0] of the robot latent, and the reward is 2 * z[0]; the
    hand-set policy residual makes action 1 likelier as the count grows.
    """
    arch = affine_driving_arch()
    params = new_params(arch, seed=0)
    params.state = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.state.items()}
    st = params.state
    tiny = -30.0  # softplus(-30) ~ 0: variances collapse to the 1e-5 floor
    for head, out in (
        ("transition.net", LATENT),
        ("infer_net.net", LATENT),
        ("decoders.visual.net", VISUAL_DIM),
        ("decoders.verbal.net", VERBAL_DIM),
    ):
        st[f"{head}.layers.0.bias"][out:] = tiny
    st["reward_head.layers.0.bias"][0] = reward_bias
    if info_model:
        # inference input layout: z(6), action(2), visual(13), vis_present(1),
        # verbal(16), verb_present(1); car visible-bits sit at visual offsets
        # 1, 4, 7, 10 -> input columns 9, 12, 15, 18
        w_inf = st["infer_net.net.layers.0.weight"]
        for col in (9, 12, 15, 18):
            w_inf[0, col] = 1.0
        st["transition.net.layers.0.weight"][0, LATENT + 1] = 5.0  # z0' = 5 * [action==1]
        st["reward_head.layers.0.bias"][0] = 0.0
        st["reward_head.layers.0.weight"][0, 0] = 2.0
        dec = st["decoders.visual.net.layers.0.bias"]
        for i in range(4):
            dec[1 + 3 * i] = 1.0  # decoded visible bit
            dec[3 + 3 * i] = 0.5  # decoded position: ahead
    return params


def blind_implants(residual_state=None):
    return ImplantSet(
        domain="driving",
        perceptual=DrivingThresholdFilter(0.0, 0.0, 0.0, 0.0, drop_verbal=True),
        residual_state=residual_state or {},
        residual_hidden=(1,),
    )


def count_residual():
    """delta(z)[1]-delta(z)[0] = 2*tanh(0.35*z0 - 0.7): rises with the car count."""
    net = residual_module(LATENT, 2, (1,))
    state = {k: v.detach().numpy().astype(np.float64) for k, v in net.state_dict().items()}
    state["layers.0.weight"][0, 0] = 0.35
    state["layers.0.bias"][0] = -0.7
    state["layers.1.weight"][0, 0] = -1.0
    state["layers.1.weight"][1, 0] = 1.0
    return state


def tight_belief():
    return LatentBelief(np.zeros(LATENT), np.full(LATENT, 1e-10))


class TestCommCost:
    def test_driving_two_cars(self):
        mask = {"visual": np.array([1.0, 1, 0, 0]), "verbal": np.zeros(4)}
        assert comm_cost(mask, COST_TABLES["driving"]) == pytest.approx(0.04, abs=1e-12)

    def test_bomb_terminal_plus_utterance(self):
        mask = {"visual": np.array([0, 0, 1.0, 0, 0, 0]), "verbal": np.array([1.0])}
        assert comm_cost(mask, COST_TABLES["bomb"]) == pytest.approx(0.8, abs=1e-12)

    def test_zero_mask_costs_nothing(self):
        mask = {"visual": np.zeros(9), "verbal": np.zeros(5)}
        assert comm_cost(mask, COST_TABLES["rescue"]) == 0.0

    def test_monotone_in_item_count(self):
        table = COST_TABLES["driving"]
        prev = -1.0
        for k in range(5):
            mask = {"visual": np.concatenate([np.ones(k), np.zeros(4 - k)]), "verbal": np.zeros(4)}
            cost = comm_cost(mask, table)
            assert cost >= prev
            prev = cost

    def test_negative_coefficient_rejected(self):
        with pytest.raises(ValueError):
            CostTable(-0.1, 0.0)


def empty_filters(horizon):
    return {"visual": np.zeros((horizon, 4)), "verbal": np.zeros((horizon, 4))}


class TestImagineRollout:
    def test_single_step_reward_arithmetic(self):
        params = hand_set_params(reward_bias=2.0)
        cfg = PlanConfig(horizon=1, gamma=1.0, samples=4)
        out = imagine_rollout(
            tight_belief(), tight_belief(), empty_filters(1), blind_implants(), params,
            cfg, np.random.default_rng(0),
        )
        assert out["objective"] == pytest.approx(2.0, abs=1e-9)

    def test_cost_subtracts_table_value(self):
        params = hand_set_params(reward_bias=2.0)
        filters = empty_filters(1)
        filters["visual"][0, :2] = 1.0
        cfg = PlanConfig(horizon=1, gamma=1.0, samples=4)
        out = imagine_rollout(
            tight_belief(), tight_belief(), filters, blind_implants(), params,
            cfg, np.random.default_rng(0),
        )
        assert out["objective"] == pytest.approx(2.0 - 0.04, abs=1e-9)
        assert out["cost"] == pytest.approx(0.04, abs=1e-12)

    def test_seven_step_order(self):
        params = hand_set_params()
        trace = []
        cfg = PlanConfig(horizon=3, gamma=0.9, samples=2)
        imagine_rollout(
            tight_belief(), tight_belief(), empty_filters(3), blind_implants(), params,
            cfg, np.random.default_rng(1), trace=trace,
        )
        expected = [(name, t) for t in range(3) for name in ROLLOUT_STEPS]
        assert trace == expected

    def test_deterministic_given_seed(self):
        params = new_params(affine_driving_arch(), seed=3)
        cfg = PlanConfig(horizon=2, gamma=0.95, samples=5)
        runs = []
        for _ in range(2):
            out = imagine_rollout(
                tight_belief(), tight_belief(), empty_filters(2), blind_implants(), params,
                cfg, np.random.default_rng(77),
            )
            runs.append(out["per_sample"].tobytes())
        assert runs[0] == runs[1]

    def test_return_decomposition(self):
        params = new_params(affine_driving_arch(), seed=4)
        filters = empty_filters(3)
        filters["visual"][1, :] = 1.0
        cfg = PlanConfig(horizon=3, gamma=0.9, samples=6)
        out = imagine_rollout(
            tight_belief(), tight_belief(), filters, blind_implants(), params,
            cfg, np.random.default_rng(5),
        )
        assert out["objective"] == pytest.approx(out["reward"] - out["cost"], abs=1e-9)

    def test_horizon_mismatch_rejected(self):
        params = hand_set_params()
        with pytest.raises(UsageError):
            imagine_rollout(
                tight_belief(), tight_belief(), empty_filters(2), blind_implants(), params,
                PlanConfig(horizon=3), np.random.default_rng(0),
            )


def enumerate_oracle(params, implants, table, cfg, seed, channels=("visual",)):
    """Exhaustive max over all visual mask sequences with the planner's noise."""
    rt = RuntimeModel.from_params(params)
    spec = comm_spec_for(implants.domain)
    rng = np.random.default_rng(seed)
    rng_noise, _ = rng.spawn(2)
    horizon = cfg.horizon
    noise = draw_noise(rng_noise, rt, cfg.samples, horizon)
    n_bits = 4 * horizon
    best, best_mask = -np.inf, None
    z = tight_belief()
    for bits in itertools.product((0.0, 1.0), repeat=n_bits):
        rows = np.asarray(bits)[None]
        masks = _unflatten(rows, {"visual": 4}, horizon, cfg.samples, spec.items)
        out = rollout_batch(rt, spec, implants, z, z, masks, noise, table, cfg.gamma)
        score = float(out["objective"].mean())
        if score > best:
            best, best_mask = score, np.asarray(bits)
    return best, best_mask


class TestPlanCE:
    def test_matches_enumeration_on_random_model(self):
        params = new_params(affine_driving_arch(), seed=9)
        implants = blind_implants()
        table = COST_TABLES["driving"]
        cfg = PlanConfig(horizon=1, gamma=1.0, population=128, elite_frac=0.125,
                         iterations=6, samples=16, channels=("visual",))
        hits = 0
        for seed in range(20):
            result = plan_ce(
                tight_belief(), tight_belief(), implants, params, table, cfg,
                np.random.default_rng(seed),
            )
            oracle, _ = enumerate_oracle(params, implants, table, cfg, seed)
            if abs(result["objective"] - oracle) <= 1e-6:
                hits += 1
        assert hits >= 19

    def test_huge_cost_selects_empty_mask(self):
        params = hand_set_params(info_model=True)
        implants = blind_implants(count_residual())
        table = CostTable(1e6 * 0.01, 1e6 * 0.03)
        cfg = PlanConfig(horizon=2, gamma=1.0, population=64, elite_frac=0.25,
                         iterations=6, samples=32, channels=("visual",))
        result = plan_ce(
            tight_belief(), tight_belief(), implants, params, table, cfg,
            np.random.default_rng(3),
        )
        assert result["mask"]["visual"].sum() == 0
        _, oracle_mask = enumerate_oracle(params, implants, table, cfg, 3)
        assert oracle_mask.sum() == 0

    def test_zero_cost_info_model_reveals_everything(self):
        params = hand_set_params(info_model=True)
        implants = blind_implants(count_residual())
        table = CostTable(0.0, 0.0)
        cfg = PlanConfig(horizon=2, gamma=1.0, population=64, elite_frac=0.25,
                         iterations=8, samples=64, channels=("visual",))
        result = plan_ce(
            tight_belief(), tight_belief(), implants, params, table, cfg,
            np.random.default_rng(4),
        )
        assert result["mask"]["visual"].sum() == 4
        _, oracle_mask = enumerate_oracle(params, implants, table, cfg, 4)
        assert oracle_mask.reshape(2, 4)[0].sum() == 4

    def test_deterministic(self):
        params = new_params(affine_driving_arch(), seed=12)
        cfg = PlanConfig(horizon=2, population=32, elite_frac=0.25, iterations=4, samples=8)
        outs = []
        for _ in range(2):
            res = plan_ce(
                tight_belief(), tight_belief(), blind_implants(), params,
                COST_TABLES["driving"], cfg, np.random.default_rng(55),
            )
            outs.append((res["objective"], res["mask"]["visual"].tobytes(),
                         res["mask"]["verbal"].tobytes()))
        assert outs[0] == outs[1]

    def test_best_objective_nondecreasing_over_iterations(self):
        params = new_params(affine_driving_arch(), seed=13)
        log = []
        cfg = PlanConfig(horizon=2, population=32, elite_frac=0.25, iterations=6, samples=8)
        plan_ce(
            tight_belief(), tight_belief(), blind_implants(), params,
            COST_TABLES["driving"], cfg, np.random.default_rng(2), log=log,
        )
        bests = [entry["best_objective"] for entry in log]
        assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))

    def test_degenerate_config_rejected(self):
        with pytest.raises(UsageError):
            PlanConfig(horizon=0)
        with pytest.raises(UsageError):
            PlanConfig(population=4, elite_frac=0.1)
        with pytest.raises(UsageError):
            PlanConfig(gamma=0.0)


class TestPlanKL:
    def test_kl_helper_analytic(self):
        m0, v0 = np.zeros((1, 3)), np.ones((1, 3))
        m1, v1 = np.ones((1, 3)), np.ones((1, 3))
        assert diag_gauss_kl(m0, v0, m1, v1)[0] == pytest.approx(1.5, abs=1e-12)

    def test_equal_beliefs_pick_fewest_items(self):
        # inference mimics the transition and ignores observations entirely,
        # so human and robot next beliefs coincide and every mask scores 0
        params = hand_set_params()
        st = params.state
        st["infer_net.net.layers.0.weight"][:, :LATENT] = 0.0
        implants = blind_implants()
        cfg = PlanConfig(horizon=3, population=64, elite_frac=0.25, iterations=5, samples=8)
        result = plan_kl(
            tight_belief(), tight_belief(), implants, params, cfg, np.random.default_rng(8)
        )
        assert result["objective"] == pytest.approx(0.0, abs=1e-9)
        assert result["best_mask"]["visual"].sum() + result["best_mask"]["verbal"].sum() == 0

    def test_informative_reveal_reduces_kl(self):
        # revealing cars moves the human belief toward what the robot expects
        # only if it changes the inference input; here a revealed car flips
        # z0, and the robot's transition prior also tracks z0 via the action
        params = hand_set_params(info_model=True)
        implants = blind_implants(count_residual())
        cfg = PlanConfig(horizon=1, population=32, elite_frac=0.25, iterations=5,
                         samples=32, channels=("visual",))
        result = plan_kl(
            tight_belief(), tight_belief(), implants, params, cfg, np.random.default_rng(9)
        )
        assert np.isfinite(result["objective"])
