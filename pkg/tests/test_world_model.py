"""World-model oracle tests.

Every derived expectation here is computed by an independent closed-form
oracle (Kalman filter, Gaussian marginals, importance sampling, finite
differences) before being compared against the model code.
"""

import math

import numpy as np
import pytest
import torch

from conftest import inv_softplus, toy_arch, zeroed_params
from mirror.types import LatentBelief, ModalityBundle, Step, TrajectoryRecord
from mirror.world_model import (
    ArchSpec,
    ModalitySpec,
    WorldModelParams,
    WorldModelTrainConfig,
    elbo_loss,
    elbo_terms,
    infer_posterior,
    new_params,
    pack_records,
    predict_reward,
    train_world_model,
    transition_prior,
)

VAR_FLOOR = 1e-5

# Toy linear-Gaussian process used throughout: z' = 0.9 z + N(0, 0.04),
# x = z' + N(0, 0.01).
TRANS_COEF, TRANS_VAR = 0.9, 0.04
EMIT_VAR = 0.01


def kalman_update(prior_mean, prior_var, x, emit_var):
    """Exact conjugate update for scalar linear-Gaussian observation."""
    gain = prior_var / (prior_var + emit_var)
    return prior_mean + gain * (x - prior_mean), (1.0 - gain) * prior_var


def set_gauss_affine(params, prefix, w_mean, b_mean, var):
    """Write an affine Gaussian head: mean = w.x + b, variance = const."""
    weight = params.state[f"{prefix}.layers.0.weight"]
    bias = params.state[f"{prefix}.layers.0.bias"]
    weight[...] = 0.0
    weight[0, : len(w_mean)] = w_mean
    bias[0] = b_mean
    bias[1] = inv_softplus(var - VAR_FLOOR)


def linear_gaussian_params():
    """Hand-set toy model exactly realizing the linear-Gaussian process."""
    params = zeroed_params(toy_arch())
    # transition input is (z, a_onehot)
    set_gauss_affine(params, "transition.net", [TRANS_COEF, 0.0], 0.0, TRANS_VAR)
    # decoder input is z
    set_gauss_affine(params, "decoders.x.net", [1.0], 0.0, EMIT_VAR)
    # inference input is (z, a_onehot, x, present): exact Kalman posterior,
    # linear in (prior mean, x) with fixed gain
    gain = TRANS_VAR / (TRANS_VAR + EMIT_VAR)
    set_gauss_affine(
        params,
        "infer_net.net",
        [TRANS_COEF * (1.0 - gain), 0.0, gain, 0.0],
        0.0,
        (1.0 - gain) * TRANS_VAR,
    )
    return params


def obs_x(x, present=True):
    return ModalityBundle({"x": np.array([x])}, {"x": present})


class TestInferPosterior:
    def test_matches_exact_kalman_filter(self):
        params = linear_gaussian_params()
        for prev, x in [(0.4, 1.0), (0.0, 1.0), (-1.3, 0.2)]:
            post = infer_posterior(np.array([prev]), 0, obs_x(x), params)
            mean, var = kalman_update(TRANS_COEF * prev, TRANS_VAR, x, EMIT_VAR)
            assert post.mean[0] == pytest.approx(mean, abs=1e-9)
            assert post.var[0] == pytest.approx(var, abs=1e-9)
        # frozen oracle values for the documented case prev=0.4, x=1.0:
        # prior N(0.36, 0.04), gain 0.8 -> posterior N(0.872, 0.008)
        post = infer_posterior(np.array([0.4]), 0, obs_x(1.0), params)
        assert post.mean[0] == pytest.approx(0.872, abs=1e-9)
        assert post.var[0] == pytest.approx(0.008, abs=1e-9)

    def test_all_absent_equals_transition_prior(self):
        # inference net constructed to mimic the transition on (z, a) and
        # ignore the (zeroed) observation block
        params = linear_gaussian_params()
        set_gauss_affine(params, "infer_net.net", [TRANS_COEF, 0.0, 0.0, 0.0], 0.0, TRANS_VAR)
        prev = np.array([0.7])
        post = infer_posterior(prev, 0, obs_x(123.0, present=False), params)
        prior = transition_prior(prev, 0, params)
        np.testing.assert_allclose(post.mean, prior.mean, atol=1e-12)
        np.testing.assert_allclose(post.var, prior.var, atol=1e-12)

    def test_deterministic(self):
        params = linear_gaussian_params()
        a = infer_posterior(np.array([0.4]), 0, obs_x(1.0), params)
        b = infer_posterior(np.array([0.4]), 0, obs_x(1.0), params)
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)

    def test_rejects_nonfinite(self):
        params = linear_gaussian_params()
        with pytest.raises(Exception):
            infer_posterior(np.array([np.nan]), 0, obs_x(1.0), params)
        with pytest.raises(Exception):
            infer_posterior(np.array([0.0]), 0, obs_x(np.inf), params)

    def test_variance_strictly_positive(self, rng):
        arch = ArchSpec(latent_dim=3, n_actions=2, modalities=[ModalitySpec("x", 2)])
        params = new_params(arch, seed=3)
        for _ in range(20):
            prev = rng.standard_normal(3)
            bundle = ModalityBundle({"x": rng.standard_normal(2)}, {"x": True})
            post = infer_posterior(prev, int(rng.integers(2)), bundle, params)
            assert np.all(post.var > 0)


class TestTransitionPrior:
    def test_zero_weights_gives_bias_and_softplus_bias(self):
        arch = toy_arch()
        params = zeroed_params(arch)
        params.state["transition.net.layers.0.bias"][...] = [0.25, 0.5]
        prior = transition_prior(np.array([1.7]), 0, params)
        assert prior.mean[0] == pytest.approx(0.25, abs=1e-12)
        assert prior.var[0] == pytest.approx(math.log1p(math.exp(0.5)) + VAR_FLOOR, abs=1e-12)

    def test_hand_set_linear_model(self):
        params = linear_gaussian_params()
        prior = transition_prior(np.array([1.0]), 0, params)
        assert prior.mean[0] == pytest.approx(0.9, abs=1e-12)
        assert prior.var[0] == pytest.approx(0.04, abs=1e-9)

    def test_invalid_action(self):
        params = linear_gaussian_params()
        with pytest.raises(ValueError):
            transition_prior(np.array([0.0]), 5, params)

    def test_repeatable(self):
        params = linear_gaussian_params()
        a = transition_prior(np.array([0.3]), 0, params)
        b = transition_prior(np.array([0.3]), 0, params)
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)


class TestRewardHead:
    def test_zero_weight_bias_case(self):
        arch = toy_arch()
        params = zeroed_params(arch)
        params.state["reward_head.layers.0.bias"][...] = [0.75]
        mean, var = predict_reward(np.array([2.0]), params)
        assert mean == pytest.approx(0.75, abs=1e-12)
        assert var == pytest.approx(1.0)  # fixed sigma=1 default

    def test_hand_set_linear_reward(self):
        arch = toy_arch()
        params = zeroed_params(arch)
        params.state["reward_head.layers.0.weight"][0, 0] = 2.0
        mean, _ = predict_reward(np.array([1.5]), params)
        assert mean == pytest.approx(3.0, abs=1e-12)


def single_step_record(x, r=0.0):
    return TrajectoryRecord(steps=[Step(obs_x(x), 0, r)], domain="toy")


def emission_only_params(mu0=0.3, v0=0.25):
    """Toy model whose first-step prior ignores the carried latent.

    z1 ~ N(mu0, v0), x = z1 + N(0, EMIT_VAR), r = 0 with unit sigma. The
    inference head is the exact conjugate posterior, so the single-sample
    ELBO equals log p(x) + log N(0;0,1) pointwise.
    """
    params = zeroed_params(toy_arch())
    set_gauss_affine(params, "transition.net", [0.0, 0.0], mu0, v0)
    set_gauss_affine(params, "decoders.x.net", [1.0], 0.0, EMIT_VAR)
    gain = v0 / (v0 + EMIT_VAR)
    set_gauss_affine(
        params, "infer_net.net", [0.0, 0.0, gain, 0.0], mu0 * (1.0 - gain), (1.0 - gain) * v0
    )
    return params, mu0, v0


def log_normal_pdf(x, mean, var):
    return -0.5 * (math.log(2 * math.pi * var) + (x - mean) ** 2 / var)


class TestElboLoss:
    def test_kl_zero_when_q_equals_prior(self):
        params = linear_gaussian_params()
        set_gauss_affine(params, "infer_net.net", [TRANS_COEF, 0.0, 0.0, 0.0], 0.0, TRANS_VAR)
        recs = [
            TrajectoryRecord(steps=[Step(obs_x(0.5), 0, 0.0), Step(obs_x(-0.2), 0, 0.0)])
        ]
        _, parts = elbo_loss(recs, params, seed=7)
        assert np.allclose(parts["kl"], 0.0, atol=1e-12)

    def test_monte_carlo_elbo_matches_log_marginal(self):
        # acceptance criterion: 1% agreement at 1e5 samples with optimal q
        params, mu0, v0 = emission_only_params()
        x = 0.8
        records = [single_step_record(x)] * 100_000
        loss, _ = elbo_loss(records, params, seed=11)
        target = -(log_normal_pdf(x, mu0, v0 + EMIT_VAR) + log_normal_pdf(0.0, 0.0, 1.0))
        assert abs(loss - target) <= 0.01 * abs(target)

    def test_elbo_below_importance_weighted_estimate(self):
        # Slightly mistuned q so the bound gap is real; IWAE with k=100 must
        # dominate the ELBO within combined Monte-Carlo error.
        params, mu0, v0 = emission_only_params()
        gain = v0 / (v0 + EMIT_VAR)
        q_mean_w, q_mean_b = gain * 0.8, mu0 * (1.0 - gain) + 0.05
        q_var = (1.0 - gain) * v0 * 1.5
        set_gauss_affine(params, "infer_net.net", [0.0, 0.0, q_mean_w, 0.0], q_mean_b, q_var)
        x = 0.8
        rng = np.random.default_rng(5)

        def log_joint(z):
            return log_normal_pdf_vec(z, mu0, v0) + log_normal_pdf_vec(x, z, EMIT_VAR) + \
                log_normal_pdf(0.0, 0.0, 1.0)

        def log_normal_pdf_vec(v, mean, var):
            return -0.5 * (np.log(2 * np.pi * var) + (v - mean) ** 2 / var)

        qm = q_mean_w * x + q_mean_b
        # independent IWAE oracle (k=100 particles, 400 replicates)
        iwae_vals = []
        for _ in range(400):
            z = qm + math.sqrt(q_var) * rng.standard_normal(100)
            logw = log_joint(z) - log_normal_pdf_vec(z, qm, q_var)
            iwae_vals.append(np.logaddexp.reduce(logw) - math.log(100))
        iwae_mean = float(np.mean(iwae_vals))
        iwae_se = float(np.std(iwae_vals, ddof=1) / math.sqrt(len(iwae_vals)))

        records = [single_step_record(x)] * 20_000
        loss, _ = elbo_loss(records, params, seed=13)
        elbo_mean = -loss
        assert elbo_mean <= iwae_mean + 3 * iwae_se

    def test_empty_batch_rejected(self):
        params = linear_gaussian_params()
        with pytest.raises(ValueError):
            elbo_loss([], params)

    def test_kl_nonnegative_on_random_models(self, rng):
        arch = ArchSpec(latent_dim=4, n_actions=3, modalities=[ModalitySpec("x", 3), ModalitySpec("v", 2)])
        for seed in range(3):
            params = new_params(arch, seed=seed)
            recs = []
            for _ in range(4):
                steps = [
                    Step(
                        ModalityBundle(
                            {"x": rng.standard_normal(3), "v": rng.standard_normal(2)},
                            {"x": True, "v": bool(rng.integers(2))},
                        ),
                        int(rng.integers(3)),
                        float(rng.standard_normal()),
                    )
                    for _ in range(5)
                ]
                recs.append(TrajectoryRecord(steps=steps))
            _, parts = elbo_loss(recs, params, seed=seed)
            assert np.all(parts["kl"] >= 0.0)

    def test_masked_payload_never_touches_loss(self, rng):
        arch = ArchSpec(latent_dim=3, n_actions=2, modalities=[ModalitySpec("x", 3), ModalitySpec("v", 4)])
        params = new_params(arch, seed=9)

        def make_rec(v_payload):
            steps = [
                Step(
                    ModalityBundle(
                        {"x": np.array([0.1, -0.4, 0.2]), "v": v_payload},
                        {"x": True, "v": False},
                    ),
                    1,
                    0.5,
                ),
                Step(
                    ModalityBundle(
                        {"x": np.array([0.3, 0.0, -1.0]), "v": np.zeros(4)},
                        {"x": True, "v": True},
                    ),
                    0,
                    -0.2,
                ),
            ]
            return TrajectoryRecord(steps=steps)

        loss_a, _ = elbo_loss([make_rec(np.zeros(4))], params, seed=21)
        loss_b, _ = elbo_loss([make_rec(rng.standard_normal(4) * 100)], params, seed=21)
        assert loss_a == loss_b  # bitwise


class TestElboGradients:
    def test_matches_central_finite_differences(self):
        # small smooth model (<200 params), double precision, fixed noise
        arch = ArchSpec(
            latent_dim=2,
            n_actions=2,
            modalities=[ModalitySpec("x", 2, dec_hidden=(3,))],
            trans_hidden=(3,),
            infer_hidden=(4,),
            reward_hidden=(),
            q_hidden=(),
        )
        params = new_params(arch, seed=17)
        n_model_params = sum(
            v.size for k, v in params.state.items() if not k.startswith("q_net")
        )
        assert n_model_params <= 200
        rng = np.random.default_rng(2)
        recs = [
            TrajectoryRecord(
                steps=[
                    Step(ModalityBundle({"x": rng.standard_normal(2)}, {"x": True}), 1, 0.3),
                    Step(ModalityBundle({"x": rng.standard_normal(2)}, {"x": False}), 0, -0.1),
                ]
            )
        ]
        batch = pack_records(recs, arch, torch.float64)

        def loss_at(model):
            gen = torch.Generator().manual_seed(99)
            return elbo_terms(model, batch, gen)["loss"]

        model = params.module(torch.float64)
        loss = loss_at(model)
        loss.backward()
        for name, p in model.named_parameters():
            if name.startswith("q_net") or p.grad is None:
                continue
            grad = p.grad.detach().numpy()
            flat = p.detach().numpy().reshape(-1)
            fd = np.zeros_like(flat)
            h = 1e-6
            for i in range(flat.size):
                orig = flat[i]
                with torch.no_grad():
                    p.view(-1)[i] = orig + h
                up = float(loss_at(model).detach())
                with torch.no_grad():
                    p.view(-1)[i] = orig - h
                down = float(loss_at(model).detach())
                with torch.no_grad():
                    p.view(-1)[i] = orig
                fd[i] = (up - down) / (2 * h)
            fd = fd.reshape(grad.shape)
            np.testing.assert_allclose(fd, grad, rtol=1e-4, atol=1e-6, err_msg=name)


class TestTraining:
    def test_zero_lr_keeps_params(self):
        params, _, _ = emission_only_params()
        dataset = [single_step_record(0.5), single_step_record(-0.3)]
        cfg = WorldModelTrainConfig(epochs=3, lr=0.0, modality_dropout=0.0, augment_sigma=0.0)
        out, curve = train_world_model(dataset, params, cfg, np.random.default_rng(0))
        assert len(curve) == 3
        for k in params.state:
            assert np.array_equal(out.state[k], params.state[k]), k

    def test_zero_epochs_returns_initial(self):
        params, _, _ = emission_only_params()
        out, curve = train_world_model(
            [single_step_record(0.1)], params, WorldModelTrainConfig(epochs=0), np.random.default_rng(0)
        )
        assert curve == []
        for k in params.state:
            assert np.array_equal(out.state[k], params.state[k])

    def test_default_learning_rate(self):
        assert WorldModelTrainConfig().lr == pytest.approx(3e-4)

    def test_toy_training_reaches_analytic_optimum(self):
        # data from z ~ N(0.3, 0.25), x = z + N(0, 0.01), r = 0; the minimum
        # expected per-step negative ELBO is the entropy of the x marginal
        # plus the unit-variance reward term.
        mu0, v0 = 0.3, 0.25
        gen_rng = np.random.default_rng(42)
        dataset = []
        for _ in range(500):
            z = mu0 + math.sqrt(v0) * gen_rng.standard_normal()
            x = z + math.sqrt(EMIT_VAR) * gen_rng.standard_normal()
            dataset.append(single_step_record(x))
        optimum = 0.5 * math.log(2 * math.pi * math.e * (v0 + EMIT_VAR)) + 0.5 * math.log(
            2 * math.pi
        )
        params = new_params(toy_arch(), seed=1)
        cfg = WorldModelTrainConfig(
            epochs=200, lr=0.01, batch_size=64, modality_dropout=0.0, augment_sigma=0.0
        )
        trained, curve = train_world_model(dataset, params, cfg, np.random.default_rng(7))
        final_loss, _ = elbo_loss(dataset, trained, seed=3)
        assert final_loss <= optimum * 1.05
        assert final_loss >= optimum * 0.85  # sanity: can't beat the bound by much
        assert curve[-1] < curve[0]


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        arch = ArchSpec(latent_dim=5, n_actions=3, modalities=[ModalitySpec("x", 4)])
        params = new_params(arch, seed=11)
        path = tmp_path / "model.ckpt"
        params.save(path)
        loaded = WorldModelParams.load(path)
        assert loaded.arch == arch
        assert set(loaded.state) == set(params.state)
        for k in params.state:
            assert loaded.state[k].dtype == params.state[k].dtype
            assert np.array_equal(loaded.state[k], params.state[k])

    def test_identical_params_identical_bytes(self, tmp_path):
        arch = ArchSpec(latent_dim=3, n_actions=2, modalities=[ModalitySpec("x", 2)])
        params = new_params(arch, seed=4)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        params.save(p1)
        params.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loader_rejects_shape_mismatch(self, tmp_path):
        arch = ArchSpec(latent_dim=3, n_actions=2, modalities=[ModalitySpec("x", 2)])
        params = new_params(arch, seed=4)
        bad = params.copy()
        bad.state["transition.net.layers.0.weight"] = np.zeros((1, 1), dtype=np.float32)
        path = tmp_path / "bad.ckpt"
        from mirror.checkpoint import CheckpointError, save_container

        save_container(path, bad.state, {"kind": "world_model", "arch": arch.to_dict()})
        with pytest.raises(CheckpointError):
            WorldModelParams.load(path)
