import math

import numpy as np
import pytest

from mirror.world_model import ArchSpec, ModalitySpec, new_params


def inv_softplus(y: float) -> float:
    """Inverse of softplus for y > 0."""
    return math.log(math.expm1(y))


def toy_arch(reward_sigma=1.0) -> ArchSpec:
    """1-D latent, one scalar modality, affine nets (no hidden layers)."""
    return ArchSpec(
        latent_dim=1,
        n_actions=1,
        modalities=[ModalitySpec("x", 1, dec_hidden=())],
        trans_hidden=(),
        infer_hidden=(),
        reward_hidden=(),
        q_hidden=(),
        reward_sigma=reward_sigma,
    )


def zeroed_params(arch: ArchSpec):
    params = new_params(arch, seed=0)
    params.state = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.state.items()}
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
