"""Float64 numpy twin of the trained model, for the planning/evaluation hot path.

Weights are exported once from a WorldModelParams; all forward passes run
through the fastmath kernels (Cython when built, numpy otherwise). Batched
everywhere: leading axis is the rollout batch.
"""

from __future__ import annotations

import numpy as np

from . import fastmath
from .world_model import ArchSpec, WorldModelParams


class NumpyMLP:
    """Weight bundle for fastmath.mlp_forward (tanh hidden, linear out)."""

    def __init__(self, weights, biases):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]

    def __call__(self, x):
        return fastmath.mlp_forward(x, self.weights, self.biases)

    def gauss(self, x, var_floor):
        return fastmath.gauss_head(x, self.weights, self.biases, var_floor)

    @staticmethod
    def from_state(state: dict, prefix: str) -> "NumpyMLP":
        base = f"{prefix}.layers" if prefix else "layers"
        weights, biases = [], []
        i = 0
        while f"{base}.{i}.weight" in state:
            weights.append(state[f"{base}.{i}.weight"].T)
            biases.append(state[f"{base}.{i}.bias"])
            i += 1
        if not weights:
            raise KeyError(f"no layers under {prefix!r}")
        return NumpyMLP(weights, biases)


class _GridEncoderNp:
    def __init__(self, state, prefix, grid, kernel, stride):
        c, h, w = grid
        self.grid = grid
        wconv = state[f"{prefix}.conv.weight"]  # (ch, c, k, k)
        self.ch = wconv.shape[0]
        self.oh = (h - kernel) // stride + 1
        self.ow = (w - kernel) // stride + 1
        self.wmat = np.ascontiguousarray(
            wconv.reshape(self.ch, -1).T, dtype=np.float64
        )  # (c*k*k, ch)
        self.bconv = np.asarray(state[f"{prefix}.conv.bias"], dtype=np.float64)
        self.wfc = np.ascontiguousarray(state[f"{prefix}.fc.weight"].T, dtype=np.float64)
        self.bfc = np.asarray(state[f"{prefix}.fc.bias"], dtype=np.float64)
        # gather indices for im2col over the flattened payload
        idx = []
        for oi in range(self.oh):
            for oj in range(self.ow):
                patch = []
                for ci in range(c):
                    for ki in range(kernel):
                        for kj in range(kernel):
                            patch.append(ci * h * w + (oi * stride + ki) * w + (oj * stride + kj))
                idx.append(patch)
        self.idx = np.asarray(idx)  # (oh*ow, c*k*k)

    def __call__(self, flat_payload, present):
        b = flat_payload.shape[0]
        patches = flat_payload[:, self.idx]  # (B, oh*ow, c*k*k)
        conv = np.tanh(patches @ self.wmat + self.bconv)  # (B, oh*ow, ch)
        feats = conv.transpose(0, 2, 1).reshape(b, -1)  # channel-major like torch
        feats = np.concatenate([feats, present[:, None]], axis=1)
        return np.tanh(feats @ self.wfc + self.bfc)


class _GridDecoderNp:
    def __init__(self, state, prefix, grid, channels, kernel, stride, var_floor, sigma=None):
        if kernel != stride:
            raise ValueError("runtime grid decoder assumes non-overlapping deconv (kernel == stride)")
        c, h, w = grid
        self.grid = grid
        self.kernel = kernel
        self.channels = channels
        self.sigma = sigma
        self.out_channels = c if sigma is not None else 2 * c
        self.ih = (h - kernel) // stride + 1
        self.iw = (w - kernel) // stride + 1
        self.var_floor = var_floor
        self.wfc = np.ascontiguousarray(state[f"{prefix}.fc.weight"].T, dtype=np.float64)
        self.bfc = np.asarray(state[f"{prefix}.fc.bias"], dtype=np.float64)
        wdec = np.asarray(state[f"{prefix}.deconv.weight"], dtype=np.float64)
        self.wmat = np.ascontiguousarray(wdec.reshape(channels, -1))  # (ch, out_c*k*k)
        self.bdec = np.asarray(state[f"{prefix}.deconv.bias"], dtype=np.float64)

    def __call__(self, z):
        b = z.shape[0]
        c, h, w = self.grid
        k = self.kernel
        oc = self.out_channels
        hidden = np.tanh(z @ self.wfc + self.bfc)  # (B, ch*ih*iw)
        spatial = hidden.reshape(b, self.channels, self.ih * self.iw).transpose(0, 2, 1)
        blocks = spatial @ self.wmat  # (B, ih*iw, oc*k*k)
        out = np.zeros((b, oc, h, w))
        blocks = blocks.reshape(b, self.ih, self.iw, oc, k, k)
        for oi in range(self.ih):
            for oj in range(self.iw):
                out[:, :, oi * k : (oi + 1) * k, oj * k : (oj + 1) * k] = blocks[:, oi, oj]
        out += self.bdec[None, :, None, None]
        mean = out[:, :c].reshape(b, -1)
        if self.sigma is not None:
            return mean, np.full_like(mean, float(self.sigma) ** 2)
        raw = out[:, c:].reshape(b, -1)
        var = np.maximum(raw, 0.0) + np.log1p(np.exp(-np.abs(raw))) + self.var_floor
        return mean, var


class RuntimeModel:
    """Numpy forward passes for every head of the self-model."""

    def __init__(self, arch: ArchSpec, state: dict[str, np.ndarray]):
        self.arch = arch
        self.var_floor = arch.var_floor
        self.modalities = {m.name: m for m in arch.modalities}
        self.trans = NumpyMLP.from_state(state, "transition.net")
        self.dec = {}
        self.dec_sigma = {}
        for m in arch.modalities:
            self.dec_sigma[m.name] = m.sigma
            if m.grid is not None:
                self.dec[m.name] = _GridDecoderNp(
                    state, f"decoders.{m.name}", m.grid, arch.conv_channels,
                    arch.conv_kernel, arch.conv_stride, arch.var_floor, sigma=m.sigma,
                )
            else:
                self.dec[m.name] = NumpyMLP.from_state(state, f"decoders.{m.name}.net")
        if arch.reward_sigma is None:
            self.rew = NumpyMLP.from_state(state, "reward_head.net")
        else:
            self.rew = NumpyMLP.from_state(state, "reward_head")
        if arch.infer_fused:
            self.enc = {}
            for m in arch.modalities:
                if m.grid is not None:
                    self.enc[m.name] = _GridEncoderNp(
                        state, f"encoders.{m.name}", m.grid, arch.conv_kernel, arch.conv_stride
                    )
                else:
                    self.enc[m.name] = _DenseEncoderNp(state, f"encoders.{m.name}")
        self.infer_net = NumpyMLP.from_state(state, "infer_net.net")
        self.q = NumpyMLP.from_state(state, "q_net")

    @staticmethod
    def from_params(params: WorldModelParams) -> "RuntimeModel":
        return RuntimeModel(params.arch, params.state)

    # -- encodings -------------------------------------------------------

    def action_onehot(self, action, batch: int = 1) -> np.ndarray:
        out = np.zeros((batch, self.arch.n_actions))
        if action is not None:
            a = int(action)
            if not 0 <= a < self.arch.n_actions:
                raise ValueError(f"action id {a} invalid for this domain")
            out[:, a] = 1.0
        return out

    # -- heads -----------------------------------------------------------

    def transition(self, prev, aoh):
        return self.trans.gauss(np.concatenate([prev, aoh], axis=1), self.var_floor)

    def infer(self, prev, aoh, payloads, present):
        feats = [prev, aoh]
        for m in self.arch.modalities:
            pay = payloads[m.name] * present[m.name][:, None]
            if self.arch.infer_fused:
                feats.append(self.enc[m.name](pay, present[m.name]))
            else:
                feats.append(pay)
                feats.append(present[m.name][:, None])
        return self.infer_net.gauss(np.concatenate(feats, axis=1), self.var_floor)

    def decode(self, name, z):
        dec = self.dec[name]
        if isinstance(dec, NumpyMLP):
            sigma = self.dec_sigma[name]
            if sigma is not None:
                mean = dec(z)
                return mean, np.full_like(mean, float(sigma) ** 2)
            return dec.gauss(z, self.var_floor)
        return dec(z)

    def reward(self, z):
        if self.arch.reward_sigma is None:
            return self.rew.gauss(z, self.var_floor)
        mean = self.rew(z)
        return mean, np.full_like(mean, float(self.arch.reward_sigma) ** 2)

    def q_values(self, z):
        b = z.shape[0]
        a = self.arch.n_actions
        eye = np.eye(a)
        zz = np.repeat(z, a, axis=0)
        aa = np.tile(eye, (b, 1))
        return self.q(np.concatenate([zz, aa], axis=1)).reshape(b, a)

    def policy_logits(self, z):
        return self.q_values(z) / self.arch.policy_temp


class _DenseEncoderNp:
    def __init__(self, state, prefix):
        self.w = np.ascontiguousarray(state[f"{prefix}.fc.weight"].T, dtype=np.float64)
        self.b = np.asarray(state[f"{prefix}.fc.bias"], dtype=np.float64)

    def __call__(self, payload, present):
        x = np.concatenate([payload, present[:, None]], axis=1)
        return np.tanh(x @ self.w + self.b)


# -- shared sampling helpers (CRN-friendly: caller supplies the noise) -----


def sample_gauss(mean, var, eps):
    return mean + np.sqrt(var) * eps


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sample_categorical(probs, u):
    """Inverse-CDF draw per row; u in [0,1) of shape (B,)."""
    cdf = np.cumsum(probs, axis=-1)
    return (u[:, None] >= cdf).sum(axis=-1)


def diag_gauss_kl(mean_q, var_q, mean_p, var_p):
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    return 0.5 * (
        np.log(var_p / var_q) + (var_q + (mean_q - mean_p) ** 2) / var_p - 1.0
    ).sum(axis=-1)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class NumpyGRU:
    """Batched GRU cell matching torch.nn.GRUCell semantics."""

    def __init__(self, state: dict, prefix: str):
        self.w_ih = np.asarray(state[f"{prefix}.weight_ih"], dtype=np.float64)
        self.w_hh = np.asarray(state[f"{prefix}.weight_hh"], dtype=np.float64)
        self.b_ih = np.asarray(state[f"{prefix}.bias_ih"], dtype=np.float64)
        self.b_hh = np.asarray(state[f"{prefix}.bias_hh"], dtype=np.float64)
        self.hidden = self.w_hh.shape[1]

    def __call__(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        gi = x @ self.w_ih.T + self.b_ih
        gh = h @ self.w_hh.T + self.b_hh
        n = self.hidden
        r = _sigmoid(gi[:, :n] + gh[:, :n])
        z = _sigmoid(gi[:, n : 2 * n] + gh[:, n : 2 * n])
        new = np.tanh(gi[:, 2 * n :] + r * gh[:, 2 * n :])
        return (1.0 - z) * new + z * h
