"""Reference numpy implementation of the fastmath kernels.

Semantics are the contract: the Cython backend must match these outputs
to float64 round-off. Hidden activations are tanh, outputs are linear.
"""

import numpy as np


def _softplus(x):
    # overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def mlp_forward(x, weights, biases):
    """Forward pass of a tanh MLP with a linear final layer.

    x: (B, d_in) float64. weights[i]: (d_i, d_{i+1}). Returns (B, d_out).
    """
    h = np.ascontiguousarray(x, dtype=np.float64)
    n = len(weights)
    for i in range(n):
        h = h @ weights[i] + biases[i]
        if i < n - 1:
            np.tanh(h, out=h)
    return h


def gauss_head(x, weights, biases, var_floor):
    """MLP whose final layer emits [mean | raw_var]; var = softplus(raw) + floor."""
    out = mlp_forward(x, weights, biases)
    d = out.shape[1] // 2
    mean = out[:, :d].copy()
    var = _softplus(out[:, d:]) + var_floor
    return mean, var
