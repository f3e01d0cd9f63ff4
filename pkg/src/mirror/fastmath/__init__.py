"""Fused numeric kernels for the belief-rollout hot path.

Two interchangeable backends: a Cython extension (built at install time)
and a pure-numpy fallback. The extension is preferred; set MIRROR_PURE_PY=1
to force the fallback. `benchmarks/bench_kernels.py` compares the two.
"""

import os

if os.environ.get("MIRROR_PURE_PY"):
    from . import kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import kernels_py as _impl

        BACKEND = "python"

mlp_forward = _impl.mlp_forward
gauss_head = _impl.gauss_head

__all__ = ["mlp_forward", "gauss_head", "BACKEND"]
