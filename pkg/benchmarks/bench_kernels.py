"""Compare the Cython fastmath backend against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py
The kernel comparison times the fused MLP forward at planner-relevant
shapes (48-dim latent, 3 layers); the end-to-end row times one full CE
planning call on a random model through each backend.
"""

import os
import time

import numpy as np

from mirror import fastmath
from mirror.fastmath import kernels_py

try:
    from mirror.fastmath import _kernels  # noqa: F401

    HAVE_EXT = True
except ImportError:
    HAVE_EXT = False


def time_call(fn, *args, repeat=200):
    fn(*args)  # warmup
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def bench_mlp():
    rng = np.random.default_rng(0)
    sizes = [(1, "single rollout step"), (16, "small batch"), (256, "mid batch"),
             (1024, "planner batch (population x samples)")]
    weights = [rng.standard_normal((99, 64)), rng.standard_normal((64, 64)),
               rng.standard_normal((64, 96))]
    biases = [rng.standard_normal(64), rng.standard_normal(64), rng.standard_normal(96)]
    print(f"{'batch':>6}  {'numpy us':>10}  {'cython us':>10}  {'speedup':>8}  note")
    for b, note in sizes:
        x = rng.standard_normal((b, 99))
        t_py = time_call(kernels_py.mlp_forward, x, weights, biases) * 1e6
        if HAVE_EXT:
            t_cy = time_call(_kernels.mlp_forward, x, weights, biases) * 1e6
            print(f"{b:>6}  {t_py:>10.1f}  {t_cy:>10.1f}  {t_py / t_cy:>7.2f}x  {note}")
        else:
            print(f"{b:>6}  {t_py:>10.1f}  {'n/a':>10}  {'':>8}  {note}")


def bench_planner():
    from mirror.communication import COST_TABLES, PlanConfig, plan_ce
    from mirror.envs import arch_for
    from mirror.implants import default_implants
    from mirror.types import LatentBelief
    from mirror.world_model import new_params

    params = new_params(arch_for("driving"), seed=1)
    implants = default_implants("driving", "transfer")
    cfg = PlanConfig()
    z = LatentBelief(np.zeros(48), np.ones(48))

    def plan_once():
        plan_ce(z, z, implants, params, COST_TABLES["driving"], cfg,
                np.random.default_rng(7))

    t = time_call(plan_once, repeat=5)
    print(f"plan_ce (T={cfg.horizon}, N={cfg.population}, K={cfg.iterations}, "
          f"S={cfg.samples}): {t * 1e3:.1f} ms per call [{fastmath.BACKEND} backend]")


if __name__ == "__main__":
    print(f"compiled extension available: {HAVE_EXT}")
    if os.environ.get("MIRROR_PURE_PY"):
        print("MIRROR_PURE_PY is set: package-level calls use the numpy fallback")
    bench_mlp()
    bench_planner()
