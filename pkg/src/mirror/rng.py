"""Named, reproducible RNG substreams.

Every source of randomness in the package derives from a root seed plus a
tuple of names (strings or ints). The same (root, names) always yields the
same stream, independent of call order or threading, which is what makes
metrics files byte-reproducible.
"""

import numpy as np

_STREAM_MOD = 2**31 - 1


def _encode(name) -> list[int]:
    if isinstance(name, (int, np.integer)):
        return [int(name) & 0xFFFFFFFF, (int(name) >> 32) & 0xFFFFFFFF]
    data = str(name).encode("utf-8")
    words = []
    for i in range(0, len(data), 4):
        words.append(int.from_bytes(data[i : i + 4], "little"))
    return words or [0]


def seed_sequence(root: int, *names) -> np.random.SeedSequence:
    entropy = [int(root) & 0xFFFFFFFF]
    for name in names:
        entropy.extend(_encode(name))
    return np.random.SeedSequence(entropy)


def substream(root: int, *names) -> np.random.Generator:
    """Generator for the named substream of `root`."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root, *names)))


def torch_seed(root: int, *names) -> int:
    """A 63-bit seed for torch generators, derived from the same naming scheme."""
    state = seed_sequence(root, *names).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1] & 0x7FFFFFFF) << 32)
