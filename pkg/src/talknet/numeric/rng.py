"""Seeded random streams.

All randomness goes through :class:`RngState`, a thin wrapper over numpy's
PCG64 bit generator.  PCG64 output is specified bit-for-bit and is identical
across platforms, and its full state can be captured for checkpointing.
"""

import numpy as np

ALGORITHM = "PCG64"


class RngState:
    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def algorithm(self):
        return ALGORITHM

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def spawn(self, key):
        """Independent child stream derived from this seed and an integer key."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        child = RngState.__new__(RngState)
        child.seed = self.seed
        child.generator = np.random.Generator(np.random.PCG64(seq))
        return child

    def get_state(self):
        state = self.generator.bit_generator.state
        return {
            "seed": self.seed,
            "algorithm": ALGORITHM,
            "state": int(state["state"]["state"]),
            "inc": int(state["state"]["inc"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, saved):
        if saved.get("algorithm", ALGORITHM) != ALGORITHM:
            raise ValueError(f"unsupported generator {saved['algorithm']!r}")
        rng = cls(saved["seed"])
        rng.generator.bit_generator.state = {
            "bit_generator": ALGORITHM,
            "state": {"state": int(saved["state"]), "inc": int(saved["inc"])},
            "has_uint32": int(saved["has_uint32"]),
            "uinteger": int(saved["uinteger"]),
        }
        return rng
