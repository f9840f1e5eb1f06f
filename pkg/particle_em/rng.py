"""Counter-based random streams keyed by (seed, step, particle, block).

Every Gaussian or uniform draw made by a sampler comes from its own Philox
stream whose counter encodes where in the run the draw is used. Draw values
therefore depend only on the seed and the (step, particle, block) triple,
never on how many particles are processed together or in what order.
"""

from __future__ import annotations

import numpy as np
import numpy.typing as npt

# Coordinate blocks: independent stream families for different purposes.
NOISE = 0
UNIFORM = 1
INIT = 2

_MASK64 = (1 << 64) - 1


class StepRng:
    """Factory of independent Philox streams for one run."""

    __slots__ = ["seed", "_key"]

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._key = self.seed & _MASK64

    def generator(self, step: int, particle: int = 0, block: int = NOISE) -> np.random.Generator:
        """Return the generator for one (step, particle, block) stream."""
        if step < 0 or particle < 0 or block < 0:
            raise ValueError("stream ids must be non-negative")
        counter = np.array([0, block, particle, step], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))

    def normal(self, step: int, particle: int, size: int, block: int = NOISE) -> npt.NDArray[np.float64]:
        """Standard normal vector for one particle at one step."""
        return self.generator(step, particle, block).standard_normal(size)

    def normals(self, step: int, n: int, size: int, block: int = NOISE) -> npt.NDArray[np.float64]:
        """N×size matrix whose row n is ``normal(step, n, size)``."""
        out = np.empty((n, size))
        for i in range(n):
            out[i] = self.normal(step, i, size, block)
        return out

    def uniform(self, step: int, block: int = UNIFORM) -> float:
        """One U(0, 1) draw per step, used for accept/reject decisions."""
        return float(self.generator(step, 0, block).random())
