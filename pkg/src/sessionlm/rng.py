"""Named, seedable random streams on top of the Philox counter-based generator.

Every stochastic operation receives one of these explicitly; there is no
global RNG. Child streams are derived from (seed, path) only, so the draw
order of one stream never affects another — this is what makes worker-count
changes and re-runs bit-identical.
"""

import hashlib

import numpy as np


class Rng:
    def __init__(self, seed, path="root"):
        self.seed = int(seed)
        self.path = path
        digest = hashlib.sha256(f"{self.seed}:{path}".encode()).digest()
        words = np.frombuffer(digest, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=words[:2]))

    def child(self, name):
        """Independent stream identified by ``path/name``."""
        return Rng(self.seed, f"{self.path}/{name}")

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None, dtype=np.float64):
        return self._gen.random(size=size, dtype=dtype)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def shuffle(self, seq):
        """In-place Fisher-Yates shuffle of a list."""
        for i in range(len(seq) - 1, 0, -1):
            j = int(self._gen.integers(0, i + 1))
            seq[i], seq[j] = seq[j], seq[i]

    def choice_without_replacement(self, pool, k):
        """k distinct elements of ``pool`` (a 1-d array), order randomized."""
        pool = np.asarray(pool)
        if k >= pool.shape[0]:
            out = pool.copy()
            self.shuffle_array(out)
            return out
        idx = self._gen.choice(pool.shape[0], size=k, replace=False)
        return pool[idx]

    def shuffle_array(self, arr):
        self._gen.shuffle(arr)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path!r})"
