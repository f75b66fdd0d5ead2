from typing import List

import numpy as np

from services.errors import InvalidArgumentError


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; every random draw in the package goes through it."""
    if seed is None or isinstance(seed, bool) or int(seed) != seed or int(seed) < 0:
        raise InvalidArgumentError(f"seed must be a non-negative integer, got {seed!r}")
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn_rngs(seed: int, n: int) -> List[np.random.Generator]:
    """n independent streams derived from one seed (init, shuffling, noise...)."""
    make_rng(seed)
    return [np.random.Generator(np.random.Philox(ss)) for ss in np.random.SeedSequence(int(seed)).spawn(n)]
