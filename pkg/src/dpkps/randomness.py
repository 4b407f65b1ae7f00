"""Seeded randomness helpers shared by the privacy mechanisms."""

from __future__ import annotations

import numpy as np


def child_seeds(seed: int, count: int) -> list[int]:
    """Derive ``count`` independent child seeds from a master seed.

    The derivation goes through the SeedSequence state expansion, so it is
    stable across processes and platforms. Artifacts can persist a child seed
    and later regenerate the exact same stream.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    state = np.random.SeedSequence(seed).generate_state(count, np.uint64)
    return [int(s) for s in state]


def laplace(rng: np.random.Generator, scale: float, size: int) -> np.ndarray:
    """Draw Laplace(0, scale) noise via the inverse CDF.

    For u uniform on (0, 1):

        lam = -scale * sign(u - 1/2) * ln(1 - 2*|u - 1/2|)

    Implemented by hand (rather than ``rng.laplace``) so the noise stream is
    an exact, portable function of the uniform stream of the generator.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    u = rng.random(size)
    centered = u - 0.5
    inner = 1.0 - 2.0 * np.abs(centered)
    # rng.random() can return exactly 0.0; keep the log argument positive.
    inner = np.maximum(inner, np.finfo(np.float64).tiny)
    return -scale * np.sign(centered) * np.log(inner)
