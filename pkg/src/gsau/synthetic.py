"""Planted toy datasets for smoke tests and convergence checks."""

from __future__ import annotations

import numpy as np

from .data import Interaction


def two_block_log(n_users: int = 40, n_items: int = 40, length: int = 10, seed: int = 0) -> list[Interaction]:
    """Users split into two blocks; each walks its block's items in a fixed
    cyclic order from a random start, so the next item follows from the last."""
    rng = np.random.default_rng(seed)
    half_u, half_i = n_users // 2, n_items // 2
    out = []
    for u in range(n_users):
        block = 0 if u < half_u else 1
        start = int(rng.integers(half_i))
        for t in range(length):
            item = block * half_i + (start + t) % half_i
            out.append(Interaction(f"u{u}", f"i{item}", t))
    return out
