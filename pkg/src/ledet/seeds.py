"""Deterministic, purpose-named random streams.

Every stochastic choice in the pipeline draws from a stream derived from
(base_seed, name...). Streams with identical derivations produce identical
draws regardless of what other streams were consumed, which is what makes
degenerate-config runs (no unlabeled branch, no auxiliary losses) line up
step-for-step with their full counterparts.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(base_seed: int, *names: object) -> int:
    """Stable 63-bit seed derived from a base seed and a name path."""
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def stream(base_seed: int, *names: object) -> np.random.Generator:
    """Independent numpy Generator for the given purpose."""
    return np.random.default_rng(child_seed(base_seed, *names))
