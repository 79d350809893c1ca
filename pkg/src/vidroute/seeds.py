"""Deterministic random-stream splitting.

All randomness in the package flows from a single 64-bit root seed. Child
streams are PCG64 generators keyed by ``(purpose_id, *indices)`` through
``numpy.random.SeedSequence(root, spawn_key=key)``, so any consumer can be
reproduced in isolation. The purpose table below is frozen; extend it by
appending, never by renumbering.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "workload": 1,
    "trace": 2,
    "bandwidth": 3,
    "realize": 4,
    "instance": 5,
    "params": 6,
    "dims": 7,
    "labels": 8,
    "features": 9,
}


def stream(root_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Child generator for (purpose, indices) under the given root seed."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown stream purpose {purpose!r}")
    key = (PURPOSES[purpose],) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=key))
