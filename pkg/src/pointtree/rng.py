"""Deterministic random stream derivation.

Every random choice in the library flows from an explicit integer seed plus a
structural path (e.g. ``(record_index, draw_index)``).  Streams are backed by
the counter-based Philox generator, so sub-streams derived from disjoint paths
are independent and the overall output never depends on evaluation order.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for the sub-stream identified by ``seed`` and ``path``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
