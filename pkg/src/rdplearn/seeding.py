"""Counter-based seed derivation.

A master seed plus an integer path (repetition, phase, iteration, episode, ...)
maps to an independent 64-bit stream seed through BLAKE2b, so any part of an
experiment can be re-run in isolation and parallel repetitions stay
reproducible.
"""

from __future__ import annotations

import hashlib

# Phase tags used by the harness when splitting the master seed.
PHASE_SAMPLE = 1
PHASE_EVAL = 2
PHASE_PLAN = 3
PHASE_BASELINE = 4


def derive_seed(master: int, *path: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    for part in (master, *path):
        h.update((part % (1 << 64)).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")
