"""Named random sub-streams derived from a single root seed.

Every source of randomness in the pipeline (data synthesis, router init,
drop resampling, clustering, calibration subsampling, ...) draws from its own
named stream so that changing one stage never perturbs another. Stream names
are hashed with CRC-32, which is stable across platforms and releases.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Return a Generator for the stream ``name`` under ``root_seed``."""
    return np.random.default_rng(_seed_sequence(root_seed, name))


def derive_seed(root_seed: int, name: str) -> int:
    """Collapse a named stream to a single integer seed.

    Used where an API takes a plain ``seed`` argument instead of a Generator.
    """
    return int(_seed_sequence(root_seed, name).generate_state(1, np.uint64)[0])


def _seed_sequence(root_seed: int, name: str) -> np.random.SeedSequence:
    if root_seed < 0:
        raise ValueError(f"root seed must be non-negative, got {root_seed}")
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.SeedSequence([int(root_seed), tag])
