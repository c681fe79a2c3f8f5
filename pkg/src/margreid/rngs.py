"""Named deterministic random streams.

Every piece of randomness in the package flows from one master seed through
a per-subsystem stream, so individual stages reproduce independently of how
many draws the other stages made.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for subsystem `name` under the master `seed`."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))
