"""Named, reproducible random substreams.

All randomness in the package flows from a single integer seed through
fixed-index substreams, so parallel and serial generation of the same
dataset (or training run) produce identical results.
"""

from __future__ import annotations

import numpy as np

_STREAMS = {
    "split": 0,
    "init": 1,
    "shuffle": 2,
    "crop": 3,
    "synth": 4,
}


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for a named substream, optionally keyed by extra indices.

    e.g. ``substream(seed, "shuffle", epoch)`` or
    ``substream(seed, "synth", sample_index)``.
    """
    try:
        sid = _STREAMS[name]
    except KeyError:
        raise KeyError(f"unknown rng stream {name!r}; known: {sorted(_STREAMS)}") from None
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, sid) + indices)))
