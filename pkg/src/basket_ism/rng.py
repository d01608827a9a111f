"""Seed derivation.

Every random draw in the package comes from a generator obtained through
:func:`substream`.  A stream is identified by the master seed plus a tuple of
integer keys, e.g. ``(STAGE_SAMPLING, maturity_index, asset_index)``, so any
stage can be re-run in isolation and parallel execution order never changes
the numbers.
"""
import numpy as np

STAGE_SAMPLING = 1
STAGE_ISM = 2
STAGE_SYNTH = 3
STAGE_PATHS = 4
STAGE_ORACLE = 5


def substream(seed, *keys):
    """Return an independent ``numpy.random.Generator`` for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def open_uniforms(rng, size):
    """Uniforms strictly inside (0, 1), on the 2**-53 lattice shifted by half a step."""
    bits = rng.integers(0, 2**53, size=size, dtype=np.int64)
    return (bits.astype(np.float64) + 0.5) / 2.0**53
