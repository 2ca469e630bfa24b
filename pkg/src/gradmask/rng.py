"""Seeded random streams.

All randomness goes through numpy's PCG64 bit generator. Its state is a
plain dict of ints, which is what checkpoints serialise. ``RNG_ALGORITHM``
is written next to that state so a checkpoint taken under a different
generator is refused instead of silently diverging.
"""
from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "numpy-pcg64/v1"


def make_rng(*seed: int) -> np.random.Generator:
    """Generator seeded from one or more non-negative ints."""
    return np.random.Generator(np.random.PCG64(list(seed) if len(seed) > 1 else seed[0]))


def rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "algorithm": RNG_ALGORITHM,
        "state": int(state["state"]["state"]),
        "inc": int(state["state"]["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def restore_rng(saved: dict) -> np.random.Generator:
    if saved.get("algorithm") != RNG_ALGORITHM:
        raise ValueError(f"rng algorithm mismatch: saved {saved.get('algorithm')!r}, running {RNG_ALGORITHM!r}")
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {"state": saved["state"], "inc": saved["inc"]},
        "has_uint32": saved["has_uint32"],
        "uinteger": saved["uinteger"],
    }
    return np.random.Generator(bitgen)
