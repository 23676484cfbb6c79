"""Seeded random-number streams.

Every random draw in the package flows through :func:`stream`, which maps a
tuple of non-negative integers (a master seed followed by purpose/index tags)
to an independent counter-based generator. There is no global generator, so
any value is reproducible from its tag tuple alone.
"""

import numpy as np

# Purpose tags; kept distinct so unrelated streams never collide.
CLIP = 1
SPLIT = 2
PARAMS = 3
SHUFFLE = 4
NOISE = 5
SCHEDULE = 6
STREAM = 7


def stream(*tags: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``tags``.

    Philox is counter-based: generators for distinct tag tuples are
    statistically independent and bit-reproducible across runs.
    """
    if not tags:
        raise ValueError("at least one seed tag is required")
    seq = np.random.SeedSequence([int(t) & 0xFFFFFFFF for t in tags])
    return np.random.Generator(np.random.Philox(seq))
