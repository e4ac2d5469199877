"""Deterministic RNG derivation.

Every random draw in the package flows from a single experiment seed.
Child generators are derived from keyed SeedSequences, so the stream a
consumer sees depends only on (seed, key path) and never on execution
order or worker scheduling.
"""

import numpy as np

# purpose tags for keyed derivation; values are arbitrary but frozen
PROTOTYPES = 1
SUBJECT_STREAM = 2
MODEL_INIT = 3
PRETRAIN = 4
UNSUP_ROUND = 5
WEAK_ROUND = 6
TRACE = 7
FAILURES = 8
ANALYSIS = 9
BASELINE = 10


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *keys)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
