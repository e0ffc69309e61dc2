"""Deterministic RNG stream derivation.

Every random draw in the package comes from a generator derived here from
small integer keys, so generation order and parallelism never change the
data: two call sites that need independent randomness use different
domain keys, and repeated runs with the same keys replay bit-identically.
"""

import numpy as np

# corpus generation
DOMAIN_LANGUAGE = 1
DOMAIN_UTTERANCE = 2
DOMAIN_LABEL_MASK = 3
# model / training
DOMAIN_PARAM_INIT = 10
DOMAIN_QUANTIZER = 11
DOMAIN_BATCH = 12
DOMAIN_MASK = 13
DOMAIN_LOSS = 14
DOMAIN_HEAD_INIT = 15
DOMAIN_FINETUNE_BATCH = 16
# experiment plumbing
DOMAIN_CORRUPTION = 20


def derive_rng(*keys: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of non-negative integers."""
    keys = [int(k) for k in keys]
    if any(k < 0 for k in keys):
        raise ValueError(f"rng keys must be non-negative, got {keys}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))
