"""Deterministic random stream derivation.

Every stochastic component draws from its own numpy Generator derived from
(master seed, purpose tag, context ids...), so a result never depends on how
many draws some other component happened to consume.  Purpose tags keep the
streams of different components disjoint even under equal master seeds.
"""

import numpy as np

# Purpose tags (arbitrary distinct small ints; part of the persistence story,
# so never renumber).
WALK = 1            # training-time subgraph walks, keyed (u, i, epoch)
TRAIN_NEGATIVE = 2  # negative item sampling, keyed (epoch,)
PARAM_INIT = 3      # parameter initialization
EPOCH_SHUFFLE = 4   # training edge order, keyed (epoch,)
EVAL_NEGATIVE = 5   # evaluation candidate sampling, keyed (u, i)
EVAL_WALK = 6       # evaluation-time subgraph walks, keyed (u, i)
SYNTH = 7           # synthetic graph generation
SPLIT = 8           # train/val/test splitting
LEVELS = 9          # sparsity level construction
ENSEMBLE = 10       # sub-model seed derivation for the ensemble
DUMP = 11           # case-study subgraph dumps, keyed (u, i)
GRADCHECK = 12      # gradient check instance generation


def seed_stream(*keys: int) -> np.random.Generator:
    """Generator seeded by a tuple of non-negative integers."""
    entropy = []
    for k in keys:
        k = int(k)
        if k < 0:
            raise ValueError(f"seed keys must be non-negative, got {k}")
        entropy.append(k)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def walk_stream(master_seed: int, u: int, i: int, epoch: int) -> np.random.Generator:
    """Stream for the two restart walks of one (u, i) extraction."""
    return seed_stream(master_seed, WALK, u, i, epoch)
