"""Deterministic, splittable random substreams.

Every randomized component derives its generator from the experiment seed
plus a fixed stream key, so the planted model, the training batches, the
test set, and per-trial Monte-Carlo draws are all independent of each other
and individually reproducible. Changing e.g. the batch size therefore never
perturbs the planted model.
"""

import numpy as np

TRUTH_STREAM = 0
TRAIN_STREAM = 1
TEST_STREAM = 2
MOMENT_STREAM = 3
INIT_STREAM = 4
TRIAL_STREAM = 5


def sub_rng(seed, *key):
    """Generator for substream ``key`` of ``seed``; distinct keys are independent."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)
